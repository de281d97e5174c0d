//! CSV input and output of clutch counts.
//!
//! Secondary files carry `n,m` (survivors, surviving males); primary files
//! carry `N,M` (eggs, male eggs). Either may add a `deaths` column, and a file
//! holding both pairs is cross-checked against the feasibility constraints
//! N ≥ n, M ≥ m, N − n ≥ M − m. Row numbers in errors count data rows from 1.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Trim};

use crate::data::{Clutch, DataMode, Dataset};
use crate::distributions::{ClutchCounts, MAX_CLUTCH_SIZE};
use crate::error::{Error, Result};
use crate::simulation::SimulatedData;

struct Columns {
    size: usize,
    males: usize,
    deaths: Option<usize>,
    /// The other mode's pair, when present.
    other: Option<(usize, usize)>,
}

fn find(headers: &StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn locate(headers: &StringRecord, mode: DataMode) -> Result<Columns> {
    let (size, males, other) = match mode {
        DataMode::Secondary => ("n", "m", ("N", "M")),
        DataMode::Primary => ("N", "M", ("n", "m")),
    };
    let (Some(s), Some(m)) = (find(headers, size), find(headers, males)) else {
        return Err(Error::input(
            None,
            format!(
                "{mode} mode requires columns {size},{males}; found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    };
    Ok(Columns {
        size: s,
        males: m,
        deaths: find(headers, "deaths"),
        other: find(headers, other.0).zip(find(headers, other.1)),
    })
}

fn cell(record: &StringRecord, col: usize, name: &str, row: usize) -> Result<u32> {
    let raw = record.get(col).unwrap_or("");
    let value: u32 = raw
        .parse()
        .map_err(|_| Error::input(Some(row), format!("{name} = {raw:?} is not a non-negative integer")))?;
    if value > MAX_CLUTCH_SIZE {
        return Err(Error::input(
            Some(row),
            format!("{name} = {value} exceeds the supported maximum {MAX_CLUTCH_SIZE}"),
        ));
    }
    Ok(value)
}

fn parse_row(record: &StringRecord, cols: &Columns, mode: DataMode, row: usize) -> Result<Clutch> {
    let (size_name, males_name) = match mode {
        DataMode::Secondary => ("n", "m"),
        DataMode::Primary => ("N", "M"),
    };
    let size = cell(record, cols.size, size_name, row)?;
    let males = cell(record, cols.males, males_name, row)?;
    if males > size {
        return Err(Error::input(Some(row), format!("{males_name} = {males} exceeds {size_name} = {size}")));
    }
    let deaths = cols.deaths.map(|c| cell(record, c, "deaths", row)).transpose()?;
    let other = cols
        .other
        .map(|(a, b)| -> Result<(u32, u32)> {
            let names = match mode {
                DataMode::Secondary => ("N", "M"),
                DataMode::Primary => ("n", "m"),
            };
            Ok((cell(record, a, names.0, row)?, cell(record, b, names.1, row)?))
        })
        .transpose()?;

    let (eggs, male_eggs, survivors, male_survivors) = match (mode, other) {
        (DataMode::Secondary, Some((big_n, big_m))) => (Some(big_n), Some(big_m), size, males),
        (DataMode::Primary, Some((n, m))) => (Some(size), Some(males), n, m),
        (DataMode::Secondary, None) => (deaths.map(|d| size + d), None, size, males),
        (DataMode::Primary, None) => {
            if let Some(d) = deaths {
                if d > size {
                    return Err(Error::input(Some(row), format!("deaths = {d} exceeds N = {size}")));
                }
            }
            (None, None, 0, 0)
        }
    };
    if let (Some(big_n), Some(big_m)) = (eggs, male_eggs) {
        ClutchCounts::new(big_n, big_m, survivors, male_survivors)
            .check_feasible()
            .map_err(|e| Error::input(Some(row), e.to_string()))?;
        if let Some(d) = deaths {
            if d != big_n - survivors {
                return Err(Error::input(
                    Some(row),
                    format!("deaths = {d} but N − n = {}", big_n - survivors),
                ));
            }
        }
    }
    let deaths = deaths.or_else(|| eggs.filter(|_| other.is_some()).map(|big_n| big_n - survivors));
    Ok(Clutch {
        size,
        males,
        deaths,
    })
}

/// Reads a dataset from CSV text.
pub fn parse_dataset_csv<R: Read>(reader: R, mode: DataMode) -> Result<Dataset> {
    let mut rdr = ReaderBuilder::new().trim(Trim::All).flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::input(None, format!("cannot read header: {e}")))?
        .clone();
    let cols = locate(&headers, mode)?;
    let mut clutches = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::input(Some(row), e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        clutches.push(parse_row(&record, &cols, mode, row)?);
    }
    let dataset = Dataset::new(mode, clutches)?;
    if dataset.is_empty() {
        return Err(Error::input(None, "file contains no clutches"));
    }
    Ok(dataset)
}

pub fn read_dataset(path: &Path, mode: DataMode) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::input(None, format!("{}: {e}", path.display())))?;
    parse_dataset_csv(file, mode)
}

/// Writes the dataset with the header of its mode, adding `deaths` when every clutch has it.
pub fn write_dataset_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::input(None, e.to_string());
    let with_deaths = dataset.has_deaths();
    let (a, b) = match dataset.mode() {
        DataMode::Secondary => ("n", "m"),
        DataMode::Primary => ("N", "M"),
    };
    if with_deaths {
        w.write_record([a, b, "deaths"]).map_err(io)?;
    } else {
        w.write_record([a, b]).map_err(io)?;
    }
    for c in dataset.clutches() {
        let mut rec = vec![c.size.to_string(), c.males.to_string()];
        if with_deaths {
            rec.push(c.deaths.unwrap_or(0).to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::input(None, e.to_string()))?;
    Ok(())
}

/// Writes pre- and post-mortality counts side by side as `N,M,n,m,deaths`.
///
/// The file parses in either mode.
pub fn write_simulated_csv<W: Write>(data: &SimulatedData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::input(None, e.to_string());
    w.write_record(["N", "M", "n", "m", "deaths"]).map_err(io)?;
    for (p, s) in data.primary.clutches().iter().zip(data.secondary.clutches()) {
        w.write_record([p.size, p.males, s.size, s.males, p.size - s.size].map(|v| v.to_string()))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::input(None, e.to_string()))?;
    Ok(())
}
