use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use sexalloc::analysis::{run_analysis, RunConfig, ToolInfo, SCHEMA_VERSION};
use sexalloc::classical::{Tail, TestKind};
use sexalloc::io::{read_dataset, write_dataset_csv, write_simulated_csv};
use sexalloc::likelihood::{BetaPrior, GammaPrior, PriorConfig};
use sexalloc::mcmc::{McmcConfig, SamplerKind};
use sexalloc::simulation::{
    bayes_vs_meelis_study, classical_power_surface, simulate_dataset, type1_error_study, GeneratorSpec, PowerConfig,
    StudyConfig,
};
use sexalloc::{AllocationModel, DataMode, Error};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sexalloc", version, about = "Detect non-binomial sex allocation in clutch counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classical tests, model fits, evidence and Bayes factors for one dataset.
    Analyze(AnalyzeArgs),
    /// Draw a synthetic dataset.
    Simulate(SimulateArgs),
    /// Power surface of a classical test over clutch count and mortality.
    Power(PowerArgs),
    /// Bayes-versus-Meelis or type-I calibration study.
    Study(StudyArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelArg {
    Binomial,
    Mult,
    Double,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GeneratorModel {
    Binomial,
    Mult,
    Double,
}

impl From<GeneratorModel> for AllocationModel {
    fn from(m: GeneratorModel) -> Self {
        match m {
            GeneratorModel::Binomial => AllocationModel::Binomial,
            GeneratorModel::Mult => AllocationModel::MultiplicativeBinomial,
            GeneratorModel::Double => AllocationModel::DoubleBinomial,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Primary,
    Secondary,
}

impl From<ModeArg> for DataMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Primary => DataMode::Primary,
            ModeArg::Secondary => DataMode::Secondary,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TailArg {
    /// Φ(U): evidence of under-dispersion only.
    Lower,
    TwoSided,
}

impl From<TailArg> for Tail {
    fn from(t: TailArg) -> Self {
        match t {
            TailArg::Lower => Tail::Lower,
            TailArg::TwoSided => Tail::TwoSided,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SamplerArg {
    Collapsed,
    Augmented,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TestArg {
    Meelis,
    James,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GridArg {
    Default,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StudyKind {
    /// Multiplicative truth: Meelis p-values against BF(mult : binomial).
    Table4,
    /// Binomial truth: false-alarm rates of both procedures.
    Type1,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected a,b but got {s:?}"))?;
    let num = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("{x:?} is not a number"));
    Ok((num(a)?, num(b)?))
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// CSV with columns n,m (secondary) or N,M (primary), optionally deaths.
    input: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    model: Vec<ModelArg>,
    #[arg(long, value_enum, default_value = "secondary")]
    mode: ModeArg,
    #[arg(long, default_value_t = 100_000)]
    iterations: u64,
    /// Defaults to a tenth of the iterations.
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long, default_value_t = 10)]
    thin: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Standard deviation of the normal prior on ψ.
    #[arg(long, default_value_t = 1.0)]
    sigma_psi: f64,
    /// Gamma(shape, rate) prior on mean clutch size; required in secondary mode.
    #[arg(long, value_parser = parse_pair, value_name = "A,B")]
    lambda_prior: Option<(f64, f64)>,
    /// Beta(a, b) prior on mortality; required in secondary mode.
    #[arg(long, value_parser = parse_pair, value_name = "A,B")]
    d_prior: Option<(f64, f64)>,
    /// Poisson truncation tolerance.
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
    /// Clutch size of the posterior predictive distribution.
    #[arg(long = "predictive-N", default_value_t = 10)]
    predictive_n: u32,
    /// Chain used for posterior summaries.
    #[arg(long, value_enum, default_value = "collapsed")]
    sampler: SamplerArg,
    /// Prior model probabilities, one per selected model.
    #[arg(long, value_delimiter = ',')]
    model_weights: Option<Vec<f64>>,
    /// Keep only clutches without deaths and analyse them as primary data.
    #[arg(long)]
    filter_zero_mortality: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of clutches.
    #[arg(long = "C")]
    clutches: usize,
    /// Poisson mean clutch size.
    #[arg(long)]
    lambda: f64,
    /// Sex-ratio parameter.
    #[arg(long)]
    p: f64,
    /// Dispersion parameter; 0 is binomial.
    #[arg(long, default_value_t = 0.0)]
    psi: f64,
    #[arg(long, value_enum, default_value = "binomial")]
    model: GeneratorModel,
    /// Per-egg mortality probability.
    #[arg(long, default_value_t = 0.0)]
    d: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write only this view; by default both views are written as N,M,n,m,deaths.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the generator settings and counts as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GeneratorArgs {
    /// Override the generator's mean clutch size.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the generator's sex-ratio parameter.
    #[arg(long)]
    p: Option<f64>,
    /// Override the generator's dispersion parameter.
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long, value_enum)]
    model: Option<GeneratorModel>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl GeneratorArgs {
    fn apply(&self, mut spec: GeneratorSpec) -> GeneratorSpec {
        spec.lambda = self.lambda.unwrap_or(spec.lambda);
        spec.p = self.p.unwrap_or(spec.p);
        spec.psi = self.psi.unwrap_or(spec.psi);
        spec.model = self.model.map_or(spec.model, Into::into);
        spec.seed = self.seed;
        spec
    }
}

#[derive(Args, Debug)]
struct PowerArgs {
    #[arg(long, value_enum, default_value = "meelis")]
    test: TestArg,
    /// C ∈ {10, 25, 50, 100, 200, 400} × d ∈ {0, 0.05, …, 0.6}.
    #[arg(long, value_enum, default_value = "default")]
    grid: GridArg,
    /// Replace the grid's clutch counts.
    #[arg(long, value_delimiter = ',')]
    clutches: Option<Vec<usize>>,
    /// Replace the grid's mortality values.
    #[arg(long, value_delimiter = ',')]
    mortality: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10_000)]
    reps: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "lower")]
    tail: TailArg,
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Surface CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long, value_enum)]
    kind: StudyKind,
    /// Defaults to 100 for table4 and 200 for type1.
    #[arg(long)]
    reps: Option<usize>,
    /// Chain length per model and replicate.
    #[arg(long, default_value_t = 5_000)]
    iterations: u64,
    #[arg(long, value_enum, default_value = "lower")]
    tail: TailArg,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[arg(long = "C")]
    clutches: Option<usize>,
    #[arg(long)]
    d: Option<f64>,
    /// Per-replicate CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failures with the exit code they map to.
#[derive(Debug)]
enum Failure {
    Core(Error),
    Io(String, io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if !e.is_validation() => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message, row) = match self {
            Failure::Core(Error::Input { row, message }) => ("input", message.clone(), *row),
            Failure::Core(e @ Error::Numerical(_)) => ("numerical", e.to_string(), None),
            Failure::Core(e) => ("validation", e.to_string(), None),
            Failure::Io(path, e) => ("io", format!("{path}: {e}"), None),
        };
        let mut err = json!({ "kind": kind, "message": message, "exit_code": self.exit_code() });
        if let Some(r) = row {
            err["row"] = json!(r);
        }
        json!({ "error": err })
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Io(p.display().to_string(), e))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> CliResult<()> {
    let label = path.map_or("stdout".to_string(), |p| p.display().to_string());
    let mut w = open_out(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Failure::Io(label, e))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: &'static str,
    tool: ToolInfo,
    command: &'a str,
    result: T,
}

fn envelope<'a, T: Serialize>(command: &'a str, result: T) -> Envelope<'a, T> {
    Envelope {
        schema_version: SCHEMA_VERSION,
        tool: ToolInfo::current(),
        command,
        result,
    }
}

fn selected_models(args: &[ModelArg]) -> Vec<AllocationModel> {
    if args.contains(&ModelArg::All) {
        return AllocationModel::ALL.to_vec();
    }
    let mut out = Vec::new();
    for m in args {
        let model = match m {
            ModelArg::Binomial => AllocationModel::Binomial,
            ModelArg::Mult => AllocationModel::MultiplicativeBinomial,
            ModelArg::Double => AllocationModel::DoubleBinomial,
            ModelArg::All => unreachable!(),
        };
        if !out.contains(&model) {
            out.push(model);
        }
    }
    out
}

fn run_config(args: &AnalyzeArgs, mode: DataMode) -> CliResult<RunConfig> {
    let priors = match mode {
        DataMode::Primary => PriorConfig::primary(args.sigma_psi),
        DataMode::Secondary => {
            let (shape, rate) = args.lambda_prior.ok_or_else(|| {
                Error::InvalidConfig("secondary mode needs --lambda-prior a,b (Gamma shape, rate)".into())
            })?;
            let (a, b) = args
                .d_prior
                .ok_or_else(|| Error::InvalidConfig("secondary mode needs --d-prior a,b (Beta)".into()))?;
            PriorConfig::secondary(args.sigma_psi, GammaPrior { shape, rate }, BetaPrior { a, b })
        }
    };
    let mut mcmc = McmcConfig::with_iterations(args.iterations, args.seed);
    mcmc.burn_in = args.burn_in.unwrap_or(args.iterations / 10);
    mcmc.thin = args.thin;
    mcmc.epsilon = args.epsilon;
    Ok(RunConfig {
        models: selected_models(&args.model),
        mode,
        priors,
        mcmc,
        sampler: match args.sampler {
            SamplerArg::Collapsed => SamplerKind::Collapsed,
            SamplerArg::Augmented => SamplerKind::Augmented,
        },
        predictive_n: args.predictive_n,
        model_weights: args.model_weights.clone(),
        level: 0.95,
    })
}

fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let read_mode: DataMode = args.mode.into();
    let mut dataset = read_dataset(&args.input, read_mode)?;
    let mut mode = read_mode;
    if args.filter_zero_mortality {
        dataset = dataset.filter_zero_mortality()?;
        mode = DataMode::Primary;
    }
    let config = run_config(args, mode)?;
    let mut report = run_analysis(&dataset, &config)?;
    report.input = Some(args.input.display().to_string());
    write_json(args.out.as_deref(), &report)
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let spec = GeneratorSpec {
        clutches: args.clutches,
        lambda: args.lambda,
        model: args.model.into(),
        p: args.p,
        psi: args.psi,
        d: args.d,
        seed: args.seed,
    };
    let data = simulate_dataset(&spec)?;
    let label = args.out.as_ref().map_or("stdout".to_string(), |p| p.display().to_string());
    let mut w = open_out(args.out.as_deref())?;
    match args.mode {
        Some(m) => write_dataset_csv(data.view(m.into()), &mut w)?,
        None => write_simulated_csv(&data, &mut w)?,
    }
    w.flush().map_err(|e| Failure::Io(label, e))?;
    if let Some(path) = &args.json {
        write_json(Some(path), &envelope("simulate", json!({ "generator": spec, "data": data })))?;
    }
    Ok(())
}

fn power(args: &PowerArgs) -> CliResult<()> {
    let GridArg::Default = args.grid;
    let mut config = PowerConfig {
        reps: args.reps,
        alpha: args.alpha,
        tail: args.tail.into(),
        test: match args.test {
            TestArg::Meelis => TestKind::Meelis,
            TestArg::James => TestKind::James,
        },
        ..PowerConfig::default()
    };
    if let Some(c) = &args.clutches {
        config.clutch_counts = c.clone();
    }
    if let Some(d) = &args.mortality {
        config.mortality = d.clone();
    }
    let base = args.generator.apply(GeneratorSpec::power_base());
    let surface = classical_power_surface(&base, &config)?;
    write_text(args.out.as_deref(), &surface.to_csv())?;
    if let Some(path) = &args.json {
        write_json(Some(path), &envelope("power", json!({ "config": config, "surface": surface })))?;
    }
    Ok(())
}

fn study(args: &StudyArgs) -> CliResult<()> {
    let (mut config, default_reps) = match args.kind {
        StudyKind::Table4 => (StudyConfig::bayes_vs_meelis(0, args.iterations), 100),
        StudyKind::Type1 => (StudyConfig::type_one(0, args.iterations), 200),
    };
    config.reps = args.reps.unwrap_or(default_reps);
    config.tail = args.tail.into();
    config.generator = args.generator.apply(config.generator);
    config.generator.clutches = args.clutches.unwrap_or(config.generator.clutches);
    config.generator.d = args.d.unwrap_or(config.generator.d);
    let (csv, json) = match args.kind {
        StudyKind::Table4 => {
            let s = bayes_vs_meelis_study(&config)?;
            (s.to_csv(), serde_json::to_value(envelope("study", &s)))
        }
        StudyKind::Type1 => {
            let s = type1_error_study(&config)?;
            (s.study.to_csv(), serde_json::to_value(envelope("study", &s)))
        }
    };
    write_text(args.out.as_deref(), &csv)?;
    if let Some(path) = &args.json {
        write_json(Some(path), &json.expect("summary serializes"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Power(a) => power(a),
        Command::Study(a) => study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code())
        }
    }
}
