//! Command-line surface for the detector modeling toolkit.
//!
//! Every subcommand writes a self-describing artifact: JSON outputs carry the
//! fully resolved configuration under `"config"`, CSV outputs echo it in
//! leading `#` comment lines. Seeded commands are byte-reproducible.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use mppc::herald::{mean_grid, SweepScale};
use mppc::reconstruct::{FitFamily, ReconMethod};
use mppc::waveform::{
    estimate_gain, heights_to_counts, process_records, read_records, sample_dark_events,
    synthesize_waveform, write_records, AcquisitionConfig, PulseTemplate, SynthConfig,
    WaveformRecord,
};
use mppc::{
    build_povm, calibrate_xt, correct_dark, dark_prime_from_run, fidelity_q, fit_source, mean_to_r,
    reconstruct_direct, reference_povm, simulate_heralded, simulate_run, DetectorParams, Povm,
    ReferenceDetector, RunSummary, SimConfig, SourceModel, XtVariant,
};

/// Environment variable naming the directory relative output paths land in.
const OUTPUT_DIR_ENV: &str = "MPPC_OUTPUT_DIR";

/// Salt separating the waveform-noise random stream from the click stream.
const NOISE_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

const EXIT_HELP: &str = "EXIT CODES:
  0  success
  2  usage error (unknown subcommand or malformed flags)
  3  invalid parameter or inconsistent flag combination
  4  input/output failure (unreadable or unwritable file)
  5  malformed input data (bad JSON, bad waveform container, bad histogram)
  6  model failure (no calibration root, singular matrix, empty herald, ...)
";

#[derive(Parser)]
#[command(
    name = "mppc",
    version,
    about = "Model, calibrate, and simulate multi-pixel photon counters",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detector-model artifacts
    #[command(subcommand)]
    Model(ModelCommand),
    /// Monte Carlo simulation of detection runs
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Detector calibration from measured runs
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Photon-number reconstruction from a click histogram
    Reconstruct(ReconstructArgs),
    /// Heralded-state preparation fidelity
    #[command(subcommand)]
    Herald(HeraldCommand),
    /// Waveform processing and synthesis
    #[command(subcommand)]
    Waveform(WaveformCommand),
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Emit the detector POVM: row k holds the click distribution for a
    /// k-photon input
    Povm(PovmArgs),
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Simulate a detection run and emit its click histogram
    Run(SimRunArgs),
    /// Simulate heralded preparation on a photon-pair source
    Herald(SimHeraldArgs),
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Estimate the cross-talk probability (and source mean) from runs
    Xt(CalibrateArgs),
}

#[derive(Subcommand)]
enum HeraldCommand {
    /// Sweep Q(k|k) over source brightness for a set of detectors
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum WaveformCommand {
    /// Post-select waveform records and bin pulse heights into clicks
    Process(ProcessArgs),
    /// Synthesize waveform records from a simulated run
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Paper,
    Chain,
    FirstOrder,
}

impl From<VariantArg> for XtVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Paper => XtVariant::Paper,
            VariantArg::Chain => XtVariant::GeometricChain,
            VariantArg::FirstOrder => XtVariant::FirstOrder,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

/// Detector flags shared by every model-dependent subcommand. Exactly one of
/// `--eps-d` / `--eps-d-prime` may be given; the other is derived through
/// `eps_d = eps_d' / (1 - eps_xt)`.
#[derive(Args)]
struct DetectorArgs {
    /// Photon detection efficiency
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    /// Dark probability per pulse, cross-talk removed
    #[arg(long, conflicts_with = "eps_d_prime")]
    eps_d: Option<f64>,
    /// Measured dark probability per pulse (cross-talk included)
    #[arg(long)]
    eps_d_prime: Option<f64>,
    /// Cross-talk probability per avalanche
    #[arg(long, default_value_t = 0.0975)]
    eps_xt: f64,
    /// Cross-talk model variant
    #[arg(long, value_enum, default_value_t = VariantArg::Chain)]
    variant: VariantArg,
    /// Truncation of all distributions and matrices
    #[arg(long, default_value_t = mppc::DEFAULT_N_MAX)]
    nmax: usize,
}

/// Fully resolved detector configuration, echoed into every artifact.
#[derive(Serialize, Clone, Copy)]
struct ResolvedDetector {
    eta: f64,
    eps_d: f64,
    eps_d_prime: f64,
    eps_xt: f64,
    variant: &'static str,
    n_max: usize,
}

impl DetectorArgs {
    fn resolve(&self) -> Result<(DetectorParams, ResolvedDetector), CliError> {
        let variant: XtVariant = self.variant.into();
        let (eps_d, eps_d_prime) = match (self.eps_d, self.eps_d_prime) {
            (Some(d), None) => (d, d * (1.0 - self.eps_xt)),
            (None, Some(dp)) => (correct_dark(dp, self.eps_xt).map_err(CliError::param)?, dp),
            // detector defaults match the published device figures
            (None, None) => (2.549e-3, 2.549e-3 * (1.0 - self.eps_xt)),
            (Some(_), Some(_)) => unreachable!("clap conflict"),
        };
        let params = DetectorParams::new(self.eta, eps_d, self.eps_xt, variant, self.nmax)
            .map_err(CliError::param)?;
        Ok((
            params,
            ResolvedDetector {
                eta: self.eta,
                eps_d,
                eps_d_prime,
                eps_xt: self.eps_xt,
                variant: variant.label(),
                n_max: self.nmax,
            },
        ))
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output path; `-` writes to stdout. Relative paths are joined to
    /// $MPPC_OUTPUT_DIR when it is set.
    #[arg(long, short, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct PovmArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Renormalize each Fock row to unit sum
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct SimRunArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Source spec: coherent:<mean> | spdc-mean:<mean> | spdc-r:<r> | fock:<n>
    #[arg(long)]
    source: String,
    #[arg(long)]
    pulses: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct SimHeraldArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Per-mode mean photon number of the pair source
    #[arg(long, conflicts_with = "r")]
    mean: Option<f64>,
    /// Squeeze parameter of the pair source
    #[arg(long)]
    r: Option<f64>,
    /// Herald click count
    #[arg(long)]
    k: u32,
    #[arg(long)]
    pulses: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Dark-run histogram (JSON with pulses/counts); source of eps_d'
    #[arg(long, conflicts_with = "eps_d_prime")]
    dark: Option<PathBuf>,
    /// Measured dark probability, if no dark run file is available
    #[arg(long)]
    eps_d_prime: Option<f64>,
    /// Light-run histogram (JSON with pulses/counts)
    #[arg(long)]
    light: PathBuf,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Click-histogram JSON (pulses/counts) to reconstruct from
    #[arg(long)]
    input: PathBuf,
    /// direct = exact matrix inversion; fit = one-parameter forward fit
    #[arg(long, value_enum, default_value_t = MethodArg::Direct)]
    method: MethodArg,
    /// Source family for the fit route
    #[arg(long, value_enum, default_value_t = FamilyArg::Coherent)]
    family: FamilyArg,
    /// Lower edge of the fit bracket
    #[arg(long, default_value_t = 1e-4)]
    bracket_lo: f64,
    /// Upper edge of the fit bracket
    #[arg(long, default_value_t = 20.0)]
    bracket_hi: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Direct,
    Fit,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Coherent,
    Spdc,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Herald click count
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1e-3)]
    mean_min: f64,
    #[arg(long, default_value_t = 1.0)]
    mean_max: f64,
    #[arg(long, default_value_t = 25)]
    points: usize,
    #[arg(long, value_enum, default_value_t = ScaleArg::Log)]
    scale: ScaleArg,
    /// Comma-separated detectors: mppc, mppc-clean, single-apd, two-apd.
    /// Default: mppc, mppc-clean, and the reference matching k.
    #[arg(long)]
    detectors: Option<String>,
    /// Renormalize POVM rows before evaluating fidelities
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Log,
    Linear,
}

#[derive(Args)]
struct ProcessArgs {
    /// Waveform records: binary container, or a JSON array when the path
    /// ends in .json
    #[arg(long)]
    input: PathBuf,
    /// Volts per click for height binning; estimated from the heights when
    /// omitted
    #[arg(long)]
    gain: Option<f64>,
    /// Height of the zero-click baseline in volts
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    /// Single-pixel pulse amplitude, used to scale the post-selection
    /// thresholds
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Zero-level tolerance override, volts
    #[arg(long)]
    zero_tolerance: Option<f64>,
    /// Rising-edge slope threshold override, volts per ns
    #[arg(long)]
    slope_threshold: Option<f64>,
    /// Pulse-height readout offset after the trigger, ns
    #[arg(long, default_value_t = 5.0)]
    peak_offset_ns: f64,
    /// Also write the accepted-height histogram as CSV
    #[arg(long)]
    histogram_csv: Option<PathBuf>,
    /// Bins of the height histogram CSV
    #[arg(long, default_value_t = 200)]
    histogram_bins: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Source spec feeding the simulated click counts
    #[arg(long)]
    source: String,
    #[arg(long)]
    pulses: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single-pixel pulse amplitude, volts
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Gaussian sample noise, volts
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Rate of uncorrelated dark pulses, events per ns, injected uniformly
    /// over the dark window
    #[arg(long, default_value_t = 0.0)]
    dark_rate_per_ns: f64,
    /// Dark-injection window start, ns relative to the trigger
    #[arg(long, default_value_t = -25.0)]
    dark_window_lo: f64,
    /// Dark-injection window end, ns relative to the trigger
    #[arg(long, default_value_t = 8.0)]
    dark_window_hi: f64,
    /// Output records as a JSON array instead of the binary container
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    out: OutputArgs,
}

// ---------------------------------------------------------------------------
// error-to-exit-code mapping
// ---------------------------------------------------------------------------

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn param(err: mppc::Error) -> Self {
        Self::new(3, err.to_string())
    }

    fn io(context: &str, err: impl std::fmt::Display) -> Self {
        Self::new(4, format!("{context}: {err}"))
    }
}

impl From<mppc::Error> for CliError {
    fn from(err: mppc::Error) -> Self {
        use mppc::Error::*;
        let code = match &err {
            ParamOutOfRange { .. }
            | InvalidBracket { .. }
            | SourceSpec(_)
            | FockAboveTruncation { .. }
            | UnsupportedVariant(..)
            | DimensionMismatch(_) => 3,
            Io(_) => 4,
            Format(_)
            | Json(_)
            | InvalidRun(_)
            | InvalidDistribution { .. }
            | SuperUnitSum { .. }
            | RecordTooShort(_) => 5,
            NoBracket { .. }
            | ImpliedNegativeMean { .. }
            | SingularMatrix(_)
            | NotTriangular
            | NegativeOutput { .. }
            | AllZeroAfterClipping
            | ZeroHeraldProbability { .. }
            | TooFewPeaks { .. } => 6,
        };
        CliError::new(code, err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("mppc: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Model(ModelCommand::Povm(args)) => cmd_povm(args),
        Command::Simulate(SimulateCommand::Run(args)) => cmd_sim_run(args),
        Command::Simulate(SimulateCommand::Herald(args)) => cmd_sim_herald(args),
        Command::Calibrate(CalibrateCommand::Xt(args)) => cmd_calibrate(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Herald(HeraldCommand::Sweep(args)) => cmd_sweep(args),
        Command::Waveform(WaveformCommand::Process(args)) => cmd_process(args),
        Command::Waveform(WaveformCommand::Synth(args)) => cmd_synth(args),
    }
}

// ---------------------------------------------------------------------------
// output plumbing
// ---------------------------------------------------------------------------

fn resolve_output_path(path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_relative() {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                return Path::new(&dir).join(p);
            }
        }
    }
    p.to_path_buf()
}

fn open_output(path: &str) -> Result<Box<dyn Write>, CliError> {
    if path == "-" {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let resolved = resolve_output_path(path);
    let file = File::create(&resolved)
        .map_err(|e| CliError::io(&format!("cannot write {}", resolved.display()), e))?;
    Ok(Box::new(BufWriter::new(file)))
}

fn write_json(out: &OutputArgs, value: &serde_json::Value) -> Result<(), CliError> {
    let mut w = open_output(&out.output)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::new(4, e.to_string()))?;
    writeln!(w).map_err(|e| CliError::io("write", e))?;
    Ok(())
}

/// `# key=value` comment lines echoing the resolved configuration into CSV.
fn csv_header(command: &str, config: &serde_json::Value) -> String {
    let mut lines = format!("# mppc {command}\n");
    if let Some(map) = config.as_object() {
        for (key, value) in map {
            match value.as_object() {
                Some(inner) => {
                    for (k2, v2) in inner {
                        lines.push_str(&format!("# {key}.{k2}={v2}\n"));
                    }
                }
                None => lines.push_str(&format!("# {key}={value}\n")),
            }
        }
    }
    lines
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::io(&format!("cannot read {}", path.display()), e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::new(5, format!("{}: {e}", path.display())))
}

fn load_run(path: &Path) -> Result<RunSummary, CliError> {
    let run: RunSummary = read_json_file(path)?;
    run.validate()
        .map_err(|e| CliError::new(5, format!("{}: {e}", path.display())))?;
    Ok(run)
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_povm(args: PovmArgs) -> Result<(), CliError> {
    let (params, resolved) = args.detector.resolve()?;
    let povm = build_povm(&params, args.normalize)?;
    let config = json!({ "detector": resolved, "normalize": args.normalize });
    match args.format {
        FormatArg::Json => write_json(
            &args.out,
            &json!({
                "command": "model povm",
                "config": config,
                "dim": povm.dim(),
                "normalized": povm.normalized(),
                "leaky_rows": povm.leaky_rows(),
                "theta": (0..povm.dim()).map(|k| povm.row(k).to_vec()).collect::<Vec<_>>(),
            }),
        ),
        FormatArg::Csv => {
            let mut w = open_output(&args.out.output)?;
            w.write_all(csv_header("model povm", &config).as_bytes())
                .map_err(|e| CliError::io("write", e))?;
            povm.write_csv(&mut w)?;
            Ok(())
        }
    }
}

fn cmd_sim_run(args: SimRunArgs) -> Result<(), CliError> {
    let (params, resolved) = args.detector.resolve()?;
    let source = SourceModel::parse(&args.source).map_err(CliError::param)?;
    let sim = simulate_run(&SimConfig {
        params,
        source,
        pulses: args.pulses,
        seed: args.seed,
    })?;
    let config = json!({
        "detector": resolved,
        "source": source.to_string(),
        "pulses": args.pulses,
        "seed": args.seed,
    });
    match args.format {
        FormatArg::Json => write_json(
            &args.out,
            &json!({
                "command": "simulate run",
                "config": config,
                "pulses": sim.summary.pulses,
                "counts": sim.summary.counts,
                "capped_pulses": sim.capped_pulses,
            }),
        ),
        FormatArg::Csv => {
            let mut w = open_output(&args.out.output)?;
            let mut text = csv_header("simulate run", &config);
            text.push_str("clicks,count\n");
            for (clicks, count) in &sim.summary.counts {
                text.push_str(&format!("{clicks},{count}\n"));
            }
            w.write_all(text.as_bytes())
                .map_err(|e| CliError::io("write", e))
        }
    }
}

fn cmd_sim_herald(args: SimHeraldArgs) -> Result<(), CliError> {
    let (params, resolved) = args.detector.resolve()?;
    let r = match (args.mean, args.r) {
        (Some(mean), None) => mean_to_r(mean).map_err(CliError::param)?,
        (None, Some(r)) => r,
        (None, None) => return Err(CliError::new(3, "one of --mean or --r is required")),
        (Some(_), Some(_)) => unreachable!("clap conflict"),
    };
    let sim = simulate_heralded(r, &params, args.k, args.pulses, args.seed)?;
    write_json(
        &args.out,
        &json!({
            "command": "simulate herald",
            "config": {
                "detector": resolved,
                "r": r,
                "mean": r.sinh().powi(2),
                "k": args.k,
                "pulses": args.pulses,
                "seed": args.seed,
            },
            "fidelity": sim.fidelity,
            "herald_events": sim.herald_events,
            "successes": sim.successes,
        }),
    )
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let (eps_d_prime, dark_diag) = match (&args.dark, args.eps_d_prime) {
        (Some(path), None) => {
            let dark = load_run(path)?;
            let eps = dark_prime_from_run(&dark)?;
            (
                eps,
                json!({
                    "pulses": dark.pulses,
                    "multi_click_pulses": dark.multi_click_pulses(),
                }),
            )
        }
        (None, Some(eps)) => (eps, serde_json::Value::Null),
        (None, None) => {
            return Err(CliError::new(
                3,
                "one of --dark or --eps-d-prime is required",
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap conflict"),
    };
    let light = load_run(&args.light)?;
    let result = calibrate_xt(&light, eps_d_prime)?;
    write_json(
        &args.out,
        &json!({
            "command": "calibrate xt",
            "config": {
                "light": args.light.display().to_string(),
                "dark": args.dark.as_ref().map(|p| p.display().to_string()),
                "light_pulses": light.pulses,
            },
            "eps_xt": result.eps_xt,
            "mean": result.mean,
            "eps_d_prime": result.eps_d_prime,
            "eps_d": result.eps_d,
            "diagnostics": {
                "residual": result.diagnostics.residual,
                "iterations": result.diagnostics.iterations,
                "dark_run": dark_diag,
            },
        }),
    )
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let (params, resolved) = args.detector.resolve()?;
    let run = load_run(&args.input)?;
    let p_meas = run.to_dist(params.n_max)?;
    let report = match args.method {
        MethodArg::Direct => reconstruct_direct(&p_meas, &params)?,
        MethodArg::Fit => {
            let family = match args.family {
                FamilyArg::Coherent => FitFamily::CoherentMean,
                FamilyArg::Spdc => FitFamily::SqueezeParameter,
            };
            fit_source(&p_meas, &params, family, (args.bracket_lo, args.bracket_hi))?
        }
    };
    let method = match report.method {
        ReconMethod::DirectInverse => "direct",
        ReconMethod::ForwardFit => "fit",
    };
    let config = json!({
        "detector": resolved,
        "input": args.input.display().to_string(),
        "method": method,
        "pulses": run.pulses,
    });
    match args.format {
        FormatArg::Json => write_json(
            &args.out,
            &json!({
                "command": "reconstruct",
                "config": config,
                "method": method,
                "estimate": report.estimate.values(),
                "raw": report.raw,
                "negatives_clipped": report.negatives_clipped,
                "fit_param": report.fit_param,
                "residual": report.residual,
                "at_bound": report.at_bound,
                "deficit": report.estimate.deficit(),
            }),
        ),
        FormatArg::Csv => {
            let mut w = open_output(&args.out.output)?;
            let mut text = csv_header("reconstruct", &config);
            text.push_str("n,p\n");
            for (n, p) in report.estimate.values().iter().enumerate() {
                text.push_str(&format!("{n},{p}\n"));
            }
            w.write_all(text.as_bytes())
                .map_err(|e| CliError::io("write", e))
        }
    }
}

fn sweep_detector(name: &str, params: &DetectorParams, normalize: bool) -> Result<Povm, CliError> {
    match name {
        "mppc" => Ok(build_povm(params, normalize)?),
        "mppc-clean" => {
            let clean = DetectorParams {
                eps_d: 0.0,
                eps_xt: 0.0,
                ..*params
            };
            Ok(build_povm(&clean, normalize)?)
        }
        "single-apd" => Ok(reference_povm(
            ReferenceDetector::SingleApd,
            params.eta,
            params.n_max,
        )?),
        "two-apd" => Ok(reference_povm(
            ReferenceDetector::TwoApdBeamsplitter,
            params.eta,
            params.n_max,
        )?),
        other => Err(CliError::new(
            3,
            format!("unknown detector '{other}' (expected mppc, mppc-clean, single-apd, two-apd)"),
        )),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let (params, resolved) = args.detector.resolve()?;
    let names: Vec<String> = match &args.detectors {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => {
            let reference = if args.k == 1 { "single-apd" } else { "two-apd" };
            vec!["mppc".into(), "mppc-clean".into(), reference.into()]
        }
    };
    let scale = match args.scale {
        ScaleArg::Log => SweepScale::Log,
        ScaleArg::Linear => SweepScale::Linear,
    };
    let grid =
        mean_grid(args.mean_min, args.mean_max, args.points, scale).map_err(CliError::param)?;
    let povms: Vec<(String, Povm)> = names
        .iter()
        .map(|name| Ok((name.clone(), sweep_detector(name, &params, args.normalize)?)))
        .collect::<Result<_, CliError>>()?;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(povms.len());
    for (_, povm) in &povms {
        let mut column = Vec::with_capacity(grid.len());
        for &mean in &grid {
            column.push(fidelity_q(
                povm,
                mean_to_r(mean).map_err(CliError::param)?,
                args.k,
            )?);
        }
        columns.push(column);
    }
    let config = json!({
        "detector": resolved,
        "k": args.k,
        "mean_min": args.mean_min,
        "mean_max": args.mean_max,
        "points": args.points,
        "scale": match args.scale { ScaleArg::Log => "log", ScaleArg::Linear => "linear" },
        "detectors": names,
        "normalize": args.normalize,
    });
    match args.format {
        FormatArg::Json => {
            let curves: Vec<_> = names
                .iter()
                .zip(&columns)
                .map(|(name, column)| {
                    json!({
                        "detector_label": name,
                        "k": args.k,
                        "points": grid.iter().zip(column).map(|(m, q)| json!([m, q])).collect::<Vec<_>>(),
                    })
                })
                .collect();
            write_json(
                &args.out,
                &json!({ "command": "herald sweep", "config": config, "curves": curves }),
            )
        }
        FormatArg::Csv => {
            let mut w = open_output(&args.out.output)?;
            let mut text = csv_header("herald sweep", &config);
            text.push_str(&format!("mean,{}\n", names.join(",")));
            for (i, mean) in grid.iter().enumerate() {
                let row: Vec<String> = columns.iter().map(|c| c[i].to_string()).collect();
                text.push_str(&format!("{mean},{}\n", row.join(",")));
            }
            w.write_all(text.as_bytes())
                .map_err(|e| CliError::io("write", e))
        }
    }
}

fn load_records(path: &Path) -> Result<Vec<WaveformRecord>, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        read_json_file(path)
    } else {
        let file = File::open(path)
            .map_err(|e| CliError::io(&format!("cannot read {}", path.display()), e))?;
        let mut reader = BufReader::new(file);
        Ok(read_records(&mut reader)?)
    }
}

fn cmd_process(args: ProcessArgs) -> Result<(), CliError> {
    let records = load_records(&args.input)?;
    if records.is_empty() {
        return Err(CliError::new(5, "input contains no waveform records"));
    }
    let mut acq = AcquisitionConfig::for_amplitude(args.amplitude);
    acq.peak_offset_ns = args.peak_offset_ns;
    if let Some(tol) = args.zero_tolerance {
        acq.zero_tolerance = tol;
    }
    if let Some(slope) = args.slope_threshold {
        acq.edge_slope_threshold = slope;
    }
    let batch = process_records(&records, &acq)?;
    let (gain, gain_estimated) = match args.gain {
        Some(gain) => (gain, false),
        None => (estimate_gain(&batch.heights)?.gain, true),
    };
    let summary = heights_to_counts(&batch.heights, batch.zero_pulses, gain, args.offset)?;

    if let Some(hist_path) = &args.histogram_csv {
        write_height_histogram(hist_path, &batch.heights, args.histogram_bins)?;
    }

    write_json(
        &args.out,
        &json!({
            "command": "waveform process",
            "config": {
                "input": args.input.display().to_string(),
                "gain": gain,
                "gain_estimated": gain_estimated,
                "offset": args.offset,
                "acquisition": {
                    "zero_tolerance": acq.zero_tolerance,
                    "pre_check_offset_ns": acq.pre_check_offset_ns,
                    "edge_window_ns": acq.edge_window_ns,
                    "peak_offset_ns": acq.peak_offset_ns,
                    "edge_slope_threshold": acq.edge_slope_threshold,
                },
            },
            "pulses": summary.pulses,
            "counts": summary.counts,
            "rejected_pulses": batch.rejected_pulses,
            "zero_pulses": batch.zero_pulses,
            "accepted_heights": batch.heights.len(),
        }),
    )
}

fn write_height_histogram(path: &Path, heights: &[f64], bins: usize) -> Result<(), CliError> {
    if heights.is_empty() || bins == 0 {
        return Err(CliError::new(5, "no accepted heights to histogram"));
    }
    let lo = heights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0u64; bins];
    for &h in heights {
        let bin = (((h - lo) / width) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let resolved = resolve_output_path(path.to_str().unwrap_or_default());
    let mut w = File::create(&resolved)
        .map_err(|e| CliError::io(&format!("cannot write {}", resolved.display()), e))?;
    let mut text = String::from("height_bin_low,count\n");
    for (i, count) in counts.iter().enumerate() {
        text.push_str(&format!("{},{count}\n", lo + i as f64 * width));
    }
    w.write_all(text.as_bytes())
        .map_err(|e| CliError::io("write", e))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let (params, _) = args.detector.resolve()?;
    let source = SourceModel::parse(&args.source).map_err(CliError::param)?;
    let template = PulseTemplate::standard(args.amplitude);
    let synth = SynthConfig::standard(template, args.noise_sigma);
    synth.validate().map_err(CliError::param)?;

    let mut records = Vec::with_capacity(args.pulses as usize);
    for pulse_index in 0..args.pulses {
        let (clicks, _) = mppc::simulate_pulse(&params, &source, pulse_index, args.seed)?;
        // independent stream for waveform noise and dark timing
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ NOISE_STREAM_SALT);
        rng.set_stream(pulse_index);
        let darks = sample_dark_events(
            args.dark_rate_per_ns,
            (args.dark_window_lo, args.dark_window_hi),
            &mut rng,
        );
        records.push(synthesize_waveform(clicks, &darks, &synth, &mut rng)?);
    }

    if args.json {
        let mut w = open_output(&args.out.output)?;
        serde_json::to_writer(&mut w, &records).map_err(|e| CliError::new(4, e.to_string()))?;
        writeln!(&mut w).map_err(|e| CliError::io("write", e))?;
    } else {
        let mut w = open_output(&args.out.output)?;
        write_records(&mut w, &records)?;
    }
    Ok(())
}
