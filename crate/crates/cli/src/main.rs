//! `fcenet`: frequency analysis, noise synthesis, training, inference and
//! gradient checks.
//!
//! Exit codes: 0 success, 1 computational failure, 2 usage or input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fcenet_core::checkpoint::Checkpoint;
use fcenet_core::checks::{self, Module, TOLERANCE};
use fcenet_core::config::RunConfig;
use fcenet_core::freq_analysis::{export_curve_csv, standard_grid, PriorStudy};
use fcenet_core::gradcheck::GradCheckConfig;
use fcenet_core::io::{read_png, write_atomic, write_png, BitDepth};
use fcenet_core::metrics::{psnr, ssim, SsimParams};
use fcenet_core::network::denoise_image;
use fcenet_core::noise::{derive_seed, synth_dataset, synth_triple, NoiseKind, SceneTriple};
use fcenet_core::training::{metrics_csv, train_loop, TrainConfig};
use fcenet_core::{autograd::FaultInjection, Error};

#[derive(Parser)]
#[command(name = "fcenet", version, about = "NIR-guided frequency-domain denoising")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key=value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Band similarity against the clean image as a function of cutoff.
    Analyze(AnalyzeArgs),
    /// Degrade a clean PNG, or write a synthetic scene triple.
    SimulateNoise(SimulateArgs),
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Restore a noisy RGB PNG with its NIR companion.
    Denoise(DenoiseArgs),
    /// Compare tape gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Number of synthetic scene triples.
    #[arg(long, conflicts_with_all = ["noisy", "nir", "clean"])]
    synthetic: Option<usize>,
    #[arg(long, requires_all = ["nir", "clean"])]
    noisy: Option<PathBuf>,
    #[arg(long, requires_all = ["noisy", "clean"])]
    nir: Option<PathBuf>,
    #[arg(long, requires_all = ["noisy", "nir"])]
    clean: Option<PathBuf>,
    /// Side of the synthetic images.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<Depth> for BitDepth {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Eight => BitDepth::Eight,
            Depth::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Clean PNG to degrade.
    #[arg(long, requires = "out", conflicts_with = "scene")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory to receive clean.png, nir.png and noisy.png.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Side of the synthetic scene.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// `mixed-gp` or `gaussian`; overrides the config.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum, default_value = "8")]
    depth: Depth,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    metrics: PathBuf,
    /// Directory with clean/ and nir/ PNGs of matching names; noise is
    /// synthesized from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    nir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clean image to score the output against.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// fdsm, fefm, sam, network or all.
    #[arg(long, default_value = "all")]
    module: String,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 32)]
    coords: usize,
    /// Double every backward contribution to exercise the checker.
    #[arg(long)]
    inject_fault: bool,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFinite(_)) { 1 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn computational(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if !p.is_file() => Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
    }
}

fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    let triples = match (&a.synthetic, &a.noisy, &a.nir, &a.clean) {
        (Some(n), ..) => {
            if *n == 0 {
                return Err(usage("--synthetic needs at least one triple"));
            }
            let spec = fcenet_core::noise::NoiseSpec { seed: cli.seed, ..cfg.noise };
            synth_dataset(cli.seed, *n, a.size, a.size, &spec)?
        }
        (None, Some(noisy), Some(nir), Some(clean)) => {
            vec![SceneTriple { clean: read_png(clean)?, nir: read_png(nir)?, noisy: read_png(noisy)?, seed: cli.seed }]
        }
        _ => return Err(usage("give either --synthetic N or all of --noisy, --nir and --clean")),
    };
    let study = PriorStudy::run(&triples, &standard_grid())?;
    export_curve_csv(&study.median_curves()?, &a.out)?;
    let (noisy, nir) = study.median_trends()?;
    println!("spearman noisy {noisy:.6}");
    println!("spearman nir {nir:.6}");
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    let mut spec = fcenet_core::noise::NoiseSpec { seed: cli.seed, ..cfg.noise };
    if let Some(k) = &a.kind {
        spec.kind = k.parse::<NoiseKind>()?;
    }
    if let Some(l) = a.level {
        spec.level = l;
    }
    if let Some(s) = a.sigma {
        spec.sigma = s;
    }
    spec.validate()?;
    let depth = BitDepth::from(a.depth);
    match (&a.input, &a.out, &a.scene) {
        (Some(input), Some(out), None) => {
            let clean = read_png(input)?;
            write_png(out, &spec.apply(&clean, 0)?, depth)?;
        }
        (None, None, Some(dir)) => {
            let t = synth_triple(cli.seed, a.size, a.size, &spec)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            write_png(&dir.join("clean.png"), &t.clean, depth)?;
            write_png(&dir.join("nir.png"), &t.nir, depth)?;
            write_png(&dir.join("noisy.png"), &t.noisy, depth)?;
        }
        _ => return Err(usage("give either --input and --out, or --scene")),
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Training triples and the pair used for the logged PSNR.
fn training_data(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<SceneTriple>, SceneTriple), Failure> {
    let size = cfg.data.size;
    match data {
        None => {
            let set = synth_dataset(cfg.data.seed, cfg.data.count, size, size, &cfg.noise)?;
            let eval = synth_triple(derive_seed(cfg.data.seed, cfg.data.count as u64, 1), size, size, &cfg.noise)?;
            Ok((set, eval))
        }
        Some(dir) => {
            let names = png_names(&dir.join("clean"))?;
            if names.len() < 2 {
                return Err(usage(format!("{} needs at least two PNGs, one is held out", dir.join("clean").display())));
            }
            let mut set = Vec::new();
            for (i, name) in names.iter().enumerate() {
                let clean = read_png(&dir.join("clean").join(name))?;
                let nir = read_png(&dir.join("nir").join(name))?;
                if clean.channels() != 3 || nir.channels() != 1 {
                    return Err(usage(format!("{name}: expected RGB clean and gray NIR")));
                }
                let noisy = cfg.noise.apply(&clean, i as u64)?;
                set.push(SceneTriple { clean, nir, noisy, seed: cfg.data.seed });
            }
            let eval = set.pop().unwrap();
            Ok((set, eval))
        }
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    let (set, eval) = training_data(&cfg, a.data.as_deref())?;
    let tc = TrainConfig { model: cfg.model, loss: cfg.loss, optim: cfg.optim, seed: cli.seed };
    let quiet = a.quiet;
    let out = train_loop(&set, &eval, &tc, |r| {
        if !quiet {
            eprintln!("step {:>5}  lr {:.3e}  loss {:.6}  psnr {:.3}", r.step, r.lr, r.loss, r.psnr);
        }
    })?;
    Checkpoint::from_weights(&out.weights, Some(&out.optim)).write(&a.out)?;
    write_atomic(&a.metrics, metrics_csv(&out.log).as_bytes())?;
    match out.aborted {
        Some(reason) => Err(computational(format!("training aborted: {reason}; last state written to {}", a.out.display()))),
        None => Ok(()),
    }
}

fn denoise(cli: &Cli, a: &DenoiseArgs) -> Outcome {
    load_config(cli.config.as_deref())?;
    let weights = Checkpoint::read(&a.checkpoint)?.to_weights()?;
    let noisy = read_png(&a.noisy)?;
    let nir = read_png(&a.nir)?;
    let out = denoise_image(&weights, &noisy, &nir)?.clamp01();
    write_png(&a.out, &out, BitDepth::Eight)?;
    if let Some(r) = &a.reference {
        let clean = read_png(r)?;
        let params = SsimParams::default();
        println!("input  psnr {:.4} ssim {:.4}", psnr(&noisy, &clean, 1.0)?, ssim(&noisy, &clean, &params)?);
        println!("output psnr {:.4} ssim {:.4}", psnr(&out, &clean, 1.0)?, ssim(&out, &clean, &params)?);
    }
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Outcome {
    load_config(cli.config.as_deref())?;
    let module: Module = a.module.parse()?;
    let fault = if a.inject_fault { FaultInjection::DoubleGrad } else { FaultInjection::None };
    let cfg = GradCheckConfig { coords: a.coords, seed: cli.seed, fault, ..Default::default() };
    let report = checks::run(module, &cfg)?;
    let width = report.tensors.iter().map(|t| t.name.len()).max().unwrap_or(0);
    for t in &report.tensors {
        let mark = if t.max_rel_err < TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<width$}  {:>4}  {:.3e}  {mark}", t.name, t.checked, t.max_rel_err);
    }
    let failed = report.tensors.iter().filter(|t| t.max_rel_err >= TOLERANCE).count();
    println!("{} tensors, {failed} failed, max relative error {:.3e}", report.tensors.len(), report.max_rel_err());
    if failed > 0 {
        return Err(computational(format!("{failed} tensors exceed relative error {TOLERANCE:e}")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(&cli, a),
        Command::SimulateNoise(a) => simulate(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Denoise(a) => denoise(&cli, a),
        Command::Gradcheck(a) => gradcheck(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
