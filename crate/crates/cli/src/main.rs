//! `udpm` — command-line front end for the upsampling diffusion model.
//!
//! Verbs: `verify` (independent verification suite), `train`, `sample`,
//! `interpolate`, `perturb`, `elbo`. Every run writes its artifacts plus a
//! single `run_manifest.json` into the chosen output directory; the
//! manifest records the merged effective configuration, the seeds, and the
//! checkpoint hash, and is sufficient to replay the run.
//!
//! Exit codes: 0 on success, 1 when a check or assertion fails (failed
//! verification, diverged training), 2 on usage or configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use udpm_core::degrade::GramRepresentation;
use udpm_core::error::CoreError;
use udpm_core::generation::{
    sample, write_png, GuidanceConfig, LatentRecord, SampleNoise, SampleOptions,
};
use udpm_core::latent::{blend_weights, interpolate, interpolate_slerp, perturb};
use udpm_core::oracle::{list_check_names, run_verification_suite};
use udpm_core::rng::RngStream;
use udpm_core::tensor::ImageTensor;
use udpm_core::training::{train, TrainConfig};
use udpm_core::{file_sha256, Checkpoint};

/// Print a line to stdout, ignoring a closed pipe so `udpm ... | head`
/// ends the process through the normal exit path instead of a panic.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

// ---------------------------------------------------------------------
// Error plumbing
// ---------------------------------------------------------------------

struct CliError {
    message: String,
    code: u8,
}

type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            code: 2,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        // A diverged run or a numerical breakdown is a failed assertion
        // about the computation; everything else reaching the CLI surface
        // is a bad input, path, or configuration.
        let code = match &e {
            CoreError::TrainingDiverged { .. } | CoreError::Numerical(_) => 1,
            _ => 2,
        };
        CliError {
            message: e.to_string(),
            code,
        }
    }
}

fn io_usage(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "udpm",
    version,
    about = "Train, sample, and verify an upsampling diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the independent verification suite and write a report.
    Verify(VerifyArgs),
    /// Train a denoiser from a JSON config; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Draw samples from a checkpoint; writes PNGs, raw tensors, and latents.
    Sample(SampleArgs),
    /// Blend the latents of existing samples across a grid and render each cell.
    Interpolate(InterpolateArgs),
    /// Re-render a latent after nudging one step's noise.
    Perturb(PerturbArgs),
    /// Evidence-bound report for one image under a checkpoint.
    Elbo(ElboArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Only run checks whose name contains this substring.
    #[arg(long)]
    filter: Option<String>,
    /// List available check names and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, default_value = "udpm-verify")]
    out: PathBuf,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "udpm-train")]
    out: PathBuf,
    /// Override the config's optimizer step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ReprArg {
    Projector,
    DftLiteral,
}

impl From<ReprArg> for GramRepresentation {
    fn from(r: ReprArg) -> Self {
        match r {
            ReprArg::Projector => GramRepresentation::Projector,
            ReprArg::DftLiteral => GramRepresentation::DftLiteral,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "udpm-sample")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples; each uses an independent split of the seed.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Condition on this class id (requires a class-aware checkpoint).
    #[arg(long)]
    class: Option<usize>,
    /// Guidance weight applied when --class is given: 0 is unconditional,
    /// 1 is plain conditional, larger values extrapolate.
    #[arg(long)]
    guidance: Option<f64>,
    /// Sample with the live weights instead of the EMA weights.
    #[arg(long)]
    use_live: bool,
    #[arg(long, value_enum, default_value_t = ReprArg::Projector)]
    representation: ReprArg,
    /// Replay this latent record instead of drawing fresh noise.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Two latents (a line) or four (a bilinear sheet), row-major corners.
    #[arg(long, num_args = 2..=4, required = true)]
    corners: Vec<PathBuf>,
    /// Grid shape ROWSxCOLS, e.g. 4x4 (two corners need a 1xN or Nx1 line).
    #[arg(long)]
    grid: String,
    /// Blend two corners along the sphere instead of the chord.
    #[arg(long)]
    slerp: bool,
    #[arg(long, default_value = "udpm-interpolate")]
    out: PathBuf,
    /// Condition every cell on this class id. A latent reproduces its
    /// original image only under the guidance it was sampled with.
    #[arg(long)]
    class: Option<usize>,
    /// Guidance weight applied when --class is given.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    use_live: bool,
    #[arg(long, value_enum, default_value_t = ReprArg::Projector)]
    representation: ReprArg,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    latent: PathBuf,
    /// Reverse-chain level whose noise map is nudged (1 = finest).
    #[arg(long)]
    step: usize,
    /// Perturbation strength; 0 is an exact no-op.
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "udpm-perturb")]
    out: PathBuf,
    /// Condition on this class id, matching the original sample's guidance.
    #[arg(long)]
    class: Option<usize>,
    /// Guidance weight applied when --class is given.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    use_live: bool,
    #[arg(long, value_enum, default_value_t = ReprArg::Projector)]
    representation: ReprArg,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ElboArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clean image as a UDT1 tensor (e.g. a `.udt1` written by `sample`).
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "udpm-elbo")]
    out: PathBuf,
    #[arg(long)]
    use_live: bool,
    #[arg(long)]
    force: bool,
}

// ---------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    /// Merged effective configuration: flags already folded in.
    config: serde_json::Value,
    seeds: Vec<u64>,
    checkpoint_sha256: Option<String>,
    artifacts: Vec<String>,
}

/// Create the output directory, refusing to silently join an existing run.
fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    let manifest = out.join("run_manifest.json");
    if manifest.exists() && !force {
        return Err(CliError::usage(format!(
            "{} already holds a run manifest; every output directory records exactly one run (use --force to replace it)",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_usage(out, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::usage(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_usage(path, e))
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> CliResult<()> {
    write_json(&out.join("run_manifest.json"), manifest)
}

// ---------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------

fn cmd_verify(args: VerifyArgs) -> CliResult<ExitCode> {
    if args.list {
        for name in list_check_names() {
            say!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let report = run_verification_suite(args.filter.as_deref());
    if report.checks.is_empty() {
        return Err(CliError::usage(format!(
            "filter {:?} matches no checks; available: {}",
            args.filter.as_deref().unwrap_or(""),
            list_check_names().join(", ")
        )));
    }
    for check in &report.checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        say!(
            "[{status}] {:<42} measured {:>11.4e}  tolerance {:>11.4e}",
            check.name,
            check.measured,
            check.tolerance
        );
        if !check.passed {
            say!("       claim:  {}", check.claim);
            say!("       detail: {}", check.detail);
        }
    }
    say!("{} passed, {} failed", report.passed, report.failed);

    prepare_out_dir(&args.out, args.force)?;
    write_json(&args.out.join("report.json"), &report)?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool: "udpm",
            version: env!("CARGO_PKG_VERSION"),
            command: "verify",
            config: serde_json::json!({ "filter": args.filter }),
            seeds: vec![],
            checkpoint_sha256: None,
            artifacts: vec!["report.json".into()],
        },
    )?;
    Ok(if report.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_train(args: TrainArgs) -> CliResult<ExitCode> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_usage(&args.config, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.config.display())))?;
    // The library fills defaults for everything, but a run must say what
    // data it trains on.
    if raw.get("dataset").is_none() {
        return Err(CliError::usage(format!(
            "{}: config is missing required field `dataset`",
            args.config.display()
        )));
    }
    let mut config: TrainConfig = serde_json::from_value(raw)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.config.display())))?;
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    prepare_out_dir(&args.out, args.force)?;
    let outcome = train(&config, |row| {
        eprintln!(
            "step {:>6}  loss {:>12.6}  mean-level {:.3}",
            row.step, row.loss, row.mean_level
        );
    })?;

    let ckpt_path = args.out.join("checkpoint.udpm");
    outcome.checkpoint.save(&ckpt_path)?;

    let mut csv = String::from("step,loss,mean_level,ema_applied\n");
    for row in &outcome.history {
        csv.push_str(&format!("{},{},{},1\n", row.step, row.loss, row.mean_level));
    }
    let csv_path = args.out.join("loss.csv");
    fs::write(&csv_path, csv).map_err(|e| io_usage(&csv_path, e))?;

    let hash = file_sha256(&ckpt_path)?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool: "udpm",
            version: env!("CARGO_PKG_VERSION"),
            command: "train",
            config: serde_json::to_value(&config)
                .map_err(|e| CliError::usage(format!("serializing config: {e}")))?,
            seeds: vec![config.seed],
            checkpoint_sha256: Some(hash),
            artifacts: vec!["checkpoint.udpm".into(), "loss.csv".into()],
        },
    )?;
    say!("checkpoint written to {}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SampleSidecar<'a> {
    seed: u64,
    sample_index: usize,
    schedule: &'a udpm_core::ScheduleMeta,
    guidance: Option<&'a GuidanceConfig>,
    use_ema: bool,
    representation: GramRepresentation,
    checkpoint_sha256: &'a str,
    replayed_from: Option<String>,
}

fn sample_options(
    use_live: bool,
    class: Option<usize>,
    guidance: Option<f64>,
    representation: ReprArg,
) -> CliResult<SampleOptions> {
    if guidance.is_some() && class.is_none() {
        return Err(CliError::usage("--guidance requires --class"));
    }
    Ok(SampleOptions {
        use_ema: !use_live,
        guidance: class.map(|c| GuidanceConfig {
            class: c,
            weight: guidance.unwrap_or(1.0),
        }),
        representation: representation.into(),
    })
}

fn cmd_sample(args: SampleArgs) -> CliResult<ExitCode> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let options = sample_options(
        args.use_live,
        args.class,
        args.guidance,
        args.representation,
    )?;
    let ckp = Checkpoint::load(&args.checkpoint)?;
    let ckpt_hash = file_sha256(&args.checkpoint)?;
    let replay = match &args.replay {
        Some(path) => {
            if args.count != 1 {
                return Err(CliError::usage(
                    "--replay generates exactly one sample; drop --count",
                ));
            }
            Some(LatentRecord::load(path)?)
        }
        None => None,
    };

    prepare_out_dir(&args.out, args.force)?;
    let mut artifacts = Vec::new();
    for i in 0..args.count {
        let (image, record) = match &replay {
            Some(r) => sample(&ckp, SampleNoise::Replay(r), &options)?,
            None => {
                // Each sample runs on its own salted split, so the set is
                // identical however it is scheduled or partitioned.
                let mut rng = RngStream::new(args.seed, 0).split(i as u64);
                sample(&ckp, SampleNoise::Fresh(&mut rng), &options)?
            }
        };
        let stem = format!("sample_{i:03}");
        write_png(&args.out.join(format!("{stem}.png")), &image)?;
        image.save_udt1(&args.out.join(format!("{stem}.udt1")))?;
        record.save(&args.out.join(format!("{stem}.lat")))?;
        write_json(
            &args.out.join(format!("{stem}.json")),
            &SampleSidecar {
                seed: args.seed,
                sample_index: i,
                schedule: &record.schedule,
                guidance: options.guidance.as_ref(),
                use_ema: options.use_ema,
                representation: options.representation,
                checkpoint_sha256: &ckpt_hash,
                replayed_from: args.replay.as_ref().map(|p| p.display().to_string()),
            },
        )?;
        for ext in ["png", "udt1", "lat", "json"] {
            artifacts.push(format!("{stem}.{ext}"));
        }
    }
    write_manifest(
        &args.out,
        &RunManifest {
            tool: "udpm",
            version: env!("CARGO_PKG_VERSION"),
            command: "sample",
            config: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "seed": args.seed,
                "count": args.count,
                "class": args.class,
                "guidance": args.guidance,
                "use_ema": !args.use_live,
                "representation": options.representation,
                "replay": args.replay.as_ref().map(|p| p.display().to_string()),
            }),
            seeds: vec![args.seed],
            checkpoint_sha256: Some(ckpt_hash),
            artifacts,
        },
    )?;
    say!("wrote {} sample(s) to {}", args.count, args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Tile same-shaped images row-major into one canvas.
fn tile_grid(images: &[ImageTensor], rows: usize, cols: usize) -> CliResult<ImageTensor> {
    let (c, h, w) = images[0].shape();
    let mut canvas = ImageTensor::zeros(c, rows * h, cols * w)?;
    for (idx, img) in images.iter().enumerate() {
        let (r, col) = (idx / cols, idx % cols);
        for ch in 0..c {
            let src = img.channel(ch);
            let dst = canvas.channel_mut(ch);
            for y in 0..h {
                let s = &src[y * w..(y + 1) * w];
                let start = (r * h + y) * cols * w + col * w;
                dst[start..start + w].copy_from_slice(s);
            }
        }
    }
    Ok(canvas)
}

fn parse_grid(text: &str) -> CliResult<(usize, usize)> {
    let parts: Vec<&str> = text.split('x').collect();
    let bad = || CliError::usage(format!("--grid expects ROWSxCOLS (e.g. 4x4), got {text:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let rows: usize = parts[0].parse().map_err(|_| bad())?;
    let cols: usize = parts[1].parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

fn cmd_interpolate(args: InterpolateArgs) -> CliResult<ExitCode> {
    let (rows, cols) = parse_grid(&args.grid)?;
    let corner_count = args.corners.len();
    if corner_count != 2 && corner_count != 4 {
        return Err(CliError::usage(
            "--corners takes exactly 2 or 4 latent files",
        ));
    }
    if corner_count == 2 && rows != 1 && cols != 1 {
        return Err(CliError::usage(
            "two corners trace a line; use --grid 1xN or Nx1",
        ));
    }
    if corner_count == 4 && (rows < 2 || cols < 2) {
        return Err(CliError::usage(
            "four corners span a sheet; --grid needs at least 2x2",
        ));
    }
    if args.slerp && corner_count != 2 {
        return Err(CliError::usage("--slerp blends exactly two corners"));
    }
    let options = sample_options(
        args.use_live,
        args.class,
        args.guidance,
        args.representation,
    )?;
    let ckp = Checkpoint::load(&args.checkpoint)?;
    let ckpt_hash = file_sha256(&args.checkpoint)?;
    let records: Vec<LatentRecord> = args
        .corners
        .iter()
        .map(|p| LatentRecord::load(p))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&LatentRecord> = records.iter().collect();

    prepare_out_dir(&args.out, args.force)?;
    let mut images = Vec::with_capacity(rows * cols);
    let mut artifacts = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mixed = if corner_count == 2 {
                let idx = r * cols + c;
                let len = rows * cols;
                let t = if len == 1 {
                    0.0
                } else {
                    idx as f64 / (len - 1) as f64
                };
                if args.slerp {
                    interpolate_slerp(refs[0], refs[1], t)?
                } else {
                    interpolate(&refs, &blend_weights(2, t, 0.0)?)?
                }
            } else {
                // Corners are given in reading order: top-left, top-right,
                // bottom-left, bottom-right. The blend's first axis is rows.
                let u = if rows == 1 {
                    0.0
                } else {
                    r as f64 / (rows - 1) as f64
                };
                let v = if cols == 1 {
                    0.0
                } else {
                    c as f64 / (cols - 1) as f64
                };
                interpolate(&refs, &blend_weights(4, u, v)?)?
            };
            let (image, _) = sample(&ckp, SampleNoise::Replay(&mixed), &options)?;
            let stem = format!("cell_r{r}_c{c}");
            write_png(&args.out.join(format!("{stem}.png")), &image)?;
            mixed.save(&args.out.join(format!("{stem}.lat")))?;
            artifacts.push(format!("{stem}.png"));
            artifacts.push(format!("{stem}.lat"));
            images.push(image);
        }
    }
    let grid = tile_grid(&images, rows, cols)?;
    write_png(&args.out.join("grid.png"), &grid)?;
    artifacts.push("grid.png".into());

    write_manifest(
        &args.out,
        &RunManifest {
            tool: "udpm",
            version: env!("CARGO_PKG_VERSION"),
            command: "interpolate",
            config: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "corners": args.corners.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "grid": args.grid,
                "slerp": args.slerp,
                "class": args.class,
                "guidance": args.guidance,
                "use_ema": !args.use_live,
                "representation": options.representation,
            }),
            seeds: vec![],
            checkpoint_sha256: Some(ckpt_hash),
            artifacts,
        },
    )?;
    say!("wrote {rows}x{cols} grid to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_perturb(args: PerturbArgs) -> CliResult<ExitCode> {
    let options = sample_options(
        args.use_live,
        args.class,
        args.guidance,
        args.representation,
    )?;
    let ckp = Checkpoint::load(&args.checkpoint)?;
    let ckpt_hash = file_sha256(&args.checkpoint)?;
    let record = LatentRecord::load(&args.latent)?;
    let mut rng = RngStream::new(args.seed, 0);
    let shifted = perturb(&record, args.step, args.eps, &mut rng)?;

    prepare_out_dir(&args.out, args.force)?;
    let (image, _) = sample(&ckp, SampleNoise::Replay(&shifted), &options)?;
    write_png(&args.out.join("perturbed.png"), &image)?;
    shifted.save(&args.out.join("perturbed.lat"))?;

    write_manifest(
        &args.out,
        &RunManifest {
            tool: "udpm",
            version: env!("CARGO_PKG_VERSION"),
            command: "perturb",
            config: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "latent": args.latent.display().to_string(),
                "step": args.step,
                "eps": args.eps,
                "seed": args.seed,
                "class": args.class,
                "guidance": args.guidance,
                "use_ema": !args.use_live,
                "representation": options.representation,
            }),
            seeds: vec![args.seed],
            checkpoint_sha256: Some(ckpt_hash),
            artifacts: vec!["perturbed.png".into(), "perturbed.lat".into()],
        },
    )?;
    say!("wrote perturbed sample to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_elbo(args: ElboArgs) -> CliResult<ExitCode> {
    let ckp = Checkpoint::load(&args.checkpoint)?;
    let ckpt_hash = file_sha256(&args.checkpoint)?;
    let image = ImageTensor::load_udt1(&args.image)?;
    let schedule = ckp.build_schedule()?;
    let net = ckp.denoiser(!args.use_live);
    let mut rng = RngStream::new(args.seed, 0);
    let report = udpm_core::diffusion::elbo_report(&image, net, &schedule, &ckp.kernel, &mut rng)?;

    prepare_out_dir(&args.out, args.force)?;
    write_json(&args.out.join("elbo.json"), &report)?;
    let step_sum: f64 = report.step_kl.iter().map(|s| s.kl).sum();
    say!(
        "evidence bound: total {:.4} nats (prior {:.4}, steps {:.4}, reconstruction {:.4})",
        report.total,
        report.prior_kl,
        step_sum,
        report.reconstruction_nll
    );

    write_manifest(
        &args.out,
        &RunManifest {
            tool: "udpm",
            version: env!("CARGO_PKG_VERSION"),
            command: "elbo",
            config: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "image": args.image.display().to_string(),
                "seed": args.seed,
                "use_ema": !args.use_live,
            }),
            seeds: vec![args.seed],
            checkpoint_sha256: Some(ckpt_hash),
            artifacts: vec!["elbo.json".into()],
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Interpolate(args) => cmd_interpolate(args),
        Command::Perturb(args) => cmd_perturb(args),
        Command::Elbo(args) => cmd_elbo(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
