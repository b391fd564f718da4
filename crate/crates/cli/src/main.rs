use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imptrack::experiment::{
    data_root, file_digest, gen_suite, load_versioned, report_from_dir, run_ablation_suite, shape_metrics, with_jobs, ExperimentConfig,
    PretrainConfig, ResultFile,
};
use imptrack::lidar_sim::TrackletSequence;
use imptrack::prior_train::{build_training_set, sample_shape_family, train_on_samples};
use imptrack::recon::{marching_cubes, save_ply, DEFAULT_BOUNDS, PREVIEW_RESOLUTION};
use imptrack::sdf_net::save_checkpoint;
use imptrack::tracker::{kf_baseline, track_sequence, ShapePrior};
use imptrack::{Error, Result};
use log::info;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "imptrack", version, about = "Joint LiDAR tracking and implicit shape reconstruction")]
struct Cli {
    /// Worker threads; 1 gives byte-identical reruns.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the decoder and latent code table on the synthetic shape family.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <data root>/prior).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate tracklets and write one JSON file per tracklet.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// First tracklet seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        /// Attach the config's noisy detections to every frame.
        #[arg(long)]
        use_detections: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track tracklet files (or directories of them) and write result files.
    Track {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        prior: PriorArgs,
        #[command(flatten)]
        switches: Switches,
        /// Write a mesh of the current code every N frames.
        #[arg(long)]
        mesh_every: Option<usize>,
        /// Also compute shape metrics against the simulator's true surface.
        #[arg(long)]
        shape_metrics: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a directory of result files into a report.
    Eval {
        results: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output prefix for <prefix>.csv and <prefix>.json (default: <results>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kalman filter baseline over detections.
    Kf {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full ablation matrix with one comparison report.
    AblationSuite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        prior: PriorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PriorArgs {
    /// Decoder checkpoint; the bundled prior when omitted.
    #[arg(long, requires = "codes")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    codes: Option<PathBuf>,
}

#[derive(Args)]
struct Switches {
    /// Adapt the code on the first K frames only (0 tracks with the mean code).
    #[arg(long)]
    adapt_frames: Option<usize>,
    #[arg(long)]
    no_regularizer: bool,
    #[arg(long)]
    no_cd_loss: bool,
    #[arg(long)]
    no_shape_loss: bool,
    #[arg(long)]
    use_detections: bool,
}

fn experiment_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let config = match path {
        Some(p) => load_versioned(p)?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn apply_prior(config: &mut ExperimentConfig, prior: PriorArgs) {
    if let (Some(c), Some(z)) = (prior.checkpoint, prior.codes) {
        config.checkpoint = Some(c);
        config.codes = Some(z);
    }
}

fn out_dir(explicit: Option<PathBuf>, config: Option<&ExperimentConfig>, leaf: &str) -> Result<PathBuf> {
    let dir = explicit
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| data_root(Path::new("imptrack-data")).join(leaf));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Expands directories into their `*.json` files, sorted.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Empty("no tracklet files given".into()));
    }
    Ok(files)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_pretrain(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg: PretrainConfig = match &config {
        Some(p) => load_versioned(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let train = &cfg.train;
    train.validate()?;
    let dir = out_dir(out, None, "prior")?;
    let shapes = sample_shape_family(train.seed, train.n_shapes)?;
    let samples = build_training_set(&shapes, train.samples_per_shape, train.seed)?;
    let output = train_on_samples(shapes.len(), &samples, train, |e, l| {
        if e % 10 == 0 || e + 1 == train.epochs {
            eprintln!("epoch {e} loss {l:.6e}");
        }
    })?;
    let ckpt = dir.join("decoder.ckpt");
    save_checkpoint(&ckpt, &output.params, train.seed)?;
    output.codes.save(&dir.join("codes.json"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in output.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    write(&dir.join("loss.csv"), &csv)?;
    write(&dir.join("pretrain.json"), &serde_json::to_string_pretty(&cfg)?)?;
    println!("{}  {}", file_digest(&std::fs::read(&ckpt)?), ckpt.display());
    Ok(())
}

fn cmd_gen_data(config: Option<PathBuf>, seed: Option<u64>, n: Option<usize>, use_detections: bool, out: Option<PathBuf>) -> Result<()> {
    let cfg = experiment_config(config.as_deref())?;
    let tracklet = if use_detections { cfg.detection_tracklets() } else { cfg.tracklet.clone() };
    let dir = out_dir(out, Some(&cfg), "tracklets")?;
    let suite = gen_suite(&tracklet, seed.unwrap_or(cfg.base_seed), n.unwrap_or(cfg.n_tracklets))?;
    for seq in &suite {
        let path = dir.join(format!("tracklet_{:06}.json", seq.meta.seed));
        let text = seq.to_json()?;
        write(&path, &text)?;
        println!("{}  {}", file_digest(text.as_bytes()), path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_track(
    inputs: Vec<PathBuf>,
    config: Option<PathBuf>,
    prior_args: PriorArgs,
    sw: Switches,
    mesh_every: Option<usize>,
    with_shape: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = experiment_config(config.as_deref())?;
    apply_prior(&mut cfg, prior_args);
    let mut track = cfg.track.clone();
    if sw.adapt_frames.is_some() {
        track.adapt_frames = sw.adapt_frames;
    }
    track.use_regularizer &= !sw.no_regularizer;
    track.use_cd_loss &= !sw.no_cd_loss;
    track.use_shape_loss &= !sw.no_shape_loss;
    track.use_detections |= sw.use_detections;
    track.validate()?;
    if mesh_every == Some(0) {
        return Err(Error::Config("--mesh-every must be positive".into()));
    }
    let prior = cfg.prior()?;
    let files = collect_inputs(&inputs)?;
    let dir = out_dir(out, Some(&cfg), "results")?;
    files.par_iter().try_for_each(|f| -> Result<()> {
        let seq = TrackletSequence::load(f)?;
        let output = track_sequence(&seq, &prior, &track)?;
        let shape = if with_shape {
            Some(shape_metrics(&seq, &prior, output.final_code())?)
        } else {
            None
        };
        let result = ResultFile::from_track(&seq, &output, shape)?;
        let stem = format!("result_{:06}", seq.meta.seed);
        write(&dir.join(format!("{stem}.json")), &result.to_json()?)?;
        if let Some(every) = mesh_every {
            write_meshes(&dir.join(format!("{stem}_meshes")), &seq, &prior, &output.codes, every)?;
        }
        Ok(())
    })
}

fn write_meshes(dir: &Path, seq: &TrackletSequence, prior: &ShapePrior, codes: &[imptrack::sdf_net::ShapeCode], every: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = seq.size.normalization_scale();
    for (t, z) in codes.iter().enumerate().step_by(every) {
        let mc = marching_cubes(&prior.params, z, PREVIEW_RESOLUTION, DEFAULT_BOUNDS)?;
        save_ply(&dir.join(format!("frame_{t:04}.ply")), &mc.mesh.scaled(1.0 / s))?;
    }
    Ok(())
}

fn cmd_eval(results: PathBuf, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = experiment_config(config.as_deref())?;
    let report = report_from_dir(&results, &cfg.difficulty, cfg.distance_bin)?;
    let prefix = out.unwrap_or_else(|| results.join("report"));
    write(&prefix.with_extension("csv"), &report.to_csv())?;
    write(&prefix.with_extension("json"), &report.to_json()?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_kf(inputs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let files = collect_inputs(&inputs)?;
    let dir = out_dir(out, None, "kf")?;
    files.par_iter().try_for_each(|f| -> Result<()> {
        let seq = TrackletSequence::load(f)?;
        let result = ResultFile::from_kf(&seq, kf_baseline(&seq))?;
        write(&dir.join(format!("result_{:06}.json", seq.meta.seed)), &result.to_json()?)
    })
}

fn cmd_ablation(config: Option<PathBuf>, seed: Option<u64>, prior_args: PriorArgs, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = experiment_config(config.as_deref())?;
    apply_prior(&mut cfg, prior_args);
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    let prior = cfg.prior()?;
    let dir = out_dir(out, Some(&cfg), "ablation")?;
    let report = run_ablation_suite(&cfg, &prior, |row| {
        eprintln!(
            "{:<22} {:<17} success {:6.2} precision {:6.2} violations {} ({:.0} s)",
            row.name, row.suite, row.success, row.precision, row.descent_violations, row.seconds
        )
    })?;
    write(&dir.join("ablation.csv"), &report.to_csv())?;
    write(&dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&dir.join("full_report.csv"), &report.full_report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    with_jobs(jobs, move || match cli.command {
        Command::Pretrain { config, seed, out } => cmd_pretrain(config, seed, out),
        Command::GenData {
            config,
            seed,
            n,
            use_detections,
            out,
        } => cmd_gen_data(config, seed, n, use_detections, out),
        Command::Track {
            inputs,
            config,
            prior,
            switches,
            mesh_every,
            shape_metrics,
            out,
        } => cmd_track(inputs, config, prior, switches, mesh_every, shape_metrics, out),
        Command::Eval { results, config, out } => cmd_eval(results, config, out),
        Command::Kf { inputs, out } => cmd_kf(inputs, out),
        Command::AblationSuite { config, seed, prior, out } => cmd_ablation(config, seed, prior, out),
    })?
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.tag());
            ExitCode::from(exit_code(&e))
        }
    }
}
