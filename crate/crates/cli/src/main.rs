use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use dpcl::harness::{
    dataset_accuracy, emit_results, landscape_csv, run_experiment, symmetric_grid, weight_landscape_probe,
    Checkpoint, ExperimentConfig, Method,
};
use dpcl::math::rng::stream;
use dpcl::math::RngState;
use dpcl::stream::{load_csv_dataset_with, read_binary_dataset, Dataset, Split, Standardizer};
use dpcl::{Error, Result};

#[derive(Parser)]
#[command(name = "dpcl", version, about = "Online continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a stream and write metrics, summary and checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        /// Also write landscape.csv on the test split with this many grid points.
        #[arg(long)]
        probe_points: Option<usize>,
    },
    /// Loss along random head-weight directions of a checkpoint.
    ProbeLandscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 5)]
        directions: u64,
        #[arg(long, default_value = "landscape.csv")]
        out: PathBuf,
        #[arg(long)]
        has_header: bool,
    },
    /// Ensemble accuracy of a checkpoint on a labelled file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        has_header: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            method,
            probe_points,
        } => cmd_run(&config, seed, out, method.as_deref(), probe_points),
        Command::ProbeLandscape {
            checkpoint,
            data,
            points,
            radius,
            directions,
            out,
            has_header,
        } => cmd_probe(&checkpoint, &data, points, radius, directions, &out, has_header),
        Command::Eval {
            checkpoint,
            data,
            has_header,
        } => cmd_eval(&checkpoint, &data, has_header),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    method: Option<&str>,
    probe_points: Option<usize>,
) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::from_kv_text(&text)?;
    if let Some(m) = method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(s) = seed {
        // a pinned stream seed stays pinned
        if cfg.stream.seed == cfg.seed {
            cfg.stream.seed = s;
        }
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = Some(o);
    }
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.method, cfg.seed)));
    cfg.validate()?;

    let start = Instant::now();
    let out = run_experiment(&cfg)?;
    let wall = start.elapsed().as_secs_f64();

    let landscape = match probe_points {
        Some(points) => {
            let (_, test) = dpcl::harness::load_data(&cfg)?;
            Some(weight_landscape_probe(
                &out.state.model,
                &test,
                &symmetric_grid(points, 1.0),
                &[0, 1, 2, 3, 4],
            )?)
        }
        None => None,
    };
    emit_results(&dir, &out.log, &cfg, wall, landscape.as_deref())?;
    out.schedule.export_csv(&dir.join("schedule.csv"))?;
    Checkpoint::new(cfg.clone(), out.state, out.standardizer).save(&dir.join("checkpoint.json"))?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!(
        "{} seed {}: ACC {} FM {} ({} steps, {:.1}s) -> {}",
        cfg.method,
        cfg.seed,
        fmt(out.log.final_acc()),
        fmt(out.log.final_fm()),
        out.log.train_steps,
        wall,
        dir.display()
    );
    Ok(())
}

/// Reads a labelled file in the checkpoint's input space.
fn load_eval_data(ck: &Checkpoint, path: &Path, has_header: bool) -> Result<Dataset> {
    let classes = ck.state.model.num_classes();
    let dim = ck.state.model.encoder.input_dim();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let ds = if Path::new(&sidecar).exists() {
        let mut ds = read_binary_dataset(path, Split::Test)?;
        if let Some(st) = &ck.standardizer {
            if st.mean.len() == ds.dim() {
                st.apply(&mut ds.inputs);
            }
        }
        ds
    } else {
        let identity = Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        };
        let st = ck.standardizer.as_ref().unwrap_or(&identity);
        load_csv_dataset_with(path, has_header, Some(classes), st)?
    };
    if ds.dim() != dim {
        return Err(Error::Data(format!(
            "{}: {} features but the model expects {dim}",
            path.display(),
            ds.dim()
        )));
    }
    if ds.labels.iter().any(|&y| y >= classes) {
        return Err(Error::Data(format!("{}: labels exceed {classes} classes", path.display())));
    }
    Ok(ds)
}

fn cmd_probe(
    checkpoint: &Path,
    data: &Path,
    points: usize,
    radius: f64,
    directions: u64,
    out: &Path,
    has_header: bool,
) -> Result<()> {
    if points == 0 || directions == 0 || !(radius > 0.0) {
        return Err(Error::Config("points and directions must be >= 1 and radius > 0".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_eval_data(&ck, data, has_header)?;
    let seeds: Vec<u64> = (0..directions).collect();
    let curve = weight_landscape_probe(&ck.state.model, &ds, &symmetric_grid(points, radius), &seeds)?;
    fs::write(out, landscape_csv(&curve)).map_err(|e| Error::io(out, e))?;
    println!("wrote {} points to {}", curve.len(), out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, has_header: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_eval_data(&ck, data, has_header)?;
    let mut rng = RngState::new(ck.config.seed).substream(stream::EVAL, u64::MAX);
    let acc = dataset_accuracy(&ck.state.model, &ck.state.bsc, &ds, &mut rng)?;
    println!("{{\"accuracy\": {acc}, \"samples\": {}}}", ds.len());
    Ok(())
}
