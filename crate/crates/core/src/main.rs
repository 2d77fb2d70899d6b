use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eaanet::checkpoint::load_model;
use eaanet::data::{gen_synthetic_volume, load_dir, load_volume, save_volume, triplets_of, Volume};
use eaanet::gradcheck::run_suite;
use eaanet::trainer::{evaluate, log_to_csv, predict_volume, Head, TrainConfig, Trainer};
use eaanet::{Error, Result};

#[derive(Parser)]
#[command(name = "eaanet", version, about = "Train and evaluate EAA-Net on synthetic slice volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic volumes as .eaav files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        volumes: usize,
        #[arg(long, default_value_t = 12)]
        slices: usize,
        /// Height and width of every slice.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on every volume in a directory.
    Train {
        /// key=value file; command-line flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every volume in a directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Segment the interior slices of one volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Written as an .eaav volume of the interior slices with predicted labels.
        #[arg(long)]
        mask_out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn gen_data(seed: u64, volumes: usize, slices: usize, size: usize, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for i in 0..volumes {
        let v = gen_synthetic_volume(seed.wrapping_add(i as u64), slices, size, size)?;
        let path = out_dir.join(format!("vol_{i:03}.eaav"));
        save_volume(&v, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn uniform_size(volumes: &[Volume]) -> Result<(usize, usize)> {
    let (h, w) = (volumes[0].height, volumes[0].width);
    if volumes.iter().any(|v| v.height != h || v.width != w) {
        return Err(Error::Validation("all volumes must share a slice size".into()));
    }
    Ok((h, w))
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    data_dir: &Path,
    out_dir: PathBuf,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let volumes = load_dir(data_dir)?;
    let triplets = triplets_of(&volumes)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = eaanet::checkpoint::Checkpoint::load(&path)?;
            let mut t = Trainer::resume(&ck, Some(out_dir), 0)?;
            if let Some(e) = epochs {
                t.cfg.epochs = e;
            }
            t
        }
        None => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.out_dir = Some(out_dir);
            (cfg.network.height, cfg.network.width) = uniform_size(&volumes)?;
            Trainer::new(cfg)?
        }
    };
    println!(
        "training on {} triplets from {} volumes, {} parameters",
        triplets.len(),
        volumes.len(),
        trainer.net.param_count()
    );
    let start = trainer.epochs_done();
    trainer.fit(&triplets)?;
    for line in log_to_csv(&trainer.log[start..]).lines().skip(usize::from(start > 0)) {
        println!("{line}");
    }
    Ok(())
}

fn eval(checkpoint: &Path, data_dir: &Path, csv_out: Option<PathBuf>) -> Result<()> {
    let net = load_model(checkpoint)?;
    let volumes = load_dir(data_dir)?;
    let e = evaluate(&net, &volumes, Head::Complete)?;
    let csv = e.to_csv();
    match csv_out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    let m = &e.mean;
    let show = |d: Option<f64>| d.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    println!(
        "mean over {} volumes: dsc {:.4} hd {} hd95 {} sensitivity {:.4} specificity {:.4} vs {:.4}",
        e.rows.len(),
        m.dsc,
        show(m.hd),
        show(m.hd95),
        m.sensitivity,
        m.specificity,
        m.volume_similarity
    );
    let missing = e.rows.iter().filter(|r| r.missing_distance()).count();
    if missing > 0 {
        println!("warning: {missing} volume(s) had an empty mask; distances reported as NA");
    }
    Ok(())
}

fn predict(checkpoint: &Path, volume: &Path, mask_out: &Path) -> Result<()> {
    let net = load_model(checkpoint)?;
    let v = load_volume(volume)?;
    let masks = predict_volume(&net, &v, Head::Complete)?;
    let plane = v.height * v.width;
    let slices = v.slices[plane..(v.depth - 1) * plane].to_vec();
    let labels = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    let out = Volume::new(v.depth - 2, v.height, v.width, slices, labels, 0)?;
    save_volume(&out, mask_out)?;
    println!("wrote {} predicted slices to {}", out.depth, mask_out.display());
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let mut ok = true;
    for r in run_suite(seed)? {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>10.3e}  (< {:.0e})  {status}", r.name, r.rel_error, r.tolerance);
        ok &= r.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            seed,
            volumes,
            slices,
            size,
            out_dir,
        } => gen_data(seed, volumes, slices, size, &out_dir)?,
        Command::Train {
            config,
            data_dir,
            out_dir,
            seed,
            epochs,
            lr,
            batch_size,
            resume,
        } => train(config, &data_dir, out_dir, seed, epochs, lr, batch_size, resume)?,
        Command::Eval {
            checkpoint,
            data_dir,
            csv_out,
        } => eval(&checkpoint, &data_dir, csv_out)?,
        Command::Predict {
            checkpoint,
            volume,
            mask_out,
        } => predict(&checkpoint, &volume, &mask_out)?,
        Command::Gradcheck { seed } => return gradcheck(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
