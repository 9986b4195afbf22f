use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use menet_core::autodiff::grad_check;
use menet_core::data::{extract_patch, make_phantom, write_case, Manifest};
use menet_core::metrics::{report_table, TableFormat};
use menet_core::model::{build_menet, record_loss};
use menet_core::train::{
    run_evaluation, run_prediction, run_preprocess, run_training, TrainConfig, TrainingSet,
};
use menet_core::{Error, Mode, Result};

/// Multi-encoder brain tumor segmentation.
///
/// Exit status: 0 on success, 1 on invalid input or configuration, 2 on a
/// numerical failure (non-finite loss, failed gradient check).
#[derive(Parser, Debug)]
#[command(name = "menet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic cases and a manifest into a directory.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume extent as x,y,z.
        #[arg(long, default_value = "32,32,16", value_parser = parse_triple)]
        extent: [usize; 3],
        /// Number of cases, seeded `seed`, `seed + 1`, ...
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write z-scored copies of every case and a new manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, resuming from a checkpoint in the output directory if present.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// `key = value` configuration file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `<case_id>.nii.gz` label maps for every manifest case.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against manifest labels.
    Evaluate {
        /// Directory of `<case_id>.nii[.gz]` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Manifest with label paths.
        #[arg(long)]
        truth: PathBuf,
        /// Also write the mean table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare backpropagated gradients with finite differences on a
    /// phantom patch.
    Gradcheck {
        /// `key = value` configuration file; only model keys matter.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Finite-difference step; elements straddling a ReLU kink are skipped.
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected x,y,z, got `{s}`"))
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_text(&std::fs::read_to_string(path).map_err(Error::at(path))?)
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Numerical,
}

fn phantom(seed: u64, extent: [usize; 3], count: u64, out: &Path) -> Result<Status> {
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::default();
    for s in seed..seed + count {
        let case = make_phantom(s, extent)?;
        manifest.entries.push(write_case(&case, out)?);
    }
    let path = out.join("manifest.tsv");
    manifest.write(&path)?;
    println!("wrote {count} case(s) and {}", path.display());
    Ok(Status::Ok)
}

fn train(manifest: &Path, config: &Path, out: &Path) -> Result<Status> {
    let cfg = read_config(config)?;
    let mut set = TrainingSet::from_manifest(&Manifest::read(manifest)?, &cfg)?;
    let outcome = run_training(&mut set, &cfg, out)?;
    println!(
        "trained {} steps, final loss {:.6}; checkpoint {}, log {}",
        outcome.steps,
        outcome.final_loss,
        outcome.checkpoint.display(),
        outcome.loss_log.display()
    );
    Ok(Status::Ok)
}

fn evaluate(pred: &Path, truth: &Path, csv: Option<&Path>) -> Result<Status> {
    let reports = run_evaluation(pred, &Manifest::read(truth)?)?;
    print!("{}", report_table(&reports, TableFormat::Text)?);
    if let Some(path) = csv {
        std::fs::write(path, report_table(&reports, TableFormat::Csv)?).map_err(Error::at(path))?;
    }
    Ok(Status::Ok)
}

fn gradcheck(config: Option<&Path>, tolerance: f64, epsilon: f64, seed: u64) -> Result<Status> {
    let model = match config {
        Some(p) => read_config(p)?.model,
        None => menet_core::model::MENetConfig::tiny(),
    };
    let unit = 1usize << model.num_stages;
    let extent = [2 * unit, 2 * unit, unit];
    let params = build_menet(&model, seed)?;
    let case = make_phantom(seed, extent.map(|e| e.max(16)))?.normalized();
    let patch = extract_patch(&case, [0, 0, 0], extent, true)?;
    let target = patch.target.expect("phantom has labels");
    let weights = Default::default();
    let report = grad_check(&params.store, Mode::Train, seed, epsilon, |tape| {
        record_loss(tape, &model, &patch.input, &target, weights).map(|(loss, _)| loss)
    })?;
    let worst = report
        .worst
        .as_ref()
        .map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
    println!(
        "checked {} gradient entries ({} skipped at ReLU kinks), max relative error {:.3e}{worst}",
        report.checked, report.skipped_kinks, report.max_rel_error
    );
    if report.max_rel_error <= tolerance {
        println!("PASS (tolerance {tolerance:e})");
        Ok(Status::Ok)
    } else {
        println!("FAIL (tolerance {tolerance:e})");
        Ok(Status::Numerical)
    }
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Phantom {
            seed,
            extent,
            count,
            out,
        } => phantom(seed, extent, count, &out),
        Command::Preprocess { manifest, out } => {
            let m = run_preprocess(&Manifest::read(&manifest)?, &out)?;
            println!("wrote {} case(s) to {}", m.entries.len(), out.display());
            Ok(Status::Ok)
        }
        Command::Train {
            manifest,
            config,
            out,
        } => train(&manifest, &config, &out),
        Command::Predict {
            checkpoint,
            manifest,
            out,
        } => {
            let written = run_prediction(&checkpoint, &Manifest::read(&manifest)?, &out)?;
            for p in &written {
                println!("{}", p.display());
            }
            Ok(Status::Ok)
        }
        Command::Evaluate { pred, truth, csv } => evaluate(&pred, &truth, csv.as_deref()),
        Command::Gradcheck {
            config,
            tolerance,
            epsilon,
            seed,
        } => gradcheck(config.as_deref(), tolerance, epsilon, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Numerical) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
