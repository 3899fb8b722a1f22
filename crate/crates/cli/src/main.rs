use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlagcn::datakit::{generate_suite, load_dataset, save_dataset, Shift, SynthSpec};
use mlagcn::model::load_model;
use mlagcn::runkit::gradcheck::{run_suite, CheckConfig};
use mlagcn::runkit::{ablate, evaluate_model, train_da, train_single, TrainConfig};
use mlagcn::{Error, Result};

/// Adaptive graph convolutional networks for multi-label classification.
#[derive(Parser)]
#[command(name = "mlagcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset suite from a JSON spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on labeled data, evaluating on a validation split every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adversarial domain adaptation from a labeled source to an unlabeled target.
    TrainDa {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        target_val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the A, A+B and A+B+C adjacency variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenSynth { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let spec: SynthSpec = serde_json::from_str(&text)?;
            let suite = generate_suite(&spec, spec.shift != Shift::None)?;
            save_dataset(&suite.train, &out.join("train"))?;
            save_dataset(&suite.val, &out.join("val"))?;
            if let (Some(t), Some(tv)) = (&suite.target, &suite.target_val) {
                save_dataset(t, &out.join("target"))?;
                save_dataset(tv, &out.join("target_val"))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Train { config, train, val, out } => {
            let cfg = TrainConfig::load(&config)?;
            let art = train_single(&cfg, &load_dataset(&train)?, &load_dataset(&val)?)?;
            art.write(&out)?;
            println!("final val mAP {:.4}", art.final_report.map);
        }
        Command::TrainDa {
            config,
            source,
            target,
            target_val,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let art = train_da(
                &cfg,
                &load_dataset(&source)?,
                &load_dataset(&target)?,
                &load_dataset(&target_val)?,
            )?;
            art.write(&out)?;
            println!("final target mAP {:.4}", art.final_report.map);
        }
        Command::Eval { model, data, out } => {
            let loaded = load_model::<f64>(&model)?;
            let cfg = TrainConfig::from_toml_str(&loaded.manifest.config)?;
            let ds = load_dataset(&data)?;
            if ds.label_names != loaded.manifest.label_names {
                return Err(Error::Contract("dataset label names differ from the model's".into()));
            }
            let report = evaluate_model(&loaded.bundle, &ds, cfg.train.decision())?;
            write_file(&out, &(report.to_json()? + "\n"))?;
            println!("mAP {:.4}", report.map);
        }
        Command::Ablate {
            config,
            train,
            val,
            out,
            seeds,
        } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()));
            }
            let cfg = TrainConfig::load(&config)?;
            let table = ablate(&cfg, &load_dataset(&train)?, &load_dataset(&val)?, seeds)?;
            let csv = table.to_csv();
            write_file(&out, &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck { trials, tol, seed } => {
            if trials == 0 || !(tol > 0.0) {
                return Err(Error::Config("--trials and --tol must be positive".into()));
            }
            let cfg = CheckConfig {
                trials,
                rel_tol: tol,
                seed,
                ..CheckConfig::default()
            };
            let results = run_suite(&cfg)?;
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
