use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use comuco::bench::{
    make_synthetic_task, run_ablation, run_shots_sweep, verify_theorems, Report, ReportFormat,
    ReportKind, SyntheticSpec, DEFAULT_SHOTS,
};
use comuco::embedding_store::{sample_k_shot, LabeledRow, Split};
use comuco::trainer::{evaluate, train, zero_shot_accuracy};
use comuco::{CoMuCoConfig, Error, ExpertParams, Result, TaskManifest};

#[derive(Parser)]
#[command(
    name = "comuco",
    version,
    about = "Dual-expert few-shot adapters over frozen embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task (CMF1 files + manifest) from a JSON spec.
    GenSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one K-shot episode; writes params.cmf, history.jsonl, summary.json.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test accuracy of saved adapters (identity adapters when --params is omitted).
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the nine-row component ablation.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-model accuracy across shot counts.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical checks of the Laplace-prior and Jeffreys/Fisher-Rao results.
    VerifyGeometry {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render an ablation or sweep report.
    ExportReport {
        #[arg(long, value_parser = ["json", "csv", "md"])]
        format: String,
        /// Report JSON written by `ablate` or `sweep`; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<CoMuCoConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => CoMuCoConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn test_rows(manifest: &TaskManifest) -> Vec<LabeledRow> {
    manifest
        .rows
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| LabeledRow {
            row: r.index,
            label: r.label,
        })
        .collect()
}

fn pretty(v: &serde_json::Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { spec, out } => {
            let spec: SyntheticSpec = serde_json::from_str(&read_text(&spec)?)?;
            let path = make_synthetic_task(&spec, &out)?;
            println!("{}", path.display());
        }
        Command::Train {
            manifest,
            k,
            seed,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = TaskManifest::load(&manifest)?;
            let frozen = m.load_frozen()?;
            let task = sample_k_shot(&m, k, seed)?;
            let epochs = cfg.epochs_for(m.cross_domain);
            let (params, history) = train(&task, &frozen, &cfg, epochs, seed)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            params.save(out.join("params.cmf"))?;
            history.write_jsonl(out.join("history.jsonl"))?;
            let summary = json!({
                "k": k,
                "seed": seed,
                "epochs": epochs,
                "final_accuracy": history.final_accuracy,
                "zero_shot_accuracy": zero_shot_accuracy(&frozen, &task.test_rows)?,
                "config": cfg,
            });
            let text = pretty(&summary)?;
            write_text(&out.join("summary.json"), &text)?;
            print!("{text}");
        }
        Command::Eval {
            manifest,
            params,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = TaskManifest::load(&manifest)?;
            let frozen = m.load_frozen()?;
            let rows = test_rows(&m);
            let params = match params {
                Some(p) => ExpertParams::load(p)?,
                None => ExpertParams::zeros(frozen.dim(), cfg.hidden_for(frozen.dim()))?,
            };
            let summary = json!({
                "accuracy": evaluate(&params, &frozen, &rows, &cfg)?,
                "zero_shot_accuracy": zero_shot_accuracy(&frozen, &rows)?,
                "test_rows": rows.len(),
            });
            print!("{}", pretty(&summary)?);
        }
        Command::Ablate {
            manifest,
            k,
            seeds,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = TaskManifest::load(&manifest)?;
            let frozen = m.load_frozen()?;
            let rows = run_ablation(&m, &frozen, k, &seeds, &cfg)?;
            let report = Report {
                kind: ReportKind::Ablation,
                manifest: manifest.display().to_string(),
                rows,
            };
            emit(out.as_deref(), &report.render(ReportFormat::Json)?)?;
        }
        Command::Sweep {
            manifest,
            seeds,
            shots,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = TaskManifest::load(&manifest)?;
            let frozen = m.load_frozen()?;
            let shots = shots.unwrap_or_else(|| DEFAULT_SHOTS.to_vec());
            let rows = run_shots_sweep(&m, &frozen, &shots, &seeds, &cfg)?;
            for w in rows.windows(2) {
                if w[1].mean < w[0].mean {
                    eprintln!(
                        "note: mean accuracy drops from {} ({:.4}) to {} ({:.4})",
                        w[0].config_id, w[0].mean, w[1].config_id, w[1].mean
                    );
                }
            }
            let report = Report {
                kind: ReportKind::Sweep,
                manifest: manifest.display().to_string(),
                rows,
            };
            emit(out.as_deref(), &report.render(ReportFormat::Json)?)?;
        }
        Command::VerifyGeometry { trials, seed, out } => {
            let report = verify_theorems(trials, seed)?;
            println!("{}", report.summary());
            if let Some(p) = out {
                write_text(&p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            if !report.passed() {
                return Err(Error::Numerical {
                    term: "verify-geometry".into(),
                    detail: "one or more checks failed".into(),
                });
            }
        }
        Command::ExportReport { format, input, out } => {
            let text = match input {
                Some(p) => read_text(&p)?,
                None => std::io::read_to_string(std::io::stdin()).map_err(|e| Error::Io {
                    path: "<stdin>".into(),
                    source: e,
                })?,
            };
            let report = Report::from_json(&text)?;
            emit(
                out.as_deref(),
                &report.render(format.parse::<ReportFormat>()?)?,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
