//! Command-line entry point: synthetic data, training, translation and
//! localization evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use xdomain::checkpoint;
use xdomain::config::TrainConfig;
use xdomain::datamodel::Embedding;
use xdomain::image_io::{load_png, save_png, tile};
use xdomain::localization;
use xdomain::pairing;
use xdomain::synthdata::{generate_dataset, parse_domains, GenerateConfig, PoseJitter};
use xdomain::trainer::{self, TrainingSet};

#[derive(Parser)]
#[command(
    name = "xdomain",
    version,
    about = "Cross-domain translation and localization"
)]
struct Cli {
    /// Master seed; overrides the config file's `seed` for training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain dataset with manifests.
    GenerateSynthetic {
        #[arg(long)]
        scenes: usize,
        /// Comma-separated presets or `name:tr/tg/tb:brightness:contrast:noise`.
        #[arg(long, default_value = "day,dusk,night")]
        domains: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Mean camera advance between scenes, meters.
        #[arg(long, default_value_t = PoseJitter::default().step_m)]
        step_m: f64,
        /// Maximum camera turn between scenes, degrees.
        #[arg(long, default_value_t = PoseJitter::default().turn_deg)]
        turn_deg: f64,
    },
    /// Mine positives and cross-domain pairs with a trained model.
    MinePairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) a model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` override, repeatable; applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render the source's content with the target's appearance.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source (row) × target (column) translation grid.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval localization recall of queries against references.
    LocalizeEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_settings(cmd: &str, pairs: &[(&str, String)]) {
    println!("# {cmd}");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn load_model(path: &Path) -> Result<xdomain::networks::Model> {
    let ck =
        checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.into_model())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenerateSynthetic {
            scenes,
            domains,
            out,
            size,
            step_m,
            turn_deg,
        } => {
            print_settings(
                "generate-synthetic",
                &[
                    ("scenes", scenes.to_string()),
                    ("domains", domains.clone()),
                    ("size", size.to_string()),
                    ("step_m", step_m.to_string()),
                    ("turn_deg", turn_deg.to_string()),
                    ("seed", seed.to_string()),
                    ("out", show(&out)),
                ],
            );
            let mut cfg = GenerateConfig::new(scenes, parse_domains(&domains)?);
            cfg.size = (size, size);
            cfg.seed = seed;
            cfg.pose_jitter = PoseJitter { step_m, turn_deg };
            let ds = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} records ({} near pose pairs) to {}",
                ds.records.len(),
                ds.near_pairs,
                ds.manifest_path.display()
            );
        }
        Command::MinePairs {
            manifest,
            checkpoint,
            out,
        } => {
            let ck = checkpoint::load(&checkpoint)?;
            print_settings(
                "mine-pairs",
                &[
                    ("manifest", show(&manifest)),
                    ("checkpoint", show(&checkpoint)),
                    ("k_candidates", ck.config.k_candidates.to_string()),
                    ("rot_thresh_deg", ck.config.hyper.rot_thresh_deg.to_string()),
                    ("trans_thresh_m", ck.config.hyper.trans_thresh_m.to_string()),
                    ("out", show(&out)),
                ],
            );
            let cfg = ck.config.clone();
            let model = ck.into_model();
            let set = TrainingSet::load(&manifest, cfg.image_size)?;
            let emb = trainer::embed_all(&model, &set.images)?;
            let refs: Vec<usize> = (0..set.records.len())
                .filter(|&i| set.records[i].is_reference)
                .collect();
            let ref_records: Vec<_> = refs.iter().map(|&i| set.records[i].clone()).collect();
            let ref_emb: Vec<Embedding> = refs.iter().map(|&i| emb[i].clone()).collect();
            let mined = pairing::mine_positives(
                &ref_records,
                &ref_emb,
                cfg.k_candidates,
                cfg.hyper.rot_thresh_deg,
                cfg.hyper.trans_thresh_m,
            )?;
            let assigned = pairing::refresh_source_target(&set.records, &emb)?;
            let path_of = |i: usize| set.records[i].image_path.clone();
            let mut lines = String::new();
            for a in &assigned {
                let positives: Vec<String> = refs
                    .iter()
                    .position(|&r| r == a.source_idx)
                    .map(|k| {
                        mined.positives[k]
                            .iter()
                            .map(|&p| path_of(refs[p]))
                            .collect()
                    })
                    .unwrap_or_default();
                let line = json!({
                    "source": path_of(a.source_idx),
                    "target": path_of(a.target_idx),
                    "similarity": a.similarity,
                    "positives": positives,
                });
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            std::fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} pairs to {}", assigned.len(), out.display());
        }
        Command::Train {
            manifest,
            config,
            out,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for o in &overrides {
                cfg.set_assignment(o)?;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.out_dir = out;
            cfg.validate()?;
            println!(
                "# train\nmanifest = {}\nout_dir = {}",
                show(&manifest),
                show(&cfg.out_dir)
            );
            print!("{}", cfg.canonical());
            let ck = trainer::fit(&manifest, &cfg)?;
            println!("checkpoint: {}", ck.display());
        }
        Command::Translate {
            checkpoint,
            source,
            target,
            out,
        } => {
            print_settings(
                "translate",
                &[
                    ("checkpoint", show(&checkpoint)),
                    ("source", show(&source)),
                    ("target", show(&target)),
                    ("out", show(&out)),
                ],
            );
            let model = load_model(&checkpoint)?;
            let img = model.translate(&load_png(&source)?, &load_png(&target)?)?;
            save_png(&img, &out)?;
        }
        Command::Grid {
            checkpoint,
            sources,
            targets,
            out,
        } => {
            let list = |v: &[PathBuf]| v.iter().map(|p| show(p)).collect::<Vec<_>>().join(",");
            print_settings(
                "grid",
                &[
                    ("checkpoint", show(&checkpoint)),
                    ("sources", list(&sources)),
                    ("targets", list(&targets)),
                    ("out", show(&out)),
                ],
            );
            let model = load_model(&checkpoint)?;
            let src = sources
                .iter()
                .map(|p| load_png(p))
                .collect::<Result<Vec<_>, _>>()?;
            let tgt = targets
                .iter()
                .map(|p| load_png(p))
                .collect::<Result<Vec<_>, _>>()?;
            let mut cells = Vec::with_capacity(src.len() * tgt.len());
            for s in &src {
                for t in &tgt {
                    cells.push(model.translate(s, t)?);
                }
            }
            save_png(&tile(&cells, src.len(), tgt.len())?, &out)?;
        }
        Command::LocalizeEval {
            checkpoint,
            queries,
            references,
            out,
        } => {
            print_settings(
                "localize-eval",
                &[
                    ("checkpoint", show(&checkpoint)),
                    ("queries", show(&queries)),
                    ("references", show(&references)),
                    ("buckets", format!("{:?}", localization::BUCKETS)),
                    ("out", show(&out)),
                ],
            );
            let model = load_model(&checkpoint)?;
            let report = localization::evaluate_manifests(&model, &queries, &references)?;
            print!("{}", report.table());
            report.save_json(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XDOMAIN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
