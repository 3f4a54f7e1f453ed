//! Experiment harness command line: corpus generation, training,
//! evaluation, expert analysis, multi-seed studies, parameter accounting,
//! and gradient checks, each writing reproducible artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moelora_core::analysis::{count_params, expert_svd_map, svd_map_csv, CountMode};
use moelora_core::backbone::{AdapterMode, BackboneConfig};
use moelora_core::checkpoint::Checkpoint;
use moelora_core::config::RunConfig;
use moelora_core::corpus::{CorpusManifest, Dataset};
use moelora_core::error::Result;
use moelora_core::metrics::{compute_eer, seed_aggregate, write_scores, EvalRecord};
use moelora_core::model::Model;
use moelora_core::tensor::grad_check;
use moelora_core::trainer::{fit, score_split, train_log_csv};
use moelora_core::{Error, Rng, Tensor};

#[derive(Parser)]
#[command(name = "moelora", version, about = "Mixture-of-LoRA-experts experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys, e.g. --set num_experts=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut pairs = BTreeMap::new();
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                Error::Validation(format!("--set expects KEY=VALUE, got '{s}'"))
            })?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        cfg.apply_pairs(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into a dataset directory
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// train split size (half bonafide)
        #[arg(long, default_value_t = 2000)]
        train: usize,
        /// dev split size
        #[arg(long, default_value_t = 400)]
        dev: usize,
        /// size of each evaluation split
        #[arg(long, default_value_t = 400)]
        eval: usize,
    },
    /// Train a model and retain the best-dev-EER checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split with a checkpoint and report EER per split and family
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Emit the per-expert maximal-singular-value table of a checkpoint
    AnalyzeExperts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with several seeds and aggregate EER per evaluation split
    SeedStudy {
        #[command(flatten)]
        config: ConfigArgs,
        /// comma-separated seed list
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable-parameter accounting
    CountParams {
        #[arg(long, default_value_t = 3)]
        experts: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value = "paper")]
        mode: String,
    },
    /// Central-difference check of the full model's gradients
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData {
            out,
            seed,
            train,
            dev,
            eval,
        } => {
            let manifest = if (train, dev, eval) == (2000, 400, 400) {
                CorpusManifest::default_with_seed(seed)
            } else {
                CorpusManifest::sized(seed, train, dev, eval)
            };
            let dataset = Dataset::generate(&manifest)?;
            dataset.save(&out)?;
            println!(
                "wrote {} clips ({} splits) to {}",
                dataset.clips.len(),
                dataset.split_names().len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Train { data, config, out } => {
            let cfg = config.load()?;
            let dataset = Dataset::load(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write(&out.join("config_echo"), &cfg.echo())?;
            write(
                &out.join("manifest.json"),
                &moelora_core::corpus::manifest_json(&dataset.manifest)?,
            )?;

            let model = Model::build(&cfg.backbone, cfg.train.seed)?;
            let result = fit(&model, &dataset, &cfg.train)?;
            result.checkpoint.save(&out.join("checkpoint.bin"))?;
            write(&out.join("train_log.csv"), &train_log_csv(&result.log))?;
            println!(
                "trained {} epochs; best epoch {} with dev EER {:.4}",
                result.epochs_run, result.best_epoch, result.best_dev_eer
            );
            println!("checkpoint: {}", out.join("checkpoint.bin").display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            ckpt,
            data,
            split,
            scores,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = checkpoint.build_model()?;
            let dataset = Dataset::load(&data)?;
            let clips = dataset.split(&split);
            if clips.is_empty() {
                return Err(Error::Validation(format!("split '{split}' is empty")));
            }
            let records = score_split(&model, &clips)?;
            write_scores(&scores, &records)?;
            report_eer(&records, &split);
            Ok(ExitCode::SUCCESS)
        }

        Command::AnalyzeExperts { ckpt, out } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = checkpoint.build_model()?;
            let rows = expert_svd_map(&model)?;
            write(&out, &svd_map_csv(&rows))?;
            println!("wrote {} expert entries to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::SeedStudy { config, seeds, out } => {
            let cfg = config.load()?;
            if seeds.len() < 2 {
                return Err(Error::Validation(
                    "seed study needs at least 2 seeds".into(),
                ));
            }
            let data_dir = cfg.data_dir.clone().ok_or_else(|| {
                Error::Validation("seed study config must set data_dir".into())
            })?;
            let dataset = Dataset::load(&data_dir)?;
            let eval_splits: Vec<String> = dataset
                .split_names()
                .into_iter()
                .filter(|s| s.starts_with("eval"))
                .collect();

            let threads: usize = std::env::var("MOELORA_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(1)
                .max(1);
            let tables = run_seeds(&cfg, &dataset, &seeds, &eval_splits, threads)?;
            let agg = seed_aggregate(&tables)?;
            let mut csv = String::from("split,n_seeds,mean_eer,std_eer\n");
            for (name, mean, std) in &agg {
                csv.push_str(&format!("{name},{},{mean},{std}\n", seeds.len()));
            }
            write(&out, &csv)?;
            for (name, mean, std) in &agg {
                println!("{name}: EER {:.4} +/- {:.4} over {} seeds", mean, std, seeds.len());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::CountParams {
            experts,
            rank,
            mode,
        } => {
            let mode: CountMode = mode.parse()?;
            let cfg = BackboneConfig {
                adapter_mode: match experts {
                    0 => AdapterMode::None,
                    1 => AdapterMode::SingleLora,
                    _ => AdapterMode::MoeLora,
                },
                num_experts: experts.max(1),
                top_k: experts.max(1),
                lora_rank: if rank == 0 { 1 } else { rank },
                ..BackboneConfig::default()
            };
            let report = count_params(&cfg, mode)?;
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }

        Command::GradCheck { config } => {
            let cfg = config.load()?;
            // toy geometry regardless of the configured experiment size;
            // finite differences over the full model are O(P) forwards
            let toy = BackboneConfig {
                layers: 1.min(cfg.backbone.layers.max(1)),
                model_dim: 8,
                heads: 2,
                ffn_dim: 16,
                input_dim: 4,
                adapter_mode: cfg.backbone.adapter_mode,
                lora_rank: 2.min(cfg.backbone.lora_rank.max(1)),
                num_experts: cfg.backbone.num_experts.min(3).max(1),
                top_k: cfg.backbone.top_k.min(cfg.backbone.num_experts.min(3)).max(1),
                head_hidden: 6,
                ..cfg.backbone.clone()
            };
            let model = Model::build(&toy, cfg.train.seed)?;
            let mut xr = Rng::new(cfg.train.seed ^ 0x9d);
            let x1 = Tensor::randn(&[3, toy.input_dim], 1.0, &mut xr);
            let x2 = Tensor::randn(&[4, toy.input_dim], 1.0, &mut xr);
            let params: Vec<Tensor> = model
                .trainable_params()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let rel = grad_check(
                move || model.batch_nll(&[(&x1, 0), (&x2, 1)], None),
                &params,
                1e-5,
            )?;
            println!("max relative gradient error: {rel:.3e}");
            if rel <= 1e-4 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("error: gradient check exceeded 1e-4");
                Ok(ExitCode::from(1))
            }
        }
    }
}

/// Run fit+eval for every seed, optionally across worker threads. Each
/// worker builds and trains its own model; only plain EER tables cross
/// thread boundaries.
fn run_seeds(
    cfg: &RunConfig,
    dataset: &Dataset,
    seeds: &[u64],
    eval_splits: &[String],
    threads: usize,
) -> Result<Vec<Vec<(String, f64)>>> {
    if threads <= 1 {
        return seeds
            .iter()
            .map(|&s| run_one_seed(cfg, dataset, s, eval_splits))
            .collect();
    }
    let mut tables: Vec<Option<Vec<(String, f64)>>> = vec![None; seeds.len()];
    let mut err: Option<Error> = None;
    for chunk in seeds.chunks(threads) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    scope.spawn(move || (seed, run_one_seed(cfg, dataset, seed, eval_splits)))
                })
                .collect();
            for h in handles {
                let (seed, result) = h.join().expect("seed worker panicked");
                let idx = seeds.iter().position(|&s| s == seed).unwrap();
                match result {
                    Ok(t) => tables[idx] = Some(t),
                    Err(e) => err = Some(e),
                }
            }
        });
        if err.is_some() {
            break;
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(tables.into_iter().map(|t| t.expect("all seeds ran")).collect())
}

fn run_one_seed(
    cfg: &RunConfig,
    dataset: &Dataset,
    seed: u64,
    eval_splits: &[String],
) -> Result<Vec<(String, f64)>> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let model = Model::build(&cfg.backbone, seed)?;
    let result = fit(&model, dataset, &train_cfg)?;
    let best = result.checkpoint.build_model()?;
    let mut table = Vec::new();
    for split in eval_splits {
        let records = score_split(&best, &dataset.split(split))?;
        let (eer, _) = compute_eer(&records)?;
        table.push((split.clone(), eer * 100.0));
    }
    println!(
        "seed {seed}: {}",
        table
            .iter()
            .map(|(s, e)| format!("{s} {e:.3}%"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(table)
}

fn report_eer(records: &[EvalRecord], split: &str) {
    match compute_eer(records) {
        Ok((eer, th)) => println!("{split}: EER {:.4}% (threshold {th:.6})", eer * 100.0),
        Err(e) => println!("{split}: EER unavailable ({e})"),
    }
    let mut families: Vec<String> = Vec::new();
    for r in records {
        if r.label == moelora_core::corpus::Label::Spoof && !families.contains(&r.family) {
            families.push(r.family.clone());
        }
    }
    families.sort();
    for family in families {
        let subset: Vec<EvalRecord> = records
            .iter()
            .filter(|r| {
                r.label == moelora_core::corpus::Label::Bonafide || r.family == family
            })
            .cloned()
            .collect();
        match compute_eer(&subset) {
            Ok((eer, _)) => println!("  {family}: EER {:.4}%", eer * 100.0),
            Err(e) => println!("  {family}: EER unavailable ({e})"),
        }
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}
