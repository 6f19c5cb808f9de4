use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dietcp::checkpoint::load_checkpoint;
use dietcp::data::{write_container, Split};
use dietcp::eval::{extract_embeddings, project_2d, write_projection_csv, EvalPhase};
use dietcp::experiment::{self, write_json, ExperimentConfig};
use dietcp::synthetic::{self, Distribution};
use dietcp::Result;
use log::info;

#[derive(Parser)]
#[command(name = "dietcp", version, about = "Continued pretraining by datum-index classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-evaluate, continue pretraining on a subset, post-evaluate.
    Train(Common),
    /// Repeat `train` over several subset sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset sizes; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Evaluate a backbone (the configured starting point by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a 2D PCA projection of validation embeddings as CSV.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize every run found under a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset as a DCPD container with a label CSV.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, value_enum, default_value_t = SynthSplit::Train)]
        split: SynthSplit,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthSplit {
    Train,
    Val,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.experiment.output_dir = o.clone();
        }
        if let Some(n) = self.subset_size {
            cfg.experiment.cp_subset_size = n;
        }
        if let Some(k) = self.knn_k {
            cfg.eval.knn_k = k;
        }
        if let Some(e) = self.epochs {
            cfg.optim.total_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn starting_backbone(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(experiment::Prepared, EvalPhase)> {
    let mut prep = experiment::prepare(cfg)?;
    let phase = match checkpoint {
        Some(path) => {
            prep.pre_backbone = load_checkpoint(path)?.0.adapted_to(cfg.vit.image_size)?;
            EvalPhase::Post
        }
        None => EvalPhase::Pre,
    };
    Ok((prep, phase))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            let outcomes = experiment::run_cp(&cfg)?;
            for o in &outcomes {
                println!(
                    "seed {}: k-NN F1 {:.2} -> {:.2} ({}), LP F1 {:.2} -> {:.2} ({})",
                    o.seed,
                    o.pre.knn_macro_f1,
                    o.post.knn_macro_f1,
                    experiment::signed(o.post.knn_macro_f1 - o.pre.knn_macro_f1),
                    o.pre.lp_macro_f1,
                    o.post.lp_macro_f1,
                    experiment::signed(o.post.lp_macro_f1 - o.pre.lp_macro_f1),
                );
            }
            println!("{}", experiment::report(&cfg.experiment.output_dir)?.text.trim_end());
        }
        Command::Sweep { common, sizes } => {
            let cfg = common.config()?;
            let sizes = if sizes.is_empty() { cfg.experiment.sweep_sizes.clone() } else { sizes };
            let table = experiment::run_sweep(&cfg, &sizes, Some(&cfg.experiment.output_dir))?;
            print!("{}", table.to_csv());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.config()?;
            let (prep, phase) = starting_backbone(&cfg, checkpoint.as_deref())?;
            let seed = cfg.experiment.seeds[0];
            let report = prep.eval.evaluate(&prep.pre_backbone, phase, seed)?;
            std::fs::create_dir_all(&cfg.experiment.output_dir)?;
            write_json(&cfg.experiment.output_dir.join("eval.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Project { common, checkpoint } => {
            let cfg = common.config()?;
            let (prep, _) = starting_backbone(&cfg, checkpoint.as_deref())?;
            let emb = extract_embeddings(&prep.pre_backbone, &prep.eval.val, prep.eval.source, cfg.eval.l2_normalize)?;
            let proj = project_2d(&emb)?;
            std::fs::create_dir_all(&cfg.experiment.output_dir)?;
            let path = cfg.experiment.output_dir.join("projection.csv");
            write_projection_csv(&path, &proj, &emb.labels)?;
            println!("wrote {}", path.display());
        }
        Command::Report { out } => {
            let r = experiment::report(&out)?;
            print!("{}", r.text);
        }
        Command::Synth {
            kind,
            n,
            size,
            split,
            seed,
            out,
        } => {
            let dist = match kind {
                SynthKind::Source => Distribution::Source,
                SynthKind::Target => Distribution::Target,
            };
            let split = match split {
                SynthSplit::Train => Split::Train,
                SynthSplit::Val => Split::Val,
            };
            let ds = synthetic::generate(dist, n, size, split, seed)?;
            let images: Vec<_> = ds.images().iter().map(|i| (**i).clone()).collect();
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_container(&out, &images, ds.labels())?;
            info!("wrote {} images to {}", n, out.display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
