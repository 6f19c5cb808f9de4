use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::mean_std;
use super::train::{train_diet, FreezePlan, RunLog, Snapshots, TrainSpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{sample_cp_subset, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::eval::{EvalPhase, EvalReport, EvalSet};
use crate::optim::OptimConfig;
use crate::rng;
use crate::synthetic::{self, Distribution};
use crate::vit::BackboneParams;

pub const PRE_FILE: &str = "pre.json";
pub const POST_FILE: &str = "post.json";
pub const LOG_FILE: &str = "runlog.json";
pub const META_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.dcpw";

/// Identifying facts about one seed's run, stored next to its reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: String,
    pub seed: u64,
    pub subset_size: usize,
    pub total_epochs: usize,
    pub runlog_hash: String,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub subset_size: usize,
    pub pre: EvalReport,
    pub post: EvalReport,
    pub log: RunLog,
    pub backbone: BackboneParams,
}

/// Datasets, evaluation protocol and starting backbone shared by every seed
/// (and every subset size) of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset_name: String,
    pub train: DatasetHandle,
    pub eval: EvalSet,
    pub pre_backbone: BackboneParams,
}

/// Short DIET run on the synthetic source distribution from a random
/// initialization, with every parameter trainable.
pub fn warm_start(cfg: &ExperimentConfig) -> Result<(BackboneParams, RunLog)> {
    let ws = &cfg.warm_start;
    let mut backbone = BackboneParams::init(cfg.vit.clone(), rng::derive_seed(ws.seed, "backbone", &[]))?;
    let mut log = RunLog::new(ws.seed);
    if ws.epochs == 0 {
        return Ok((backbone, log));
    }
    let source = synthetic::generate(Distribution::Source, ws.samples, cfg.vit.image_size, Split::Train, ws.seed)?;
    let subset = sample_cp_subset(&source.without_labels(), ws.samples, ws.seed)?;
    let optim = OptimConfig {
        lr_max: ws.lr_max,
        total_epochs: ws.epochs,
        ..cfg.optim.clone()
    };
    let spec = TrainSpec {
        optim: &optim,
        loss: &cfg.loss,
        augment: &cfg.augment,
        plan: FreezePlan::Full,
        seed: ws.seed,
        snapshots: None,
    };
    train_diet(&mut backbone, &subset, &spec, &mut log)?;
    Ok((backbone, log))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, val) = cfg.dataset.load(cfg.vit.image_size)?;
    let pre_backbone = match &cfg.warm_start.checkpoint {
        Some(path) => {
            let (bb, _) = load_checkpoint(path)?;
            let bb = bb.adapted_to(cfg.vit.image_size)?;
            if bb.config().dim != cfg.vit.dim || bb.config().depth != cfg.vit.depth {
                return Err(Error::Config(format!(
                    "checkpoint {} has dim {} / depth {}, config asks for {} / {}",
                    path.display(),
                    bb.config().dim,
                    bb.config().depth,
                    cfg.vit.dim,
                    cfg.vit.depth
                )));
            }
            bb
        }
        None => {
            info!("warm start: {} epochs on the synthetic source distribution", cfg.warm_start.epochs);
            warm_start(cfg)?.0
        }
    };
    let eval = EvalSet::new(&train, val, cfg.loss.representation_source, cfg.eval.clone());
    Ok(Prepared {
        dataset_name: cfg.dataset.display_name(),
        train,
        eval,
        pre_backbone,
    })
}

/// Pre-eval, continued pretraining on a fresh subset, post-eval. Artifacts
/// go to `out` when given; on a numeric abort the partial log is still
/// written.
pub fn run_seed(prep: &Prepared, cfg: &ExperimentConfig, seed: u64, subset_size: usize, out: Option<&Path>) -> Result<SeedOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let pre = prep.eval.evaluate(&prep.pre_backbone, EvalPhase::Pre, seed)?;
    info!("seed {seed}: pre k-NN F1 {:.2}, LP F1 {:.2}", pre.knn_macro_f1, pre.lp_macro_f1);
    let subset = sample_cp_subset(&prep.train.without_labels(), subset_size, seed)?;
    let mut backbone = prep.pre_backbone.clone();
    let mut log = RunLog::new(seed);
    let spec = TrainSpec {
        optim: &cfg.optim,
        loss: &cfg.loss,
        augment: &cfg.augment,
        plan: FreezePlan::Recipe,
        seed,
        snapshots: Some(Snapshots {
            every: cfg.experiment.eval_every,
            eval: &prep.eval,
        }),
    };
    let head = match train_diet(&mut backbone, &subset, &spec, &mut log) {
        Ok(h) => h,
        Err(e) => {
            if let Some(dir) = out {
                write_json(&dir.join(LOG_FILE), &log)?;
            }
            return Err(e);
        }
    };
    let post = prep.eval.evaluate(&backbone, EvalPhase::Post, seed)?;
    info!("seed {seed}: post k-NN F1 {:.2}, LP F1 {:.2}", post.knn_macro_f1, post.lp_macro_f1);
    if let Some(dir) = out {
        write_json(&dir.join(PRE_FILE), &pre)?;
        write_json(&dir.join(POST_FILE), &post)?;
        write_json(&dir.join(LOG_FILE), &log)?;
        write_json(
            &dir.join(META_FILE),
            &RunMeta {
                dataset: prep.dataset_name.clone(),
                seed,
                subset_size: subset.len(),
                total_epochs: cfg.optim.total_epochs,
                runlog_hash: log.hash(),
            },
        )?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &backbone, Some(&head))?;
    }
    Ok(SeedOutcome {
        seed,
        subset_size: subset.len(),
        pre,
        post,
        log,
        backbone,
    })
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Every configured seed, written under `cfg.experiment.output_dir`.
pub fn run_cp(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    let prep = prepare(cfg)?;
    run_cp_prepared(&prep, cfg, cfg.experiment.cp_subset_size, Some(&cfg.experiment.output_dir))
}

pub fn run_cp_prepared(prep: &Prepared, cfg: &ExperimentConfig, subset_size: usize, out: Option<&Path>) -> Result<Vec<SeedOutcome>> {
    cfg.experiment
        .seeds
        .iter()
        .map(|&seed| run_seed(prep, cfg, seed, subset_size, out.map(|o| seed_dir(o, seed)).as_deref()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub seed: u64,
    pub pre: EvalReport,
    pub post: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub size: usize,
    pub seeds: usize,
    pub post_knn_macro_f1_mean: f64,
    pub post_knn_macro_f1_std: Option<f64>,
    pub post_lp_macro_f1_mean: f64,
    pub post_lp_macro_f1_std: Option<f64>,
    pub knn_macro_f1_delta_mean: f64,
    pub lp_macro_f1_delta_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("size,seed,phase,knn_acc,knn_macro_f1,lp_acc,lp_macro_f1\n");
        for r in &self.rows {
            for (name, rep) in [("pre", &r.pre), ("post", &r.post)] {
                s.push_str(&format!(
                    "{},{},{name},{:.4},{:.4},{:.4},{:.4}\n",
                    r.size, r.seed, rep.knn_acc, rep.knn_macro_f1, rep.lp_acc, rep.lp_macro_f1
                ));
            }
        }
        s
    }
}

/// `run_cp` once per subset size, in the given order, with shared seeds,
/// starting backbone and evaluation label set.
pub fn run_sweep(cfg: &ExperimentConfig, sizes: &[usize], out: Option<&Path>) -> Result<SweepTable> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("sweep sizes must be a nonempty list of positive sizes".into()));
    }
    let prep = prepare(cfg)?;
    sweep_prepared(&prep, cfg, sizes, out)
}

pub fn sweep_prepared(prep: &Prepared, cfg: &ExperimentConfig, sizes: &[usize], out: Option<&Path>) -> Result<SweepTable> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &size in sizes {
        let dir = out.map(|o| o.join(format!("size-{size}")));
        let outcomes = run_cp_prepared(prep, cfg, size, dir.as_deref())?;
        let col = |f: &dyn Fn(&SeedOutcome) -> f64| outcomes.iter().map(f).collect::<Vec<_>>();
        let (knn_m, knn_s) = mean_std(&col(&|o| o.post.knn_macro_f1));
        let (lp_m, lp_s) = mean_std(&col(&|o| o.post.lp_macro_f1));
        let (dk, _) = mean_std(&col(&|o| o.post.knn_macro_f1 - o.pre.knn_macro_f1));
        let (dl, _) = mean_std(&col(&|o| o.post.lp_macro_f1 - o.pre.lp_macro_f1));
        summary.push(SweepSummaryRow {
            size,
            seeds: outcomes.len(),
            post_knn_macro_f1_mean: knn_m,
            post_knn_macro_f1_std: knn_s,
            post_lp_macro_f1_mean: lp_m,
            post_lp_macro_f1_std: lp_s,
            knn_macro_f1_delta_mean: dk,
            lp_macro_f1_delta_mean: dl,
        });
        rows.extend(outcomes.into_iter().map(|o| SweepRow {
            size,
            seed: o.seed,
            pre: o.pre,
            post: o.post,
        }));
    }
    let table = SweepTable { rows, summary };
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("sweep.csv"), table.to_csv())?;
        write_json(&o.join("sweep_summary.json"), &table.summary)?;
    }
    Ok(table)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
