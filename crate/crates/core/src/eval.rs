//! Frozen-feature evaluation: embedding extraction, k-NN, linear probing,
//! accuracy / macro-F1 and a 2D PCA projection.

use std::io::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{eval_transform, stack, DatasetHandle};
use crate::diet::RepresentationSource;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::vit::{BackboneParams, Param};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "DIETCP_THREADS";

const EXTRACT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Stop once the loss changes by less than this between iterations.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 500,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub l2_normalize: bool,
    /// Labeled training rows available to k-NN and the probe.
    pub label_budget: usize,
    /// Seed of the labeled-row draw; independent of the run seed so the
    /// label set stays fixed across runs.
    pub label_seed: u64,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 20,
            l2_normalize: true,
            label_budget: 1000,
            label_seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::Config("EvalConfig.knn_k must be at least 1".into()));
        }
        if self.label_budget == 0 {
            return Err(Error::Config("EvalConfig.label_budget must be at least 1".into()));
        }
        if !(self.probe.lr > 0.0) || self.probe.iterations == 0 {
            return Err(Error::Config("EvalConfig.probe needs lr > 0 and iterations >= 1".into()));
        }
        Ok(())
    }
}

/// Row-major `N × d` features with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub source: RepresentationSource,
    pub l2_normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<f32>, dim: usize, labels: Vec<usize>, source: RepresentationSource) -> Result<Self> {
        if dim == 0 || rows.len() != dim * labels.len() {
            return Err(Error::dim(format!(
                "{} values do not form {} rows of width {dim}",
                rows.len(),
                labels.len()
            )));
        }
        Ok(Self {
            rows,
            dim,
            labels,
            source,
            l2_normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Scales every nonzero row to unit L2 norm.
    pub fn normalized(mut self) -> Self {
        for row in self.rows.chunks_mut(self.dim) {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
            }
        }
        self.l2_normalized = true;
        self
    }
}

/// Worker count for evaluation: `DIETCP_THREADS` if set, else all cores.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One feature row per image, in dataset order, using the resize-only eval
/// transform at the backbone's input size.
pub fn extract_embeddings(
    backbone: &BackboneParams,
    dataset: &DatasetHandle,
    source: RepresentationSource,
    normalize: bool,
) -> Result<EmbeddingMatrix> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::contract(format!("{} has no labels to evaluate against", dataset.source)))?
        .to_vec();
    let size = backbone.config().image_size;
    let dim = backbone.config().dim;
    let chunks: Vec<&[std::sync::Arc<crate::data::Image>]> = dataset.images().chunks(EXTRACT_BATCH).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let parts: Vec<Result<Vec<f32>>> = pool.install(|| {
        chunks
            .par_iter()
            .map(|imgs| {
                let views: Vec<Tensor<f32>> = imgs.iter().map(|img| eval_transform(img, size)).collect();
                let (cls, mean_patch) = backbone.encode(&stack(&views)?)?;
                Ok(match source {
                    RepresentationSource::Cls => cls.into_vec(),
                    RepresentationSource::MeanPatch => mean_patch.into_vec(),
                })
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(labels.len() * dim);
    for p in parts {
        rows.extend(p?);
    }
    let m = EmbeddingMatrix::new(rows, dim, labels, source)?;
    Ok(if normalize { m.normalized() } else { m })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnOutput {
    pub predictions: Vec<usize>,
    /// `k` actually used after clamping to the training-set size.
    pub k: usize,
    pub warning: Option<String>,
}

fn unit_rows_f64(m: &EmbeddingMatrix) -> Vec<f64> {
    let mut out: Vec<f64> = m.rows.iter().map(|&v| f64::from(v)).collect();
    for row in out.chunks_mut(m.dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Cosine-similarity k-NN with an unweighted vote; ties between classes go
/// to the smallest class index, ties in similarity to the lower train row.
pub fn knn_classify(train: &EmbeddingMatrix, query: &EmbeddingMatrix, k: usize) -> Result<KnnOutput> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::contract("k-NN needs at least one training row"));
    }
    if train.dim != query.dim {
        return Err(Error::dim(format!("train width {} vs query width {}", train.dim, query.dim)));
    }
    let mut warning = None;
    let k_eff = if k > train.len() {
        let msg = format!("k = {k} exceeds {} training rows; using k = {}", train.len(), train.len());
        warn!("{msg}");
        warning = Some(msg);
        train.len()
    } else {
        k
    };
    let classes = train.labels.iter().max().map_or(0, |m| m + 1);
    let t = unit_rows_f64(train);
    let q = unit_rows_f64(query);
    let d = train.dim;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut votes = vec![0usize; classes];
    let predictions = q
        .chunks(d)
        .map(|qrow| {
            sims.clear();
            sims.extend(
                t.chunks(d)
                    .enumerate()
                    // `+ 0.0` folds -0.0 into +0.0 so the two rank as a tie
                    .map(|(i, trow)| (qrow.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>() + 0.0, i)),
            );
            let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k_eff < sims.len() {
                sims.select_nth_unstable_by(k_eff - 1, order);
            }
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, i) in &sims[..k_eff] {
                votes[train.labels[i]] += 1;
            }
            // max_by_key keeps the last maximum; scan manually for the first.
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(KnnOutput {
        predictions,
        k: k_eff,
        warning,
    })
}

#[derive(Clone, Debug)]
pub struct ProbeOutput {
    pub predictions: Vec<usize>,
    /// `[K, d]` weights on standardized features.
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Multinomial logistic regression on standardized frozen features, trained
/// full-batch with AdamW (no weight decay).
pub fn linear_probe(train: &EmbeddingMatrix, val: &EmbeddingMatrix, cfg: &ProbeConfig) -> Result<ProbeOutput> {
    if train.dim != val.dim {
        return Err(Error::dim(format!("train width {} vs val width {}", train.dim, val.dim)));
    }
    let mut present: Vec<usize> = train.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::contract(format!(
            "linear probe needs at least two classes in the training set, found {}",
            present.len()
        )));
    }
    let (n, d) = (train.len(), train.dim);
    let k = present[present.len() - 1] + 1;

    let mut mean = vec![0.0f64; d];
    for row in train.rows.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += f64::from(v));
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0f64; d];
    for row in train.rows.chunks(d) {
        std.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, &v), m)| *s += (f64::from(v) - m).powi(2));
    }
    std.iter_mut().for_each(|s| {
        let sd = (*s / n as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    });
    let standardize = |m: &EmbeddingMatrix| -> Vec<f64> {
        m.rows
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).zip(&std).map(|((&v, mu), s)| (f64::from(v) - mu) / s))
            .collect()
    };
    let xs = standardize(train);

    let mut weight = Param {
        name: "probe.weight".into(),
        value: Tensor::zeros(vec![k, d]),
        trainable: true,
        decay: false,
    };
    let mut bias = Param {
        name: "probe.bias".into(),
        value: Tensor::zeros(vec![k]),
        trainable: true,
        decay: false,
    };
    let mut opt = AdamW::with_hyper((0.9, 0.999), 1e-8, 0.0);
    let mut prev = f64::INFINITY;
    let mut loss = f64::NAN;
    let mut iterations = 0;
    let mut gw = vec![0.0f32; k * d];
    let mut gb = vec![0.0f32; k];
    for it in 0..cfg.iterations {
        let (l, dw, db) = probe_loss_grad(&xs, &train.labels, weight.value.data(), bias.value.data(), k, d);
        loss = l;
        iterations = it + 1;
        if (prev - loss).abs() < cfg.tolerance {
            break;
        }
        prev = loss;
        gw.iter_mut().zip(&dw).for_each(|(g, &v)| *g = v as f32);
        gb.iter_mut().zip(&db).for_each(|(g, &v)| *g = v as f32);
        opt.step([(&mut weight, Some(gw.as_slice())), (&mut bias, Some(gb.as_slice()))], cfg.lr)?;
    }

    let xv = standardize(val);
    let (w, b) = (weight.value.data(), bias.value.data());
    let predictions = xv
        .chunks(d)
        .map(|x| {
            let mut best = 0;
            let mut best_z = f64::NEG_INFINITY;
            for c in 0..k {
                let z = f64::from(b[c]) + x.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, &b)| a * f64::from(b)).sum::<f64>();
                if z > best_z {
                    best_z = z;
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(ProbeOutput {
        predictions,
        weight: weight.value,
        bias: bias.value,
        iterations,
        final_loss: loss,
    })
}

/// Mean cross-entropy and its gradients with respect to `w` and `b`.
fn probe_loss_grad(x: &[f64], y: &[usize], w: &[f32], b: &[f32], k: usize, d: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut dw = vec![0.0; k * d];
    let mut db = vec![0.0; k];
    let mut loss = 0.0;
    let mut z = vec![0.0; k];
    for (row, &label) in x.chunks(d).zip(y) {
        for c in 0..k {
            z[c] = f64::from(b[c]) + row.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, &b)| a * f64::from(b)).sum::<f64>();
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
        loss += denom.ln() + max - z[label];
        for c in 0..k {
            let p = (z[c] - max).exp() / denom - if c == label { 1.0 } else { 0.0 };
            db[c] += p;
            dw[c * d..(c + 1) * d].iter_mut().zip(row).for_each(|(g, &v)| *g += p * v);
        }
    }
    let inv = 1.0 / n as f64;
    dw.iter_mut().for_each(|g| *g *= inv);
    db.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub accuracy: f64,
    /// Percent.
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 in percent. Classes never seen in `truth` and never
/// predicted are left out of the macro average; every other class counts,
/// with F1 = 0 when precision + recall = 0.
pub fn metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("metrics of an empty label set"));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let mut f1_sum = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        if true_count[c] == 0 && pred_count[c] == 0 {
            continue;
        }
        counted += 1;
        // 2PR / (P + R) with P = tp / predicted, R = tp / true
        f1_sum += (2 * tp[c]) as f64 / (pred_count[c] + true_count[c]) as f64;
    }
    Ok(Metrics {
        accuracy: 100.0 * correct as f64 / pred.len() as f64,
        macro_f1: 100.0 * f1_sum / counted as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `N` rows of `(x, y)`.
    pub coords: Vec<[f64; 2]>,
    pub warning: Option<String>,
}

/// Projection onto the top two principal axes of the centered data. Each
/// axis is signed so its largest-magnitude component is positive.
pub fn project_2d(embeds: &EmbeddingMatrix) -> Result<Projection> {
    let (n, d) = (embeds.len(), embeds.dim);
    if n < 2 {
        return Err(Error::contract(format!("projection needs at least 2 rows, got {n}")));
    }
    let x = DMatrix::from_row_iterator(n, d, embeds.rows.iter().map(|&v| f64::from(v)));
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    if cov.trace() <= f64::EPSILON * cov.nrows() as f64 {
        let msg = "all rows identical: projection is zero".to_string();
        warn!("{msg}");
        return Ok(Projection {
            coords: vec![[0.0, 0.0]; n],
            warning: Some(msg),
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for &idx in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, c)| if c.abs() > acc.1.abs() { (i, c) } else { acc });
        if lead.1 < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok(Projection { coords, warning: None })
}

/// Writes `sample_index,x,y,label` rows.
pub fn write_projection_csv(path: &Path, proj: &Projection, labels: &[usize]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_index,x,y,label")?;
    for (i, (c, l)) in proj.coords.iter().zip(labels).enumerate() {
        writeln!(f, "{i},{},{},{l}", c[0], c[1])?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPhase {
    Pre,
    Post,
}

/// k-NN and linear-probe scores (percent) for one backbone state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: EvalPhase,
    pub seed: u64,
    pub knn_acc: f64,
    pub knn_macro_f1: f64,
    pub lp_acc: f64,
    pub lp_macro_f1: f64,
    /// Digest of the evaluation protocol: label set, datasets, extraction
    /// settings. Equal fingerprints mean directly comparable reports.
    pub fingerprint: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Labeled rows and evaluation split shared by every report of an
/// experiment.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub train: DatasetHandle,
    pub train_rows: Vec<usize>,
    pub val: DatasetHandle,
    pub source: RepresentationSource,
    pub config: EvalConfig,
}

impl EvalSet {
    pub fn new(train: &DatasetHandle, val: DatasetHandle, source: RepresentationSource, config: EvalConfig) -> Self {
        let train_rows = crate::data::label_subset(train, config.label_budget, config.label_seed);
        Self {
            train: train.select(&train_rows),
            train_rows,
            val,
            source,
            config,
        }
    }

    pub fn fingerprint(&self, image_size: usize) -> String {
        let mut h = Sha256::new();
        h.update(self.train.source.as_bytes());
        h.update(self.val.source.as_bytes());
        for &r in &self.train_rows {
            h.update((r as u64).to_le_bytes());
        }
        h.update((self.val.len() as u64).to_le_bytes());
        for &l in self.val.labels().unwrap_or(&[]) {
            h.update((l as u64).to_le_bytes());
        }
        h.update(format!("{:?}|{image_size}|{:?}", self.source, self.config).as_bytes());
        hex::encode(h.finalize())
    }

    pub fn evaluate(&self, backbone: &BackboneParams, phase: EvalPhase, seed: u64) -> Result<EvalReport> {
        let cfg = &self.config;
        let train = extract_embeddings(backbone, &self.train, self.source, cfg.l2_normalize)?;
        let val = extract_embeddings(backbone, &self.val, self.source, cfg.l2_normalize)?;
        let classes = self.train.num_classes().max(self.val.num_classes());
        let knn = knn_classify(&train, &val, cfg.knn_k)?;
        let knn_m = metrics(&knn.predictions, &val.labels, classes)?;
        let probe = linear_probe(&train, &val, &cfg.probe)?;
        let lp_m = metrics(&probe.predictions, &val.labels, classes.max(probe.weight.shape()[0]))?;
        Ok(EvalReport {
            phase,
            seed,
            knn_acc: knn_m.accuracy,
            knn_macro_f1: knn_m.macro_f1,
            lp_acc: lp_m.accuracy,
            lp_macro_f1: lp_m.macro_f1,
            fingerprint: self.fingerprint(backbone.config().image_size),
            warnings: knn.warning.into_iter().collect(),
        })
    }
}
