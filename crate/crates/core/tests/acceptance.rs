//! Pass/fail line per acceptance criterion. Runs the full desk-scale
//! experiment, so expect it to take several minutes.

mod common;
mod oracles;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dietcp::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use dietcp::data::sample_cp_subset;
use dietcp::diet::{diet_step, init_head, smoothed_xent, DietBatch, HeadInit, LossConfig};
use dietcp::diet::RepresentationSource;
use dietcp::eval::{knn_classify, metrics, EmbeddingMatrix};
use dietcp::experiment::{
    prepare, run_cp, run_seed, sweep_prepared, train_diet, ExperimentConfig, FreezePlan, Prepared, RunLog, TrainSpec,
    LOG_FILE, META_FILE, POST_FILE, PRE_FILE,
};
use dietcp::optim::{lr_at, phase_at, AdamW, OptimConfig, Phase};
use dietcp::tensor::{Graph, Tensor};
use dietcp::vit::{random_batch, BackboneParams, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let (op_err, op) = common::ops::worst_op_error::<f32>(1e-2).map_err(|e| e.to_string())?;
    let cfg = common::one_block_config();
    let bb = BackboneParams::init(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let head = init_head(cfg.dim, 6, 6, HeadInit::Normal).map_err(|e| e.to_string())?;
    let images = random_batch(4, &cfg, 9);
    let (diet_err, param) = common::diet_grad_check(&bb, &head, &images, &[0, 3, 5, 3], 2e-3).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let detail = format!(
        "worst op error {op_err:.2e} ({op}), DIET loss through 1 block {diet_err:.2e} ({param}), {:.2}s",
        elapsed.as_secs_f64()
    );
    ensure(op_err <= 1e-3 && f64::from(diet_err) <= 1e-3, || format!("error above 1e-3: {detail}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn loss_analytics() -> Outcome {
    // zero-initialized head on a frozen backbone
    let cfg = ViTConfig::default();
    let mut bb = BackboneParams::init(cfg.clone(), 1).map_err(|e| e.to_string())?;
    bb.set_trainable(0).map_err(|e| e.to_string())?;
    let d = 256;
    let mut head = init_head(cfg.dim, d, 0, HeadInit::Zeros).map_err(|e| e.to_string())?;
    let batch = DietBatch {
        images: random_batch(8, &cfg, 2),
        indices: vec![0, 17, 255, 3, 99, 100, 4, 200],
    };
    let mut opt = AdamW::new(&OptimConfig::default());
    let stats = diet_step(&mut bb, &mut head, &batch, &LossConfig::default(), &mut opt, 1e-4).map_err(|e| e.to_string())?;
    let first = (f64::from(stats.loss) - (d as f64).ln()).abs();
    ensure(first <= 1e-6, || format!("first loss off ln D by {first:.2e}"))?;

    // gradient identity and the epsilon = 0 reduction, in f64
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (b, c, eps) = (6, 9, 0.3);
    let z = Tensor::from_fn(vec![b, c], |_| r.random_range(-3.0..3.0));
    let t: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let mut g = Graph::<f64>::new();
    let zv = g.leaf(z.clone());
    let loss = smoothed_xent(&mut g, zv, &t, eps).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let grad = g.grad(zv).ok_or("no gradient")?;
    let mut grad_err = 0.0f64;
    let mut plain = 0.0;
    for row in 0..b {
        let zr = &z.data()[row * c..(row + 1) * c];
        let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + zr.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        plain += (lse - zr[t[row]]) / b as f64;
        for k in 0..c {
            let q = if k == t[row] { 1.0 - eps + eps / c as f64 } else { eps / c as f64 };
            let want = ((zr[k] - lse).exp() - q) / b as f64;
            grad_err = grad_err.max((grad[row * c + k] - want).abs());
        }
    }
    ensure(grad_err <= 1e-6, || format!("softmax - q mismatch {grad_err:.2e}"))?;
    let mut g = Graph::<f64>::new();
    let zc = g.constant(z);
    let l0 = smoothed_xent(&mut g, zc, &t, 0.0).map_err(|e| e.to_string())?;
    let ce_err = (g.value(l0).item().map_err(|e| e.to_string())? - plain).abs();
    ensure(ce_err <= 1e-7, || format!("epsilon = 0 differs from cross-entropy by {ce_err:.2e}"))?;
    Ok(format!(
        "first loss - ln {d} = {first:.2e}, gradient error {grad_err:.2e}, cross-entropy error {ce_err:.2e}"
    ))
}

fn schedule_pins() -> Outcome {
    let cfg = OptimConfig::default();
    let steps_per_epoch = 1000u64.div_ceil(cfg.batch_size as u64);
    let total = steps_per_epoch * cfg.total_epochs as u64;
    let warm = cfg.warmup_steps(total);
    let mid = warm + (total - warm) / 2;
    ensure((total - warm) % 2 == 0, || "midpoint not on a step".into())?;
    let pins = [(0, 0.0), (warm, 1e-4), (total, 0.0), (mid, 0.5e-4)];
    for (step, want) in pins {
        let got = lr_at(step, total, &cfg);
        ensure((got - want).abs() <= 1e-12, || format!("lr_at({step}) = {got:e}, want {want:e}"))?;
    }
    let unfreeze = (0..cfg.total_epochs).find(|&e| phase_at(e, &cfg) == Phase::PartialUnfreeze);
    ensure(unfreeze == Some(7), || format!("unfreeze at {unfreeze:?}, want epoch 7"))?;

    let mut bb = BackboneParams::init(ViTConfig::default(), 0).map_err(|e| e.to_string())?;
    bb.set_trainable(cfg.unfreeze_last_k).map_err(|e| e.to_string())?;
    let trainable: Vec<&str> = bb.params().iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
    let expected: Vec<String> = bb
        .params()
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.starts_with("blocks.2.") || n.starts_with("blocks.3.") || n.starts_with("norm."))
        .collect();
    ensure(trainable == expected.iter().map(String::as_str).collect::<Vec<_>>(), || {
        format!("trainable set {trainable:?}")
    })?;
    Ok(format!(
        "warmup {warm}/{total} steps, lr pins exact to 1e-12, unfreeze at epoch 7, trainable = blocks 2-3 + final norm ({} tensors)",
        trainable.len()
    ))
}

fn to_matrix(rows: &[Vec<f64>], labels: Vec<usize>) -> EmbeddingMatrix {
    let dim = rows[0].len();
    let flat = rows.iter().flatten().map(|&v| v as f32).collect();
    EmbeddingMatrix::new(flat, dim, labels, RepresentationSource::Cls).expect("consistent rows")
}

fn oracle_equivalence() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let (n, m) = (r.random_range(1..=200), r.random_range(1..=200));
        let dim = r.random_range(1..=16);
        let classes = r.random_range(1..=8);
        let k = r.random_range(1..=40);
        let integer = case % 2 == 0;
        let train = oracles::random_rows(&mut r, n, dim, integer);
        let query = oracles::random_rows(&mut r, m, dim, integer);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let want = oracles::knn_brute_force(&train, &labels, &query, k);
        let got = knn_classify(&to_matrix(&train, labels), &to_matrix(&query, vec![0; m]), k).map_err(|e| e.to_string())?;
        ensure(got.predictions == want, || format!("k-NN case {case} (N={n}, M={m}, k={k}) differs"))?;
    }
    for case in 0..1000 {
        let n = r.random_range(1..=500);
        let classes = r.random_range(1..=10);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let got = metrics(&pred, &truth, classes).map_err(|e| e.to_string())?;
        let (acc, f1) = oracles::confusion_metrics(&pred, &truth, classes);
        ensure(got.accuracy == acc && got.macro_f1 == f1, || format!("metrics case {case} differs"))?;
    }
    let mut bb = BackboneParams::init(ViTConfig::default(), 9).map_err(|e| e.to_string())?;
    bb.set_trainable(2).map_err(|e| e.to_string())?;
    let head = init_head(64, 256, 4, HeadInit::Normal).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&bb, Some(&head)).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("c.dcpw");
    save_checkpoint(&path, &bb, Some(&head)).map_err(|e| e.to_string())?;
    let (bb2, head2) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let head2 = head2.ok_or("head lost")?;
    let same = bb.config() == bb2.config()
        && bb.params().iter().zip(bb2.params()).all(|(a, b)| a.value.bit_eq(&b.value))
        && head.weight.value.bit_eq(&head2.weight.value)
        && encode_checkpoint(&bb2, Some(&head2)).map_err(|e| e.to_string())? == bytes
        && std::fs::read(&path).map_err(|e| e.to_string())? == bytes;
    ensure(same, || "checkpoint round trip not bit-exact".into())?;
    let (bb3, none) = decode_checkpoint(&encode_checkpoint(&bb, None).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(none.is_none() && bb3.params().iter().zip(bb.params()).all(|(a, b)| a.value.bit_eq(&b.value)), || {
        "headless round trip differs".into()
    })?;
    Ok("1000 k-NN instances and 1000 label vectors match their oracles exactly; checkpoint round trip bit-exact".into())
}

fn freeze_contract() -> Outcome {
    let cfg = common::small_experiment();
    let (train, _) = cfg.dataset.load(cfg.vit.image_size).map_err(|e| e.to_string())?;
    let subset = sample_cp_subset(&train.without_labels(), 64, 0).map_err(|e| e.to_string())?;
    let start = BackboneParams::init(cfg.vit.clone(), 21).map_err(|e| e.to_string())?;
    let run = |epochs: usize| -> Result<(BackboneParams, RunLog), String> {
        let mut bb = start.clone();
        let optim = OptimConfig {
            total_epochs: epochs,
            lr_max: 1e-3,
            ..cfg.optim.clone()
        };
        let spec = TrainSpec {
            optim: &optim,
            loss: &cfg.loss,
            augment: &cfg.augment,
            plan: FreezePlan::Recipe,
            seed: 0,
            snapshots: None,
        };
        let mut log = RunLog::new(0);
        train_diet(&mut bb, &subset, &spec, &mut log).map_err(|e| e.to_string())?;
        Ok((bb, log))
    };
    let changed = |a: &BackboneParams, b: &BackboneParams| -> Vec<String> {
        a.params()
            .iter()
            .zip(b.params())
            .filter(|(x, y)| !x.value.bit_eq(&y.value))
            .map(|(x, _)| x.name.clone())
            .collect()
    };

    let (five, log) = run(5)?;
    ensure(log.epochs[0].phase == Phase::HeadOnly && log.transitions.len() == 1, || {
        "5-epoch run does not start head-only".into()
    })?;
    let moved = changed(&start, &five);
    let frozen_touched: Vec<&String> = moved
        .iter()
        .filter(|n| !(n.starts_with("blocks.2.") || n.starts_with("blocks.3.") || n.starts_with("norm.")))
        .collect();
    ensure(frozen_touched.is_empty(), || format!("frozen parameters changed: {frozen_touched:?}"))?;
    ensure(!moved.is_empty(), || "unfrozen blocks never changed".into())?;

    // a one-epoch run is exactly the head-only phase of the recipe
    let (one, log) = run(1)?;
    ensure(log.epochs.iter().all(|e| e.phase == Phase::HeadOnly), || "1-epoch run left the head-only phase".into())?;
    let moved_head_only = changed(&start, &one);
    ensure(moved_head_only.is_empty(), || format!("head-only phase changed {moved_head_only:?}"))?;
    Ok(format!(
        "5 epochs: {} of {} backbone tensors moved, all in the last 2 blocks or final norm; head-only phase moved none",
        moved.len(),
        start.params().len()
    ))
}

fn determinism() -> Outcome {
    let mut cfg = common::small_experiment();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut outcomes = Vec::new();
    for d in &dirs {
        cfg.experiment.output_dir = d.path().to_path_buf();
        outcomes.push(run_cp(&cfg).map_err(|e| e.to_string())?);
    }
    let (a, b) = (&outcomes[0][0], &outcomes[1][0]);
    ensure(a.pre == b.pre && a.post == b.post, || "EvalReports differ".into())?;
    ensure(a.log.hash() == b.log.hash(), || "RunLog hashes differ".into())?;
    for file in [PRE_FILE, POST_FILE, LOG_FILE, META_FILE] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("seed-3").join(file));
        let (x, y) = (read(&dirs[0]).map_err(|e| e.to_string())?, read(&dirs[1]).map_err(|e| e.to_string())?);
        if file == LOG_FILE {
            // wall-clock timings are the only permitted difference
            let strip = |bytes: &[u8]| -> Result<RunLog, String> {
                let mut log: RunLog = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
                log.epochs.iter_mut().for_each(|e| e.wall_clock_secs = 0.0);
                Ok(log)
            };
            ensure(strip(&x)? == strip(&y)?, || "run logs differ".into())?;
        } else {
            ensure(x == y, || format!("{file} differs between runs"))?;
        }
    }
    Ok(format!("two runs of seed 3: identical reports, RunLog hash {}", &a.log.hash()[..16]))
}

fn end_to_end(prep: &Prepared, cfg: &ExperimentConfig, started: Instant) -> Outcome {
    let mut lines = Vec::new();
    let mut passing = 0;
    for seed in 0..3 {
        let o = run_seed(prep, cfg, seed, 256, None).map_err(|e| e.to_string())?;
        let dk = o.post.knn_macro_f1 - o.pre.knn_macro_f1;
        let dl = o.post.lp_macro_f1 - o.pre.lp_macro_f1;
        let ok = dk >= 5.0 && dl >= 2.0;
        passing += usize::from(ok);
        lines.push(format!(
            "seed {seed}: k-NN F1 {:.2}->{:.2} ({dk:+.2}), LP F1 {:.2}->{:.2} ({dl:+.2}){}",
            o.pre.knn_macro_f1,
            o.post.knn_macro_f1,
            o.pre.lp_macro_f1,
            o.post.lp_macro_f1,
            if ok { "" } else { " below floor" }
        ));
    }
    let elapsed = started.elapsed();
    let detail = format!("{}; {passing}/3 seeds meet both floors; {:.0}s", lines.join("; "), elapsed.as_secs_f64());
    ensure(passing >= 2, || detail.clone())?;
    ensure(elapsed <= Duration::from_secs(15 * 60), || format!("over 15 minutes: {detail}"))?;
    Ok(detail)
}

fn sweep_shape(prep: &Prepared, cfg: &ExperimentConfig) -> Outcome {
    let table = sweep_prepared(prep, cfg, &[32, 128, 512], None).map_err(|e| e.to_string())?;
    let means: Vec<f64> = table.summary.iter().map(|s| s.post_knn_macro_f1_mean).collect();
    let detail = table
        .summary
        .iter()
        .map(|s| format!("N={}: {:.2}", s.size, s.post_knn_macro_f1_mean))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(means.windows(2).all(|w| w[1] >= w[0]), || format!("not non-decreasing: {detail}"))?;
    Ok(format!("mean post k-NN F1 {detail}"))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    report("gradient integrity", gradient_integrity());
    report("loss analytics", loss_analytics());
    report("schedule pinning", schedule_pins());
    report("oracle equivalence", oracle_equivalence());
    report("freeze contract", freeze_contract());
    report("determinism", determinism());

    let mut cfg = ExperimentConfig::default();
    cfg.experiment.cp_subset_size = 256;
    let started = Instant::now();
    match prepare(&cfg) {
        Ok(prep) => {
            report("end-to-end domain shift", end_to_end(&prep, &cfg, started));
            report("subset-size sweep", sweep_shape(&prep, &cfg));
        }
        Err(e) => {
            report("end-to-end domain shift", Err(e.to_string()));
            report("subset-size sweep", Err(e.to_string()));
        }
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
