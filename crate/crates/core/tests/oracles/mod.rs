#![allow(dead_code)]

//! Slow, obviously-correct reference implementations.

use rand::Rng;

/// Full sort of every training row by (similarity desc, row asc), then an
/// unweighted vote resolved toward the smallest class.
pub fn knn_brute_force(train: &[Vec<f64>], labels: &[usize], query: &[Vec<f64>], k: usize) -> Vec<usize> {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        } else {
            v.clone()
        }
    };
    let train: Vec<Vec<f64>> = train.iter().map(unit).collect();
    let k = k.min(train.len());
    let classes = labels.iter().max().unwrap() + 1;
    query
        .iter()
        .map(|q| {
            let q = unit(q);
            let mut ranked: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = vec![0; classes];
            for &(_, i) in &ranked[..k] {
                votes[labels[i]] += 1;
            }
            let top = *votes.iter().max().unwrap();
            votes.iter().position(|&v| v == top).unwrap()
        })
        .collect()
}

/// Accuracy and macro-F1 (percent) read off a confusion matrix.
pub fn confusion_metrics(pred: &[usize], truth: &[usize], classes: usize) -> (f64, f64) {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let trace: usize = (0..classes).map(|c| cm[c][c]).sum();
    let mut f1 = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let row: usize = cm[c].iter().sum();
        let col: usize = cm.iter().map(|r| r[c]).sum();
        if row + col == 0 {
            continue;
        }
        counted += 1;
        f1 += (2 * cm[c][c]) as f64 / (row + col) as f64;
    }
    (100.0 * trace as f64 / pred.len() as f64, 100.0 * f1 / counted as f64)
}

/// Random rows; half the time small integers so exact similarity ties occur.
pub fn random_rows(r: &mut impl Rng, n: usize, dim: usize, integer: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if integer {
                        f64::from(r.random_range(-2i32..=2))
                    } else {
                        f64::from(r.random_range(-1.0f32..1.0))
                    }
                })
                .collect()
        })
        .collect()
}
