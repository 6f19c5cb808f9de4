use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{write_json, RunMeta, META_FILE, POST_FILE, PRE_FILE};
use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const REPORT_FILE: &str = "report.json";

/// Mean and sample standard deviation (`N − 1` denominator; `None` for a
/// single value).
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    if xs.is_empty() {
        return (f64::NAN, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// `+10.00` / `-3.25`.
pub fn signed(x: f64) -> String {
    format!("{x:+.2}")
}

fn with_std(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.2}±{s:.2}"),
        None => format!("{mean:.2}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pre_mean: f64,
    pub pre_std: Option<f64>,
    pub post_mean: f64,
    pub post_std: Option<f64>,
    pub delta_mean: f64,
    pub delta_std: Option<f64>,
}

impl MetricSummary {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let pre: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let post: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let delta: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
        let (pre_mean, pre_std) = mean_std(&pre);
        let (post_mean, post_std) = mean_std(&post);
        let (delta_mean, delta_std) = mean_std(&delta);
        Self {
            pre_mean,
            pre_std,
            post_mean,
            post_std,
            delta_mean,
            delta_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub dataset: String,
    /// Directory holding the seed runs, relative to the report root.
    pub group: String,
    pub subset_size: usize,
    pub seeds: Vec<u64>,
    pub knn_acc: MetricSummary,
    pub knn_macro_f1: MetricSummary,
    pub lp_acc: MetricSummary,
    pub lp_macro_f1: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregate {
    pub groups: Vec<GroupSummary>,
    /// Run directories that could not be read, with the reason.
    pub problems: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub aggregate: ReportAggregate,
    pub text: String,
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == META_FILE) {
            out.push(dir.to_path_buf());
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Summarizes every run under `root`, prints nothing, writes `report.json`.
/// Unreadable runs are listed under `problems` and skipped.
pub fn report(root: &Path) -> Result<Report> {
    if !root.is_dir() {
        return Err(Error::Report(format!("no runs found: {} is not a directory", root.display())));
    }
    let mut dirs = Vec::new();
    find_runs(root, &mut dirs)?;
    let mut problems = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<(u64, EvalReport, EvalReport)>> = BTreeMap::new();
    for dir in &dirs {
        let loaded = (|| {
            let meta: RunMeta = read_json(&dir.join(META_FILE))?;
            let pre: EvalReport = read_json(&dir.join(PRE_FILE))?;
            let post: EvalReport = read_json(&dir.join(POST_FILE))?;
            Ok::<_, String>((meta, pre, post))
        })();
        match loaded {
            Ok((meta, pre, post)) => {
                let group = dir
                    .parent()
                    .and_then(|p| p.strip_prefix(root).ok())
                    .map(|p| p.display().to_string())
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| ".".into());
                groups
                    .entry((meta.dataset, group, meta.subset_size))
                    .or_default()
                    .push((meta.seed, pre, post));
            }
            Err(msg) => problems.push(msg),
        }
    }
    if groups.is_empty() {
        let mut msg = format!("no runs found in {}", root.display());
        if !problems.is_empty() {
            msg.push_str(&format!(" ({} unreadable: {})", problems.len(), problems.join("; ")));
        }
        return Err(Error::Report(msg));
    }

    let mut summaries = Vec::new();
    for ((dataset, group, subset_size), mut runs) in groups {
        runs.sort_by_key(|r| r.0);
        let pairs = |f: fn(&EvalReport) -> f64| runs.iter().map(|(_, a, b)| (f(a), f(b))).collect::<Vec<_>>();
        summaries.push(GroupSummary {
            dataset,
            group,
            subset_size,
            seeds: runs.iter().map(|r| r.0).collect(),
            knn_acc: MetricSummary::from_pairs(&pairs(|r| r.knn_acc)),
            knn_macro_f1: MetricSummary::from_pairs(&pairs(|r| r.knn_macro_f1)),
            lp_acc: MetricSummary::from_pairs(&pairs(|r| r.lp_acc)),
            lp_macro_f1: MetricSummary::from_pairs(&pairs(|r| r.lp_macro_f1)),
        });
    }
    let aggregate = ReportAggregate {
        groups: summaries,
        problems,
    };
    write_json(&root.join(REPORT_FILE), &aggregate)?;
    let text = render(&aggregate);
    Ok(Report { aggregate, text })
}

fn render(agg: &ReportAggregate) -> String {
    let mut s = String::new();
    for g in &agg.groups {
        s.push_str(&format!(
            "{} [{}] subset {} seeds {:?}\n",
            g.dataset, g.group, g.subset_size, g.seeds
        ));
        for (name, m) in [
            ("k-NN acc", &g.knn_acc),
            ("k-NN F1", &g.knn_macro_f1),
            ("LP acc", &g.lp_acc),
            ("LP F1", &g.lp_macro_f1),
        ] {
            s.push_str(&format!(
                "  {name:<9} pre {:>13}  post {:>13}  ({})\n",
                with_std(m.pre_mean, m.pre_std),
                with_std(m.post_mean, m.post_std),
                signed(m.delta_mean)
            ));
        }
    }
    for p in &agg.problems {
        s.push_str(&format!("skipped: {p}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_and_signs() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, None));
        assert_eq!(signed(10.0), "+10.00");
        assert_eq!(signed(-3.254), "-3.25");
        assert_eq!(with_std(50.0, Some(1.234)), "50.00±1.23");
    }

    #[test]
    fn empty_directory_has_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no runs found"), "{err}");
    }
}
