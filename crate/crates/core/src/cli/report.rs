//! Metrics records, aggregation over runs, and storage arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::selftrain::{Mode, SessionRecord};

pub const METRICS_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One JSON line of a run's metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub format_version: u32,
    pub mode: Mode,
    pub k: usize,
    pub split: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub record: SessionRecord,
}

pub fn metrics_text(lines: &[MetricsLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("metrics serialise"));
        s.push('\n');
    }
    s
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let m: MetricsLine =
                serde_json::from_str(l).map_err(|e| Error::Load(format!("bad metrics line: {e}")))?;
            if m.format_version != METRICS_VERSION {
                return Err(Error::Load(format!("unsupported metrics version {}", m.format_version)));
            }
            Ok(m)
        })
        .collect()
}

/// All metrics files below `dir`, in sorted path order.
pub fn find_metrics(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| config_err!("cannot read {}: {e}", d.display()))?;
        for e in entries {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: Mode,
    pub k: usize,
    pub runs: usize,
    /// Percent.
    pub mean: f64,
    /// Percent, population (ddof = 0).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// `(k, mean(list) - mean(prompt_fn))` in points, where both modes are present.
    pub delta_list_minus_prompt_fn: Vec<(usize, f64)>,
}

/// Final accuracy of each run (its last session), aggregated per (mode, K).
pub fn aggregate(lines: &[MetricsLine]) -> Result<Report> {
    if lines.is_empty() {
        return Err(config_err!("no metrics records found"));
    }
    let mut finals: BTreeMap<(Mode, usize, usize, u64), &MetricsLine> = BTreeMap::new();
    for l in lines {
        let key = (l.mode, l.k, l.split, l.seed);
        match finals.get(&key) {
            Some(prev) if prev.record.session >= l.record.session => {}
            _ => {
                finals.insert(key, l);
            }
        }
    }
    let mut groups: BTreeMap<(usize, Mode), Vec<f64>> = BTreeMap::new();
    for ((mode, k, _, _), l) in &finals {
        groups
            .entry((*k, *mode))
            .or_default()
            .push(100.0 * l.record.eval_accuracy);
    }
    let rows: Vec<ReportRow> = groups
        .iter()
        .map(|(&(k, mode), accs)| {
            let (mean, std) = mean_std(accs);
            ReportRow {
                mode,
                k,
                runs: accs.len(),
                mean,
                std,
            }
        })
        .collect();
    let mut delta = Vec::new();
    for k in rows.iter().map(|r| r.k).collect::<std::collections::BTreeSet<_>>() {
        let find = |m: Mode| rows.iter().find(|r| r.k == k && r.mode == m).map(|r| r.mean);
        if let (Some(l), Some(f)) = (find(Mode::List), find(Mode::PromptFn)) {
            delta.push((k, l - f));
        }
    }
    Ok(Report {
        rows,
        delta_list_minus_prompt_fn: delta,
    })
}

pub fn render(report: &Report) -> String {
    let mut s = String::from("# test accuracy (%) over runs; std is the population std (ddof = 0)\n");
    let _ = writeln!(s, "{:<10} {:>4} {:>5} {:>8} {:>7}", "mode", "K", "runs", "mean", "std");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>5} {:>8.2} {:>7.2}",
            r.mode.name(),
            r.k,
            r.runs,
            r.mean,
            r.std
        );
    }
    for (k, d) in &report.delta_list_minus_prompt_fn {
        let _ = writeln!(s, "delta list - prompt_fn  K={k}: {d:+.2} points");
    }
    s
}

/// Bytes of `tasks` fully tuned copies against one shared model plus
/// per-task tunable parameters, at 8 bytes per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageCosts {
    pub model_params: u64,
    pub tunable_params: u64,
    pub tasks: u64,
    pub full_bytes: u64,
    pub lite_bytes: u64,
    pub ratio: f64,
}

pub fn storage_costs(model_params: u64, tunable_params: u64, tasks: u64) -> StorageCosts {
    let full_bytes = 8 * model_params * tasks;
    let lite_bytes = 8 * (model_params + tunable_params * tasks);
    StorageCosts {
        model_params,
        tunable_params,
        tasks,
        full_bytes,
        lite_bytes,
        ratio: full_bytes as f64 / lite_bytes as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftrain::Phase;

    fn line(mode: Mode, split: usize, session: usize, acc: f64) -> MetricsLine {
        MetricsLine {
            format_version: METRICS_VERSION,
            mode,
            k: 10,
            split,
            seed: 1,
            record: SessionRecord {
                session,
                phase: Phase::Session,
                warmup_kl_end: None,
                zero_weight_frac: None,
                labeled_ft_loss: 0.0,
                eval_accuracy: acc,
                first_labeled_step: None,
                first_meta_step: None,
            },
        }
    }

    #[test]
    fn population_std_example() {
        let (m, s) = mean_std(&[60.0, 62.0, 64.0]);
        assert!((m - 62.0).abs() < 1e-12);
        assert!((s - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[70.0]).1, 0.0);
    }

    #[test]
    fn aggregate_uses_last_session_and_reports_delta() {
        let lines = vec![
            line(Mode::PromptFn, 1, 0, 0.60),
            line(Mode::PromptFn, 2, 0, 0.64),
            line(Mode::List, 1, 0, 0.60),
            line(Mode::List, 1, 3, 0.70),
            line(Mode::List, 2, 3, 0.66),
        ];
        let r = aggregate(&lines).unwrap();
        assert_eq!(r.rows.len(), 2);
        let list = r.rows.iter().find(|r| r.mode == Mode::List).unwrap();
        assert!((list.mean - 68.0).abs() < 1e-9);
        assert_eq!(r.delta_list_minus_prompt_fn.len(), 1);
        assert!((r.delta_list_minus_prompt_fn[0].1 - 6.0).abs() < 1e-9);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let lines = vec![line(Mode::List, 1, 0, 0.5), line(Mode::List, 1, 1, 0.75)];
        assert_eq!(parse_metrics(&metrics_text(&lines)).unwrap(), lines);
    }

    #[test]
    fn storage_illustration() {
        let c = storage_costs(355_000_000, 14_000_000, 100);
        assert_eq!(c.full_bytes, 8 * 35_500_000_000);
        assert_eq!(c.lite_bytes, 8 * 1_755_000_000);
        assert!((c.ratio - 35.5 / 1.755).abs() < 1e-12);
        assert!(storage_costs(355_000_000, 14_000_000, 1).ratio < 1.0);
    }
}
