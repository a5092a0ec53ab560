//! Result rows, their CSV form, and the per-baseline summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, ensure, Context, Result};
use decaf_core::metrics::ScoreSummary;

pub const RESULTS_HEADER: &str = "seed,budget,baseline,metric,scope,diag,off_diag,cc";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub budget: usize,
    pub baseline: String,
    pub metric: String,
    /// Truth variables scored: `all` or `changed`.
    pub scope: String,
    pub diag: f64,
    pub off_diag: f64,
    pub cc: f64,
}

impl ResultRow {
    pub fn new(seed: u64, budget: usize, baseline: &str, scope: &str, s: &ScoreSummary) -> Self {
        ResultRow {
            seed,
            budget,
            baseline: baseline.to_string(),
            metric: s.kind.name().to_string(),
            scope: scope.to_string(),
            diag: s.diag,
            off_diag: s.off_diag,
            cc: s.cc,
        }
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed, r.budget, r.baseline, r.metric, r.scope, r.diag, r.off_diag, r.cc
        )
        .expect("writing to a string");
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        other => bail!("unexpected results header {other:?}"),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 8, "line {}: expected 8 fields, got {}", n + 2, f.len());
            let num = |s: &str| s.parse::<f64>().with_context(|| format!("line {}: bad number {s:?}", n + 2));
            Ok(ResultRow {
                seed: f[0].parse().with_context(|| format!("line {}: bad seed", n + 2))?,
                budget: f[1].parse().with_context(|| format!("line {}: bad budget", n + 2))?,
                baseline: f[2].to_string(),
                metric: f[3].to_string(),
                scope: f[4].to_string(),
                diag: num(f[5])?,
                off_diag: num(f[6])?,
                cc: num(f[7])?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation (`n − 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub baseline: String,
    pub metric: String,
    pub scope: String,
    pub budget: usize,
    pub seeds: usize,
    pub diag: (f64, f64),
    pub off_diag: (f64, f64),
    pub cc: (f64, f64),
}

type GroupKey = (String, String, String, usize);

/// One row per (baseline, metric, scope, budget), in that sort order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.baseline.clone(), r.metric.clone(), r.scope.clone(), r.budget))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((baseline, metric, scope, budget), rs)| {
            let col = |f: fn(&ResultRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                baseline,
                metric,
                scope,
                budget,
                seeds: rs.len(),
                diag: col(|r| r.diag),
                off_diag: col(|r| r.off_diag),
                cc: col(|r| r.cc),
            }
        })
        .collect()
}

/// Summary CSV; `not_applicable` baselines get one marker row each.
pub fn summary_csv(rows: &[SummaryRow], not_applicable: &[String]) -> String {
    let mut out = String::from("baseline,metric,scope,budget,seeds,diag_mean,diag_std,off_diag_mean,off_diag_std,cc_mean,cc_std\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.baseline, r.metric, r.scope, r.budget, r.seeds, r.diag.0, r.diag.1, r.off_diag.0, r.off_diag.1, r.cc.0, r.cc.1
        )
        .expect("writing to a string");
    }
    for b in not_applicable {
        writeln!(out, "{b},n/a,n/a,0,0,n/a,n/a,n/a,n/a,n/a,n/a").expect("writing to a string");
    }
    out
}

/// Plot data: CC against target budget, one series per (baseline, metric, scope).
pub fn plot_csv(rows: &[SummaryRow]) -> String {
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.metric.as_str(), a.scope.as_str(), a.baseline.as_str(), a.budget)
            .cmp(&(b.metric.as_str(), b.scope.as_str(), b.baseline.as_str(), b.budget))
    });
    let mut out = String::from("metric,scope,baseline,budget,cc_mean,cc_std\n");
    for r in sorted {
        writeln!(out, "{},{},{},{},{:.6},{:.6}", r.metric, r.scope, r.baseline, r.budget, r.cc.0, r.cc.1)
            .expect("writing to a string");
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn row(seed: u64, baseline: &str, cc: f64) -> ResultRow {
        ResultRow {
            seed,
            budget: 100,
            baseline: baseline.into(),
            metric: "spearman".into(),
            scope: "all".into(),
            diag: cc,
            off_diag: 0.0,
            cc,
        }
    }

    /// Two-pass variance straight from the definition.
    fn reference_std(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().fold(0.0, |a, b| a + b) / n;
        let mut acc = 0.0;
        for x in v {
            acc += (x - m).powi(2);
        }
        (acc / (n - 1.0)).sqrt()
    }

    #[test]
    fn equal_values_have_zero_std() {
        let rows: Vec<_> = (0..5).map(|s| row(s, "decaf", 0.9)).collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].cc.0 - 0.9).abs() < 1e-12);
        assert_eq!(s[0].cc.1, 0.0);
        assert_eq!(s[0].seeds, 5);
    }

    #[test]
    fn two_baselines_two_rows() {
        let rows = vec![row(0, "0shot", 0.5), row(0, "decaf", 0.8), row(1, "decaf", 0.7)];
        let s = summarize(&rows);
        assert_eq!(s.iter().map(|r| r.baseline.as_str()).collect::<Vec<_>>(), ["0shot", "decaf"]);
        let csv = summary_csv(&s, &["ft".into()]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("ft,n/a"));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(3, "0shot", 0.123456789), row(4, "decaf", 1.0 / 3.0)];
        let text = results_csv(&rows);
        assert!(text.starts_with("seed,budget,baseline,metric,scope,diag,off_diag,cc\n"));
        assert_eq!(parse_results(&text).unwrap(), rows);
        assert!(parse_results("a,b\n").is_err());
        assert!(parse_results(&format!("{RESULTS_HEADER}\n1,2,3\n")).is_err());
    }

    #[test]
    fn plot_has_one_line_per_budget_and_baseline() {
        let mut rows = Vec::new();
        for budget in [100, 200] {
            for b in ["0shot", "decaf"] {
                let mut r = row(0, b, 0.5);
                r.budget = budget;
                rows.push(r);
            }
        }
        let plot = plot_csv(&summarize(&rows));
        let lines: Vec<&str> = plot.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("spearman,all,0shot,100"));
        assert!(lines[2].starts_with("spearman,all,0shot,200"));
    }

    proptest! {
        #[test]
        fn std_matches_two_pass_reference(v in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
            let (m, s) = mean_std(&v);
            let m_ref = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((m - m_ref).abs() <= 1e-12);
            prop_assert!((s - reference_std(&v)).abs() <= 1e-9);
        }
    }
}
