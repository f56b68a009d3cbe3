//! Rounds table, pooled table, summary and cross-seed aggregate.

use std::fmt::Write as _;

use fedlora_core::federation::{ExperimentConfig, RoundReport};
use toml::Table;

pub const ROUNDS_HEADER: &str = "round,client,split,loss,accuracy,precision,recall,f1,uplink_bytes,downlink_bytes";
pub const POOLED_HEADER: &str = "round,loss,accuracy,precision,recall,f1,uplink_bytes,downlink_bytes";
pub const AGGREGATE_HEADER: &str =
    "variant,seed,final_accuracy,final_f1,final_pooled_accuracy,round0_pooled_accuracy,uplink_bytes,downlink_bytes";

/// Six significant digits, `%g` style: trailing zeros dropped, exponent form
/// outside `[1e-4, 1e6)`.
pub fn g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    strip_zeros(&format!("{x:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in reports {
        for row in &r.rows {
            let m = &row.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                row.client,
                row.split.as_str(),
                g6(m.mean_loss),
                g6(m.accuracy),
                g6(m.precision),
                g6(m.recall),
                g6(m.f1),
                row.uplink_bytes,
                row.downlink_bytes
            )
            .unwrap();
        }
    }
    out
}

pub fn pooled_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(POOLED_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.pooled;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            g6(m.mean_loss),
            g6(m.accuracy),
            g6(m.precision),
            g6(m.recall),
            g6(m.f1),
            r.uplink_bytes,
            r.downlink_bytes
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub round: u32,
    pub client: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TableError {
    #[error("header mismatch: expected `{ROUNDS_HEADER}`")]
    Header,
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
    #[error("no eval rows")]
    Empty,
}

pub fn parse_rounds(text: &str) -> Result<Vec<Row>, TableError> {
    let mut lines = text.lines();
    if lines.next() != Some(ROUNDS_HEADER) {
        return Err(TableError::Header);
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 2;
        let bad = |reason: &str| TableError::Row {
            line: line_no,
            reason: reason.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad("expected 10 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer"));
        rows.push(Row {
            round: int(f[0])? as u32,
            client: int(f[1])? as usize,
            split: f[2].into(),
            loss: num(f[3])?,
            accuracy: num(f[4])?,
            precision: num(f[5])?,
            recall: num(f[6])?,
            f1: num(f[7])?,
            uplink_bytes: int(f[8])?,
            downlink_bytes: int(f[9])?,
        });
    }
    Ok(rows)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// The `[run]` section: the settings a reader needs next to the numbers.
pub fn run_section(cfg: &ExperimentConfig) -> Table {
    let mut t = Table::new();
    t.insert("mode".into(), cfg.mode.as_str().into());
    t.insert("strategy".into(), cfg.adapter.strategy.as_str().into());
    t.insert("seed".into(), (cfg.seed as i64).into());
    t.insert("clients".into(), (cfg.federation.clients as i64).into());
    t.insert("rounds".into(), i64::from(cfg.federation.rounds).into());
    t.insert("local_epochs".into(), i64::from(cfg.federation.local_epochs).into());
    t.insert("lr".into(), cfg.federation.lr.into());
    t.insert("rank".into(), (cfg.adapter.rank as i64).into());
    let spec = cfg.adapter_spec();
    t.insert("alpha".into(), spec.alpha.into());
    t.insert("scale".into(), spec.scale().into());
    t.insert("aggregator".into(), cfg.federation.aggregator.as_str().into());
    t.insert("mu".into(), cfg.federation.effective_mu().into());
    t
}

/// Summary document computed from the rounds table alone (plus the optional
/// `[run]` section), so `report` reproduces it from files on disk.
pub fn summary(rows: &[Row], run: Option<&Table>) -> Result<String, TableError> {
    let last = rows.iter().map(|r| r.round).max().ok_or(TableError::Empty)?;
    let finals: Vec<&Row> = rows.iter().filter(|r| r.round == last && r.split == "eval").collect();
    if finals.is_empty() {
        return Err(TableError::Empty);
    }
    let mut out = String::new();
    if let Some(run) = run {
        let mut doc = Table::new();
        doc.insert("run".into(), run.clone().into());
        out.push_str(&toml::to_string(&doc).expect("plain values"));
        out.push('\n');
    }
    writeln!(out, "[final]").unwrap();
    writeln!(out, "round = {last}").unwrap();
    writeln!(out, "clients = {}", finals.len()).unwrap();
    writeln!(out, "mean_accuracy = {}", g6(mean(finals.iter().map(|r| r.accuracy)))).unwrap();
    writeln!(out, "mean_precision = {}", g6(mean(finals.iter().map(|r| r.precision)))).unwrap();
    writeln!(out, "mean_recall = {}", g6(mean(finals.iter().map(|r| r.recall)))).unwrap();
    writeln!(out, "mean_f1 = {}", g6(mean(finals.iter().map(|r| r.f1)))).unwrap();
    writeln!(out, "mean_loss = {}", g6(mean(finals.iter().map(|r| r.loss)))).unwrap();
    let up: u64 = rows.iter().map(|r| r.uplink_bytes).sum();
    let down: u64 = rows.iter().map(|r| r.downlink_bytes).sum();
    writeln!(out, "\n[communication]").unwrap();
    writeln!(out, "uplink_bytes = {up}").unwrap();
    writeln!(out, "downlink_bytes = {down}").unwrap();
    writeln!(out, "total_bytes = {}", up + down).unwrap();
    for r in &finals {
        writeln!(out, "\n[[client]]").unwrap();
        writeln!(out, "id = {}", r.client).unwrap();
        writeln!(out, "accuracy = {}", g6(r.accuracy)).unwrap();
        writeln!(out, "precision = {}", g6(r.precision)).unwrap();
        writeln!(out, "recall = {}", g6(r.recall)).unwrap();
        writeln!(out, "f1 = {}", g6(r.f1)).unwrap();
        writeln!(out, "loss = {}", g6(r.loss)).unwrap();
    }
    Ok(out)
}

/// Headline numbers of one finished run, for the cross-seed table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDigest {
    pub variant: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_f1: f64,
    pub final_pooled_accuracy: f64,
    pub round0_pooled_accuracy: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

impl RunDigest {
    pub fn new(variant: &str, seed: u64, reports: &[RoundReport]) -> Self {
        let last = reports.last().expect("round 0 always present");
        Self {
            variant: variant.into(),
            seed,
            final_accuracy: last.mean_accuracy(),
            final_f1: mean(last.eval_rows().map(|r| r.metrics.f1)),
            final_pooled_accuracy: last.pooled.accuracy,
            round0_pooled_accuracy: reports[0].pooled.accuracy,
            uplink_bytes: reports.iter().map(|r| r.uplink_bytes).sum(),
            downlink_bytes: reports.iter().map(|r| r.downlink_bytes).sum(),
        }
    }
}

/// Per-seed rows, then one `mean` row per variant, in first-seen order.
pub fn aggregate_csv(digests: &[RunDigest]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    let row = |out: &mut String, variant: &str, seed: &str, d: [f64; 4], up: u64, down: u64| {
        writeln!(
            out,
            "{variant},{seed},{},{},{},{},{up},{down}",
            g6(d[0]),
            g6(d[1]),
            g6(d[2]),
            g6(d[3])
        )
        .unwrap();
    };
    for d in digests {
        row(
            &mut out,
            &d.variant,
            &d.seed.to_string(),
            [d.final_accuracy, d.final_f1, d.final_pooled_accuracy, d.round0_pooled_accuracy],
            d.uplink_bytes,
            d.downlink_bytes,
        );
    }
    let mut variants: Vec<&str> = Vec::new();
    for d in digests {
        if !variants.contains(&d.variant.as_str()) {
            variants.push(&d.variant);
        }
    }
    for v in variants {
        let group: Vec<&RunDigest> = digests.iter().filter(|d| d.variant == v).collect();
        let n = group.len() as u64;
        row(
            &mut out,
            v,
            "mean",
            [
                mean(group.iter().map(|d| d.final_accuracy)),
                mean(group.iter().map(|d| d.final_f1)),
                mean(group.iter().map(|d| d.final_pooled_accuracy)),
                mean(group.iter().map(|d| d.round0_pooled_accuracy)),
            ],
            group.iter().map(|d| d.uplink_bytes).sum::<u64>() / n,
            group.iter().map(|d| d.downlink_bytes).sum::<u64>() / n,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(g6(0.75), "0.75");
        assert_eq!(g6(1.0), "1");
        assert_eq!(g6(2.0 / 3.0), "0.666667");
        assert_eq!(g6(123456.7), "123457");
        assert_eq!(g6(1234567.0), "1.23457e+06");
        assert_eq!(g6(0.000123456789), "0.000123457");
        assert_eq!(g6(0.0000123456), "1.23456e-05");
        assert_eq!(g6(-0.5), "-0.5");
        assert_eq!(g6(0.0), "0");
        assert_eq!(g6(9.999996), "10");
    }

    #[test]
    fn rounds_table_round_trips() {
        let text = format!("{ROUNDS_HEADER}\n0,0,local,2.1,0.5,0.5,0.5,0.5,0,0\n0,0,eval,2.1,0.5,0.5,0.5,0.5,0,0\n");
        let rows = parse_rounds(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].split, "eval");
        assert_eq!(parse_rounds("round,client\n"), Err(TableError::Header));
    }
}
