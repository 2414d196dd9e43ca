//! Text outputs: assignment files, JSON-lines metrics, CSV confusion
//! matrices and loss curves, and the ablation table.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use comen_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::Switches;
use super::run::{AblationReport, DiscoveryQuality, FoldOutcome};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;

/// `# M=<m> N=<n>` followed by one row of `M` values per sample, 9
/// significant digits.
pub fn format_assignments(p: &Tensor) -> String {
    let (n, m) = (p.shape()[0], p.shape()[1]);
    let mut out = format!("# M={m} N={n}\n");
    for i in 0..n {
        let row: Vec<String> = p.row(i).iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_assignments(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty assignment file".into()))?;
    let bad = || Error::MalformedHeader(format!("expected '# M=<m> N=<n>', got '{header}'"));
    let rest = header.strip_prefix("# ").ok_or_else(bad)?;
    let mut fields = rest.split_whitespace();
    let m: usize = fields
        .next()
        .and_then(|f| f.strip_prefix("M="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(bad)?;
    let n: usize = fields
        .next()
        .and_then(|f| f.strip_prefix("N="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(bad)?;
    if m == 0 || n == 0 {
        return Err(bad());
    }
    let mut data = Vec::with_capacity(n * m);
    let mut rows = 0;
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("assignment row {i}: {e}")))?;
        if vals.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: vals.len(),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    if rows != n {
        return Err(Error::TruncatedPayload {
            expected: n,
            found: rows,
        });
    }
    Ok(Tensor::new(&[n, m], data)?)
}

pub fn write_assignments(p: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_assignments(p))?;
    Ok(())
}

pub fn read_assignments(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_assignments(&fs::read_to_string(path)?)
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config: String,
    pub seed: u64,
    pub held_out: usize,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub bootstrap_nmi: Option<f64>,
    pub bootstrap_matched_accuracy: Option<f64>,
    pub assignment_nmi: Option<f64>,
    pub assignment_matched_accuracy: Option<f64>,
}

impl MetricsRecord {
    pub fn from_outcome(o: &FoldOutcome) -> Self {
        let part = |q: Option<DiscoveryQuality>, f: fn(DiscoveryQuality) -> f64| q.map(f);
        Self {
            config: o.switches.label(),
            seed: o.seed,
            held_out: o.held_out,
            accuracy: o.metrics.accuracy,
            best_epoch: o.best_epoch,
            bootstrap_nmi: part(o.bootstrap_quality, |q| q.nmi),
            bootstrap_matched_accuracy: part(o.bootstrap_quality, |q| q.matched_accuracy),
            assignment_nmi: part(o.assignment_quality, |q| q.nmi),
            assignment_matched_accuracy: part(o.assignment_quality, |q| q.matched_accuracy),
        }
    }
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("metrics record: {e}"))))
        .collect()
}

/// Header `true,<class ids…>`, then one row per true class.
pub fn write_confusion_csv(m: &ConfusionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["true".to_string()];
    header.extend((0..m.classes).map(|k| k.to_string()));
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for (k, row) in m.counts.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Two columns, `epoch,value`.
pub fn write_curve_csv(values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["epoch", "value"])
        .map_err(|e| Error::Io(e.into()))?;
    for (e, v) in values.iter().enumerate() {
        w.write_record([e.to_string(), v.to_string()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        " "
    }
}

/// Markdown table with one row per configuration and one column per fold.
pub fn ablation_table(report: &AblationReport) -> String {
    let mut s = String::from("| SDNorm | ProtoGR | ProtoCCL |");
    for f in &report.folds {
        let _ = write!(s, " D{f} |");
    }
    s.push_str(" Avg |\n|---|---|---|");
    for _ in &report.folds {
        s.push_str("---|");
    }
    s.push_str("---|\n");
    for row in &report.rows {
        let Switches {
            sdnorm,
            protogr,
            protoccl,
        } = row.switches;
        let _ = write!(
            s,
            "| {} | {} | {} |",
            mark(sdnorm),
            mark(protogr),
            mark(protoccl)
        );
        for v in row.fold_means() {
            let _ = write!(s, " {:.2} |", 100.0 * v);
        }
        let _ = writeln!(s, " {:.2} |", 100.0 * row.mean());
    }
    s
}

/// Summary of metrics records: mean accuracy per configuration.
pub fn summarize(records: &[MetricsRecord]) -> String {
    let mut configs: Vec<&str> = Vec::new();
    for r in records {
        if !configs.contains(&r.config.as_str()) {
            configs.push(&r.config);
        }
    }
    let mut s = String::from("config,runs,mean_accuracy\n");
    for c in configs {
        let accs: Vec<f64> = records
            .iter()
            .filter(|r| r.config == c)
            .map(|r| r.accuracy)
            .collect();
        let _ = writeln!(
            s,
            "{c},{},{:.6}",
            accs.len(),
            accs.iter().sum::<f64>() / accs.len() as f64
        );
    }
    s
}

/// Writes metrics, per-fold confusion matrices, loss curves and the table.
pub fn write_ablation(report: &AblationReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let records: Vec<MetricsRecord> = report
        .outcomes
        .iter()
        .map(MetricsRecord::from_outcome)
        .collect();
    write_jsonl(&records, dir.join("metrics.jsonl"))?;
    for o in &report.outcomes {
        let stem = format!(
            "{}_seed{}_fold{}",
            o.switches.label().replace('+', "-"),
            o.seed,
            o.held_out
        );
        write_confusion_csv(
            &o.metrics.confusion,
            dir.join(format!("confusion_{stem}.csv")),
        )?;
        let losses: Vec<f64> = o.stage2_log.iter().map(|e| e.loss).collect();
        write_curve_csv(&losses, dir.join(format!("loss_{stem}.csv")))?;
        if !o.stage1_log.is_empty() {
            let ent: Vec<f64> = o.stage1_log.iter().map(|e| e.entropy).collect();
            write_curve_csv(&ent, dir.join(format!("entropy_{stem}.csv")))?;
        }
    }
    fs::write(dir.join("ablation.md"), ablation_table(report))?;
    Ok(())
}
