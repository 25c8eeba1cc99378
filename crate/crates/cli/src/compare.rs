//! Per-bin recall differences between two reports on the same query set.

use std::path::Path;

use mel_core::eval::{EvalReport, Recall};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub label: String,
    pub queries: usize,
    /// `b − a` at R@1, R@10, R@100; `None` when the row is empty in either report.
    pub delta: Option<Recall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub query_set: String,
    pub bins: Vec<DeltaRow>,
    pub micro: Recall,
    #[serde(rename = "macro")]
    pub macro_avg: Recall,
    pub language_macro: Recall,
}

fn sub(b: &Recall, a: &Recall) -> Recall {
    Recall {
        r1: b.r1 - a.r1,
        r10: b.r10 - a.r10,
        r100: b.r100 - a.r100,
    }
}

/// Signed with three decimals, as in `+0.842`; zero prints as `+0.000`.
pub fn signed(d: f64) -> String {
    let s = format!("{d:+.3}");
    if s == "-0.000" {
        "+0.000".to_string()
    } else {
        s
    }
}

/// Differences `b − a` per bin and for the averages. The reports must share
/// the query set and the bin edges.
pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> CliResult<DeltaTable> {
    let same_bins = a.bins.len() == b.bins.len()
        && a.bins.iter().zip(&b.bins).all(|(x, y)| x.lo == y.lo && x.hi == y.hi);
    if a.query_set != b.query_set || a.total_queries != b.total_queries || !same_bins {
        return Err(CliError::Core(mel_core::Error::QuerySetMismatch));
    }
    let bins = a
        .bins
        .iter()
        .zip(&b.bins)
        .map(|(x, y)| DeltaRow {
            label: x.label.clone(),
            queries: x.queries,
            delta: match (&x.recall, &y.recall) {
                (Some(ra), Some(rb)) => Some(sub(rb, ra)),
                _ => None,
            },
        })
        .collect();
    Ok(DeltaTable {
        query_set: a.query_set.clone(),
        bins,
        micro: sub(&b.micro, &a.micro),
        macro_avg: sub(&b.macro_avg, &a.macro_avg),
        language_macro: sub(&b.language_macro, &a.language_macro),
    })
}

pub fn compare_files(a: &Path, b: &Path) -> CliResult<DeltaTable> {
    compare_runs(&EvalReport::load(a)?, &EvalReport::load(b)?)
}

impl DeltaTable {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16}{:>9}{:>9}{:>9}{:>9}\n", "Bin", "Queries", "ΔR@1", "ΔR@10", "ΔR@100");
        let row = |label: &str, n: String, r: &Recall| {
            format!(
                "{label:<16}{n:>9}{:>9}{:>9}{:>9}\n",
                signed(r.r1),
                signed(r.r10),
                signed(r.r100)
            )
        };
        for b in &self.bins {
            match &b.delta {
                Some(d) => out.push_str(&row(&b.label, b.queries.to_string(), d)),
                None => out.push_str(&format!("{:<16}{:>9}{:>9}{:>9}{:>9}\n", b.label, b.queries, "-", "-", "-")),
            }
        }
        out.push_str(&row("micro-avg", String::new(), &self.micro));
        out.push_str(&row("macro-avg", String::new(), &self.macro_avg));
        out.push_str(&row("lang-macro-avg", String::new(), &self.language_macro));
        out
    }
}
