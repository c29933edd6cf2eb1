use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{DiagnosisClass, ExamKind, ExamSet};
use crate::engine::{InstitutionProfile, StrategyTrace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamUsage {
    pub kind: ExamKind,
    pub requests: usize,
    pub grants: usize,
    pub refusals: usize,
}

/// Request, grant and refusal totals per exam kind, in canonical order.
pub fn exam_usage_table<'a, I>(traces: I) -> Result<Vec<ExamUsage>>
where
    I: IntoIterator<Item = &'a StrategyTrace>,
{
    let mut rows: Vec<ExamUsage> = ExamKind::ALL.iter().map(|k| ExamUsage { kind: *k, requests: 0, grants: 0, refusals: 0 }).collect();
    let mut n = 0;
    for t in traces {
        n += 1;
        for r in &t.requested {
            let row = &mut rows[r.kind.index()];
            row.requests += 1;
            if r.granted {
                row.grants += 1;
            } else {
                row.refusals += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusRow {
    pub strategy: ExamSet,
    pub counts: BTreeMap<DiagnosisClass, usize>,
    pub total: usize,
}

/// Distinct granted-exam sets with counts per final label, most frequent
/// first (ties by set bits).
pub fn strategy_census<'a, I>(traces: I) -> Result<Vec<CensusRow>>
where
    I: IntoIterator<Item = &'a StrategyTrace>,
{
    let mut map: BTreeMap<ExamSet, BTreeMap<DiagnosisClass, usize>> = BTreeMap::new();
    for t in traces {
        *map.entry(t.granted()).or_default().entry(t.final_label.class).or_default() += 1;
    }
    if map.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows: Vec<CensusRow> = map
        .into_iter()
        .map(|(strategy, counts)| CensusRow { strategy, total: counts.values().sum(), counts })
        .collect();
    rows.sort_by(|a, b| b.total.cmp(&a.total).then(a.strategy.cmp(&b.strategy)));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstitutionRow {
    pub executable: ExamSet,
    pub count: usize,
}

/// Distinct capability profiles with how many sites share each.
pub fn institution_census(profiles: &[InstitutionProfile]) -> Vec<InstitutionRow> {
    let mut map: BTreeMap<ExamSet, usize> = BTreeMap::new();
    for p in profiles {
        *map.entry(p.executable()).or_default() += 1;
    }
    let mut rows: Vec<InstitutionRow> = map.into_iter().map(|(executable, count)| InstitutionRow { executable, count }).collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.executable.cmp(&b.executable)));
    rows
}

/// Column-aligned plain-text table.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut headers.iter().copied());
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}

pub fn render_exam_usage(rows: &[ExamUsage]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.kind.to_string(), r.requests.to_string(), r.grants.to_string(), r.refusals.to_string()])
        .collect();
    render_table(&["exam", "requests", "grants", "refusals"], &body)
}

pub fn render_census(rows: &[CensusRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.strategy.to_string()];
            v.extend(DiagnosisClass::ALL.iter().map(|c| r.counts.get(c).copied().unwrap_or(0).to_string()));
            v.push(r.total.to_string());
            v
        })
        .collect();
    render_table(&["strategy", "AD", "CN", "Unknown", "total"], &body)
}
