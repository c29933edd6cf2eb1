//! Core data model: examination kinds, visits, labels, strategies and
//! observations, plus the fixed-width flattening every model consumes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-examination feature width.
pub const DEFAULT_WIDTH: usize = 2090;

/// Number of known diagnostic classes (AD, CN).
pub const KNOWN_CLASSES: usize = 2;

/// Number of examinations that can be recommended (every kind except Base).
pub const RECOMMENDABLE: usize = 12;

/// The thirteen examination categories in canonical (cheap to expensive) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExamKind {
    Base,
    Cog,
    CE,
    Neur,
    FB,
    PE,
    Blood,
    Urine,
    MRI,
    FDG,
    AV45,
    Gene,
    CSF,
}

impl ExamKind {
    pub const COUNT: usize = 13;

    pub const ALL: [ExamKind; 13] = [
        ExamKind::Base,
        ExamKind::Cog,
        ExamKind::CE,
        ExamKind::Neur,
        ExamKind::FB,
        ExamKind::PE,
        ExamKind::Blood,
        ExamKind::Urine,
        ExamKind::MRI,
        ExamKind::FDG,
        ExamKind::AV45,
        ExamKind::Gene,
        ExamKind::CSF,
    ];

    /// Position in canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ExamKind> {
        Self::ALL.get(i).copied()
    }

    /// Default cost rank; Base is cheapest, CSF most expensive.
    pub fn cost_rank(self) -> usize {
        self.index()
    }

    /// Index among the twelve recommendable kinds, `None` for Base.
    pub fn action_index(self) -> Option<usize> {
        match self {
            ExamKind::Base => None,
            k => Some(k.index() - 1),
        }
    }

    pub fn from_action_index(i: usize) -> Option<ExamKind> {
        if i < RECOMMENDABLE {
            Self::from_index(i + 1)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExamKind::Base => "Base",
            ExamKind::Cog => "Cog",
            ExamKind::CE => "CE",
            ExamKind::Neur => "Neur",
            ExamKind::FB => "FB",
            ExamKind::PE => "PE",
            ExamKind::Blood => "Blood",
            ExamKind::Urine => "Urine",
            ExamKind::MRI => "MRI",
            ExamKind::FDG => "FDG",
            ExamKind::AV45 => "AV45",
            ExamKind::Gene => "Gene",
            ExamKind::CSF => "CSF",
        }
    }

    /// Recommendable kinds in canonical order.
    pub fn recommendable() -> impl Iterator<Item = ExamKind> {
        Self::ALL.into_iter().skip(1)
    }
}

impl fmt::Display for ExamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Precondition(format!("unknown examination kind {s:?}")))
    }
}

/// A set of examination kinds stored as a 13-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct ExamSet(u16);

impl ExamSet {
    pub const EMPTY: ExamSet = ExamSet(0);

    pub fn all() -> ExamSet {
        ExamSet((1 << ExamKind::COUNT) - 1)
    }

    pub fn base() -> ExamSet {
        ExamSet::EMPTY.with(ExamKind::Base)
    }

    pub fn from_bits(bits: u16) -> ExamSet {
        ExamSet(bits & ((1 << ExamKind::COUNT) - 1))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, k: ExamKind) -> bool {
        self.0 & (1 << k.index()) != 0
    }

    pub fn insert(&mut self, k: ExamKind) {
        self.0 |= 1 << k.index();
    }

    pub fn remove(&mut self, k: ExamKind) {
        self.0 &= !(1 << k.index());
    }

    pub fn with(mut self, k: ExamKind) -> ExamSet {
        self.insert(k);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ExamSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Strict subset.
    pub fn is_proper_subset(self, other: ExamSet) -> bool {
        self.is_subset(other) && self != other
    }

    pub fn difference(self, other: ExamSet) -> ExamSet {
        ExamSet(self.0 & !other.0)
    }

    pub fn union(self, other: ExamSet) -> ExamSet {
        ExamSet(self.0 | other.0)
    }

    pub fn intersection(self, other: ExamSet) -> ExamSet {
        ExamSet(self.0 & other.0)
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = ExamKind> {
        ExamKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    pub fn kinds(self) -> Vec<ExamKind> {
        self.iter().collect()
    }
}

impl FromIterator<ExamKind> for ExamSet {
    fn from_iter<I: IntoIterator<Item = ExamKind>>(iter: I) -> Self {
        let mut s = ExamSet::EMPTY;
        for k in iter {
            s.insert(k);
        }
        s
    }
}

impl fmt::Display for ExamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(ExamKind::name).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

impl Serialize for ExamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ExamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let kinds = Vec::<ExamKind>::deserialize(d)?;
        Ok(kinds.into_iter().collect())
    }
}

/// One examination's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureRow(pub Vec<f64>);

impl FeatureRow {
    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Diagnostic class. `Unknown` covers every subtype absent from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiagnosisClass {
    AD,
    CN,
    Unknown,
}

impl DiagnosisClass {
    /// Index among known classes, `None` for Unknown.
    pub fn known_index(self) -> Option<usize> {
        match self {
            DiagnosisClass::AD => Some(0),
            DiagnosisClass::CN => Some(1),
            DiagnosisClass::Unknown => None,
        }
    }

    pub fn from_known_index(i: usize) -> Option<DiagnosisClass> {
        match i {
            0 => Some(DiagnosisClass::AD),
            1 => Some(DiagnosisClass::CN),
            _ => None,
        }
    }

    /// Position in threshold order (AD, CN, Unknown).
    pub fn threshold_index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DiagnosisClass::AD => "AD",
            DiagnosisClass::CN => "CN",
            DiagnosisClass::Unknown => "Unknown",
        }
    }

    pub const ALL: [DiagnosisClass; 3] = [DiagnosisClass::AD, DiagnosisClass::CN, DiagnosisClass::Unknown];
}

impl fmt::Display for DiagnosisClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisLabel {
    pub class: DiagnosisClass,
    /// Held-out subtype (e.g. MCI, SMC), kept for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_subtype: Option<String>,
}

impl DiagnosisLabel {
    pub fn known(class: DiagnosisClass) -> Self {
        DiagnosisLabel { class, true_subtype: None }
    }

    pub fn unknown_subtype(subtype: impl Into<String>) -> Self {
        DiagnosisLabel {
            class: DiagnosisClass::Unknown,
            true_subtype: Some(subtype.into()),
        }
    }
}

/// Conversions between the two probability layouts used in the pipeline.
///
/// OpenMax scoring produces `[unknown, AD, CN]` (unknown first), while the
/// decision loop scans thresholds in `[AD, CN, unknown]` order (unknown last).
pub mod layout {
    /// `[unknown, k_1, .., k_L]` to `[k_1, .., k_L, unknown]`.
    pub fn to_threshold_order(openmax: &[f64]) -> Vec<f64> {
        let mut out = openmax[1..].to_vec();
        out.push(openmax[0]);
        out
    }

    /// Inverse of [`to_threshold_order`].
    pub fn to_openmax_order(threshold: &[f64]) -> Vec<f64> {
        let n = threshold.len();
        let mut out = Vec::with_capacity(n);
        out.push(threshold[n - 1]);
        out.extend_from_slice(&threshold[..n - 1]);
        out
    }
}

/// One visit of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRecord {
    pub subject_id: String,
    pub visit_index: u32,
    pub label: DiagnosisLabel,
    pub rows: BTreeMap<ExamKind, FeatureRow>,
}

/// A single invariant violation found by [`validate_visit`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BaseAbsent,
    WrongWidth { kind: ExamKind, expected: usize, found: usize },
    NonFinite { kind: ExamKind, position: usize },
    SubtypeOnKnownClass,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BaseAbsent => f.write_str("Base absent"),
            Violation::WrongWidth { kind, expected, found } => {
                write!(f, "wrong width for {kind}: expected {expected}, found {found}")
            }
            Violation::NonFinite { kind, position } => {
                write!(f, "non-finite value in {kind} at {position}")
            }
            Violation::SubtypeOnKnownClass => f.write_str("subtype set on a known class"),
        }
    }
}

/// Returns every invariant violation of `v`; an empty list means valid.
pub fn validate_visit(v: &VisitRecord, width: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if !v.rows.contains_key(&ExamKind::Base) {
        out.push(Violation::BaseAbsent);
    }
    for (kind, row) in &v.rows {
        if row.width() != width {
            out.push(Violation::WrongWidth {
                kind: *kind,
                expected: width,
                found: row.width(),
            });
        }
        if let Some(position) = row.values().iter().position(|x| !x.is_finite()) {
            out.push(Violation::NonFinite { kind: *kind, position });
        }
    }
    if v.label.true_subtype.is_some() && v.label.class != DiagnosisClass::Unknown {
        out.push(Violation::SubtypeOnKnownClass);
    }
    out
}

impl VisitRecord {
    pub fn kinds(&self) -> ExamSet {
        self.rows.keys().copied().collect()
    }

    pub fn width(&self) -> Option<usize> {
        self.rows.values().next().map(FeatureRow::width)
    }

    /// Observation restricted to the kinds in `subset`.
    pub fn observe(&self, subset: ExamSet, pred: [f64; 3]) -> Observation {
        Observation {
            rows: self
                .rows
                .iter()
                .filter(|(k, _)| subset.contains(**k))
                .map(|(k, r)| (*k, r.clone()))
                .collect(),
            pred,
        }
    }

    /// Flattens the rows in `subset`, borrowing from this visit.
    pub fn flatten_subset(&self, subset: ExamSet) -> Result<FlatInput> {
        flatten_rows(
            self.rows
                .iter()
                .filter(|(k, _)| subset.contains(**k))
                .map(|(k, r)| (*k, r.values())),
        )
    }
}

/// The set of diagnostic strategies derived from a visit.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StrategySet {
    pub strategies: Vec<ExamSet>,
}

impl StrategySet {
    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExamSet> {
        self.strategies.iter()
    }
}

/// Data currently available plus the intermediate diagnosis, in
/// `[AD, CN, unknown]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rows: BTreeMap<ExamKind, FeatureRow>,
    pub pred: [f64; 3],
}

impl Observation {
    pub fn kinds(&self) -> ExamSet {
        self.rows.keys().copied().collect()
    }

    pub fn flatten(&self) -> Result<FlatInput> {
        flatten_rows(self.rows.iter().map(|(k, r)| (*k, r.values())))
    }

    /// Checks the probability-vector invariant on `pred`.
    pub fn pred_is_normalized(&self) -> bool {
        self.pred.iter().all(|p| (0.0..=1.0).contains(p)) && (self.pred.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

/// An (observation, action, reward) training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct OarTuple {
    pub obs: Observation,
    pub action: ExamSet,
    pub reward: f64,
}

/// Stacked rows in canonical order with a presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatInput {
    pub width: usize,
    /// `kinds.len() * width` values, row-major.
    pub data: Vec<f64>,
    pub kinds: Vec<ExamKind>,
    pub mask: [bool; ExamKind::COUNT],
}

impl FlatInput {
    pub fn n_rows(&self) -> usize {
        self.kinds.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Fixed-size dense vector: all thirteen row slots (absent rows zeroed)
    /// followed by the presence mask.
    pub fn dense_input(&self) -> Vec<f64> {
        let mut out = vec![0.0; dense_input_dim(self.width)];
        for (i, k) in self.kinds.iter().enumerate() {
            let start = k.index() * self.width;
            out[start..start + self.width].copy_from_slice(self.row(i));
        }
        let mask_start = ExamKind::COUNT * self.width;
        for (j, present) in self.mask.iter().enumerate() {
            if *present {
                out[mask_start + j] = 1.0;
            }
        }
        out
    }

    /// Per-row sequence input: features followed by a one-hot of the kind.
    pub fn sequence_input(&self) -> Vec<Vec<f64>> {
        self.kinds
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let mut v = Vec::with_capacity(self.width + ExamKind::COUNT);
                v.extend_from_slice(self.row(i));
                v.extend((0..ExamKind::COUNT).map(|j| if j == k.index() { 1.0 } else { 0.0 }));
                v
            })
            .collect()
    }
}

/// Width of [`FlatInput::dense_input`] for a feature width.
pub fn dense_input_dim(width: usize) -> usize {
    ExamKind::COUNT * width + ExamKind::COUNT
}

/// Width of each [`FlatInput::sequence_input`] row.
pub fn sequence_row_dim(width: usize) -> usize {
    width + ExamKind::COUNT
}

/// Stacks rows in canonical order. Fails on an empty observation or a width
/// mismatch between rows.
pub fn flatten_rows<'a, I>(rows: I) -> Result<FlatInput>
where
    I: IntoIterator<Item = (ExamKind, &'a [f64])>,
{
    let mut collected: Vec<(ExamKind, &[f64])> = rows.into_iter().collect();
    if collected.is_empty() {
        return Err(Error::MissingBase);
    }
    collected.sort_by_key(|(k, _)| *k);
    let width = collected[0].1.len();
    let mut data = Vec::with_capacity(width * collected.len());
    let mut kinds = Vec::with_capacity(collected.len());
    let mut mask = [false; ExamKind::COUNT];
    for (k, values) in collected {
        if values.len() != width {
            return Err(Error::WidthMismatch { expected: width, found: values.len() });
        }
        if mask[k.index()] {
            return Err(Error::Precondition(format!("duplicate row for {k}")));
        }
        mask[k.index()] = true;
        kinds.push(k);
        data.extend_from_slice(values);
    }
    Ok(FlatInput { width, data, kinds, mask })
}

/// Flattens an observation with an explicit kind order; rows are emitted in
/// the order given, restricted to kinds present.
pub fn flatten(obs: &Observation, order: &[ExamKind]) -> Result<FlatInput> {
    if obs.rows.is_empty() {
        return Err(Error::MissingBase);
    }
    let mut width = None;
    let mut data = Vec::new();
    let mut kinds = Vec::new();
    let mut mask = [false; ExamKind::COUNT];
    for k in order {
        if let Some(row) = obs.rows.get(k) {
            let w = *width.get_or_insert(row.width());
            if row.width() != w {
                return Err(Error::WidthMismatch { expected: w, found: row.width() });
            }
            if mask[k.index()] {
                continue;
            }
            mask[k.index()] = true;
            kinds.push(*k);
            data.extend_from_slice(row.values());
        }
    }
    let width = width.ok_or(Error::MissingBase)?;
    Ok(FlatInput { width, data, kinds, mask })
}

// ---------------------------------------------------------------------------
// Cohort files: JSON Lines, one visit per line.

#[derive(Serialize, Deserialize)]
struct VisitLine {
    subject_id: String,
    visit_index: u32,
    label: DiagnosisClass,
    subtype: Option<String>,
    rows: BTreeMap<ExamKind, Vec<f64>>,
}

impl From<&VisitRecord> for VisitLine {
    fn from(v: &VisitRecord) -> Self {
        VisitLine {
            subject_id: v.subject_id.clone(),
            visit_index: v.visit_index,
            label: v.label.class,
            subtype: v.label.true_subtype.clone(),
            rows: v.rows.iter().map(|(k, r)| (*k, r.0.clone())).collect(),
        }
    }
}

impl From<VisitLine> for VisitRecord {
    fn from(l: VisitLine) -> Self {
        VisitRecord {
            subject_id: l.subject_id,
            visit_index: l.visit_index,
            label: DiagnosisLabel {
                class: l.label,
                true_subtype: l.subtype,
            },
            rows: l.rows.into_iter().map(|(k, r)| (k, FeatureRow(r))).collect(),
        }
    }
}

pub fn write_cohort<W: Write>(mut w: W, visits: &[VisitRecord]) -> Result<()> {
    for v in visits {
        serde_json::to_writer(&mut w, &VisitLine::from(v))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cohort<R: BufRead>(r: R) -> Result<Vec<VisitRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: VisitLine = serde_json::from_str(&line)?;
        out.push(parsed.into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(w: usize, v: f64) -> FeatureRow {
        FeatureRow(vec![v; w])
    }

    fn visit(kinds: &[ExamKind], w: usize) -> VisitRecord {
        VisitRecord {
            subject_id: "s1".into(),
            visit_index: 0,
            label: DiagnosisLabel::known(DiagnosisClass::AD),
            rows: kinds.iter().map(|k| (*k, row(w, k.index() as f64))).collect(),
        }
    }

    #[test]
    fn exam_kinds_are_ordered_and_counted() {
        assert_eq!(ExamKind::ALL.len(), 13);
        assert_eq!(ExamKind::recommendable().count(), RECOMMENDABLE);
        assert!(ExamKind::ALL.iter().all(|k| k.cost_rank() >= ExamKind::Base.cost_rank()));
        for w in ExamKind::ALL.windows(2) {
            assert!(w[0].cost_rank() < w[1].cost_rank());
        }
        assert_eq!(ExamKind::from_action_index(7), Some(ExamKind::MRI));
        assert_eq!(ExamKind::MRI.action_index(), Some(7));
        assert_eq!("csf".parse::<ExamKind>().unwrap(), ExamKind::CSF);
    }

    #[test]
    fn minimal_visit_is_valid() {
        assert!(validate_visit(&visit(&[ExamKind::Base], 8), 8).is_empty());
    }

    #[test]
    fn missing_base_is_reported() {
        let v = visit(&[ExamKind::Cog], 8);
        let errs = validate_visit(&v, 8);
        assert_eq!(errs, vec![Violation::BaseAbsent]);
        assert_eq!(errs[0].to_string(), "Base absent");
    }

    #[test]
    fn nan_is_reported() {
        let mut v = visit(&[ExamKind::Base, ExamKind::MRI], 8);
        v.rows.get_mut(&ExamKind::MRI).unwrap().0[3] = f64::NAN;
        let errs = validate_visit(&v, 8);
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().starts_with("non-finite value"));
    }

    #[test]
    fn wrong_width_is_reported() {
        let v = visit(&[ExamKind::Base], 7);
        assert!(matches!(validate_visit(&v, 8)[0], Violation::WrongWidth { .. }));
    }

    #[test]
    fn flatten_base_only() {
        let v = visit(&[ExamKind::Base], 8);
        let f = flatten(&v.observe(ExamSet::all(), [0.0, 0.0, 1.0]), &ExamKind::ALL).unwrap();
        assert_eq!(f.n_rows(), 1);
        assert_eq!(f.data.len(), 8);
        let mut expected = [false; 13];
        expected[0] = true;
        assert_eq!(f.mask, expected);
    }

    #[test]
    fn flatten_is_canonical() {
        let v = visit(&[ExamKind::MRI, ExamKind::Base, ExamKind::Cog], 4);
        let f = v.flatten_subset(ExamSet::all()).unwrap();
        assert_eq!(f.kinds, vec![ExamKind::Base, ExamKind::Cog, ExamKind::MRI]);
        assert_eq!(f.row(2), &[8.0; 4]);
        assert_eq!(f.dense_input().len(), dense_input_dim(4));
    }

    #[test]
    fn flatten_empty_fails() {
        let obs = Observation { rows: BTreeMap::new(), pred: [0.0, 0.0, 1.0] };
        assert!(flatten(&obs, &ExamKind::ALL).is_err());
        assert!(obs.flatten().is_err());
    }

    #[test]
    fn flatten_width_mismatch_fails() {
        let mut rows = BTreeMap::new();
        rows.insert(ExamKind::Base, row(4, 0.0));
        rows.insert(ExamKind::Cog, row(5, 0.0));
        let obs = Observation { rows, pred: [0.0, 0.0, 1.0] };
        assert!(matches!(obs.flatten(), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn layout_round_trip() {
        let om = [0.1, 0.6, 0.3];
        let th = layout::to_threshold_order(&om);
        assert_eq!(th, vec![0.6, 0.3, 0.1]);
        assert_eq!(layout::to_openmax_order(&th), om.to_vec());
    }

    #[test]
    fn cohort_jsonl_keys_are_ordered() {
        let mut v = visit(&[ExamKind::Cog, ExamKind::Base], 2);
        v.label = DiagnosisLabel::unknown_subtype("MCI");
        let mut buf = Vec::new();
        write_cohort(&mut buf, std::slice::from_ref(&v)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "{\"subject_id\":\"s1\",\"visit_index\":0,\"label\":\"Unknown\",\"subtype\":\"MCI\",\
             \"rows\":{\"Base\":[0.0,0.0],\"Cog\":[1.0,1.0]}}\n"
        );
        let back = read_cohort(&buf[..]).unwrap();
        assert_eq!(back, vec![v]);
    }

    proptest! {
        #[test]
        fn flatten_ignores_insertion_order(perm in Just((0..13usize).collect::<Vec<_>>()).prop_shuffle(), n in 1usize..13) {
            let kinds: Vec<ExamKind> = perm.iter().take(n).map(|i| ExamKind::ALL[*i]).collect();
            let mut a = BTreeMap::new();
            for k in &kinds { a.insert(*k, row(3, k.index() as f64 + 0.5)); }
            let mut b = BTreeMap::new();
            for k in kinds.iter().rev() { b.insert(*k, row(3, k.index() as f64 + 0.5)); }
            let fa = Observation { rows: a, pred: [0.0, 0.0, 1.0] }.flatten().unwrap();
            let fb = Observation { rows: b, pred: [0.0, 0.0, 1.0] }.flatten().unwrap();
            prop_assert_eq!(fa, fb);
        }

        #[test]
        fn exam_set_difference_is_disjoint(a in 0u16..8192, b in 0u16..8192) {
            let (a, b) = (ExamSet::from_bits(a), ExamSet::from_bits(b));
            let d = a.difference(b);
            prop_assert!(d.intersection(b).is_empty());
            prop_assert!(d.is_subset(a));
        }
    }
}
