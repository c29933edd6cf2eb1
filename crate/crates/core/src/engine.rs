//! The dynamic diagnosis loop: predict on the data at hand, stop when a
//! class clears its threshold, otherwise ask the recommender for more exams
//! and adapt when the institution or the data source cannot supply them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::domain::{layout, DiagnosisClass, DiagnosisLabel, ExamKind, ExamSet, FeatureRow, Observation, VisitRecord, RECOMMENDABLE};
use crate::error::{Error, Result};
use crate::openmax::{self, OpenMaxCalibration};
use crate::par;
use crate::recommender::Recommender;

/// Examinations a facility can perform. Base is always executable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRepr", into = "ProfileRepr")]
pub struct InstitutionProfile {
    executable: ExamSet,
}

#[derive(Serialize, Deserialize)]
struct ProfileRepr {
    executable: ExamSet,
}

impl TryFrom<ProfileRepr> for InstitutionProfile {
    type Error = Error;
    fn try_from(r: ProfileRepr) -> Result<Self> {
        InstitutionProfile::new(r.executable)
    }
}

impl From<InstitutionProfile> for ProfileRepr {
    fn from(p: InstitutionProfile) -> Self {
        ProfileRepr { executable: p.executable }
    }
}

impl InstitutionProfile {
    pub fn new(executable: ExamSet) -> Result<Self> {
        if !executable.contains(ExamKind::Base) {
            return Err(Error::MissingBase);
        }
        Ok(InstitutionProfile { executable })
    }

    pub fn full() -> Self {
        InstitutionProfile { executable: ExamSet::all() }
    }

    pub fn executable(&self) -> ExamSet {
        self.executable
    }

    pub fn can_execute(&self, k: ExamKind) -> bool {
        self.executable.contains(k)
    }
}

/// One profile per line.
pub fn write_institutions<W: Write>(mut w: W, profiles: &[InstitutionProfile]) -> Result<()> {
    for p in profiles {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_institutions<R: BufRead>(r: R) -> Result<Vec<InstitutionProfile>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Decision thresholds in `[AD, CN, unknown]` order.
    pub delta: [f64; 3],
    /// Per-head request thresholds, indexed by action index.
    pub gamma: [f64; RECOMMENDABLE],
    /// Recommendable kinds from cheapest to most expensive.
    pub cost_order: Vec<ExamKind>,
    pub max_steps: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            delta: [0.95; 3],
            gamma: [0.5; RECOMMENDABLE],
            cost_order: ExamKind::recommendable().collect(),
            max_steps: 13,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::InvalidSpec("delta thresholds must lie in (0, 1]".into()));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::InvalidSpec("gamma thresholds must lie in (0, 1)".into()));
        }
        let set: ExamSet = self.cost_order.iter().copied().collect();
        let expected: ExamSet = ExamKind::recommendable().collect();
        if self.cost_order.len() != RECOMMENDABLE || set != expected {
            return Err(Error::InvalidSpec("cost_order must be a permutation of the recommendable exams".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidSpec("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub step: usize,
    pub kind: ExamKind,
    pub granted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrace {
    /// Every request in order; Base is recorded as granted at step 0.
    pub requested: Vec<Request>,
    /// Requests that were refused or could not be supplied.
    pub adjustments: usize,
    #[serde(rename = "final")]
    pub final_label: DiagnosisLabel,
    /// Number of prediction rounds.
    pub steps: usize,
    /// Set when the step guard ended the loop.
    pub truncated: bool,
    /// Last prediction, `[AD, CN, unknown]`.
    pub final_pred: [f64; 3],
}

impl StrategyTrace {
    pub fn granted(&self) -> ExamSet {
        self.requested.iter().filter(|r| r.granted).map(|r| r.kind).collect()
    }
}

/// Supplies examination results for one visit.
pub trait DataSource {
    fn provide(&self, kind: ExamKind) -> Option<FeatureRow>;
}

impl DataSource for VisitRecord {
    fn provide(&self, kind: ExamKind) -> Option<FeatureRow> {
        self.rows.get(&kind).cloned()
    }
}

/// Open-set prediction on the rows acquired so far, `[AD, CN, unknown]`.
pub trait Classifier {
    fn classify(&self, rows: &BTreeMap<ExamKind, FeatureRow>) -> Result<[f64; 3]>;
}

/// Per-head request probabilities, indexed by action index.
pub trait ExamPolicy {
    fn scores(&self, obs: &Observation) -> Result<[f64; RECOMMENDABLE]>;
}

/// The trained pipeline: backbone, calibration and recommender.
#[derive(Debug, Clone)]
pub struct Models {
    pub backbone: Backbone,
    pub calibration: OpenMaxCalibration,
    pub recommender: Recommender,
}

impl Classifier for Models {
    fn classify(&self, rows: &BTreeMap<ExamKind, FeatureRow>) -> Result<[f64; 3]> {
        let flat = crate::domain::flatten_rows(rows.iter().map(|(k, r)| (*k, r.values())))?;
        let out = self.backbone.forward(&flat.dense_input())?;
        let t = layout::to_threshold_order(&openmax::predict(&self.calibration, &out)?);
        Ok([t[0], t[1], t[2]])
    }
}

impl ExamPolicy for Models {
    fn scores(&self, obs: &Observation) -> Result<[f64; RECOMMENDABLE]> {
        Ok(self.recommender.recommend(obs)?.probs)
    }
}

/// Runs the loop for one visit.
pub fn diagnose<S, C, P>(source: &S, inst: &InstitutionProfile, classifier: &C, policy: &P, cfg: &EngineConfig) -> Result<StrategyTrace>
where
    S: DataSource + ?Sized,
    C: Classifier + ?Sized,
    P: ExamPolicy + ?Sized,
{
    let base = source.provide(ExamKind::Base).ok_or(Error::MissingBase)?;
    let mut rows = BTreeMap::from([(ExamKind::Base, base)]);
    let mut requested_set = ExamSet::base();
    let mut trace = StrategyTrace {
        requested: vec![Request { step: 0, kind: ExamKind::Base, granted: true }],
        adjustments: 0,
        final_label: DiagnosisLabel::known(DiagnosisClass::Unknown),
        steps: 0,
        truncated: false,
        final_pred: [0.0; 3],
    };
    loop {
        if trace.steps == cfg.max_steps {
            trace.truncated = true;
            return Ok(trace);
        }
        trace.steps += 1;
        let step = trace.steps;
        let pred = classifier.classify(&rows)?;
        trace.final_pred = pred;
        if let Some(i) = (0..3).find(|i| pred[*i] >= cfg.delta[*i]) {
            trace.final_label = DiagnosisLabel::known(DiagnosisClass::ALL[i]);
            return Ok(trace);
        }
        let obs = Observation { rows: rows.clone(), pred };
        let scores = policy.scores(&obs)?;
        let mut added = false;
        for (i, kind) in ExamKind::recommendable().enumerate() {
            if scores[i] < cfg.gamma[i] || requested_set.contains(kind) {
                continue;
            }
            requested_set.insert(kind);
            let row = if inst.can_execute(kind) { source.provide(kind) } else { None };
            let granted = row.is_some();
            trace.requested.push(Request { step, kind, granted });
            match row {
                Some(r) => {
                    rows.insert(kind, r);
                    added = true;
                }
                None => trace.adjustments += 1,
            }
        }
        if !added {
            // Cheapest exam not yet tried that this site can run and the
            // source can supply; anything else is skipped without a request.
            let fallback = cfg
                .cost_order
                .iter()
                .filter(|k| !requested_set.contains(**k) && inst.can_execute(**k))
                .find_map(|k| source.provide(*k).map(|r| (*k, r)));
            if let Some((kind, r)) = fallback {
                requested_set.insert(kind);
                trace.requested.push(Request { step, kind, granted: true });
                rows.insert(kind, r);
                added = true;
            }
        }
        if !added {
            return Ok(trace);
        }
    }
}

/// One line of the diagnosis output: which visit, where it was seen, what
/// the loop did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub subject_id: String,
    pub visit_index: u32,
    pub truth: DiagnosisLabel,
    pub institution: usize,
    pub trace: StrategyTrace,
}

/// Assigns each visit an institution drawn from `seed` and diagnoses all
/// visits independently.
pub fn diagnose_cohort<C, P>(
    visits: &[VisitRecord],
    institutions: &[InstitutionProfile],
    classifier: &C,
    policy: &P,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<Vec<TraceRecord>>
where
    C: Classifier + Sync,
    P: ExamPolicy + Sync,
{
    cfg.validate()?;
    if institutions.is_empty() {
        return Err(Error::Precondition("no institution profiles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<usize> = visits.iter().map(|_| rng.random_range(0..institutions.len())).collect();
    par::map_range(visits.len(), |i| {
        let v = &visits[i];
        Ok(TraceRecord {
            subject_id: v.subject_id.clone(),
            visit_index: v.visit_index,
            truth: v.label.clone(),
            institution: sites[i],
            trace: diagnose(v, &institutions[sites[i]], classifier, policy, cfg)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_traces<W: Write>(mut w: W, traces: &[TraceRecord]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DiagnosisClass::*;
    use proptest::prelude::*;
    use ExamKind::*;

    /// Returns a fixed prediction per acquired set, `fallback` otherwise.
    struct Scripted {
        table: Vec<(ExamSet, [f64; 3])>,
        fallback: [f64; 3],
    }

    impl Classifier for Scripted {
        fn classify(&self, rows: &BTreeMap<ExamKind, FeatureRow>) -> Result<[f64; 3]> {
            let have: ExamSet = rows.keys().copied().collect();
            Ok(self.table.iter().find(|(s, _)| *s == have).map(|(_, p)| *p).unwrap_or(self.fallback))
        }
    }

    struct Always(ExamSet);

    impl ExamPolicy for Always {
        fn scores(&self, _: &Observation) -> Result<[f64; RECOMMENDABLE]> {
            let mut s = [0.1; RECOMMENDABLE];
            for k in self.0.iter() {
                s[k.action_index().unwrap()] = 0.9;
            }
            Ok(s)
        }
    }

    fn visit(kinds: &[ExamKind]) -> VisitRecord {
        VisitRecord {
            subject_id: "s".into(),
            visit_index: 0,
            label: DiagnosisLabel::known(AD),
            rows: kinds.iter().map(|k| (*k, FeatureRow(vec![0.0]))).collect(),
        }
    }

    fn set(kinds: &[ExamKind]) -> ExamSet {
        kinds.iter().copied().collect()
    }

    const UNSURE: [f64; 3] = [0.4, 0.4, 0.2];

    #[test]
    fn confident_base_returns_immediately() {
        let c = Scripted { table: vec![], fallback: [0.99, 0.01, 0.0] };
        let t = diagnose(&visit(&ExamKind::ALL), &InstitutionProfile::full(), &c, &Always(ExamSet::EMPTY), &EngineConfig::default()).unwrap();
        assert_eq!(t.final_label.class, AD);
        assert_eq!(t.steps, 1);
        assert_eq!(t.requested, vec![Request { step: 0, kind: Base, granted: true }]);
    }

    #[test]
    fn base_only_site_ends_unknown() {
        let c = Scripted { table: vec![], fallback: UNSURE };
        let inst = InstitutionProfile::new(ExamSet::base()).unwrap();
        let t = diagnose(&visit(&ExamKind::ALL), &inst, &c, &Always(ExamSet::EMPTY), &EngineConfig::default()).unwrap();
        assert_eq!(t.final_label.class, Unknown);
        assert_eq!(t.requested.len(), 1);
        assert_eq!(t.adjustments, 0);
        assert!(!t.truncated);
    }

    #[test]
    fn refused_mri_falls_back_to_cheapest() {
        let c = Scripted { table: vec![(set(&[Base, Cog]), [0.97, 0.02, 0.01])], fallback: UNSURE };
        let inst = InstitutionProfile::new(ExamSet::all().difference(set(&[MRI]))).unwrap();
        let t = diagnose(&visit(&ExamKind::ALL), &inst, &c, &Always(set(&[MRI])), &EngineConfig::default()).unwrap();
        assert_eq!(
            t.requested,
            vec![
                Request { step: 0, kind: Base, granted: true },
                Request { step: 1, kind: MRI, granted: false },
                Request { step: 1, kind: Cog, granted: true },
            ]
        );
        assert_eq!(t.adjustments, 1);
        assert_eq!(t.steps, 2);
        assert_eq!(t.final_label.class, AD);
    }

    #[test]
    fn missing_data_matches_refusal() {
        let c = Scripted { table: vec![], fallback: UNSURE };
        let policy = Always(set(&[MRI, CSF]));
        let refused = InstitutionProfile::new(ExamSet::all().difference(set(&[MRI]))).unwrap();
        let a = diagnose(&visit(&ExamKind::ALL), &refused, &c, &policy, &EngineConfig::default()).unwrap();
        let missing: Vec<ExamKind> = ExamKind::ALL.into_iter().filter(|k| *k != MRI).collect();
        let b = diagnose(&visit(&missing), &InstitutionProfile::full(), &c, &policy, &EngineConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_guard_truncates() {
        let c = Scripted { table: vec![], fallback: UNSURE };
        let cfg = EngineConfig { max_steps: 2, ..EngineConfig::default() };
        let t = diagnose(&visit(&ExamKind::ALL), &InstitutionProfile::full(), &c, &Always(ExamSet::EMPTY), &cfg).unwrap();
        assert!(t.truncated);
        assert_eq!(t.steps, 2);
        assert_eq!(t.final_label.class, Unknown);
        assert_eq!(t.granted(), set(&[Base, Cog, CE]));
    }

    #[test]
    fn missing_base_is_an_error() {
        let c = Scripted { table: vec![], fallback: UNSURE };
        let r = diagnose(&visit(&[Cog]), &InstitutionProfile::full(), &c, &Always(ExamSet::EMPTY), &EngineConfig::default());
        assert!(matches!(r, Err(Error::MissingBase)));
        assert!(InstitutionProfile::new(set(&[Cog])).is_err());
        assert!(serde_json::from_str::<InstitutionProfile>(r#"{"executable":["Cog"]}"#).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        let mut bad = EngineConfig::default();
        bad.cost_order.pop();
        assert!(bad.validate().is_err());
        let bad = EngineConfig { delta: [0.0, 0.9, 0.9], ..EngineConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let c = Scripted { table: vec![], fallback: UNSURE };
        let v = visit(&ExamKind::ALL);
        let t = diagnose(&v, &InstitutionProfile::full(), &c, &Always(set(&[FDG])), &EngineConfig::default()).unwrap();
        let rec = TraceRecord { subject_id: "s".into(), visit_index: 0, truth: v.label.clone(), institution: 3, trace: t };
        let mut buf = Vec::new();
        write_traces(&mut buf, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_traces(&buf[..]).unwrap(), vec![rec]);
    }

    proptest! {
        #[test]
        fn trace_invariants(exec in 0u16..(1 << 13), avail in 0u16..(1 << 13), fire in 0u16..(1 << 13), conf in 0usize..14) {
            let exec = ExamSet::from_bits(exec).with(Base);
            let avail = ExamSet::from_bits(avail).with(Base);
            let fire = ExamSet::from_bits(fire).difference(ExamSet::base());
            let inst = InstitutionProfile::new(exec).unwrap();
            let v = visit(&avail.kinds());
            // Confident once `conf` exams have been granted.
            struct ByCount(usize);
            impl Classifier for ByCount {
                fn classify(&self, rows: &BTreeMap<ExamKind, FeatureRow>) -> Result<[f64; 3]> {
                    Ok(if rows.len() > self.0 { [0.0, 0.99, 0.01] } else { UNSURE })
                }
            }
            let cfg = EngineConfig::default();
            let t = diagnose(&v, &inst, &ByCount(conf), &Always(fire), &cfg).unwrap();
            let mut seen = ExamSet::EMPTY;
            for r in &t.requested {
                prop_assert!(!seen.contains(r.kind));
                seen.insert(r.kind);
                if r.granted {
                    prop_assert!(exec.contains(r.kind) && avail.contains(r.kind));
                }
            }
            prop_assert!(t.steps <= cfg.max_steps);
            prop_assert!(!t.truncated);
            prop_assert!(t.adjustments <= t.requested.len());
            prop_assert_eq!(t.adjustments, t.requested.iter().filter(|r| !r.granted).count());
            let again = diagnose(&v, &inst, &ByCount(conf), &Always(fire), &cfg).unwrap();
            prop_assert_eq!(t, again);
        }
    }
}
