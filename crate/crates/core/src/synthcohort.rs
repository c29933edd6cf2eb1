//! Synthetic cohorts and institution profiles.
//!
//! Every exam k has a discriminative unit direction `u_k` and an orthogonal
//! direction `v_k`. AD rows are centred at `+s_k u_k`, CN rows at `-s_k u_k`,
//! and each held-out subtype at `along * s_k u_k + across * o_k v_k`, so the
//! unknown groups sit between the known ones on the diagnostic axis while
//! drifting off it. Separation `s_k` grows along the cost order, which makes
//! expensive exams more informative.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{DiagnosisClass, DiagnosisLabel, ExamKind, ExamSet, FeatureRow, VisitRecord};
use crate::engine::InstitutionProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    #[serde(rename = "AD")]
    pub ad: f64,
    #[serde(rename = "CN")]
    pub cn: f64,
    #[serde(rename = "MCI")]
    pub mci: f64,
    #[serde(rename = "SMC")]
    pub smc: f64,
}

/// Latent group of a generated subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    AD,
    CN,
    MCI,
    SMC,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::AD, Group::CN, Group::MCI, Group::SMC];

    pub fn label(self) -> DiagnosisLabel {
        match self {
            Group::AD => DiagnosisLabel::known(DiagnosisClass::AD),
            Group::CN => DiagnosisLabel::known(DiagnosisClass::CN),
            Group::MCI => DiagnosisLabel::unknown_subtype("MCI"),
            Group::SMC => DiagnosisLabel::unknown_subtype("SMC"),
        }
    }
}

impl ClassPriors {
    pub fn weights(&self) -> [f64; 4] {
        [self.ad, self.cn, self.mci, self.smc]
    }
}

/// Position of a held-out subtype relative to the known classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Coordinate on the AD (+1) to CN (-1) axis.
    pub along: f64,
    /// Multiple of the exam's off-axis offset.
    pub across: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamSpec {
    pub kind: ExamKind,
    /// Half-distance between the AD and CN means.
    pub separation: f64,
    /// Off-axis displacement scale for held-out subtypes.
    pub offset: f64,
    pub variance: f64,
    pub missingness: f64,
    /// Explicit means keyed by group name; overrides the geometric layout.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub means: BTreeMap<Group, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub seed: u64,
    pub n_subjects: usize,
    pub width: usize,
    pub priors: ClassPriors,
    /// `visit_weights[i]` is the relative frequency of `i + 1` visits.
    pub visit_weights: Vec<f64>,
    /// Standard deviation of a per-subject offset shared by all visits.
    pub subject_sd: f64,
    pub mci: Placement,
    pub smc: Placement,
    /// One entry per exam kind, any order.
    pub exams: Vec<ExamSpec>,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let exams = ExamKind::ALL
            .iter()
            .map(|k| {
                let i = k.index() as f64;
                ExamSpec {
                    kind: *k,
                    separation: (6.0 + 3.0 * i) / 20.0,
                    offset: (6.0 + 3.0 * i) / 20.0,
                    variance: 1.0,
                    missingness: if *k == ExamKind::Base { 0.0 } else { (8.0 + 3.0 * i) / 200.0 },
                    means: BTreeMap::new(),
                }
            })
            .collect();
        CohortSpec {
            seed: 7,
            n_subjects: 2000,
            width: 16,
            priors: ClassPriors { ad: 0.3, cn: 0.4, mci: 0.2, smc: 0.1 },
            visit_weights: vec![0.5, 0.3, 0.2],
            subject_sd: 0.3,
            mci: Placement { along: 0.1, across: 1.0 },
            smc: Placement { along: -0.2, across: -1.0 },
            exams,
        }
    }
}

impl CohortSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: CohortSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn exam(&self, k: ExamKind) -> Option<&ExamSpec> {
        self.exams.iter().find(|e| e.kind == k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        let w = self.priors.weights();
        if w.iter().any(|p| !(0.0..=1.0).contains(p)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class priors must be probabilities summing to 1");
        }
        if self.width < 2 {
            return bad("feature width must be at least 2");
        }
        if self.visit_weights.is_empty() || self.visit_weights.iter().any(|v| !(*v >= 0.0)) || self.visit_weights.iter().sum::<f64>() <= 0.0 {
            return bad("visit weights must be non-negative with a positive sum");
        }
        if !(self.subject_sd >= 0.0) {
            return bad("subject_sd must be non-negative");
        }
        let kinds: BTreeSet<ExamKind> = self.exams.iter().map(|e| e.kind).collect();
        if kinds.len() != self.exams.len() || kinds.len() != ExamKind::COUNT {
            return bad("exams must list every exam kind exactly once");
        }
        for e in &self.exams {
            if !(e.variance > 0.0) {
                return Err(Error::InvalidSpec(format!("variance of {} must be positive", e.kind)));
            }
            if !(0.0..1.0).contains(&e.missingness) {
                return Err(Error::InvalidSpec(format!("missingness of {} must lie in [0, 1)", e.kind)));
            }
            if e.kind == ExamKind::Base && e.missingness != 0.0 {
                return bad("Base missingness must be 0");
            }
            if e.means.values().any(|m| m.len() != self.width) {
                return Err(Error::InvalidSpec(format!("explicit means of {} must have width {}", e.kind, self.width)));
            }
        }
        Ok(())
    }

    /// Resolved group means for every exam.
    pub fn means(&self) -> Result<BTreeMap<(Group, ExamKind), Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_d1ec);
        let mut out = BTreeMap::new();
        for k in ExamKind::ALL {
            let e = self.exam(k).expect("validated");
            let (u, v) = orthonormal_pair(&mut rng, self.width);
            for g in Group::ALL {
                let m = match e.means.get(&g) {
                    Some(m) => m.clone(),
                    None => {
                        let (a, c) = match g {
                            Group::AD => (1.0, 0.0),
                            Group::CN => (-1.0, 0.0),
                            Group::MCI => (self.mci.along, self.mci.across),
                            Group::SMC => (self.smc.along, self.smc.across),
                        };
                        u.iter().zip(&v).map(|(ui, vi)| a * e.separation * ui + c * e.offset * vi).collect()
                    }
                };
                out.insert((g, k), m);
            }
        }
        Ok(out)
    }
}

fn orthonormal_pair(rng: &mut ChaCha8Rng, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || -> Vec<f64> { (0..w).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let normalize = |x: &mut Vec<f64>| {
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        x.iter_mut().for_each(|a| *a /= n);
    };
    let mut u = draw();
    normalize(&mut u);
    let mut v = draw();
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= dot * a);
    normalize(&mut v);
    (u, v)
}

fn draw_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Generated visits plus each subject's latent group.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<VisitRecord>> {
    let means = spec.means()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let sd: BTreeMap<ExamKind, f64> = spec.exams.iter().map(|e| (e.kind, e.variance.sqrt())).collect();
    for s in 0..spec.n_subjects {
        let group = Group::ALL[draw_index(&mut rng, &spec.priors.weights())];
        let n_visits = draw_index(&mut rng, &spec.visit_weights) + 1;
        let offsets: BTreeMap<ExamKind, Vec<f64>> = ExamKind::ALL
            .iter()
            .map(|k| (*k, (0..spec.width).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); spec.subject_sd * z }).collect()))
            .collect();
        for visit in 0..n_visits {
            let mut rows = BTreeMap::new();
            for k in ExamKind::ALL {
                let e = spec.exam(k).expect("validated");
                let missing = rng.random::<f64>() < e.missingness;
                let noise: Vec<f64> = (0..spec.width).map(|_| StandardNormal.sample(&mut rng)).collect();
                if missing {
                    continue;
                }
                let m = &means[&(group, k)];
                let row = (0..spec.width).map(|j| m[j] + offsets[&k][j] + sd[&k] * noise[j]).collect();
                rows.insert(k, FeatureRow(row));
            }
            out.push(VisitRecord {
                subject_id: format!("S{s:05}"),
                visit_index: visit as u32,
                label: group.label(),
                rows,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<VisitRecord>,
    pub val: Vec<VisitRecord>,
    pub test: Vec<VisitRecord>,
}

/// Subject-level split. Subjects with a held-out subtype go to test only;
/// `fractions` (train, val, test) apply to the remaining subjects.
pub fn split(cohort: &[VisitRecord], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec("split fractions must be probabilities summing to 1".into()));
    }
    let mut known: Vec<&str> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut unknown = BTreeSet::new();
    for v in cohort {
        if v.label.class == DiagnosisClass::Unknown {
            unknown.insert(v.subject_id.as_str());
        }
    }
    for v in cohort {
        if seen.insert(v.subject_id.as_str()) && !unknown.contains(v.subject_id.as_str()) {
            known.push(v.subject_id.as_str());
        }
    }
    known.sort_unstable();
    known.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = known.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let train: BTreeSet<&str> = known[..n_train].iter().copied().collect();
    let val: BTreeSet<&str> = known[n_train..n_train + n_val].iter().copied().collect();
    let mut out = Split::default();
    for v in cohort {
        let id = v.subject_id.as_str();
        if train.contains(id) {
            out.train.push(v.clone());
        } else if val.contains(id) {
            out.val.push(v.clone());
        } else {
            out.test.push(v.clone());
        }
    }
    Ok(out)
}

/// `n` profiles; each non-Base exam is dropped independently with
/// probability `refusal_rate`.
pub fn generate_institutions(seed: u64, n: usize, refusal_rate: f64) -> Result<Vec<InstitutionProfile>> {
    if !(0.0..1.0).contains(&refusal_rate) {
        return Err(Error::InvalidSpec("refusal_rate must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s = ExamSet::base();
            for k in ExamKind::recommendable() {
                if rng.random::<f64>() >= refusal_rate {
                    s.insert(k);
                }
            }
            InstitutionProfile::new(s)
        })
        .collect()
}
