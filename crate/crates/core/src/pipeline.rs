//! Stage functions and configuration for the full training and evaluation
//! run. Each stage is pure over in-memory data; file handling lives in the
//! command-line driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_diagnosis_dataset, train_backbone, Backbone, BackboneConfig, BackboneTrainConfig, LossWeights, TrainReport};
use crate::domain::{DiagnosisClass, ExamKind, ExamSet, FeatureRow, Observation, StrategySet, VisitRecord, RECOMMENDABLE};
use crate::engine::{diagnose_cohort, Classifier, EngineConfig, ExamPolicy, InstitutionProfile, Models, TraceRecord};
use crate::error::{Error, Result};
use crate::harness::bootstrap::BootstrapConfig;
use crate::harness::{evaluate, EvaluationReport};
use crate::openmax::{self, OpenMaxCalibration, OpenMaxConfig};
use crate::par;
use crate::recommender::{examination_samples, train_recommender, Recommender, RecommenderConfig, RecommenderTrainConfig, SequenceEncoderKind};
use crate::strategy::{build_examination_dataset, enumerate_strategies, ExaminationRecord, DEFAULT_STRATEGY_CAP};
use crate::synthcohort::{generate_cohort, generate_institutions, split, CohortSpec, Split};

/// Which strategies of a visit enter the training sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySampling {
    /// Random nested chains Base, Base+a, Base+a+b, ... per visit, on top of
    /// the chain in cost order.
    pub random_chains: usize,
    /// Upper bound on strategies kept per visit; 0 keeps every subset.
    pub max_per_visit: usize,
}

impl Default for StrategySampling {
    fn default() -> Self {
        StrategySampling { random_chains: 2, max_per_visit: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommenderArch {
    pub hidden: usize,
    pub layers: usize,
    pub encoder: SequenceEncoderKind,
    pub predictor_depth: usize,
    pub predictor_width: usize,
}

impl Default for RecommenderArch {
    fn default() -> Self {
        let c = RecommenderConfig::for_width(1);
        RecommenderArch {
            hidden: c.hidden,
            layers: c.layers,
            encoder: c.encoder,
            predictor_depth: c.predictor_depth,
            predictor_width: c.predictor_width,
        }
    }
}

impl RecommenderArch {
    pub fn config(&self, width: usize) -> RecommenderConfig {
        RecommenderConfig {
            hidden: self.hidden,
            layers: self.layers,
            encoder: self.encoder,
            predictor_depth: self.predictor_depth,
            predictor_width: self.predictor_width,
            ..RecommenderConfig::for_width(width)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cohort: CohortSpec,
    /// Train, validation and test fractions of known-class subjects.
    pub split: [f64; 3],
    pub institutions: usize,
    pub refusal_rate: f64,
    pub strategies: StrategySampling,
    pub backbone: BackboneTrainConfig,
    pub openmax: OpenMaxConfig,
    /// Cap on calibration embeddings per class.
    pub calibration_cap: usize,
    pub recommender_arch: RecommenderArch,
    pub recommender: RecommenderTrainConfig,
    /// Cap on examination records used to train the recommender.
    pub max_exam_records: usize,
    pub engine: EngineConfig,
    pub bootstrap: BootstrapConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            cohort: CohortSpec::default(),
            split: [0.7, 0.1, 0.2],
            institutions: 40,
            refusal_rate: 0.2,
            strategies: StrategySampling::default(),
            backbone: BackboneTrainConfig {
                epochs: 20,
                lr: 2e-3,
                weights: LossWeights { beta: 5e-4, ..LossWeights::default() },
                ..BackboneTrainConfig::default()
            },
            openmax: OpenMaxConfig { normalize: true, ..OpenMaxConfig::default() },
            calibration_cap: 4000,
            recommender_arch: RecommenderArch::default(),
            recommender: RecommenderTrainConfig { lr: 2e-3, epochs: 8, ..RecommenderTrainConfig::default() },
            max_exam_records: 6000,
            engine: EngineConfig::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }
}

/// Independent seed for a named stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.engine.validate()?;
        if !(0.0..1.0).contains(&self.refusal_rate) {
            return Err(Error::InvalidSpec("refusal_rate must lie in [0, 1)".into()));
        }
        if self.institutions == 0 {
            return Err(Error::InvalidSpec("at least one institution is required".into()));
        }
        Ok(())
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.cohort.seed = seed;
        c.backbone.seed = stage_seed(seed, "backbone");
        c.openmax.seed = stage_seed(seed, "openmax");
        c.recommender.seed = stage_seed(seed, "recommender");
        c.bootstrap.seed = stage_seed(seed, "bootstrap");
        c
    }
}

/// Generated data for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortBundle {
    pub cohort: Vec<VisitRecord>,
    pub split: Split,
    pub institutions: Vec<InstitutionProfile>,
}

pub fn generate(cfg: &PipelineConfig) -> Result<CohortBundle> {
    let cohort = generate_cohort(&cfg.cohort)?;
    let [a, b, c] = cfg.split;
    let split = split(&cohort, (a, b, c), stage_seed(cfg.seed, "split"))?;
    let institutions = generate_institutions(stage_seed(cfg.seed, "institutions"), cfg.institutions, cfg.refusal_rate)?;
    Ok(CohortBundle { cohort, split, institutions })
}

/// Nested strategy chains for every visit: one in cost order plus
/// `random_chains` in random orders, deduplicated and in enumeration order.
pub fn sample_strategies(visits: &[VisitRecord], s: &StrategySampling, seed: u64) -> Vec<StrategySet> {
    par::map_range(visits.len(), |i| {
        let v = &visits[i];
        if s.max_per_visit == 0 {
            return enumerate_strategies(v, DEFAULT_STRATEGY_CAP);
        }
        let extra: Vec<ExamKind> = v.kinds().difference(ExamSet::base()).kinds();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut orders = vec![extra.clone()];
        for _ in 0..s.random_chains {
            let mut o = extra.clone();
            o.shuffle(&mut rng);
            orders.push(o);
        }
        let mut sets = std::collections::BTreeSet::new();
        for o in &orders {
            let mut cur = ExamSet::base();
            sets.insert(cur);
            for k in o {
                cur.insert(*k);
                sets.insert(cur);
            }
        }
        let mut list: Vec<ExamSet> = sets.into_iter().collect();
        list.sort_by_key(|e| (e.len(), e.iter().map(|k| k.index()).collect::<Vec<_>>()));
        if list.len() > s.max_per_visit {
            // Keep Base and the full set, thin the middle uniformly.
            let full = *list.last().unwrap();
            let mut middle: Vec<ExamSet> = list[1..list.len() - 1].to_vec();
            middle.shuffle(&mut rng);
            middle.truncate(s.max_per_visit.saturating_sub(2));
            list = vec![ExamSet::base(), full];
            list.extend(middle);
            list.sort_by_key(|e| (e.len(), e.iter().map(|k| k.index()).collect::<Vec<_>>()));
            list.dedup();
        }
        StrategySet { strategies: list }
    })
}

pub fn feature_width(visits: &[VisitRecord]) -> Result<usize> {
    visits.iter().find_map(VisitRecord::width).ok_or(Error::EmptyDataset)
}

pub fn train_mcml(train: &[VisitRecord], val: &[VisitRecord], cfg: &PipelineConfig) -> Result<(Backbone, TrainReport)> {
    let width = feature_width(train)?;
    let seed = stage_seed(cfg.seed, "strategies");
    let train_ds = build_diagnosis_dataset(train, &sample_strategies(train, &cfg.strategies, seed))?;
    let val_ds = build_diagnosis_dataset(val, &sample_strategies(val, &cfg.strategies, seed ^ 1))?;
    train_backbone(BackboneConfig::for_width(width), &train_ds, &val_ds, &cfg.backbone)
}

/// Fits the open-set layer on embeddings of correctly classified training
/// samples.
pub fn fit_openmax(train: &[VisitRecord], backbone: &Backbone, cfg: &PipelineConfig) -> Result<OpenMaxCalibration> {
    let seed = stage_seed(cfg.seed, "strategies");
    let ds = build_diagnosis_dataset(train, &sample_strategies(train, &cfg.strategies, seed))?;
    let outs = par::map(&ds, |s| backbone.forward(&s.input));
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); crate::domain::KNOWN_CLASSES];
    for (s, o) in ds.iter().zip(outs) {
        let o = o?;
        let Some(k) = s.label.known_index() else { continue };
        let argmax = (0..o.activation.len()).max_by(|a, b| o.activation[*a].total_cmp(&o.activation[*b])).unwrap();
        if argmax == k {
            per_class[k].push(o.embedding);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "calibration"));
    for c in per_class.iter_mut() {
        if c.len() > cfg.calibration_cap {
            c.shuffle(&mut rng);
            c.truncate(cfg.calibration_cap);
        }
    }
    openmax::calibrate(&per_class, &cfg.openmax)
}

pub fn gen_rewards(train: &[VisitRecord], backbone: &Backbone, cal: &OpenMaxCalibration, cfg: &PipelineConfig) -> Result<Vec<ExaminationRecord>> {
    let strategies = sample_strategies(train, &cfg.strategies, stage_seed(cfg.seed, "strategies"));
    let mut records = build_examination_dataset(train, &strategies, backbone, cal)?;
    if records.len() > cfg.max_exam_records {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "records"));
        let mut idx: Vec<usize> = (0..records.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.max_exam_records);
        idx.sort_unstable();
        records = idx.into_iter().map(|i| records[i].clone()).collect();
    }
    Ok(records)
}

pub fn train_dmarl(records: &[ExaminationRecord], train: &[VisitRecord], cfg: &PipelineConfig) -> Result<(Recommender, TrainReport)> {
    let width = feature_width(train)?;
    let samples = examination_samples(records, train)?;
    train_recommender(cfg.recommender_arch.config(width), &samples, &cfg.recommender)
}

/// Requests every exam at the first opportunity.
pub struct RequestAll;

impl ExamPolicy for RequestAll {
    fn scores(&self, _: &Observation) -> Result<[f64; RECOMMENDABLE]> {
        Ok([1.0; RECOMMENDABLE])
    }
}

pub fn diagnose_visits(visits: &[VisitRecord], institutions: &[InstitutionProfile], models: &Models, cfg: &PipelineConfig) -> Result<Vec<TraceRecord>> {
    diagnose_cohort(visits, institutions, models, models, &cfg.engine, stage_seed(cfg.seed, "sites"))
}

/// Same decision rule and sites, but with every exam requested up front.
pub fn diagnose_baseline(visits: &[VisitRecord], institutions: &[InstitutionProfile], models: &Models, cfg: &PipelineConfig) -> Result<Vec<TraceRecord>> {
    diagnose_cohort(visits, institutions, models, &RequestAll, &cfg.engine, stage_seed(cfg.seed, "sites"))
}

/// Backbone argmax on every available exam, over known-class visits.
pub fn closed_set_accuracy(visits: &[VisitRecord], backbone: &Backbone) -> Result<f64> {
    let known: Vec<&VisitRecord> = visits.iter().filter(|v| v.label.class != DiagnosisClass::Unknown).collect();
    if known.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = par::map(&known, |v| -> Result<bool> {
        let out = backbone.forward(&v.flatten_subset(v.kinds())?.dense_input())?;
        let argmax = (0..out.activation.len()).max_by(|a, b| out.activation[*a].total_cmp(&out.activation[*b])).unwrap();
        Ok(Some(argmax) == v.label.class.known_index())
    });
    let mut n = 0;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / known.len() as f64)
}

/// Classifier view restricted to the open-set layer, for checks that do not
/// need a recommender.
pub struct OpenSetClassifier<'a> {
    pub backbone: &'a Backbone,
    pub calibration: &'a OpenMaxCalibration,
}

impl Classifier for OpenSetClassifier<'_> {
    fn classify(&self, rows: &std::collections::BTreeMap<ExamKind, FeatureRow>) -> Result<[f64; 3]> {
        let flat = crate::domain::flatten_rows(rows.iter().map(|(k, r)| (*k, r.values())))?;
        let p = openmax::predict(self.calibration, &self.backbone.forward(&flat.dense_input())?)?;
        let t = crate::domain::layout::to_threshold_order(&p);
        Ok([t[0], t[1], t[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub closed_set_accuracy: f64,
    pub dynamic: EvaluationReport,
    pub baseline: EvaluationReport,
    pub distinct_strategies: usize,
    pub exam_records: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub models: Models,
    pub traces: Vec<TraceRecord>,
    pub baseline_traces: Vec<TraceRecord>,
    pub summary: RunSummary,
}

/// Every stage, start to finish.
pub fn run(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = generate(cfg)?;
    let (backbone, _) = train_mcml(&data.split.train, &data.split.val, cfg)?;
    let calibration = fit_openmax(&data.split.train, &backbone, cfg)?;
    let records = gen_rewards(&data.split.train, &backbone, &calibration, cfg)?;
    let (recommender, _) = train_dmarl(&records, &data.split.train, cfg)?;
    let models = Models { backbone, calibration, recommender };
    let test = &data.split.test;
    let traces = diagnose_visits(test, &data.institutions, &models, cfg)?;
    let baseline_traces = diagnose_baseline(test, &data.institutions, &models, cfg)?;
    let census = crate::harness::tables::strategy_census(traces.iter().map(|t| &t.trace))?;
    let summary = RunSummary {
        closed_set_accuracy: closed_set_accuracy(test, &models.backbone)?,
        dynamic: evaluate(&traces, &cfg.bootstrap)?,
        baseline: evaluate(&baseline_traces, &cfg.bootstrap)?,
        distinct_strategies: census.len(),
        exam_records: records.len(),
    };
    Ok(RunOutput { models, traces, baseline_traces, summary })
}
