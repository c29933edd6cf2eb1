//! Hot loops that run on the rayon pool. Run once with default features and
//! once with `--no-default-features`; group names carry the mode so the two
//! reports sit side by side in `target/criterion`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ocai_core::backbone::{Backbone, BackboneConfig, LossWeights};
use ocai_core::domain::{DiagnosisClass, ExamKind, ExamSet, Observation};
use ocai_core::engine::{diagnose_cohort, Classifier, EngineConfig, ExamPolicy, InstitutionProfile};
use ocai_core::harness::bootstrap::{bootstrap_ci, BootstrapConfig};
use ocai_core::harness::metrics::roc_auc;
use ocai_core::recommender::{action_target, Recommender, RecommenderConfig, RecommenderSample};
use ocai_core::synthcohort::{generate_cohort, CohortSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 16;

fn mode() -> &'static str {
    if ocai_core::parallel_enabled() {
        "parallel"
    } else {
        "sequential"
    }
}

fn backbone_gradient(c: &mut Criterion) {
    let b = Backbone::init(BackboneConfig::for_width(WIDTH), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<Vec<f64>> = (0..64).map(|_| (0..b.config.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
    let w = LossWeights::default();
    c.benchmark_group(mode()).bench_function("backbone_loss_and_grad_64", |bench| {
        bench.iter(|| black_box(b.loss_and_grad(black_box(&batch), &w).unwrap()))
    });
}

fn recommender_gradient(c: &mut Criterion) {
    let r = Recommender::init(RecommenderConfig::for_width(WIDTH), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<RecommenderSample> = (0..32)
        .map(|_| RecommenderSample {
            seq: (0..rng.random_range(1..6)).map(|_| (0..r.config.row_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            pred: [0.3, 0.5, 0.2],
            target: action_target(ExamSet::EMPTY.with(ExamKind::MRI)),
            reward: 0.4,
        })
        .collect();
    c.benchmark_group(mode()).bench_function("recommender_loss_and_grad_32", |bench| {
        bench.iter(|| black_box(r.loss_and_grad(black_box(&batch)).unwrap()))
    });
}

fn bootstrap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<(f64, bool)> = (0..1000)
        .map(|i| {
            let pos = i % 2 == 0;
            (rng.random::<f64>() + if pos { 0.5 } else { 0.0 }, pos)
        })
        .collect();
    let cfg = BootstrapConfig { n_trials: 200, sample_size: 1000, ..BootstrapConfig::default() };
    let auc = |xs: &[(f64, bool)]| {
        let (s, l): (Vec<f64>, Vec<bool>) = xs.iter().copied().unzip();
        roc_auc(&s, &l)
    };
    let mut group = c.benchmark_group(mode());
    group.sample_size(20);
    group.bench_function("bootstrap_auc_200x1000", |bench| {
        bench.iter(|| black_box(bootstrap_ci(&items, auc, |a, b| a.1.cmp(&b.1).then(a.0.total_cmp(&b.0)), &cfg).unwrap()))
    });
}

/// Cheap stand-ins so the benchmark measures the loop, not a trained model.
struct Threshold;

impl Classifier for Threshold {
    fn classify(&self, rows: &std::collections::BTreeMap<ExamKind, ocai_core::domain::FeatureRow>) -> ocai_core::Result<[f64; 3]> {
        let m: f64 = rows.values().flat_map(|r| r.values()).sum::<f64>() / rows.len() as f64;
        let p = 1.0 / (1.0 + (-m).exp());
        Ok([p, 1.0 - p, 0.0])
    }
}

struct Cheap;

impl ExamPolicy for Cheap {
    fn scores(&self, obs: &Observation) -> ocai_core::Result<[f64; 12]> {
        let mut s = [0.1; 12];
        s[obs.rows.len() % 12] = 0.9;
        Ok(s)
    }
}

fn diagnosis_loop(c: &mut Criterion) {
    let visits = generate_cohort(&CohortSpec { n_subjects: 500, ..CohortSpec::default() }).unwrap();
    let sites = vec![InstitutionProfile::full(), InstitutionProfile::new(ExamSet::base().with(ExamKind::Cog)).unwrap()];
    let cfg = EngineConfig::default();
    let mut group = c.benchmark_group(mode());
    group.sample_size(20);
    group.bench_function("diagnose_cohort_500", |bench| {
        bench.iter_batched(
            || visits.clone(),
            |v| {
                let traces = diagnose_cohort(&v, &sites, &Threshold, &Cheap, &cfg, 9).unwrap();
                black_box(traces.iter().filter(|t| t.trace.final_label.class == DiagnosisClass::Unknown).count())
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, backbone_gradient, recommender_gradient, bootstrap, diagnosis_loop);
criterion_main!(benches);
