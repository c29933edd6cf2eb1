//! Examination recommender: a sequence encoder over the available exam rows,
//! joined with the current open-set prediction, a deep dense predictor and
//! one sigmoid head per recommendable examination.
//!
//! Heads are trained jointly with a homoscedastic-uncertainty weighting:
//! `sum_i bce_i / (2 delta_i^2) + ln delta_i`, where `bce_i` is head i's
//! reward-weighted binary cross entropy and `ln delta_i` is learned.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TrainReport;
use crate::container;
use crate::domain::{sequence_row_dim, ExamKind, ExamSet, Observation, VisitRecord, RECOMMENDABLE};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, Adam, Dense, LstmCell, LstmStep, ParamAllocator};
use crate::par;
use crate::strategy::ExaminationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceEncoderKind {
    /// Stacked bidirectional LSTM.
    BiLstm,
    /// Per-row dense projection averaged over rows.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommenderConfig {
    pub row_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub encoder: SequenceEncoderKind,
    pub predictor_depth: usize,
    pub predictor_width: usize,
    /// Length of the prediction vector appended to the encoding.
    pub pred_dim: usize,
}

impl RecommenderConfig {
    pub fn for_width(width: usize) -> Self {
        RecommenderConfig {
            row_dim: sequence_row_dim(width),
            hidden: 16,
            layers: 3,
            encoder: SequenceEncoderKind::BiLstm,
            predictor_depth: 13,
            predictor_width: 32,
            pred_dim: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BiLayer {
    fwd: LstmCell,
    bwd: LstmCell,
}

#[derive(Debug, Clone, PartialEq)]
enum EncoderLayout {
    BiLstm(Vec<BiLayer>),
    MeanPool(Dense),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: EncoderLayout,
    predictor: Vec<Dense>,
    heads: Dense,
    log_delta: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &RecommenderConfig) -> Result<Self> {
        if cfg.row_dim == 0 || cfg.hidden == 0 || cfg.predictor_depth == 0 || cfg.layers == 0 {
            return Err(Error::Precondition("recommender dimensions must be positive".into()));
        }
        let mut alloc = ParamAllocator::default();
        let encoder = match cfg.encoder {
            SequenceEncoderKind::BiLstm => {
                let mut layers = Vec::new();
                for l in 0..cfg.layers {
                    let input = if l == 0 { cfg.row_dim } else { 2 * cfg.hidden };
                    layers.push(BiLayer { fwd: alloc.lstm(input, cfg.hidden), bwd: alloc.lstm(input, cfg.hidden) });
                }
                EncoderLayout::BiLstm(layers)
            }
            SequenceEncoderKind::MeanPool => EncoderLayout::MeanPool(alloc.dense(cfg.row_dim, 2 * cfg.hidden, Activation::Tanh)),
        };
        let mut predictor = Vec::new();
        let mut prev = 2 * cfg.hidden + cfg.pred_dim;
        for _ in 0..cfg.predictor_depth {
            predictor.push(alloc.dense(prev, cfg.predictor_width, Activation::Tanh));
            prev = cfg.predictor_width;
        }
        let heads = alloc.dense(prev, RECOMMENDABLE, Activation::Identity);
        let log_delta = alloc.raw(RECOMMENDABLE);
        Ok(Layout { encoder, predictor, heads, log_delta, len: alloc.len() })
    }
}

/// Head probabilities indexed by recommendable kind (every kind but Base).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recommendation {
    pub probs: [f64; RECOMMENDABLE],
}

impl Recommendation {
    pub fn prob(&self, kind: ExamKind) -> Option<f64> {
        kind.action_index().map(|i| self.probs[i])
    }
}

/// One training example: the observed rows, the prediction on them, the
/// multi-hot action and its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommenderSample {
    pub seq: Vec<Vec<f64>>,
    pub pred: [f64; 3],
    pub target: [f64; RECOMMENDABLE],
    pub reward: f64,
}

pub fn action_target(action: ExamSet) -> [f64; RECOMMENDABLE] {
    let mut t = [0.0; RECOMMENDABLE];
    for k in action.iter() {
        if let Some(i) = k.action_index() {
            t[i] = 1.0;
        }
    }
    t
}

enum EncoderTrace {
    BiLstm {
        /// Per layer: forward steps in time order, backward steps in
        /// processing order (last row first).
        layers: Vec<(Vec<LstmStep>, Vec<LstmStep>)>,
        inputs: Vec<Vec<Vec<f64>>>,
    },
    MeanPool {
        rows: Vec<Vec<f64>>,
    },
}

struct Trace {
    encoder: EncoderTrace,
    /// Input to predictor layer 0 (encoding followed by the prediction).
    joined: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub config: RecommenderConfig,
    layout: Layout,
    pub params: Vec<f64>,
}

impl Recommender {
    pub fn zeros(config: RecommenderConfig) -> Result<Self> {
        let layout = Layout::new(&config)?;
        Ok(Recommender { params: vec![0.0; layout.len], config, layout })
    }

    pub fn init(config: RecommenderConfig, seed: u64) -> Result<Self> {
        let mut r = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &r.layout.encoder {
            EncoderLayout::BiLstm(layers) => {
                for l in layers {
                    l.fwd.init(&mut r.params, &mut rng);
                    l.bwd.init(&mut r.params, &mut rng);
                }
            }
            EncoderLayout::MeanPool(d) => d.init(&mut r.params, &mut rng),
        }
        for d in &r.layout.predictor {
            d.init(&mut r.params, &mut rng);
        }
        r.layout.heads.init(&mut r.params, &mut rng);
        Ok(r)
    }

    pub fn from_params(config: RecommenderConfig, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config)?;
        if params.len() != layout.len {
            return Err(Error::DimensionMismatch { expected: layout.len, found: params.len() });
        }
        Ok(Recommender { config, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    /// Parameter range of head `j` (weights then bias).
    pub fn head_ranges(&self, j: usize) -> (std::ops::Range<usize>, usize) {
        let h = &self.layout.heads;
        (h.weights + j * h.input..h.weights + (j + 1) * h.input, h.bias + j)
    }

    pub fn log_delta(&self) -> &[f64] {
        &self.params[self.layout.log_delta..self.layout.log_delta + RECOMMENDABLE]
    }

    pub fn log_delta_offset(&self) -> usize {
        self.layout.log_delta
    }

    fn encode(&self, p: &[f64], seq: &[Vec<f64>]) -> (Vec<f64>, EncoderTrace) {
        let h = self.config.hidden;
        match &self.layout.encoder {
            EncoderLayout::BiLstm(layers) => {
                let mut inputs = vec![seq.to_vec()];
                let mut traces = Vec::with_capacity(layers.len());
                for layer in layers {
                    let x = inputs.last().unwrap();
                    let t_len = x.len();
                    let mut fwd = Vec::with_capacity(t_len);
                    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
                    for xt in x {
                        let s = layer.fwd.step(p, xt, &hs, &cs);
                        hs = s.h.clone();
                        cs = s.c.clone();
                        fwd.push(s);
                    }
                    let mut bwd = Vec::with_capacity(t_len);
                    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
                    for xt in x.iter().rev() {
                        let s = layer.bwd.step(p, xt, &hs, &cs);
                        hs = s.h.clone();
                        cs = s.c.clone();
                        bwd.push(s);
                    }
                    let out: Vec<Vec<f64>> = (0..t_len)
                        .map(|t| {
                            let mut v = fwd[t].h.clone();
                            v.extend_from_slice(&bwd[t_len - 1 - t].h);
                            v
                        })
                        .collect();
                    traces.push((fwd, bwd));
                    inputs.push(out);
                }
                let (fwd, bwd) = traces.last().unwrap();
                let mut summary = fwd.last().unwrap().h.clone();
                summary.extend_from_slice(&bwd.last().unwrap().h);
                inputs.pop();
                (summary, EncoderTrace::BiLstm { layers: traces, inputs })
            }
            EncoderLayout::MeanPool(d) => {
                let rows: Vec<Vec<f64>> = seq.iter().map(|r| d.forward(p, r)).collect();
                let n = rows.len() as f64;
                let mut summary = vec![0.0; 2 * h];
                for r in &rows {
                    for (s, v) in summary.iter_mut().zip(r) {
                        *s += v / n;
                    }
                }
                (summary, EncoderTrace::MeanPool { rows })
            }
        }
    }

    fn encode_backward(&self, p: &[f64], seq: &[Vec<f64>], trace: &EncoderTrace, d_summary: &[f64], grad: &mut [f64]) {
        let h = self.config.hidden;
        match (&self.layout.encoder, trace) {
            (EncoderLayout::BiLstm(layers), EncoderTrace::BiLstm { layers: steps, inputs }) => {
                let t_len = seq.len();
                let mut d_out = vec![vec![0.0; 2 * h]; t_len];
                d_out[t_len - 1][..h].copy_from_slice(&d_summary[..h]);
                d_out[0][h..].copy_from_slice(&d_summary[h..]);
                for (li, layer) in layers.iter().enumerate().rev() {
                    let (fwd, bwd) = &steps[li];
                    let in_dim = inputs[li][0].len();
                    let mut d_in = vec![vec![0.0; in_dim]; t_len];
                    let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
                    for t in (0..t_len).rev() {
                        let dh: Vec<f64> = d_out[t][..h].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
                        let (dx, dhp, dcp) = layer.fwd.step_backward(p, &fwd[t], &dh, &dc_next, grad);
                        for (a, b) in d_in[t].iter_mut().zip(&dx) {
                            *a += b;
                        }
                        dh_next = dhp;
                        dc_next = dcp;
                    }
                    let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
                    // bwd[k] consumed row t_len - 1 - k; unwind from the last processed.
                    for k in (0..t_len).rev() {
                        let t = t_len - 1 - k;
                        let dh: Vec<f64> = d_out[t][h..].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
                        let (dx, dhp, dcp) = layer.bwd.step_backward(p, &bwd[k], &dh, &dc_next, grad);
                        for (a, b) in d_in[t].iter_mut().zip(&dx) {
                            *a += b;
                        }
                        dh_next = dhp;
                        dc_next = dcp;
                    }
                    d_out = d_in;
                }
            }
            (EncoderLayout::MeanPool(d), EncoderTrace::MeanPool { rows }) => {
                let n = rows.len() as f64;
                let dy: Vec<f64> = d_summary.iter().map(|v| v / n).collect();
                for (x, y) in seq.iter().zip(rows) {
                    d.backward(p, x, y, &dy, grad);
                }
            }
            _ => unreachable!("trace built by the same layout"),
        }
    }

    fn trace(&self, p: &[f64], seq: &[Vec<f64>], pred: &[f64]) -> Trace {
        let (mut joined, encoder) = self.encode(p, seq);
        joined.extend_from_slice(pred);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.layout.predictor.len());
        for (i, d) in self.layout.predictor.iter().enumerate() {
            let input = if i == 0 { &joined } else { &hidden[i - 1] };
            let out = d.forward(p, input);
            hidden.push(out);
        }
        let logits = self.layout.heads.forward(p, hidden.last().unwrap());
        Trace { encoder, joined, hidden, logits }
    }

    fn check_input(&self, seq: &[Vec<f64>], pred: &[f64]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::MissingBase);
        }
        for r in seq {
            if r.len() != self.config.row_dim {
                return Err(Error::DimensionMismatch { expected: self.config.row_dim, found: r.len() });
            }
        }
        if pred.len() != self.config.pred_dim {
            return Err(Error::DimensionMismatch { expected: self.config.pred_dim, found: pred.len() });
        }
        Ok(())
    }

    /// Head probabilities for a prepared row sequence.
    pub fn recommend_sequence(&self, seq: &[Vec<f64>], pred: &[f64]) -> Result<Recommendation> {
        self.check_input(seq, pred)?;
        let t = self.trace(&self.params, seq, pred);
        let mut probs = [0.0; RECOMMENDABLE];
        for (p, z) in probs.iter_mut().zip(&t.logits) {
            *p = sigmoid(*z);
        }
        Ok(Recommendation { probs })
    }

    /// Rows are consumed in canonical kind order whatever the map order.
    pub fn recommend(&self, obs: &Observation) -> Result<Recommendation> {
        let flat = obs.flatten()?;
        self.recommend_sequence(&flat.sequence_input(), &obs.pred)
    }

    /// Accumulates one sample's gradient (scaled per head by `head_scale`)
    /// and returns its unweighted per-head BCE.
    fn sample_backward(&self, p: &[f64], s: &RecommenderSample, head_scale: &[f64], grad: &mut [f64]) -> [f64; RECOMMENDABLE] {
        let t = self.trace(p, &s.seq, &s.pred);
        let mut bce = [0.0; RECOMMENDABLE];
        let mut d_logits = vec![0.0; RECOMMENDABLE];
        for i in 0..RECOMMENDABLE {
            let z = t.logits[i];
            bce[i] = softplus(z) - s.target[i] * z;
            d_logits[i] = head_scale[i] * s.reward * (sigmoid(z) - s.target[i]);
        }
        let n_pred = self.layout.predictor.len();
        let mut dy = self.layout.heads.backward(p, &t.hidden[n_pred - 1], &t.logits, &d_logits, grad);
        for i in (0..n_pred).rev() {
            let input = if i == 0 { &t.joined } else { &t.hidden[i - 1] };
            dy = self.layout.predictor[i].backward(p, input, &t.hidden[i], &dy, grad);
        }
        let enc_dim = 2 * self.config.hidden;
        self.encode_backward(p, &s.seq, &t.encoder, &dy[..enc_dim], grad);
        bce
    }

    /// Per-head reward-weighted mean BCE at parameters `p`.
    pub fn head_bce_at(&self, p: &[f64], batch: &[RecommenderSample]) -> [f64; RECOMMENDABLE] {
        let n = batch.len() as f64;
        let mut out = [0.0; RECOMMENDABLE];
        for s in batch {
            let t = self.trace(p, &s.seq, &s.pred);
            for ((o, z), y) in out.iter_mut().zip(&t.logits).zip(&s.target) {
                *o += s.reward * (softplus(*z) - y * z) / n;
            }
        }
        out
    }

    pub fn loss_at(&self, p: &[f64], batch: &[RecommenderSample]) -> f64 {
        let bce = self.head_bce_at(p, batch);
        uncertainty_weighted_loss(&bce, &p[self.layout.log_delta..self.layout.log_delta + RECOMMENDABLE])
    }

    pub fn loss_and_grad(&self, batch: &[RecommenderSample]) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad_at(&self.params, batch)
    }

    pub fn loss_and_grad_at(&self, p: &[f64], batch: &[RecommenderSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in batch {
            self.check_input(&s.seq, &s.pred)?;
        }
        let n = batch.len() as f64;
        let log_delta = &p[self.layout.log_delta..self.layout.log_delta + RECOMMENDABLE];
        // d loss / d bce_i = exp(-2 s_i) / 2, shared by every sample.
        let head_scale: Vec<f64> = log_delta.iter().map(|s| 0.5 * (-2.0 * s).exp() / n).collect();
        let parts = par::map_chunks(batch, GRAD_CHUNK, |chunk| {
            let mut g = vec![0.0; p.len() + RECOMMENDABLE];
            let (head, tail) = g.split_at_mut(p.len());
            for s in chunk {
                let b = self.sample_backward(p, s, &head_scale, head);
                for i in 0..RECOMMENDABLE {
                    tail[i] += s.reward * b[i];
                }
            }
            g
        });
        let mut total = par::sum_in_order(parts);
        let bce: Vec<f64> = total.split_off(p.len()).into_iter().map(|v| v / n).collect();
        for i in 0..RECOMMENDABLE {
            total[self.layout.log_delta + i] += 1.0 - bce[i] * (-2.0 * log_delta[i]).exp();
        }
        Ok((uncertainty_weighted_loss(&bce, log_delta), total))
    }

    pub fn save<W: std::io::Write>(&self, w: W, header: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "kind": "recommender", "config": self.config });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), header) {
            m.extend(extra);
        }
        container::write(w, &meta, &self.params)
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let (meta, params) = container::read(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("recommender") {
            return Err(Error::Container("not a recommender container".into()));
        }
        let config: RecommenderConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_params(config, params)
    }
}

const GRAD_CHUNK: usize = 4;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross entropy of a probability against a 0/1 target.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0);
    let q = (1.0 - p).max(1e-300);
    -(target * p.ln() + (1.0 - target) * q.ln())
}

/// `sum_i bce_i / (2 delta_i^2) + ln delta_i` with `log_delta[i] = ln delta_i`.
pub fn uncertainty_weighted_loss(bce: &[f64], log_delta: &[f64]) -> f64 {
    bce.iter().zip(log_delta).map(|(b, s)| 0.5 * b * (-2.0 * s).exp() + s).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommenderTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RecommenderTrainConfig {
    fn default() -> Self {
        RecommenderTrainConfig { lr: 5e-4, batch: 32, epochs: 20, seed: 0 }
    }
}

pub fn train_recommender(
    config: RecommenderConfig,
    data: &[RecommenderSample],
    cfg: &RecommenderTrainConfig,
) -> Result<(Recommender, TrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Recommender::init(config, cfg.seed)?;
    let mut adam = Adam::new(model.n_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd3a1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<RecommenderSample> = idx.iter().map(|i| data[*i].clone()).collect();
            let (loss, grad) = model.loss_and_grad(&batch)?;
            total += loss * batch.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        report.train_loss.push(total / data.len() as f64);
        report.best_epoch = epoch;
    }
    Ok((model, report))
}

/// Joins examination records with the feature rows of their visits.
pub fn examination_samples(records: &[ExaminationRecord], visits: &[VisitRecord]) -> Result<Vec<RecommenderSample>> {
    let index: HashMap<(&str, u32), &VisitRecord> =
        visits.iter().map(|v| ((v.subject_id.as_str(), v.visit_index), v)).collect();
    records
        .iter()
        .map(|r| {
            let v = index.get(&(r.subject_id.as_str(), r.visit_index)).ok_or_else(|| {
                Error::Precondition(format!("no visit {} / {} for examination record", r.subject_id, r.visit_index))
            })?;
            if !r.obs_kinds.is_subset(v.kinds()) {
                return Err(Error::Precondition(format!("record kinds {} not in visit", r.obs_kinds)));
            }
            Ok(RecommenderSample {
                seq: v.flatten_subset(r.obs_kinds)?.sequence_input(),
                pred: r.pred,
                target: action_target(r.action_kinds),
                reward: r.reward,
            })
        })
        .collect()
}
