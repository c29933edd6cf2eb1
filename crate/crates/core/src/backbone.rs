//! The open-set classifier backbone: encoder, mirrored decoder and a dense
//! classifier whose layers also read the decoder's hidden activations.
//!
//! Loss is `alpha * cross_entropy + beta * sum(w^2) + mu * ||x - x_hat||^2`,
//! averaged over the batch (the weight penalty is added once per batch).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::domain::{dense_input_dim, DiagnosisClass, ExamSet, StrategySet, VisitRecord, KNOWN_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{softmax, Activation, Adam, Dense, ParamAllocator};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    /// Encoder widths; the last one is the latent size.
    pub encoder: Vec<usize>,
    /// Hidden classifier widths; the output layer of size `classes` follows.
    pub classifier: Vec<usize>,
    pub classes: usize,
    pub hidden_activation: Activation,
    /// Feed decoder hidden layer `j` into classifier layer `j`.
    pub concat_decoder: bool,
}

impl BackboneConfig {
    /// Desk-scale layout for a feature width.
    pub fn for_width(width: usize) -> Self {
        BackboneConfig {
            input_dim: dense_input_dim(width),
            encoder: vec![64, 32],
            classifier: vec![16, 8],
            classes: KNOWN_CLASSES,
            hidden_activation: Activation::Tanh,
            concat_decoder: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the recommender loss in the joint objective; unused while
    /// the two stages are trained separately.
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1e-4, lambda: 0.0, mu: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    classifier: Vec<Dense>,
    len: usize,
}

impl Layout {
    fn new(cfg: &BackboneConfig) -> Result<Self> {
        if cfg.encoder.is_empty() || cfg.classes == 0 || cfg.input_dim == 0 {
            return Err(Error::Precondition("backbone needs an encoder layer and classes".into()));
        }
        let mut alloc = ParamAllocator::default();
        let act = cfg.hidden_activation;
        let mut encoder = Vec::new();
        let mut prev = cfg.input_dim;
        for &w in &cfg.encoder {
            encoder.push(alloc.dense(prev, w, act));
            prev = w;
        }
        let mut widths: Vec<usize> = cfg.encoder.iter().rev().skip(1).copied().collect();
        widths.push(cfg.input_dim);
        let mut decoder = Vec::new();
        let n_dec = widths.len();
        for (j, &w) in widths.iter().enumerate() {
            let a = if j + 1 == n_dec { Activation::Identity } else { act };
            decoder.push(alloc.dense(prev, w, a));
            prev = w;
        }
        let dec_hidden: Vec<usize> = widths[..n_dec - 1].to_vec();
        let mut classifier = Vec::new();
        let mut prev = *cfg.encoder.last().unwrap();
        let outs: Vec<usize> = cfg.classifier.iter().copied().chain(std::iter::once(cfg.classes)).collect();
        for (j, &w) in outs.iter().enumerate() {
            let extra = if cfg.concat_decoder { dec_hidden.get(j).copied().unwrap_or(0) } else { 0 };
            let a = if j + 1 == outs.len() { Activation::Identity } else { act };
            classifier.push(alloc.dense(prev + extra, w, a));
            prev = w;
        }
        Ok(Layout { encoder, decoder, classifier, len: alloc.len() })
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(&self.decoder).chain(&self.classifier)
    }
}

/// Network outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// Pre-softmax class activations.
    pub activation: Vec<f64>,
    /// Penultimate classifier layer (the pattern OpenMax measures distances on).
    pub embedding: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

impl BackboneOutput {
    pub fn softmax(&self) -> Vec<f64> {
        softmax(&self.activation)
    }
}

/// Intermediate values of one forward pass.
struct Trace {
    /// `enc[i]` is the output of encoder layer i.
    enc: Vec<Vec<f64>>,
    dec: Vec<Vec<f64>>,
    /// Inputs fed to each classifier layer (after concatenation).
    cls_in: Vec<Vec<f64>>,
    cls: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    layout: Layout,
    pub params: Vec<f64>,
}

/// One labeled sample of the diagnosis dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisSample {
    pub input: Vec<f64>,
    pub label: DiagnosisClass,
    /// Index of the source visit.
    pub visit: usize,
    pub strategy: ExamSet,
}

impl Backbone {
    /// All-zero parameters.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let layout = Layout::new(&config)?;
        let params = vec![0.0; layout.len];
        Ok(Backbone { config, layout, params })
    }

    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut b = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in b.layout.dense_layers() {
            layer.init(&mut b.params, &mut rng);
        }
        Ok(b)
    }

    pub fn from_params(config: BackboneConfig, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config)?;
        if params.len() != layout.len {
            return Err(Error::DimensionMismatch { expected: layout.len, found: params.len() });
        }
        Ok(Backbone { config, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    pub fn encoder_layers(&self) -> &[Dense] {
        &self.layout.encoder
    }

    pub fn decoder_layers(&self) -> &[Dense] {
        &self.layout.decoder
    }

    pub fn classifier_layers(&self) -> &[Dense] {
        &self.layout.classifier
    }

    pub fn embedding_dim(&self) -> usize {
        let n = self.layout.classifier.len();
        if n >= 2 {
            self.layout.classifier[n - 2].output
        } else {
            *self.config.encoder.last().unwrap()
        }
    }

    fn trace(&self, p: &[f64], x: &[f64]) -> Trace {
        let mut enc = Vec::with_capacity(self.layout.encoder.len());
        let mut cur = x;
        for l in &self.layout.encoder {
            enc.push(l.forward(p, cur));
            cur = enc.last().unwrap();
        }
        let z = enc.last().unwrap();
        let mut dec = Vec::with_capacity(self.layout.decoder.len());
        let mut cur: &[f64] = z;
        for l in &self.layout.decoder {
            dec.push(l.forward(p, cur));
            cur = dec.last().unwrap();
        }
        let n_dec_hidden = dec.len() - 1;
        let mut cls_in = Vec::with_capacity(self.layout.classifier.len());
        let mut cls: Vec<Vec<f64>> = Vec::with_capacity(self.layout.classifier.len());
        for (j, l) in self.layout.classifier.iter().enumerate() {
            let mut input = if j == 0 { z.clone() } else { cls[j - 1].clone() };
            if self.config.concat_decoder && j < n_dec_hidden {
                input.extend_from_slice(&dec[j]);
            }
            cls.push(l.forward(p, &input));
            cls_in.push(input);
        }
        Trace { enc, dec, cls_in, cls }
    }

    fn output_from(&self, t: Trace) -> BackboneOutput {
        let mut cls = t.cls;
        let activation = cls.pop().unwrap();
        let embedding = cls.pop().unwrap_or_else(|| t.enc.last().unwrap().clone());
        let mut dec = t.dec;
        BackboneOutput { activation, embedding, reconstruction: dec.pop().unwrap() }
    }

    pub fn forward(&self, input: &[f64]) -> Result<BackboneOutput> {
        if input.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim, found: input.len() });
        }
        Ok(self.output_from(self.trace(&self.params, input)))
    }

    fn weight_penalty(&self, p: &[f64]) -> f64 {
        self.layout
            .dense_layers()
            .map(|l| p[l.weight_range()].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Per-sample data loss and its gradient accumulated into `grad`, each
    /// scaled by `scale`.
    fn sample_backward(&self, p: &[f64], x: &[f64], label: usize, w: &LossWeights, scale: f64, grad: &mut [f64]) -> f64 {
        let t = self.trace(p, x);
        let n_cls = self.layout.classifier.len();
        let n_dec = self.layout.decoder.len();
        let probs = softmax(&t.cls[n_cls - 1]);
        let recon = &t.dec[n_dec - 1];
        let ce = cross_entropy(&probs, label);
        let rec: f64 = recon.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = w.alpha * ce + w.mu * rec;

        // Classifier.
        let mut d_dec: Vec<Vec<f64>> = t.dec.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut dy: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, pk)| scale * w.alpha * (pk - if k == label { 1.0 } else { 0.0 }))
            .collect();
        let z_dim = t.enc.last().unwrap().len();
        let mut dz = vec![0.0; z_dim];
        for j in (0..n_cls).rev() {
            let l = &self.layout.classifier[j];
            let dx = l.backward(p, &t.cls_in[j], &t.cls[j], &dy, grad);
            let prev_dim = if j == 0 { z_dim } else { t.cls[j - 1].len() };
            if dx.len() > prev_dim {
                for (a, b) in d_dec[j].iter_mut().zip(&dx[prev_dim..]) {
                    *a += b;
                }
            }
            if j == 0 {
                for (a, b) in dz.iter_mut().zip(&dx[..prev_dim]) {
                    *a += b;
                }
            } else {
                dy = dx[..prev_dim].to_vec();
            }
        }

        // Decoder.
        let mut d_out: Vec<f64> = recon.iter().zip(x).map(|(a, b)| scale * w.mu * 2.0 * (a - b)).collect();
        for j in (0..n_dec).rev() {
            let l = &self.layout.decoder[j];
            if j + 1 < n_dec {
                for (a, b) in d_out.iter_mut().zip(&d_dec[j]) {
                    *a += b;
                }
            }
            let input: &[f64] = if j == 0 { t.enc.last().unwrap() } else { &t.dec[j - 1] };
            let dx = l.backward(p, input, &t.dec[j], &d_out, grad);
            if j == 0 {
                for (a, b) in dz.iter_mut().zip(&dx) {
                    *a += b;
                }
            } else {
                d_out = dx;
            }
        }

        // Encoder.
        let mut dy = dz;
        for i in (0..self.layout.encoder.len()).rev() {
            let l = &self.layout.encoder[i];
            let input: &[f64] = if i == 0 { x } else { &t.enc[i - 1] };
            dy = l.backward(p, input, &t.enc[i], &dy, grad);
        }
        loss
    }

    /// Batch loss at parameters `p` without gradients.
    pub fn loss_at(&self, p: &[f64], batch: &[(&[f64], usize)], w: &LossWeights) -> f64 {
        let n = batch.len() as f64;
        let data: f64 = batch
            .iter()
            .map(|(x, y)| {
                let t = self.trace(p, x);
                let probs = softmax(t.cls.last().unwrap());
                let recon = t.dec.last().unwrap();
                let rec: f64 = recon.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                w.alpha * cross_entropy(&probs, *y) + w.mu * rec
            })
            .sum();
        data / n + w.beta * self.weight_penalty(p)
    }

    /// Batch loss and gradient at the current parameters.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)], w: &LossWeights) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad_at(&self.params, batch, w)
    }

    pub fn loss_and_grad_at(&self, p: &[f64], batch: &[(&[f64], usize)], w: &LossWeights) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (x, y) in batch {
            if x.len() != self.config.input_dim {
                return Err(Error::DimensionMismatch { expected: self.config.input_dim, found: x.len() });
            }
            if *y >= self.config.classes {
                return Err(Error::Precondition(format!("label {y} outside known classes")));
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let parts = par::map_chunks(batch, GRAD_CHUNK, |chunk| {
            let mut g = vec![0.0; p.len() + 1];
            let mut loss = 0.0;
            for (x, y) in chunk {
                let (head, _) = g.split_at_mut(p.len());
                loss += self.sample_backward(p, x, *y, w, scale, head);
            }
            g[p.len()] = loss;
            g
        });
        let mut total = par::sum_in_order(parts);
        let data_loss = total.pop().unwrap() * scale;
        let penalty = self.weight_penalty(p);
        for l in self.layout.dense_layers() {
            for i in l.weight_range() {
                total[i] += 2.0 * w.beta * p[i];
            }
        }
        Ok((data_loss + w.beta * penalty, total))
    }

    pub fn save<W: std::io::Write>(&self, w: W, header: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "kind": "backbone", "config": self.config });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), header) {
            m.extend(extra);
        }
        container::write(w, &meta, &self.params)
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let (meta, params) = container::read(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
            return Err(Error::Container("not a backbone container".into()));
        }
        let config: BackboneConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_params(config, params)
    }
}

/// Samples summed sequentially per work unit before the ordered reduction.
const GRAD_CHUNK: usize = 8;

/// Softmax cross entropy `-ln p[label]`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub weights: LossWeights,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig {
            lr: 5e-4,
            batch: 64,
            epochs: 40,
            seed: 0,
            patience: 5,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn known_label(class: DiagnosisClass) -> Result<usize> {
    class
        .known_index()
        .ok_or_else(|| Error::Precondition("diagnosis dataset must contain known classes only".into()))
}

/// Trains a freshly initialised backbone with Adam. With a validation set the
/// parameters of the best validation epoch are returned.
pub fn train_backbone(
    config: BackboneConfig,
    train: &[DiagnosisSample],
    val: &[DiagnosisSample],
    cfg: &BackboneTrainConfig,
) -> Result<(Backbone, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Backbone::init(config, cfg.seed)?;
    let labeled: Vec<(&[f64], usize)> = train
        .iter()
        .map(|s| Ok((s.input.as_slice(), known_label(s.label)?)))
        .collect::<Result<_>>()?;
    let val_labeled: Vec<(&[f64], usize)> = val
        .iter()
        .map(|s| Ok((s.input.as_slice(), known_label(s.label)?)))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(model.n_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<(&[f64], usize)> = idx.iter().map(|i| labeled[*i]).collect();
            let (loss, grad) = model.loss_and_grad(&batch, &cfg.weights)?;
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        report.train_loss.push(epoch_loss / labeled.len() as f64);
        if !val_labeled.is_empty() {
            let vl = mean_loss(&model, &val_labeled, &cfg.weights);
            report.val_loss.push(vl);
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, model.params.clone()));
                report.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok((model, report))
}

fn mean_loss(model: &Backbone, data: &[(&[f64], usize)], w: &LossWeights) -> f64 {
    let parts = par::map_chunks(data, 256, |c| model.loss_at(&model.params, c, w) * c.len() as f64);
    parts.into_iter().sum::<f64>() / data.len() as f64
}

/// One sample per (visit, strategy) pair; `strategies[i]` belongs to `visits[i]`.
pub fn build_diagnosis_dataset(visits: &[VisitRecord], strategies: &[StrategySet]) -> Result<Vec<DiagnosisSample>> {
    if visits.len() != strategies.len() {
        return Err(Error::DimensionMismatch { expected: visits.len(), found: strategies.len() });
    }
    let per_visit = par::map_range(visits.len(), |i| -> Result<Vec<DiagnosisSample>> {
        let v = &visits[i];
        strategies[i]
            .iter()
            .map(|s| {
                Ok(DiagnosisSample {
                    input: v.flatten_subset(*s)?.dense_input(),
                    label: v.label.class,
                    visit: i,
                    strategy: *s,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_visit {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DiagnosisLabel, ExamKind, FeatureRow};
    use crate::nn::{max_relative_error, numeric_gradient, GRAD_CHECK_FLOOR};
    use crate::strategy::enumerate_strategies;
    use rand::Rng;

    fn small_config(input: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim: input,
            encoder: vec![6, 4],
            classifier: vec![5, 3],
            classes: 2,
            hidden_activation: Activation::Tanh,
            concat_decoder: true,
        }
    }

    /// Straight-line re-implementation of the forward pass for the
    /// two-layer encoder / two hidden classifier layer configuration.
    fn reference_forward(b: &Backbone, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = &b.params;
        let dense = |l: &Dense, v: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for o in 0..l.output {
                let mut z = p[l.bias + o];
                for i in 0..l.input {
                    z += p[l.weights + o * l.input + i] * v[i];
                }
                out.push(if l.activation == Activation::Identity { z } else { z.tanh() });
            }
            out
        };
        let e = b.encoder_layers();
        let d = b.decoder_layers();
        let c = b.classifier_layers();
        let h1 = dense(&e[0], x);
        let z = dense(&e[1], &h1);
        let dh = dense(&d[0], &z);
        let recon = dense(&d[1], &dh);
        let c0_in: Vec<f64> = z.iter().chain(dh.iter()).copied().collect();
        let c0 = dense(&c[0], &c0_in);
        let c1 = dense(&c[1], &c0);
        let act = dense(&c[2], &c1);
        (act, c1, recon)
    }

    fn random_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_network_is_uniform() {
        let b = Backbone::zeros(small_config(7)).unwrap();
        let out = b.forward(&[0.3; 7]).unwrap();
        assert_eq!(out.activation, vec![0.0, 0.0]);
        assert_eq!(out.softmax(), vec![0.5, 0.5]);
    }

    #[test]
    fn identity_autoencoder_reconstructs() {
        let cfg = BackboneConfig {
            input_dim: 5,
            encoder: vec![5],
            classifier: vec![3],
            classes: 2,
            hidden_activation: Activation::Identity,
            concat_decoder: false,
        };
        let mut b = Backbone::zeros(cfg).unwrap();
        for l in [b.encoder_layers()[0], b.decoder_layers()[0]] {
            for i in 0..5 {
                b.params[l.weights + i * 5 + i] = 1.0;
            }
        }
        let x = [0.1, -2.0, 3.5, 0.0, 7.0];
        let out = b.forward(&x).unwrap();
        assert_eq!(out.reconstruction, x.to_vec());
        let w = LossWeights { alpha: 0.0, beta: 0.0, lambda: 0.0, mu: 1.0 };
        assert_eq!(b.loss_at(&b.params, &[(&x, 0)], &w), 0.0);
    }

    #[test]
    fn forward_matches_reference_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let b = Backbone::init(small_config(9), seed).unwrap();
            let x = random_input(9, &mut rng);
            let out = b.forward(&x).unwrap();
            let (act, emb, rec) = reference_forward(&b, &x);
            for (a, r) in [(&out.activation, &act), (&out.embedding, &emb), (&out.reconstruction, &rec)] {
                assert!(a.iter().zip(r).all(|(p, q)| (p - q).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = Backbone::zeros(small_config(4)).unwrap();
        assert!(b.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn cross_entropy_at_truth_is_zero() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 0), 0.0);
        assert!(cross_entropy(&[0.5, 0.5], 1) > 0.0);
    }

    #[test]
    fn zero_weights_have_no_penalty() {
        let b = Backbone::zeros(small_config(4)).unwrap();
        assert_eq!(b.weight_penalty(&b.params), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = LossWeights { alpha: 1.0, beta: 1e-2, lambda: 0.0, mu: 0.5 };
        let b = Backbone::init(small_config(8), 5).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_input(8, &mut rng)).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
        let (loss, g) = b.loss_and_grad(&batch, &w).unwrap();
        assert!((loss - b.loss_at(&b.params, &batch, &w)).abs() < 1e-12);
        let n = numeric_gradient(|p| b.loss_at(p, &batch, &w), &b.params, 1e-5);
        assert!(max_relative_error(&g, &n, GRAD_CHECK_FLOOR) < 1e-4);
    }

    #[test]
    fn pure_cross_entropy_when_regularizers_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Backbone::init(small_config(6), 1).unwrap();
        let x = random_input(6, &mut rng);
        let w = LossWeights { alpha: 1.0, beta: 0.0, lambda: 0.0, mu: 0.0 };
        let ce = cross_entropy(&b.forward(&x).unwrap().softmax(), 1);
        assert_eq!(b.loss_at(&b.params, &[(&x, 1)], &w).to_bits(), ce.to_bits());
    }

    fn sample(input: Vec<f64>, label: DiagnosisClass) -> DiagnosisSample {
        DiagnosisSample { input, label, visit: 0, strategy: ExamSet::base() }
    }

    #[test]
    fn single_sample_overfits() {
        let cfg = BackboneTrainConfig { epochs: 10, batch: 1, patience: 0, ..Default::default() };
        let data = vec![sample(vec![0.5, -0.2, 0.1, 0.9], DiagnosisClass::AD)];
        let (_, report) = train_backbone(small_config(4), &data, &[], &cfg).unwrap();
        assert!(report.train_loss.windows(2).all(|w| w[1] < w[0]), "{:?}", report.train_loss);
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<DiagnosisSample> = (0..20)
            .map(|i| sample(random_input(4, &mut rng), if i % 2 == 0 { DiagnosisClass::AD } else { DiagnosisClass::CN }))
            .collect();
        let cfg = BackboneTrainConfig { epochs: 3, batch: 4, ..Default::default() };
        let (a, _) = train_backbone(small_config(4), &data, &data[..4], &cfg).unwrap();
        let (b, _) = train_backbone(small_config(4), &data, &data[..4], &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(matches!(train_backbone(small_config(4), &[], &[], &cfg), Err(Error::EmptyDataset)));
        let bad = vec![sample(vec![0.0; 4], DiagnosisClass::Unknown)];
        assert!(train_backbone(small_config(4), &bad, &[], &cfg).is_err());
    }

    #[test]
    fn separable_set_is_learned() {
        // Oracle: the labeling rule sign(x0 + x1) is itself a separating
        // hyperplane with margin 0.2 by construction.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        while data.len() < 200 {
            let x = random_input(4, &mut rng);
            let s = x[0] + x[1];
            if s.abs() < 0.2 {
                continue;
            }
            data.push(sample(x, if s > 0.0 { DiagnosisClass::AD } else { DiagnosisClass::CN }));
        }
        let cfg = BackboneTrainConfig {
            epochs: 200,
            batch: 16,
            lr: 5e-3,
            patience: 0,
            weights: LossWeights { mu: 0.0, ..Default::default() },
            ..Default::default()
        };
        let (m, _) = train_backbone(small_config(4), &data, &[], &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|s| {
                let p = m.forward(&s.input).unwrap().softmax();
                let pred = if p[0] >= p[1] { DiagnosisClass::AD } else { DiagnosisClass::CN };
                pred == s.label
            })
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99, "accuracy {correct}/200");
    }

    fn visit_with(kinds: &[ExamKind], label: DiagnosisClass) -> VisitRecord {
        VisitRecord {
            subject_id: "x".into(),
            visit_index: 0,
            label: DiagnosisLabel::known(label),
            rows: kinds.iter().map(|k| (*k, FeatureRow(vec![1.0; 2]))).collect(),
        }
    }

    #[test]
    fn diagnosis_dataset_counts() {
        let v = visit_with(&[ExamKind::Base, ExamKind::Cog, ExamKind::MRI, ExamKind::CSF], DiagnosisClass::AD);
        let s = enumerate_strategies(&v, 4096);
        assert_eq!(build_diagnosis_dataset(std::slice::from_ref(&v), &[s]).unwrap().len(), 8);
        assert!(build_diagnosis_dataset(std::slice::from_ref(&v), &[StrategySet::default()]).unwrap().is_empty());
        let w = visit_with(&[ExamKind::Base, ExamKind::Cog, ExamKind::MRI], DiagnosisClass::CN);
        let sv = enumerate_strategies(&w, 4096);
        let d = build_diagnosis_dataset(&[w.clone(), w], &[sv.clone(), sv]).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.iter().all(|s| s.label == DiagnosisClass::CN));
    }

    #[test]
    fn container_round_trip() {
        let b = Backbone::init(small_config(5), 9).unwrap();
        let mut buf = Vec::new();
        b.save(&mut buf, serde_json::json!({"seed": 9})).unwrap();
        assert_eq!(Backbone::load(&buf[..]).unwrap(), b);
    }
}
