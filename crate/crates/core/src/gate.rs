//! Failure-predicting gate: pools prompt-token activations of F-statistic
//! selected neurons with a learned query, then a two-layer head predicts
//! whether the unsteered model will answer incorrectly. Steering is applied
//! only when the predicted probability reaches the threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationTrace;
use crate::numerics::{sigmoid, softmax, stream_id, AdamState, SeededRng};
use crate::probe::{auroc, f_statistic, rank_by_f, scale_value, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub n_features: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            n_features: 256,
            hidden: 256,
            dropout: 0.3,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 10,
            threshold: 0.5,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("gate dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid("gate patience exceeds max epochs"));
        }
        if self.n_features == 0 || self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("gate feature count, hidden width, batch size and epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("gate learning rate must be > 0 and weight decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("gate threshold must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Row-major `f64` matrix used for token × feature inputs and the first
/// dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    /// Flat neuron ids (`layer * d_mlp + neuron`).
    pub feature_indices: Vec<usize>,
    pub query: Vec<f64>,
    /// `features × hidden`
    pub w1: Dense,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub threshold: f64,
    pub sigma: Vec<f64>,
}

impl GateModel {
    pub fn n_features(&self) -> usize {
        self.feature_indices.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, h) = (self.n_features(), self.hidden());
        let ok = self.query.len() == f
            && self.sigma.len() == f
            && self.w1.shape == [f, h]
            && self.w1.data.len() == f * h
            && self.w2.len() == h;
        if !ok {
            return Err(Error::invalid("gate model shapes are inconsistent"));
        }
        if self.params().iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gate model"));
        }
        Ok(())
    }

    /// Parameters packed as `[query | w1 | b1 | w2 | b2]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.query);
        p.extend_from_slice(&self.w1.data);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn n_params(&self) -> usize {
        let (f, h) = (self.n_features(), self.hidden());
        f + f * h + 2 * h + 1
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Length {
                op: "GateModel::set_params",
                left: p.len(),
                right: self.n_params(),
            });
        }
        let (f, h) = (self.n_features(), self.hidden());
        let (q, rest) = p.split_at(f);
        let (w1, rest) = rest.split_at(f * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        self.query.copy_from_slice(q);
        self.w1.data.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = b2[0];
        Ok(())
    }
}

/// Prompt-token rows of the selected neurons, scaled by `10 σ`.
pub fn gate_features(t: &ActivationTrace, idx: &[usize], sigma: &[f64]) -> Result<Dense> {
    if t.prompt_len == 0 {
        return Err(Error::Empty("gate_features prompt"));
    }
    if idx.len() != sigma.len() {
        return Err(Error::Length {
            op: "gate_features",
            left: idx.len(),
            right: sigma.len(),
        });
    }
    let width = t.n_layers * t.d_mlp;
    if let Some(&bad) = idx.iter().find(|&&f| f >= width) {
        return Err(Error::OutOfRange(format!(
            "gate feature {bad} outside {} layers x {} neurons",
            t.n_layers, t.d_mlp
        )));
    }
    let mut out = Dense::zeros(t.prompt_len, idx.len());
    for tok in 0..t.prompt_len {
        let row = &t.activations[tok * width..(tok + 1) * width];
        for (c, (&f, &s)) in idx.iter().zip(sigma).enumerate() {
            out.data[tok * idx.len() + c] = scale_value(row[f] as f64, s);
        }
    }
    Ok(out)
}

/// Ranks neurons globally by F-statistic on per-sample prompt means and
/// keeps the top `k` (in ascending id order), with σ measured over every
/// prompt-token row of the training traces.
pub fn select_gate_features(traces: &[&ActivationTrace], labels: &[bool], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let first = traces.first().ok_or(Error::Empty("gate feature selection"))?;
    let width = first.n_layers * first.d_mlp;
    let mut rows = Vec::with_capacity(traces.len());
    for t in traces {
        if t.n_layers * t.d_mlp != width {
            return Err(Error::Shape {
                op: "select_gate_features",
                left: (first.n_layers, first.d_mlp),
                right: (t.n_layers, t.d_mlp),
            });
        }
        if t.prompt_len == 0 {
            return Err(Error::Empty("gate_features prompt"));
        }
        let mut mean = vec![0.0; width];
        for tok in 0..t.prompt_len {
            for (m, &a) in mean.iter_mut().zip(&t.activations[tok * width..(tok + 1) * width]) {
                *m += a as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t.prompt_len as f64);
        rows.push(mean);
    }
    let f = f_statistic(&FeatureMatrix::new(rows, labels.to_vec())?)?;
    let mut idx = rank_by_f(&f);
    idx.truncate(k.min(width));
    idx.sort();

    let mut sum = vec![0.0; idx.len()];
    let mut count = 0usize;
    for t in traces {
        for tok in 0..t.prompt_len {
            for (s, &c) in sum.iter_mut().zip(&idx) {
                *s += t.activations[tok * width + c] as f64;
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; idx.len()];
    for t in traces {
        for tok in 0..t.prompt_len {
            for ((v, &c), m) in var.iter_mut().zip(&idx).zip(&mean) {
                *v += (t.activations[tok * width + c] as f64 - m).powi(2);
            }
        }
    }
    let sigma = var.iter().map(|v| (v / count as f64).sqrt()).collect();
    Ok((idx, sigma))
}

struct Cache {
    attn: Vec<f64>,
    pooled: Vec<f64>,
    z1: Vec<f64>,
    mask: Vec<f64>,
    h: Vec<f64>,
    logit: f64,
}

fn run(m: &GateModel, x: &Dense, dropout: Option<(f64, &mut SeededRng)>) -> Result<Cache> {
    let (f, hdim) = (m.n_features(), m.hidden());
    if x.cols() != f {
        return Err(Error::Length {
            op: "gate_forward feature width",
            left: x.cols(),
            right: f,
        });
    }
    if x.rows() == 0 {
        return Err(Error::Empty("gate_forward tokens"));
    }
    let scores: Vec<f64> = (0..x.rows())
        .map(|t| x.row(t).iter().zip(&m.query).map(|(a, b)| a * b).sum())
        .collect();
    let attn = softmax(&scores, 1.0)?;
    let mut pooled = vec![0.0; f];
    for (t, &a) in attn.iter().enumerate() {
        for (p, v) in pooled.iter_mut().zip(x.row(t)) {
            *p += a * v;
        }
    }
    let mut z1 = m.b1.clone();
    for (i, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (z, w) in z1.iter_mut().zip(m.w1.row(i)) {
            *z += p * w;
        }
    }
    let mask: Vec<f64> = match dropout {
        Some((rate, rng)) if rate > 0.0 => (0..hdim)
            .map(|_| if rng.uniform() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
            .collect(),
        _ => vec![1.0; hdim],
    };
    let h: Vec<f64> = z1.iter().zip(&mask).map(|(&z, &k)| z.max(0.0) * k).collect();
    let logit = m.b2 + h.iter().zip(&m.w2).map(|(a, b)| a * b).sum::<f64>();
    Ok(Cache {
        attn,
        pooled,
        z1,
        mask,
        h,
        logit,
    })
}

/// Attention-pooling weights over the token rows.
pub fn pooling_weights(m: &GateModel, x: &Dense) -> Result<Vec<f64>> {
    Ok(run(m, x, None)?.attn)
}

/// Failure probability (inference mode, dropout off).
pub fn gate_forward(m: &GateModel, x: &Dense) -> Result<f64> {
    Ok(sigmoid(run(m, x, None)?.logit))
}

/// Forward with dropout active, drawing masks from `rng`.
pub fn gate_forward_train(m: &GateModel, x: &Dense, rng: &mut SeededRng, dropout: f64) -> Result<f64> {
    Ok(sigmoid(run(m, x, Some((dropout, rng)))?.logit))
}

pub fn gate_decision(p: f64, threshold: f64) -> bool {
    p >= threshold
}

/// Binary cross-entropy on a logit: `softplus(z) - y z`.
pub fn bce_with_logit(z: f64, y: bool) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - if y { z } else { 0.0 }
}

/// Loss and packed gradient for one sample (dropout off).
pub fn gate_loss_grad(m: &GateModel, x: &Dense, label: bool) -> Result<(f64, Vec<f64>)> {
    let cache = run(m, x, None)?;
    let mut grad = vec![0.0; m.n_params()];
    backward(m, x, &cache, label, &mut grad);
    Ok((bce_with_logit(cache.logit, label), grad))
}

/// Accumulates `d loss / d params` into `grad`.
fn backward(m: &GateModel, x: &Dense, c: &Cache, label: bool, grad: &mut [f64]) {
    let (f, hdim) = (m.n_features(), m.hidden());
    let (gq, rest) = grad.split_at_mut(f);
    let (gw1, rest) = rest.split_at_mut(f * hdim);
    let (gb1, rest) = rest.split_at_mut(hdim);
    let (gw2, gb2) = rest.split_at_mut(hdim);

    let g = sigmoid(c.logit) - if label { 1.0 } else { 0.0 };
    gb2[0] += g;
    let mut dz1 = vec![0.0; hdim];
    for j in 0..hdim {
        gw2[j] += g * c.h[j];
        dz1[j] = if c.z1[j] > 0.0 { g * m.w2[j] * c.mask[j] } else { 0.0 };
        gb1[j] += dz1[j];
    }
    let mut dpooled = vec![0.0; f];
    for i in 0..f {
        let wrow = m.w1.row(i);
        let grow = &mut gw1[i * hdim..(i + 1) * hdim];
        let mut acc = 0.0;
        for j in 0..hdim {
            grow[j] += c.pooled[i] * dz1[j];
            acc += wrow[j] * dz1[j];
        }
        dpooled[i] = acc;
    }
    // pooled = sum_t a_t x_t, a = softmax(x q)
    let da: Vec<f64> = (0..x.rows())
        .map(|t| x.row(t).iter().zip(&dpooled).map(|(a, b)| a * b).sum())
        .collect();
    let mean_da: f64 = c.attn.iter().zip(&da).map(|(a, d)| a * d).sum();
    for t in 0..x.rows() {
        let ds = c.attn[t] * (da[t] - mean_da);
        if ds == 0.0 {
            continue;
        }
        for (q, v) in gq.iter_mut().zip(x.row(t)) {
            *q += ds * v;
        }
    }
}

/// Fresh model: zero query and biases, He-scaled first layer.
pub fn init_gate(feature_indices: Vec<usize>, sigma: Vec<f64>, cfg: &GateConfig) -> Result<GateModel> {
    cfg.validate()?;
    let f = feature_indices.len();
    if f == 0 {
        return Err(Error::Empty("gate features"));
    }
    let mut rng = SeededRng::named(cfg.seed, "gate-init", 0);
    let s1 = (2.0 / f as f64).sqrt();
    let s2 = (1.0 / cfg.hidden as f64).sqrt();
    let m = GateModel {
        query: vec![0.0; f],
        w1: Dense {
            shape: [f, cfg.hidden],
            data: (0..f * cfg.hidden).map(|_| s1 * rng.normal()).collect(),
        },
        b1: vec![0.0; cfg.hidden],
        w2: (0..cfg.hidden).map(|_| s2 * rng.normal()).collect(),
        b2: 0.0,
        threshold: cfg.threshold,
        sigma,
        feature_indices,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub instance_id: u64,
    pub feats: Dense,
    /// `true`: the unsteered model answered incorrectly, so steer.
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    /// CSV `epoch,train_loss,val_auroc`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,val_auroc")?;
        for r in &self.epochs {
            writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_auroc)?;
        }
        Ok(())
    }
}

fn check_classes(samples: &[GateSample], what: &'static str) -> Result<()> {
    let pos = samples.iter().filter(|s| s.label).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::SingleClass(what));
    }
    Ok(())
}

fn evaluate(m: &GateModel, samples: &[GateSample]) -> Result<(f64, f64)> {
    let mut logits = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let z = run(m, &s.feats, None)?.logit;
        loss += bce_with_logit(z, s.label);
        logits.push(z);
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    Ok((auroc(&logits, &labels)?, loss / samples.len() as f64))
}

/// Minibatch Adam on binary cross-entropy with early stopping on validation
/// AUROC; equal AUROC counts as an improvement when validation loss drops.
/// Returns the best epoch's weights.
pub fn train_gate(
    feature_indices: Vec<usize>,
    sigma: Vec<f64>,
    train: &[GateSample],
    val: &[GateSample],
    cfg: &GateConfig,
) -> Result<(GateModel, TrainReport)> {
    cfg.validate()?;
    check_classes(train, "gate training set")?;
    check_classes(val, "gate validation set")?;
    let mut model = init_gate(feature_indices, sigma, cfg)?;
    for s in train.iter().chain(val) {
        if s.feats.cols() != model.n_features() {
            return Err(Error::Length {
                op: "gate sample width",
                left: s.feats.cols(),
                right: model.n_features(),
            }
            .for_instance(s.instance_id));
        }
    }
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate, cfg.weight_decay);
    let mut drop_rng = SeededRng::named(cfg.seed, "gate-dropout", 0);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut since = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; params.len()];

    for epoch in 1..=cfg.max_epochs {
        SeededRng::new(cfg.seed, stream_id("gate-shuffle", epoch as u64)).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let s = &train[i];
                let cache = run(&model, &s.feats, Some((cfg.dropout, &mut drop_rng)))?;
                total += bce_with_logit(cache.logit, s.label);
                backward(&model, &s.feats, &cache, s.label, &mut grad);
            }
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            adam.step(&mut params, &grad)?;
            model.set_params(&params)?;
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite("gate training loss"));
        }
        let (val_auroc, val_loss) = evaluate(&model, val)?;
        epochs.push(EpochRow {
            epoch,
            train_loss,
            val_auroc,
            val_loss,
        });
        if val_auroc > best.0 || (val_auroc == best.0 && val_loss < best.1) {
            best = (val_auroc, val_loss);
            best_params.copy_from_slice(&params);
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.set_params(&best_params)?;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            stopped_early,
        },
    ))
}

pub fn gate_to_json(m: &GateModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)?)
}

pub fn gate_from_json(s: &str) -> Result<GateModel> {
    let m: GateModel = serde_json::from_str(s)?;
    m.validate()?;
    Ok(m)
}

pub fn save_gate(path: impl AsRef<Path>, m: &GateModel) -> Result<()> {
    std::fs::write(path, gate_to_json(m)?)?;
    Ok(())
}

pub fn load_gate(path: impl AsRef<Path>) -> Result<GateModel> {
    gate_from_json(&std::fs::read_to_string(path)?)
}
