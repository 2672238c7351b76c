//! Minimal pre-norm decoder-only transformer with SwiGLU MLPs.
//!
//! The MLP post-activation (the `d_mlp` vector `silu(gate) * up` right before
//! the down projection) is both the capture site and the steering site.

mod io;
mod planted;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax_first, rms_norm, silu, softmax, vec_mat, vec_mat_f64, Matrix, SeededRng};

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use planted::{build_planted_model, PlantedKind, PlantedModel, PlantedOptions, TaskOracle, VocabLayout};

pub const NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("model config: {name} must be >= 1")));
            }
            if v > u32::MAX as usize {
                return Err(Error::invalid(format!("model config: {name} exceeds u32")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    /// `d_model × d_mlp`
    pub w_gate: Matrix,
    /// `d_model × d_mlp`
    pub w_up: Matrix,
    /// `d_mlp × d_model`
    pub w_down: Matrix,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            mlp_norm: vec![1.0; d],
            w_gate: Matrix::zeros(d, cfg.d_mlp),
            w_up: Matrix::zeros(d, cfg.d_mlp),
            w_down: Matrix::zeros(cfg.d_mlp, d),
        }
    }
}

/// Row-vector convention throughout: `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `d_model × vocab`
    pub unembed: Matrix,
}

impl Weights {
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Weights {
            config: cfg,
            embed: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(&cfg)).collect(),
            final_norm: vec![1.0; cfg.d_model],
            unembed: Matrix::zeros(cfg.d_model, cfg.vocab_size),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let d = cfg.d_model;
        let check = |name: &str, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::invalid(format!(
                    "weights: {name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if m.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("weights"));
            }
            Ok(())
        };
        let check_vec = |name: &str, v: &[f32]| -> Result<()> {
            if v.len() != d {
                return Err(Error::invalid(format!("weights: {name} has length {}, expected {d}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("weights"));
            }
            Ok(())
        };
        check("embed", &self.embed, (cfg.vocab_size, d))?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::invalid(format!(
                "weights: {} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for lw in &self.layers {
            check_vec("attn_norm", &lw.attn_norm)?;
            check("wq", &lw.wq, (d, d))?;
            check("wk", &lw.wk, (d, d))?;
            check("wv", &lw.wv, (d, d))?;
            check("wo", &lw.wo, (d, d))?;
            check_vec("mlp_norm", &lw.mlp_norm)?;
            check("w_gate", &lw.w_gate, (d, cfg.d_mlp))?;
            check("w_up", &lw.w_up, (d, cfg.d_mlp))?;
            check("w_down", &lw.w_down, (cfg.d_mlp, d))?;
        }
        check_vec("final_norm", &self.final_norm)?;
        check("unembed", &self.unembed, (d, cfg.vocab_size))?;
        Ok(())
    }
}

/// Entries i.i.d. normal scaled by `1/sqrt(fan_in)`; norm gains are one.
pub fn build_random_model(cfg: ModelConfig, seed: u64) -> Result<Weights> {
    cfg.validate()?;
    let mut rng = SeededRng::named(seed, "random-model", 0);
    let mut rand_m = |rows: usize, cols: usize, fan_in: usize| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| (rng.normal() * scale) as f32).collect();
        Matrix::from_vec(rows, cols, data)
    };
    let d = cfg.d_model;
    let embed = rand_m(cfg.vocab_size, d, 1)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq: rand_m(d, d, d)?,
            wk: rand_m(d, d, d)?,
            wv: rand_m(d, d, d)?,
            wo: rand_m(d, d, d)?,
            mlp_norm: vec![1.0; d],
            w_gate: rand_m(d, cfg.d_mlp, d)?,
            w_up: rand_m(d, cfg.d_mlp, d)?,
            w_down: rand_m(cfg.d_mlp, d, cfg.d_mlp)?,
        });
    }
    let unembed = rand_m(d, cfg.vocab_size, d)?;
    Ok(Weights {
        config: cfg,
        embed,
        layers,
        final_norm: vec![1.0; d],
        unembed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Md,
    Probe,
    Random,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Md => "md",
            Provenance::Probe => "probe",
            Provenance::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringEntry {
    pub layer: usize,
    pub neuron: usize,
    pub value: f64,
}

/// Sparse per-layer steering vectors plus a global strength `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub alpha: f64,
    pub provenance: Provenance,
    pub entries: Vec<SteeringEntry>,
}

impl SteeringSpec {
    /// Sorts entries by `(layer, neuron)` and rejects duplicates.
    pub fn new(alpha: f64, provenance: Provenance, mut entries: Vec<SteeringEntry>) -> Result<Self> {
        entries.sort_by_key(|e| (e.layer, e.neuron));
        let spec = SteeringSpec {
            alpha,
            provenance,
            entries,
        };
        spec.check_intrinsic()?;
        Ok(spec)
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        SteeringSpec::new(alpha, self.provenance, self.entries.clone())
    }

    fn check_intrinsic(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("steering alpha must be finite and >= 0, got {}", self.alpha)));
        }
        for w in self.entries.windows(2) {
            let (a, b) = ((w[0].layer, w[0].neuron), (w[1].layer, w[1].neuron));
            if a == b {
                return Err(Error::invalid(format!("duplicate steering entry {a:?}")));
            }
            if a > b {
                return Err(Error::invalid("steering entries not sorted by (layer, neuron)"));
            }
        }
        if self.entries.iter().any(|e| !e.value.is_finite()) {
            return Err(Error::NonFinite("steering entry"));
        }
        Ok(())
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        self.check_intrinsic()?;
        for e in &self.entries {
            if e.layer >= cfg.n_layers || e.neuron >= cfg.d_mlp {
                return Err(Error::OutOfRange(format!(
                    "steering entry ({}, {}) outside {} layers x {} neurons",
                    e.layer, e.neuron, cfg.n_layers, cfg.d_mlp
                )));
            }
        }
        Ok(())
    }

    pub fn neurons(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.layer, e.neuron)).collect()
    }

    /// Per-layer `(neuron, alpha * value)` lists as injected in the forward pass.
    fn compile(&self, cfg: &ModelConfig) -> Result<Vec<Vec<(usize, f32)>>> {
        self.validate_for(cfg)?;
        let mut per_layer = vec![Vec::new(); cfg.n_layers];
        for e in &self.entries {
            per_layer[e.layer].push((e.neuron, (self.alpha * e.value) as f32));
        }
        Ok(per_layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteerScope {
    /// Prompt prefill and generated positions.
    #[default]
    AllPositions,
    GeneratedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapturePoint {
    #[default]
    PostSteering,
    PreSteering,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureFlags {
    pub activations: bool,
    pub hidden: bool,
    pub point: CapturePoint,
}

impl CaptureFlags {
    pub fn none() -> Self {
        CaptureFlags::default()
    }

    pub fn all() -> Self {
        CaptureFlags {
            activations: true,
            hidden: true,
            point: CapturePoint::PostSteering,
        }
    }

    fn any(&self) -> bool {
        self.activations || self.hidden
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub steering: Option<&'a SteeringSpec>,
    pub scope: SteerScope,
    /// Defaults to the whole sequence when `None`.
    pub prompt_len: Option<usize>,
    pub capture: CaptureFlags,
}

/// Per-token MLP post-activations and residual states for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub d_model: usize,
    /// `n_tokens × n_layers × d_mlp`, token-major.
    pub activations: Vec<f32>,
    /// `n_tokens × (n_layers + 1) × d_model`; index 0 is the embedding output.
    pub hidden: Option<Vec<f32>>,
}

impl ActivationTrace {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn activation(&self, token: usize, layer: usize) -> &[f32] {
        let start = (token * self.n_layers + layer) * self.d_mlp;
        &self.activations[start..start + self.d_mlp]
    }

    pub fn hidden_state(&self, token: usize, layer: usize) -> Option<&[f32]> {
        self.hidden.as_ref().map(|h| {
            let start = (token * (self.n_layers + 1) + layer) * self.d_model;
            &h[start..start + self.d_model]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.prompt_len > n {
            return Err(Error::invalid(format!("trace prompt length {} exceeds {n} tokens", self.prompt_len)));
        }
        if self.activations.len() != n * self.n_layers * self.d_mlp {
            return Err(Error::Length {
                op: "ActivationTrace activations",
                left: self.activations.len(),
                right: n * self.n_layers * self.d_mlp,
            });
        }
        if let Some(h) = &self.hidden {
            if h.len() != n * (self.n_layers + 1) * self.d_model {
                return Err(Error::Length {
                    op: "ActivationTrace hidden",
                    left: h.len(),
                    right: n * (self.n_layers + 1) * self.d_model,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One logit row per input position.
    pub logits: Vec<Vec<f32>>,
    pub trace: Option<ActivationTrace>,
}

/// Incremental decoder with a key/value cache. Prefill and decode share the
/// same per-token path, so a full forward and a token-by-token generation
/// produce identical activations.
struct Session<'a> {
    w: &'a Weights,
    steer: Vec<Vec<(usize, f32)>>,
    steer_from: usize,
    capture: CaptureFlags,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    tokens: Vec<u32>,
    acts: Vec<f32>,
    hidden: Vec<f32>,
}

impl<'a> Session<'a> {
    fn new(w: &'a Weights, steering: Option<&SteeringSpec>, steer_from: usize, capture: CaptureFlags) -> Result<Self> {
        let cfg = &w.config;
        let steer = match steering {
            Some(spec) => spec.compile(cfg)?,
            None => vec![Vec::new(); cfg.n_layers],
        };
        Ok(Session {
            w,
            steer,
            steer_from,
            capture,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            tokens: Vec::new(),
            acts: Vec::new(),
            hidden: Vec::new(),
        })
    }

    fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let w = self.w;
        let cfg = &w.config;
        let pos = self.tokens.len();
        if pos >= cfg.max_seq {
            return Err(Error::invalid(format!("sequence longer than max_seq {}", cfg.max_seq)));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::OutOfRange(format!("token id {token} >= vocab size {}", cfg.vocab_size)));
        }
        self.tokens.push(token);
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let mut x = w.embed.row(token as usize).to_vec();
        if self.capture.hidden {
            self.hidden.extend_from_slice(&x);
        }
        let steer_here = pos >= self.steer_from;

        for (l, lw) in w.layers.iter().enumerate() {
            let n = rms_norm(&x, &lw.attn_norm, NORM_EPS)?;
            let mut q = vec_mat(&n, &lw.wq)?;
            let mut k = vec_mat(&n, &lw.wk)?;
            let v = vec_mat(&n, &lw.wv)?;
            for h in 0..cfg.n_heads {
                rope(&mut q[h * hd..(h + 1) * hd], pos);
                rope(&mut k[h * hd..(h + 1) * hd], pos);
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];
            let scale = 1.0 / (hd as f64).sqrt();
            let mut attn = vec![0.0f32; d];
            let mut scores = vec![0.0f64; pos + 1];
            for h in 0..cfg.n_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                for (p, s) in scores.iter_mut().enumerate() {
                    let kp = &keys[p * d + h * hd..p * d + (h + 1) * hd];
                    *s = qh.iter().zip(kp).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
                }
                let probs = softmax(&scores, 1.0)?;
                for j in 0..hd {
                    let mut acc = 0.0f64;
                    for (p, &pw) in probs.iter().enumerate() {
                        acc += pw * values[p * d + h * hd + j] as f64;
                    }
                    attn[h * hd + j] = acc as f32;
                }
            }
            let o = vec_mat(&attn, &lw.wo)?;
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let n2 = rms_norm(&x, &lw.mlp_norm, NORM_EPS)?;
            let gate = vec_mat_f64(&n2, &lw.w_gate)?;
            let up = vec_mat_f64(&n2, &lw.w_up)?;
            let mut act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| (silu(g) * u) as f32).collect();
            if self.capture.activations && self.capture.point == CapturePoint::PreSteering {
                self.acts.extend_from_slice(&act);
            }
            if steer_here {
                for &(i, val) in &self.steer[l] {
                    act[i] += val;
                }
            }
            if self.capture.activations && self.capture.point == CapturePoint::PostSteering {
                self.acts.extend_from_slice(&act);
            }
            let down = vec_mat(&act, &lw.w_down)?;
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
            if self.capture.hidden {
                self.hidden.extend_from_slice(&x);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward residual"));
        }
        let fin = rms_norm(&x, &w.final_norm, NORM_EPS)?;
        vec_mat(&fin, &w.unembed)
    }

    fn into_trace(self, prompt_len: usize) -> Option<ActivationTrace> {
        if !self.capture.any() {
            return None;
        }
        let cfg = &self.w.config;
        let n = self.tokens.len();
        let activations = if self.capture.activations {
            self.acts
        } else {
            vec![0.0; n * cfg.n_layers * cfg.d_mlp]
        };
        Some(ActivationTrace {
            tokens: self.tokens,
            prompt_len,
            n_layers: cfg.n_layers,
            d_mlp: cfg.d_mlp,
            d_model: cfg.d_model,
            activations,
            hidden: self.capture.hidden.then_some(self.hidden),
        })
    }
}

/// Rotary position mixing over consecutive pairs of a head slice. An odd
/// trailing dimension is left untouched.
fn rope(x: &mut [f32], pos: usize) {
    let hd = x.len();
    for i in 0..hd / 2 {
        let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
        let (s, c) = theta.sin_cos();
        let a = x[2 * i] as f64;
        let b = x[2 * i + 1] as f64;
        x[2 * i] = (a * c - b * s) as f32;
        x[2 * i + 1] = (a * s + b * c) as f32;
    }
}

fn steer_start(scope: SteerScope, prompt_len: usize) -> usize {
    match scope {
        SteerScope::AllPositions => 0,
        SteerScope::GeneratedOnly => prompt_len,
    }
}

pub fn forward(w: &Weights, tokens: &[u32], opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
    if tokens.len() > w.config.max_seq {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            w.config.max_seq
        )));
    }
    let prompt_len = opts.prompt_len.unwrap_or(tokens.len()).min(tokens.len());
    let mut session = Session::new(w, opts.steering, steer_start(opts.scope, prompt_len), opts.capture)?;
    let logits = tokens
        .iter()
        .map(|&t| session.step(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput {
        logits,
        trace: session.into_trace(prompt_len),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub stream: u64,
    pub capture: bool,
    pub capture_hidden: bool,
    pub capture_point: CapturePoint,
    pub scope: SteerScope,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig {
            temperature: 0.0,
            max_new_tokens,
            seed: 0,
            stream: 0,
            capture: true,
            capture_hidden: false,
            capture_point: CapturePoint::PostSteering,
            scope: SteerScope::AllPositions,
        }
    }

    pub fn sampled(temperature: f64, max_new_tokens: usize, seed: u64, stream: u64) -> Self {
        DecodeConfig {
            temperature,
            seed,
            stream,
            ..DecodeConfig::greedy(max_new_tokens)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub trace: Option<ActivationTrace>,
}

impl Generation {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Autoregressive decoding. The last generated token is also fed through the
/// model so the trace covers every token of the returned sequence.
pub fn generate(w: &Weights, prompt: &[u32], cfg: &DecodeConfig, steering: Option<&SteeringSpec>) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Empty("generate prompt"));
    }
    if prompt.len() + cfg.max_new_tokens > w.config.max_seq {
        return Err(Error::invalid(format!(
            "prompt length {} + {} new tokens exceeds max_seq {}",
            prompt.len(),
            cfg.max_new_tokens,
            w.config.max_seq
        )));
    }
    if !(cfg.temperature >= 0.0) || !cfg.temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be finite and >= 0, got {}", cfg.temperature)));
    }
    let capture = CaptureFlags {
        activations: cfg.capture,
        hidden: cfg.capture_hidden,
        point: cfg.capture_point,
    };
    let mut session = Session::new(w, steering, steer_start(cfg.scope, prompt.len()), capture)?;
    let mut rng = SeededRng::new(cfg.seed, cfg.stream);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = session.step(t)?;
    }
    for _ in 0..cfg.max_new_tokens {
        let next = if cfg.temperature == 0.0 {
            argmax_first(&logits)?
        } else {
            let l64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            rng.categorical(&softmax(&l64, cfg.temperature)?)?
        };
        logits = session.step(next as u32)?;
    }
    let tokens = session.tokens.clone();
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        trace: session.into_trace(prompt.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_mlp: 12,
            n_heads: 2,
            vocab_size: 20,
            max_seq: 16,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 2;
        cfg.d_mlp = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_model_reproducible_per_seed() {
        let a = build_random_model(small_cfg(), 1).unwrap();
        let b = build_random_model(small_cfg(), 1).unwrap();
        let c = build_random_model(small_cfg(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn random_model_logits_finite_over_random_prompts() {
        let w = build_random_model(small_cfg(), 9).unwrap();
        let mut rng = SeededRng::new(5, 0);
        for _ in 0..100 {
            let len = 1 + rng.below(10);
            let toks: Vec<u32> = (0..len).map(|_| rng.below(20) as u32).collect();
            let out = forward(&w, &toks, &ForwardOptions::default()).unwrap();
            assert!(out.logits.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_alpha_matches_no_steering() {
        let w = build_random_model(small_cfg(), 3).unwrap();
        let spec = SteeringSpec::new(
            0.0,
            Provenance::Md,
            vec![SteeringEntry { layer: 1, neuron: 4, value: 7.5 }],
        )
        .unwrap();
        let toks = [1u32, 5, 9, 2];
        let a = forward(&w, &toks, &ForwardOptions::default()).unwrap();
        let b = forward(
            &w,
            &toks,
            &ForwardOptions {
                steering: Some(&spec),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn scalar_forward_oracle() {
        // 1 layer, d = d_mlp = 1, inert attention.
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 1,
            d_mlp: 1,
            n_heads: 1,
            vocab_size: 2,
            max_seq: 4,
        };
        let (x, g, u, wd, s, alpha) = (0.8f32, 1.5f32, -0.7f32, 2.0f32, 0.6, 0.3);
        let mut w = Weights::zeros(cfg).unwrap();
        w.embed.set(1, 0, x);
        w.layers[0].w_gate.set(0, 0, g);
        w.layers[0].w_up.set(0, 0, u);
        w.layers[0].w_down.set(0, 0, wd);
        w.unembed.set(0, 1, 1.0);
        let spec = SteeringSpec::new(alpha, Provenance::Md, vec![SteeringEntry { layer: 0, neuron: 0, value: s }]).unwrap();
        let out = forward(
            &w,
            &[1],
            &ForwardOptions {
                steering: Some(&spec),
                capture: CaptureFlags::all(),
                ..Default::default()
            },
        )
        .unwrap();
        let trace = out.trace.unwrap();
        // pre-norm with d = 1 reduces the normalized input to x / sqrt(x^2 + eps)
        let xf = x as f64;
        let n = xf / (xf * xf + NORM_EPS).sqrt();
        let act = silu(g as f64 * n) * (u as f64 * n) + alpha * s;
        let expected = xf + wd as f64 * act;
        let got = trace.hidden_state(0, 1).unwrap()[0] as f64;
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
        assert!((trace.activation(0, 0)[0] as f64 - act).abs() < 1e-6);
    }

    #[test]
    fn steering_bounds_checked() {
        let w = build_random_model(small_cfg(), 3).unwrap();
        let bad = SteeringSpec::new(1.0, Provenance::Md, vec![SteeringEntry { layer: 2, neuron: 0, value: 1.0 }]).unwrap();
        let err = forward(
            &w,
            &[1],
            &ForwardOptions {
                steering: Some(&bad),
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(Error::OutOfRange(_))));
        assert!(SteeringSpec::new(
            1.0,
            Provenance::Md,
            vec![
                SteeringEntry { layer: 0, neuron: 1, value: 1.0 },
                SteeringEntry { layer: 0, neuron: 1, value: 2.0 }
            ]
        )
        .is_err());
        assert!(SteeringSpec::new(-0.1, Provenance::Md, vec![]).is_err());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let w = build_random_model(small_cfg(), 3).unwrap();
        assert!(forward(&w, &[25], &ForwardOptions::default()).is_err());
        assert!(forward(&w, &[1; 17], &ForwardOptions::default()).is_err());
        assert!(generate(&w, &[], &DecodeConfig::greedy(2), None).is_err());
        assert!(generate(&w, &[1; 10], &DecodeConfig::greedy(7), None).is_err());
    }

    #[test]
    fn greedy_and_seeded_sampling_are_deterministic() {
        let w = build_random_model(small_cfg(), 4).unwrap();
        let a = generate(&w, &[1, 2, 3], &DecodeConfig::greedy(5), None).unwrap();
        let b = generate(&w, &[1, 2, 3], &DecodeConfig::greedy(5), None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let cfg = DecodeConfig::sampled(1.0, 8, 42, 7);
        let a = generate(&w, &[1, 2], &cfg, None).unwrap();
        let b = generate(&w, &[1, 2], &cfg, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace.unwrap().activations, b.trace.unwrap().activations);
    }

    #[test]
    fn generation_trace_matches_full_forward() {
        let w = build_random_model(small_cfg(), 11).unwrap();
        let spec = SteeringSpec::new(
            0.5,
            Provenance::Md,
            vec![SteeringEntry { layer: 0, neuron: 3, value: 1.5 }],
        )
        .unwrap();
        let mut cfg = DecodeConfig::sampled(1.0, 6, 3, 1);
        cfg.capture_hidden = true;
        let gen = generate(&w, &[4, 7, 1], &cfg, Some(&spec)).unwrap();
        let trace = gen.trace.unwrap();
        let full = forward(
            &w,
            &gen.tokens,
            &ForwardOptions {
                steering: Some(&spec),
                prompt_len: Some(3),
                capture: CaptureFlags::all(),
                ..Default::default()
            },
        )
        .unwrap()
        .trace
        .unwrap();
        assert_eq!(trace.activations.len(), 9 * 2 * 12);
        for (a, b) in trace.activations.iter().zip(&full.activations) {
            assert!((a - b).abs() <= 1e-5);
        }
        assert_eq!(trace.prompt_len, 3);
        assert_eq!(trace.hidden.as_ref().unwrap().len(), 9 * 3 * 8);
    }

    #[test]
    fn generated_only_scope_leaves_prompt_untouched() {
        let w = build_random_model(small_cfg(), 12).unwrap();
        let spec = SteeringSpec::new(2.0, Provenance::Md, vec![SteeringEntry { layer: 1, neuron: 0, value: 3.0 }]).unwrap();
        let toks = [3u32, 4, 5, 6];
        let base = forward(&w, &toks, &ForwardOptions { capture: CaptureFlags::all(), ..Default::default() }).unwrap();
        let gen_only = forward(
            &w,
            &toks,
            &ForwardOptions {
                steering: Some(&spec),
                scope: SteerScope::GeneratedOnly,
                prompt_len: Some(2),
                capture: CaptureFlags::all(),
            },
        )
        .unwrap();
        assert_eq!(base.logits[..2], gen_only.logits[..2]);
        assert_ne!(base.logits[2], gen_only.logits[2]);
        let t = gen_only.trace.unwrap();
        assert_eq!(t.activation(3, 1)[0], base.trace.as_ref().unwrap().activation(3, 1)[0] + 6.0);
    }

    #[test]
    fn pre_steering_capture_excludes_injection() {
        let w = build_random_model(small_cfg(), 13).unwrap();
        let spec = SteeringSpec::new(1.0, Provenance::Md, vec![SteeringEntry { layer: 0, neuron: 2, value: 4.0 }]).unwrap();
        let run = |point| {
            forward(
                &w,
                &[1],
                &ForwardOptions {
                    steering: Some(&spec),
                    capture: CaptureFlags { activations: true, hidden: false, point },
                    ..Default::default()
                },
            )
            .unwrap()
            .trace
            .unwrap()
        };
        let pre = run(CapturePoint::PreSteering);
        let post = run(CapturePoint::PostSteering);
        assert_eq!(post.activation(0, 0)[2], pre.activation(0, 0)[2] + 4.0);
    }
}
