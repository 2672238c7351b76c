//! Planted-circuit toy model: answer correctness is controlled by a chosen
//! set of MLP neurons, which gives identification and steering an exact
//! ground truth.
//!
//! Residual coordinates:
//!
//! | coord | meaning |
//! |-------|---------|
//! | 0 | constant, read by every gate projection |
//! | 1 | prompt polarity (`+` clean, `-` corrupt) and answer polarity |
//! | 2 | answer-only polarity (zero on prompts) |
//! | 3 | output direction: correct minus wrong |
//! | 4.. | scratch |
//!
//! Attention output projections are zero, so every position is computed
//! independently; single-token forwards are exact stand-ins for any position.
//!
//! A prompt is `[BOS, q]` and the answer is the one generated token.

use serde::{Deserialize, Serialize};

use super::{forward, CaptureFlags, ForwardOptions, ModelConfig, Provenance, SteeringSpec, Weights};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::rcn;
use crate::traces::{ContrastivePair, LabeledTrace, Span, TaskInstance, Variant};

const ONE: usize = 0;
const POL: usize = 1;
const APOL: usize = 2;
const DIR: usize = 3;
const JUNK: usize = 4;

const C_ONE: f64 = 4.0;
const A_POL: f64 = 4.0;
const A_APOL: f64 = 4.0;
const GATE: f64 = 8.0;
const SUPPRESS: f64 = 12.0;
const OVERSHOOT_BIAS: f64 = 8.0;
/// Median output-direction value on clean prompts.
const TARGET_DIR: f64 = 1.0;
/// Median clean logit gap `ln 3`, i.e. 75% correct at temperature 1.
const CLEAN_GAP: f64 = 1.098_612_288_668_109_8;
const DISTRACTOR_SCORE_RATIO: f64 = 0.5;
const DISTRACTOR_HARM: f64 = 1.5;
const CALIBRATION_ROUNDS: usize = 6;
/// Keeps the normalized prompt polarity under half the normalized answer
/// polarity (prompt RMS is at least `0.8 C_ONE / sqrt(d)`), so the answer
/// always decides the sign of a trace mean.
const P0_CAP: f64 = 0.5 * A_POL * 0.8 * C_ONE / 6.928_203_230_275_509;
/// Relative pad on the bisected threshold, absorbing rounding differences
/// between the reference spec and one built from many pairs.
const ALPHA_PAD: f64 = 1e-4;
const BUILD_ATTEMPTS: u64 = 4;

/// Token ids: 0 BOS, 1 correct, 2 wrong, 3 overshoot, then clean/corrupt
/// prompt tokens interleaved per instance; the rest are filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_instances: usize,
}

impl VocabLayout {
    pub const BOS: u32 = 0;
    pub const CORRECT: u32 = 1;
    pub const WRONG: u32 = 2;
    pub const OVERSHOOT: u32 = 3;
    const RESERVED: usize = 4;

    pub fn required_vocab(&self) -> usize {
        Self::RESERVED + 2 * self.n_instances
    }

    pub fn prompt_token(&self, index: usize, variant: Variant) -> Result<u32> {
        if index >= self.n_instances {
            return Err(Error::OutOfRange(format!(
                "planted instance {index} >= {} instances",
                self.n_instances
            )));
        }
        let base = (Self::RESERVED + 2 * index) as u32;
        match variant {
            Variant::Clean => Ok(base),
            Variant::Corrupt => Ok(base + 1),
            Variant::Natural => Err(Error::invalid("planted prompts are clean or corrupt")),
        }
    }

    pub fn prompt(&self, index: usize, variant: Variant) -> Result<Vec<u32>> {
        Ok(vec![Self::BOS, self.prompt_token(index, variant)?])
    }
}

/// Maps instances to prompts and judges answers: only the correct-answer
/// token counts as correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOracle {
    pub layout: VocabLayout,
}

impl TaskOracle {
    pub const MAX_NEW_TOKENS: usize = 1;

    pub fn instance(&self, id: u64, index: usize, variant: Variant) -> Result<TaskInstance> {
        Ok(TaskInstance {
            id,
            prompt: self.layout.prompt(index, variant)?,
            answer_tokens: vec![VocabLayout::CORRECT],
            variant,
        })
    }

    pub fn judge(&self, answer: Option<u32>) -> bool {
        answer == Some(VocabLayout::CORRECT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedKind {
    /// Steering past the threshold never hurts.
    Plain,
    /// Adds an overshoot answer that wins once the output direction grows too
    /// large relative to the constant coordinate, so strong steering flips some
    /// clean prompts to a wrong answer. Also adds distractor neurons that
    /// pass the polarity filter with smaller scores but push the wrong way.
    MixedHarm {
        distractors: usize,
        overshoot_fraction: f64,
    },
}

impl PlantedKind {
    pub fn mixed_harm(n_planted: usize) -> Self {
        PlantedKind::MixedHarm {
            distractors: 4 * n_planted,
            overshoot_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedOptions {
    pub n_instances: usize,
    pub seed: u64,
    pub kind: PlantedKind,
    /// The calibration aims `alpha_star` at this value.
    pub target_alpha: f64,
}

impl PlantedOptions {
    pub fn new(n_instances: usize, seed: u64) -> Self {
        PlantedOptions {
            n_instances,
            seed,
            kind: PlantedKind::Plain,
            target_alpha: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub weights: Weights,
    pub oracle: TaskOracle,
    /// Smallest strength (padded) at which the reference spec makes every
    /// corrupt prompt decode to the correct answer.
    pub alpha_star: f64,
    pub planted: Vec<(usize, usize)>,
    pub distractors: Vec<(usize, usize)>,
    /// Spec built by the rcn pipeline from one contrastive pair, at `alpha_star`.
    pub reference: SteeringSpec,
    pub kind: PlantedKind,
    /// Overshoot wins when `x_dir / x_const` exceeds this (mixed-harm only).
    pub overshoot_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Planted,
    Distractor,
    Other,
}

/// Random draws that stay fixed while the scale parameters are calibrated.
struct Draws {
    roles: Vec<Role>,
    /// per instance polarity ratio in [0.5, 1]
    ratio: Vec<f64>,
    /// per instance constant-coordinate jitter in [0.8, 1.2]
    one: Vec<f64>,
    omega: Vec<f64>,
    delta: Vec<f64>,
    gate_scale: Vec<f64>,
    v_apol: Vec<f64>,
    v_pol: Vec<f64>,
    base: Weights,
}

#[derive(Debug, Clone, Copy)]
struct Params {
    p0: f64,
    up: f64,
    down: f64,
    up_d: f64,
    down_d: f64,
    logit: f64,
    overshoot: Option<(f64, f64)>,
}

pub fn build_planted_model(cfg: ModelConfig, planted: &[(usize, usize)], margin: f64, opts: &PlantedOptions) -> Result<PlantedModel> {
    cfg.validate()?;
    if planted.is_empty() {
        return Err(Error::invalid("planted set is empty"));
    }
    if !(margin > 0.0) || !margin.is_finite() {
        return Err(Error::invalid(format!("planted margin must be > 0, got {margin}")));
    }
    if opts.n_instances == 0 {
        return Err(Error::invalid("planted model needs at least one instance"));
    }
    if !(opts.target_alpha > 0.0) {
        return Err(Error::invalid("planted target alpha must be > 0"));
    }
    if cfg.d_model < 5 {
        return Err(Error::invalid(format!("planted model needs d_model >= 5, got {}", cfg.d_model)));
    }
    if cfg.max_seq < 3 {
        return Err(Error::invalid("planted model needs max_seq >= 3"));
    }
    let layout = VocabLayout {
        n_instances: opts.n_instances,
    };
    if cfg.vocab_size < layout.required_vocab() {
        return Err(Error::invalid(format!(
            "vocabulary of {} is too small: {} instances need {} reserved tokens",
            cfg.vocab_size,
            opts.n_instances,
            layout.required_vocab()
        )));
    }
    let mut sorted = planted.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("planted neurons must be distinct"));
    }
    if let Some(&(l, i)) = sorted.iter().find(|&&(l, i)| l >= cfg.n_layers || i >= cfg.d_mlp) {
        return Err(Error::OutOfRange(format!(
            "planted neuron ({l}, {i}) outside {} layers x {} neurons",
            cfg.n_layers, cfg.d_mlp
        )));
    }
    let mixed = match opts.kind {
        PlantedKind::Plain => None,
        PlantedKind::MixedHarm {
            distractors,
            overshoot_fraction,
        } => {
            if !(overshoot_fraction > 0.0 && overshoot_fraction < 1.0) {
                return Err(Error::invalid("overshoot fraction must be in (0, 1)"));
            }
            if opts.n_instances < 2 {
                return Err(Error::invalid("mixed-harm model needs at least two instances"));
            }
            Some((distractors, overshoot_fraction))
        }
    };

    // An unlucky weight draw can defeat calibration; redraw a few times
    // before giving up.
    let mut last = None;
    for attempt in 0..BUILD_ATTEMPTS {
        match construct(cfg, layout, &sorted, mixed, margin, opts, attempt) {
            Ok(m) => return Ok(m),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn construct(
    cfg: ModelConfig,
    layout: VocabLayout,
    sorted: &[(usize, usize)],
    mixed: Option<(usize, f64)>,
    margin: f64,
    opts: &PlantedOptions,
    attempt: u64,
) -> Result<PlantedModel> {
    let draws = draw(&cfg, sorted, mixed.map_or(0, |m| m.0), opts, attempt)?;
    let distractors: Vec<(usize, usize)> = draws
        .roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Role::Distractor)
        .map(|(f, _)| (f / cfg.d_mlp, f % cfg.d_mlp))
        .collect();
    let world = World {
        cfg,
        layout,
        planted: sorted,
        draws: &draws,
    };

    let mut p = Params {
        p0: 0.5,
        up: 0.1,
        down: 0.2,
        up_d: 0.05,
        down_d: 0.2,
        logit: 1.0,
        overshoot: None,
    };
    for _ in 0..CALIBRATION_ROUNDS {
        let w = world.assemble(&p)?;
        let m_now = world.margin(&w)?;
        if !(m_now > 0.0) {
            return Err(Error::invalid("planted construction: polarity not separable"));
        }
        p.up *= 1.25 * margin / m_now;

        if mixed.is_some() {
            let w = world.assemble(&p)?;
            let (sp, sd) = world.answer_scores(&w)?;
            let min_p = sp.iter().map(|&(_, s)| s.abs()).fold(f64::INFINITY, f64::min);
            let max_d = sd.iter().map(|&(_, s)| s.abs()).fold(0.0, f64::max);
            if max_d > 0.0 {
                p.up_d *= DISTRACTOR_SCORE_RATIO * min_p / max_d;
            }
            let w = world.assemble(&p)?;
            let (sp, sd) = world.answer_scores(&w)?;
            let push: f64 = sp.iter().map(|&(f, s)| s.abs() * p.down * draws.delta[f]).sum();
            let per_d: f64 = sd.iter().map(|&(f, s)| s.abs() * draws.delta[f]).sum();
            if per_d > 0.0 {
                p.down_d = DISTRACTOR_HARM * push / per_d;
            }
        }

        let w = world.assemble(&p)?;
        let median = world.median_clean_dir(&w)?;
        if !(median > 0.0) {
            return Err(Error::invalid("planted construction: clean prompts do not favour the correct answer"));
        }
        p.down *= TARGET_DIR / median;
        p.down_d *= TARGET_DIR / median;

        let w = world.assemble(&p)?;
        let spec = world.reference_spec(&w)?;
        let alpha = world.alpha_threshold(&w, &spec)?;
        p.p0 *= opts.target_alpha / alpha;
        p.p0 = p.p0.min(P0_CAP);
    }

    // Logit scale: the median clean prompt gets a correct-vs-wrong gap of ln 3.
    let w = world.assemble(&p)?;
    let mut n_dirs = Vec::with_capacity(opts.n_instances);
    for i in 0..opts.n_instances {
        let st = probe(&w, layout.prompt_token(i, Variant::Clean)?, None)?;
        n_dirs.push(st.normalized_dir());
    }
    p.logit = CLEAN_GAP / (2.0 * median(&mut n_dirs));

    let mut overshoot_ratio = None;
    if let Some((_, fraction)) = mixed {
        let w = world.assemble(&p)?;
        let spec = world.reference_spec(&w)?;
        let alpha = world.alpha_threshold(&w, &spec)? * (1.0 + ALPHA_PAD);
        let spec = spec.with_alpha(alpha)?;
        let n = opts.n_instances;
        let mut steered = Vec::with_capacity(n);
        let mut ceiling = 0.0f64;
        for i in 0..n {
            let clean = layout.prompt_token(i, Variant::Clean)?;
            let corrupt = layout.prompt_token(i, Variant::Corrupt)?;
            steered.push(probe(&w, clean, Some(&spec))?.dir_ratio());
            ceiling = ceiling
                .max(probe(&w, clean, None)?.dir_ratio())
                .max(probe(&w, corrupt, Some(&spec))?.dir_ratio());
        }
        steered.sort_by(f64::total_cmp);
        let m = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let tau = 0.5 * (steered[n - m - 1] + steered[n - m]);
        if !(tau > ceiling) {
            return Err(Error::invalid(
                "planted construction: overshoot threshold would also hit unsteered or corrupt prompts",
            ));
        }
        p.overshoot = Some((p.logit + OVERSHOOT_BIAS / tau, OVERSHOOT_BIAS));
        overshoot_ratio = Some(tau);
    }

    let weights = world.assemble(&p)?;
    let spec = world.reference_spec(&weights)?;
    let alpha_star = world.alpha_threshold(&weights, &spec)? * (1.0 + ALPHA_PAD);
    let reference = spec.with_alpha(alpha_star)?;
    let model = PlantedModel {
        weights,
        oracle: TaskOracle { layout },
        alpha_star,
        planted: sorted.to_vec(),
        distractors,
        reference,
        kind: opts.kind,
        overshoot_ratio,
    };
    world.audit(&model, margin)?;
    Ok(model)
}

fn draw(cfg: &ModelConfig, planted: &[(usize, usize)], n_distractors: usize, opts: &PlantedOptions, attempt: u64) -> Result<Draws> {
    let mut rng = SeededRng::named(opts.seed, "planted-model", attempt);
    let total = cfg.n_neurons();
    let mut roles = vec![Role::Other; total];
    for &(l, i) in planted {
        roles[l * cfg.d_mlp + i] = Role::Planted;
    }
    let mut others: Vec<usize> = (0..total).filter(|&f| roles[f] == Role::Other).collect();
    rng.shuffle(&mut others);
    // keep at least one ordinary neuron around when there is room
    let n_distractors = n_distractors.min(others.len().saturating_sub(1));
    for &f in &others[..n_distractors] {
        roles[f] = Role::Distractor;
    }

    let n = opts.n_instances;
    let ratio = (0..n).map(|_| rng.uniform_range(0.5, 1.0)).collect();
    let one = (0..n).map(|_| rng.uniform_range(0.8, 1.2)).collect();
    let omega = (0..total).map(|_| rng.uniform_range(0.8, 1.2)).collect();
    let delta = (0..total).map(|_| rng.uniform_range(0.8, 1.2)).collect();
    let gate_scale = (0..total).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    // wide spread so some ordinary neurons outscore the planted ones
    let v_apol = (0..total).map(|_| 1.5 * rng.normal()).collect();
    let v_pol = (0..total).map(|_| 0.5 * rng.normal()).collect();

    let mut base = Weights::zeros(*cfg)?;
    let d = cfg.d_model;
    for t in 0..cfg.vocab_size {
        let answer = (1..=3).contains(&t);
        if !answer {
            base.embed.set(t, JUNK, (0.5 * rng.normal()) as f32);
            for c in 5..d {
                base.embed.set(t, c, (0.3 * rng.normal()) as f32);
            }
        }
    }
    let attn_scale = 0.5 / (d as f64).sqrt();
    let mut rand_m = |rows: usize, cols: usize, scale: f64| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| (scale * rng.normal()) as f32).collect())
    };
    for lw in base.layers.iter_mut() {
        lw.wq = rand_m(d, d, attn_scale)?;
        lw.wk = rand_m(d, d, attn_scale)?;
        lw.wv = rand_m(d, d, attn_scale)?;
        lw.w_down = rand_m(cfg.d_mlp, d, 0.01)?;
    }
    // ordinary neurons write only to scratch coordinates
    for lw in base.layers.iter_mut() {
        for j in 0..cfg.d_mlp {
            for c in 0..JUNK {
                lw.w_down.set(j, c, 0.0);
            }
        }
    }
    Ok(Draws {
        roles,
        ratio,
        one,
        omega,
        delta,
        gate_scale,
        v_apol,
        v_pol,
        base,
    })
}

struct World<'a> {
    cfg: ModelConfig,
    layout: VocabLayout,
    planted: &'a [(usize, usize)],
    draws: &'a Draws,
}

/// Single-token forward result.
struct TokenState {
    acts: Vec<f32>,
    resid: Vec<f32>,
    logits: Vec<f32>,
}

impl TokenState {
    fn dir_ratio(&self) -> f64 {
        self.resid[DIR] as f64 / self.resid[ONE] as f64
    }

    fn normalized_dir(&self) -> f64 {
        let ms = self.resid.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / self.resid.len() as f64;
        self.resid[DIR] as f64 / (ms + super::NORM_EPS).sqrt()
    }

    fn prefers_correct(&self) -> bool {
        self.logits[VocabLayout::CORRECT as usize] >= self.logits[VocabLayout::WRONG as usize]
    }

    fn argmax(&self) -> u32 {
        crate::numerics::argmax_first(&self.logits).expect("non-empty vocab") as u32
    }
}

fn probe(w: &Weights, token: u32, spec: Option<&SteeringSpec>) -> Result<TokenState> {
    let out = forward(
        w,
        &[token],
        &ForwardOptions {
            steering: spec,
            capture: CaptureFlags::all(),
            ..Default::default()
        },
    )?;
    let trace = out.trace.expect("capture enabled");
    let resid = trace.hidden_state(0, w.config.n_layers).expect("hidden captured").to_vec();
    Ok(TokenState {
        acts: trace.activations,
        resid,
        logits: out.logits.into_iter().next().expect("one position"),
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl World<'_> {
    fn assemble(&self, p: &Params) -> Result<Weights> {
        let cfg = &self.cfg;
        let dr = self.draws;
        let mut w = dr.base.clone();
        for t in 0..cfg.vocab_size {
            w.embed.set(t, ONE, C_ONE as f32);
        }
        for (t, sign) in [(VocabLayout::CORRECT, 1.0), (VocabLayout::WRONG, -1.0), (VocabLayout::OVERSHOOT, -1.0)] {
            w.embed.set(t as usize, POL, (sign * A_POL) as f32);
            w.embed.set(t as usize, APOL, (sign * A_APOL) as f32);
        }
        for i in 0..self.layout.n_instances {
            for (variant, sign) in [(Variant::Clean, 1.0), (Variant::Corrupt, -1.0)] {
                let t = self.layout.prompt_token(i, variant)? as usize;
                w.embed.set(t, ONE, (C_ONE * dr.one[i]) as f32);
                w.embed.set(t, POL, (sign * p.p0 * dr.ratio[i]) as f32);
            }
        }

        for (l, lw) in w.layers.iter_mut().enumerate() {
            for j in 0..cfg.d_mlp {
                let f = l * cfg.d_mlp + j;
                match dr.roles[f] {
                    Role::Planted => {
                        lw.w_gate.set(ONE, j, GATE as f32);
                        lw.w_up.set(POL, j, (p.up * dr.omega[f]) as f32);
                        lw.w_down.set(j, DIR, (p.down * dr.delta[f]) as f32);
                    }
                    Role::Distractor => {
                        lw.w_gate.set(ONE, j, GATE as f32);
                        lw.w_up.set(APOL, j, (p.up_d * dr.omega[f]) as f32);
                        lw.w_down.set(j, DIR, (-p.down_d * dr.delta[f]) as f32);
                    }
                    Role::Other => {
                        let (va, vp) = (p.up * dr.v_apol[f], p.up * dr.v_pol[f]);
                        // the offset dominates whatever the polarity reads
                        // contribute, so the activation is positive on every token
                        let offset = 1.25 * (va.abs() * A_APOL + vp.abs() * A_POL) / (0.8 * C_ONE) + 0.05 * p.up;
                        lw.w_gate.set(ONE, j, (GATE * dr.gate_scale[f]) as f32);
                        lw.w_up.set(ONE, j, offset as f32);
                        lw.w_up.set(APOL, j, va as f32);
                        lw.w_up.set(POL, j, vp as f32);
                        // scratch writes stay the same size whatever `up` is,
                        // so deeper layers see a stable residual norm
                        for c in JUNK..cfg.d_model {
                            let v = lw.w_down.get(j, c) as f64 * 0.1 / p.up;
                            lw.w_down.set(j, c, v as f32);
                        }
                    }
                }
            }
        }

        for t in 0..cfg.vocab_size {
            w.unembed.set(ONE, t, -SUPPRESS as f32);
        }
        let c = p.logit;
        for (t, v) in [(VocabLayout::CORRECT, c), (VocabLayout::WRONG, -c)] {
            w.unembed.set(ONE, t as usize, 0.0);
            w.unembed.set(DIR, t as usize, v as f32);
        }
        if let Some((k, b)) = p.overshoot {
            let t = VocabLayout::OVERSHOOT as usize;
            w.unembed.set(DIR, t, k as f32);
            w.unembed.set(ONE, t, -b as f32);
        }
        w.validate()?;
        Ok(w)
    }

    fn flat(&self, l: usize, i: usize) -> usize {
        l * self.cfg.d_mlp + i
    }

    fn prompt_tokens(&self) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(2 * self.layout.n_instances);
        for i in 0..self.layout.n_instances {
            out.push(self.layout.prompt_token(i, Variant::Clean)?);
            out.push(self.layout.prompt_token(i, Variant::Corrupt)?);
        }
        Ok(out)
    }

    /// Smallest signed distance of a planted trace mean from zero, over
    /// every prompt and both answers (positive means separable).
    fn margin(&self, w: &Weights) -> Result<f64> {
        let bos = probe(w, VocabLayout::BOS, None)?;
        let good = probe(w, VocabLayout::CORRECT, None)?;
        let bad = probe(w, VocabLayout::WRONG, None)?;
        let mut m = f64::INFINITY;
        for q in self.prompt_tokens()? {
            let st = probe(w, q, None)?;
            for &(l, i) in self.planted {
                let f = self.flat(l, i);
                let base = bos.acts[f] as f64 + st.acts[f] as f64;
                m = m.min((base + good.acts[f] as f64) / 3.0);
                m = m.min(-(base + bad.acts[f] as f64) / 3.0);
            }
        }
        Ok(m)
    }

    /// Per-neuron answer-driven scores `(a(correct) - a(wrong)) / 3` for the
    /// planted and distractor sets.
    #[allow(clippy::type_complexity)]
    fn answer_scores(&self, w: &Weights) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
        let good = probe(w, VocabLayout::CORRECT, None)?;
        let bad = probe(w, VocabLayout::WRONG, None)?;
        let score = |f: usize| (good.acts[f] as f64 - bad.acts[f] as f64) / 3.0;
        let mut planted = Vec::new();
        let mut distractors = Vec::new();
        for (f, role) in self.draws.roles.iter().enumerate() {
            match role {
                Role::Planted => planted.push((f, score(f))),
                Role::Distractor => distractors.push((f, score(f))),
                Role::Other => {}
            }
        }
        Ok((planted, distractors))
    }

    fn median_clean_dir(&self, w: &Weights) -> Result<f64> {
        let mut dirs = Vec::with_capacity(self.layout.n_instances);
        for i in 0..self.layout.n_instances {
            dirs.push(probe(w, self.layout.prompt_token(i, Variant::Clean)?, None)?.resid[DIR] as f64);
        }
        Ok(median(&mut dirs))
    }

    /// Runs the identification pipeline on one (correct, wrong) pair of the
    /// first clean instance and keeps the top `|planted|` neurons.
    fn reference_spec(&self, w: &Weights) -> Result<SteeringSpec> {
        let q = self.layout.prompt_token(0, Variant::Clean)?;
        let labeled = |answer: u32| -> Result<LabeledTrace> {
            let out = forward(
                w,
                &[VocabLayout::BOS, q, answer],
                &ForwardOptions {
                    prompt_len: Some(2),
                    capture: CaptureFlags {
                        activations: true,
                        ..Default::default()
                    },
                    ..Default::default()
                },
            )?;
            Ok(LabeledTrace {
                instance_id: 0,
                trace: out.trace.expect("capture enabled"),
                answer: Some(answer),
                correct: answer == VocabLayout::CORRECT,
                seed: answer as u64,
            })
        };
        let pair = ContrastivePair {
            instance_id: 0,
            positive: labeled(VocabLayout::CORRECT)?,
            negative: labeled(VocabLayout::WRONG)?,
        };
        let table = rcn::md_scores(&[pair], Span::All)?;
        let selection = rcn::select(&table, &rcn::SelectionConfig::top_k(self.planted.len()))?;
        let mut got = selection.neurons.clone();
        got.sort();
        if got != self.planted {
            return Err(Error::invalid(
                "planted construction: identification on the reference pair does not return the planted set",
            ));
        }
        let spec = rcn::build_steering(&selection, &table, 0.0)?;
        debug_assert_eq!(spec.provenance, Provenance::Md);
        Ok(spec)
    }

    /// Largest per-instance minimal strength at which a corrupt prompt
    /// prefers the correct answer over the wrong one (unpadded).
    fn alpha_threshold(&self, w: &Weights, spec: &SteeringSpec) -> Result<f64> {
        let mut worst = 0.0f64;
        for i in 0..self.layout.n_instances {
            let q = self.layout.prompt_token(i, Variant::Corrupt)?;
            let fixes = |alpha: f64| -> Result<bool> { Ok(probe(w, q, Some(&spec.with_alpha(alpha)?))?.prefers_correct()) };
            if fixes(0.0)? {
                continue;
            }
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while !fixes(hi)? {
                lo = hi;
                hi *= 2.0;
                if hi > 1e6 {
                    return Err(Error::invalid(format!(
                        "planted construction: steering cannot fix corrupt instance {i}"
                    )));
                }
            }
            while hi - lo > 1e-7 * hi {
                let mid = 0.5 * (lo + hi);
                if fixes(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            worst = worst.max(hi);
        }
        if worst == 0.0 {
            return Err(Error::invalid("planted construction: corrupt prompts already decode correctly"));
        }
        Ok(worst)
    }

    fn audit(&self, m: &PlantedModel, margin: f64) -> Result<()> {
        let w = &m.weights;
        let fail = |what: String| Err(Error::invalid(format!("planted audit: {what}")));
        let measured = self.margin(w)?;
        if measured < margin {
            return fail(format!("margin {measured} below {margin}"));
        }
        let mut tokens = vec![VocabLayout::BOS, VocabLayout::CORRECT, VocabLayout::WRONG];
        tokens.extend(self.prompt_tokens()?);
        for &t in &tokens {
            let st = probe(w, t, None)?;
            for (f, role) in self.draws.roles.iter().enumerate() {
                if *role == Role::Other && !(st.acts[f] > 0.0) {
                    return fail(format!("ordinary neuron {f} is not positive on token {t}"));
                }
            }
        }
        for i in 0..self.layout.n_instances {
            let clean = self.layout.prompt_token(i, Variant::Clean)?;
            let corrupt = self.layout.prompt_token(i, Variant::Corrupt)?;
            if probe(w, clean, None)?.argmax() != VocabLayout::CORRECT {
                return fail(format!("clean instance {i} does not decode correctly"));
            }
            if probe(w, corrupt, None)?.argmax() != VocabLayout::WRONG {
                return fail(format!("corrupt instance {i} does not decode to the wrong answer"));
            }
            if probe(w, corrupt, Some(&m.reference))?.argmax() != VocabLayout::CORRECT {
                return fail(format!("corrupt instance {i} not fixed at alpha_star"));
            }
        }
        Ok(())
    }
}
