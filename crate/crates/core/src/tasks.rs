//! Synthetic task suites with exact correctness oracles: planted-circuit
//! worlds (clean/corrupt prompts, known critical neurons) and a noisy
//! modular-sum world whose sampled traces mix correct and incorrect answers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_planted_model, ModelConfig, PlantedKind, PlantedModel, PlantedOptions, Weights};
use crate::numerics::{Matrix, SeededRng};
use crate::traces::{TaskInstance, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum World {
    Planted,
    MixedHarm,
    Arithmetic,
}

/// Ground truth recorded alongside a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetadata {
    pub world: World,
    pub seed: u64,
    #[serde(default)]
    pub planted: Vec<(usize, usize)>,
    #[serde(default)]
    pub distractors: Vec<(usize, usize)>,
    #[serde(default)]
    pub alpha_star: Option<f64>,
    #[serde(default)]
    pub corrupt_rate: Option<f64>,
    #[serde(default)]
    pub noise_level: Option<f64>,
    #[serde(default)]
    pub modulus: Option<usize>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub name: String,
    /// Model file the suite targets, relative to the suite file.
    pub model_file: Option<String>,
    pub instances: Vec<TaskInstance>,
    pub metadata: SuiteMetadata,
}

impl TaskSuite {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.id) {
                return Err(Error::invalid(format!("duplicate instance id {}", inst.id)));
            }
            if inst.prompt.is_empty() || inst.answer_tokens.is_empty() {
                return Err(Error::invalid("instance without prompt or answer").for_instance(inst.id));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&TaskInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Instances for `ids`, in the given order.
    pub fn select(&self, ids: &[u64]) -> Result<Vec<TaskInstance>> {
        let by_id: BTreeMap<u64, &TaskInstance> = self.instances.iter().map(|i| (i.id, i)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|i| (*i).clone())
                    .ok_or_else(|| Error::invalid(format!("instance {id} not in suite {}", self.name)))
            })
            .collect()
    }
}

pub fn suite_to_json(s: &TaskSuite) -> Result<String> {
    Ok(serde_json::to_string_pretty(s)?)
}

pub fn suite_from_json(text: &str) -> Result<TaskSuite> {
    let s: TaskSuite = serde_json::from_str(text)?;
    s.validate()?;
    Ok(s)
}

pub fn save_suite(path: impl AsRef<Path>, s: &TaskSuite) -> Result<()> {
    std::fs::write(path, suite_to_json(s)?)?;
    Ok(())
}

pub fn load_suite(path: impl AsRef<Path>) -> Result<TaskSuite> {
    suite_from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSuiteConfig {
    pub n_planted: usize,
    pub n_instances: usize,
    pub corrupt_rate: f64,
    pub seed: u64,
    pub kind: PlantedKind,
    pub margin: f64,
    pub target_alpha: f64,
}

impl PlantedSuiteConfig {
    pub fn new(n_planted: usize, n_instances: usize, corrupt_rate: f64, seed: u64) -> Self {
        PlantedSuiteConfig {
            n_planted,
            n_instances,
            corrupt_rate,
            seed,
            kind: PlantedKind::Plain,
            margin: 1.0,
            target_alpha: 0.25,
        }
    }

    pub fn mixed_harm(mut self) -> Self {
        self.kind = PlantedKind::mixed_harm(self.n_planted);
        self
    }
}

/// `P` distinct neurons drawn uniformly over all layers, sorted.
pub fn draw_planted_neurons(cfg: &ModelConfig, p: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let total = cfg.n_neurons();
    if p == 0 || p > total {
        return Err(Error::invalid(format!("cannot plant {p} of {total} neurons")));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    SeededRng::named(seed, "planted-neurons", 0).shuffle(&mut ids);
    let mut out: Vec<(usize, usize)> = ids[..p].iter().map(|&f| (f / cfg.d_mlp, f % cfg.d_mlp)).collect();
    out.sort();
    Ok(out)
}

/// Builds the planted model and one instance per prompt index; `round(rate·n)`
/// randomly chosen instances get the corrupt variant.
pub fn make_planted_suite(cfg: ModelConfig, sc: &PlantedSuiteConfig) -> Result<(TaskSuite, PlantedModel)> {
    if !(0.0..=1.0).contains(&sc.corrupt_rate) {
        return Err(Error::invalid(format!("corrupt rate must be in [0, 1], got {}", sc.corrupt_rate)));
    }
    let planted = draw_planted_neurons(&cfg, sc.n_planted, sc.seed)?;
    let opts = PlantedOptions {
        n_instances: sc.n_instances,
        seed: sc.seed,
        kind: sc.kind,
        target_alpha: sc.target_alpha,
    };
    let model = build_planted_model(cfg, &planted, sc.margin, &opts)?;
    let n = sc.n_instances;
    let n_corrupt = (sc.corrupt_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::named(sc.seed, "corrupt-assign", 0).shuffle(&mut order);
    let corrupt: BTreeSet<usize> = order[..n_corrupt].iter().copied().collect();
    let instances = (0..n)
        .map(|i| {
            let v = if corrupt.contains(&i) { Variant::Corrupt } else { Variant::Clean };
            model.oracle.instance(i as u64, i, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let world = match sc.kind {
        PlantedKind::Plain => World::Planted,
        PlantedKind::MixedHarm { .. } => World::MixedHarm,
    };
    let suite = TaskSuite {
        name: format!("{}-p{}-n{}-s{}", if world == World::Planted { "planted" } else { "mixed-harm" }, sc.n_planted, n, sc.seed),
        model_file: None,
        instances,
        metadata: SuiteMetadata {
            world,
            seed: sc.seed,
            planted: model.planted.clone(),
            distractors: model.distractors.clone(),
            alpha_star: Some(model.alpha_star),
            corrupt_rate: Some(sc.corrupt_rate),
            noise_level: None,
            modulus: None,
            max_new_tokens: crate::model::TaskOracle::MAX_NEW_TOKENS,
        },
    };
    suite.validate()?;
    Ok((suite, model))
}

/// Token layout of the modular-sum world with modulus `m`:
/// 0 BOS, `1..=m` left operands, `m+1..=2m` right operands, `2m+1..=3m` results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticLayout {
    pub modulus: usize,
}

impl ArithmeticLayout {
    pub fn left(&self, a: usize) -> u32 {
        (1 + a) as u32
    }
    pub fn right(&self, b: usize) -> u32 {
        (1 + self.modulus + b) as u32
    }
    pub fn result(&self, r: usize) -> u32 {
        (1 + 2 * self.modulus + r) as u32
    }
    pub fn required_vocab(&self) -> usize {
        1 + 3 * self.modulus
    }
}

const AR_GATE_PEAK: f64 = 6.0;
const AR_CLEAN_GAP: f64 = 2.5;
const AR_OFF_VOCAB: f64 = -20.0;

/// Largest modulus the shape supports, capped at 10.
pub fn arithmetic_modulus(cfg: &ModelConfig) -> Result<usize> {
    let by_model = cfg.d_model.saturating_sub(1) / 3;
    let by_mlp = (cfg.d_mlp as f64).sqrt().floor() as usize;
    let by_vocab = cfg.vocab_size.saturating_sub(1) / 3;
    let m = by_model.min(by_mlp).min(by_vocab).min(10);
    if m < 2 {
        return Err(Error::invalid(format!(
            "arithmetic world needs d_model >= 7, d_mlp >= 4 and vocab >= 7 (got {}, {}, {})",
            cfg.d_model, cfg.d_mlp, cfg.vocab_size
        )));
    }
    if cfg.max_seq < 4 {
        return Err(Error::invalid("arithmetic world needs max_seq >= 4"));
    }
    Ok(m)
}

/// Constructed solver for `(a + b) mod m` on prompts `[BOS, a, b]`: uniform
/// attention in layer 0 copies the left operand onto the last position, one
/// MLP neuron per operand pair fires on its pair and writes the result
/// direction. Gaussian embedding noise of scale `noise` blurs the operands.
pub fn build_arithmetic_model(cfg: ModelConfig, noise: f64, seed: u64) -> Result<(Weights, ArithmeticLayout)> {
    cfg.validate()?;
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid(format!("noise level must be >= 0, got {noise}")));
    }
    let m = arithmetic_modulus(&cfg)?;
    let lay = ArithmeticLayout { modulus: m };
    let d = cfg.d_model;
    let (one, a0, b0, r0) = (0usize, 1usize, 1 + m, 1 + 2 * m);
    let mut w = Weights::zeros(cfg)?;
    let mut rng = SeededRng::named(seed, "arithmetic-noise", 0);
    let set = |mat: &mut Matrix, r: usize, c: usize, v: f64| mat.set(r, c, v as f32);

    set(&mut w.embed, 0, one, 1.0);
    for j in 0..m {
        for (tok, coord) in [(lay.left(j), a0 + j), (lay.right(j), b0 + j)] {
            let t = tok as usize;
            set(&mut w.embed, t, one, 1.0);
            set(&mut w.embed, t, coord, 1.0);
            for c in a0..r0 {
                let v = w.embed.get(t, c) as f64 + noise * rng.normal();
                set(&mut w.embed, t, c, v);
            }
        }
    }
    for j in 0..m {
        set(&mut w.embed, lay.result(j) as usize, one, 1.0);
    }

    let l0 = &mut w.layers[0];
    l0.attn_norm = vec![1.0; d];
    l0.mlp_norm = vec![1.0; d];
    // normalized left operand is sqrt(d/2); uniform attention over 3 positions
    let copy = 3.0 / (d as f64 / 2.0).sqrt();
    for j in 0..m {
        set(&mut l0.wv, a0 + j, a0 + j, 1.0);
        set(&mut l0.wo, a0 + j, a0 + j, copy);
    }
    // residual at the last prompt position: one, a, b ≈ 1 → normalized sqrt(d/3)
    let v = (d as f64 / 3.0).sqrt();
    let s = 2.0 * AR_GATE_PEAK / v;
    for a in 0..m {
        for b in 0..m {
            let n = a * m + b;
            set(&mut l0.w_gate, a0 + a, n, s);
            set(&mut l0.w_gate, b0 + b, n, s);
            set(&mut l0.w_gate, one, n, -1.5 * s);
            set(&mut l0.w_up, one, n, 1.0 / v);
            set(&mut l0.w_down, n, r0 + (a + b) % m, 1.0);
        }
    }
    w.final_norm = vec![1.0; d];
    // final residual ≈ (1, 1, 1, peak) over rms sqrt((3 + peak²)/d)
    let r_norm = AR_GATE_PEAK * (d as f64 / (3.0 + AR_GATE_PEAK * AR_GATE_PEAK)).sqrt();
    let lambda = AR_CLEAN_GAP / r_norm;
    let one_norm = r_norm / AR_GATE_PEAK;
    for t in 0..cfg.vocab_size {
        let is_result = (lay.result(0) as usize..=lay.result(m - 1) as usize).contains(&t);
        if is_result {
            set(&mut w.unembed, r0 + (t - lay.result(0) as usize), t, lambda);
        } else {
            set(&mut w.unembed, one, t, AR_OFF_VOCAB / one_norm);
        }
    }
    w.validate()?;
    Ok((w, lay))
}

/// Uniform operand pairs; the answer token is the result class.
pub fn make_arithmetic_suite(cfg: ModelConfig, n_instances: usize, noise_level: f64, seed: u64) -> Result<(TaskSuite, Weights)> {
    if n_instances == 0 {
        return Err(Error::invalid("arithmetic suite needs at least one instance"));
    }
    let (w, lay) = build_arithmetic_model(cfg, noise_level, seed)?;
    let m = lay.modulus;
    let mut rng = SeededRng::named(seed, "arithmetic-instances", 0);
    let instances = (0..n_instances)
        .map(|i| {
            let (a, b) = (rng.below(m), rng.below(m));
            TaskInstance {
                id: i as u64,
                prompt: vec![0, lay.left(a), lay.right(b)],
                answer_tokens: vec![lay.result((a + b) % m)],
                variant: Variant::Natural,
            }
        })
        .collect();
    let suite = TaskSuite {
        name: format!("arithmetic-m{m}-n{n_instances}-s{seed}"),
        model_file: None,
        instances,
        metadata: SuiteMetadata {
            world: World::Arithmetic,
            seed,
            planted: Vec::new(),
            distractors: Vec::new(),
            alpha_star: None,
            corrupt_rate: None,
            noise_level: Some(noise_level),
            modulus: Some(m),
            max_new_tokens: 1,
        },
    };
    Ok((suite, w))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSplit {
    pub probe: Vec<u64>,
    pub gate_train: Vec<u64>,
    pub gate_val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SuiteSplit {
    pub fn parts(&self) -> [&[u64]; 4] {
        [&self.probe, &self.gate_train, &self.gate_val, &self.test]
    }

    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for part in self.parts() {
            for &id in part {
                if !seen.insert(id) {
                    return Err(Error::invalid(format!("instance {id} appears in two splits")));
                }
            }
        }
        Ok(())
    }
}

/// Split sizes: floors of `f·n`, then the remaining count (up to
/// `round(Σf·n)`) goes one by one to the largest fractional parts, earlier
/// splits first on ties.
pub fn split_sizes(n: usize, fractions: [f64; 4]) -> Result<[usize; 4]> {
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::invalid("split fractions must be finite and >= 0"));
    }
    let sum: f64 = fractions.iter().sum();
    if sum > 1.0 + 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {sum} > 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 4];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let target = ((sum * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut assigned: usize = sizes.iter().sum();
    for &i in order.iter().cycle().take(4 * n.max(1)) {
        if assigned >= target {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            assigned += 1;
        }
    }
    for (s, f) in sizes.iter().zip(&fractions) {
        if *f > 0.0 && *s == 0 {
            return Err(Error::invalid(format!("split fraction {f} of {n} instances leaves the split empty")));
        }
    }
    Ok(sizes)
}

/// Stratified by variant: each stratum is shuffled, strata are interleaved
/// proportionally, and consecutive chunks form probe / gate-train /
/// gate-val / test.
pub fn split_suite(suite: &TaskSuite, fractions: [f64; 4], seed: u64) -> Result<SuiteSplit> {
    let n = suite.instances.len();
    let sizes = split_sizes(n, fractions)?;
    let mut strata: BTreeMap<Variant, Vec<u64>> = BTreeMap::new();
    for inst in &suite.instances {
        strata.entry(inst.variant).or_default().push(inst.id);
    }
    let mut keyed: Vec<(f64, usize, u64)> = Vec::with_capacity(n);
    for (k, (variant, ids)) in strata.iter_mut().enumerate() {
        ids.sort();
        SeededRng::named(seed, "split", *variant as u64).shuffle(ids);
        let len = ids.len() as f64;
        for (r, &id) in ids.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / len, k, id));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<u64> = keyed.into_iter().map(|k| k.2).collect();
    let mut parts = Vec::with_capacity(4);
    let mut at = 0;
    for s in sizes {
        let mut part = order[at..at + s].to_vec();
        part.sort();
        parts.push(part);
        at += s;
    }
    let test = parts.pop().unwrap();
    let gate_val = parts.pop().unwrap();
    let gate_train = parts.pop().unwrap();
    let probe = parts.pop().unwrap();
    let split = SuiteSplit {
        probe,
        gate_train,
        gate_val,
        test,
    };
    split.assert_disjoint()?;
    Ok(split)
}

pub fn save_split(path: impl AsRef<Path>, s: &SuiteSplit) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(s)?)?;
    Ok(())
}

pub fn load_split(path: impl AsRef<Path>) -> Result<SuiteSplit> {
    let s: SuiteSplit = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    s.assert_disjoint()?;
    Ok(s)
}
