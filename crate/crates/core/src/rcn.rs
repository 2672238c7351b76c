//! Reasoning-critical neuron identification: mean-difference scores,
//! polarity filtering, top-K ranking, and steering-spec construction
//! (including the random and probe-weight baselines).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Provenance, SteeringEntry, SteeringSpec};
use crate::numerics::SeededRng;
use crate::probe::ProbeModel;
use crate::traces::{trace_mean, ContrastivePair, Span, TraceSummary};

/// Per-neuron scores, laid out layer-major (`layer * d_mlp + neuron`).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScoreTable {
    pub n_layers: usize,
    pub d_mlp: usize,
    pub n_pairs: usize,
    /// `S = (1/N) Σ_k (μ⁺_k − μ⁻_k)`
    pub score: Vec<f64>,
    pub mean_pos: Vec<f64>,
    pub mean_neg: Vec<f64>,
    /// Whether every individual pair shows a sign flip.
    pub flip_all: Vec<bool>,
}

impl NeuronScoreTable {
    pub fn index(&self, layer: usize, neuron: usize) -> usize {
        layer * self.d_mlp + neuron
    }

    pub fn score(&self, layer: usize, neuron: usize) -> f64 {
        self.score[self.index(layer, neuron)]
    }

    pub fn neuron(&self, flat: usize) -> (usize, usize) {
        (flat / self.d_mlp, flat % self.d_mlp)
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }
}

pub fn md_scores(pairs: &[ContrastivePair], span: Span) -> Result<NeuronScoreTable> {
    let summaries = pairs
        .iter()
        .map(|p| {
            let pos = trace_mean(&p.positive.trace, span).map_err(|e| e.for_instance(p.instance_id))?;
            let neg = trace_mean(&p.negative.trace, span).map_err(|e| e.for_instance(p.instance_id))?;
            Ok((pos, neg))
        })
        .collect::<Result<Vec<_>>>()?;
    md_scores_from_summaries(&summaries)
}

/// Scores from precomputed `(μ⁺, μ⁻)` summaries, one tuple per pair.
pub fn md_scores_from_summaries(pairs: &[(TraceSummary, TraceSummary)]) -> Result<NeuronScoreTable> {
    let (first, _) = pairs.first().ok_or(Error::Empty("md_scores pairs"))?;
    let (n_layers, d_mlp) = (first.n_layers, first.d_mlp);
    let width = n_layers * d_mlp;
    for (pos, neg) in pairs {
        for s in [pos, neg] {
            if (s.n_layers, s.d_mlp) != (n_layers, d_mlp) || s.means.len() != width {
                return Err(Error::Shape {
                    op: "md_scores",
                    left: (n_layers, d_mlp),
                    right: (s.n_layers, s.d_mlp),
                });
            }
        }
    }
    let n = pairs.len() as f64;
    let mut score = vec![0.0; width];
    let mut mean_pos = vec![0.0; width];
    let mut mean_neg = vec![0.0; width];
    let mut flip_all = vec![true; width];
    for j in 0..width {
        let (mut d, mut p, mut q) = (0.0, 0.0, 0.0);
        for (pos, neg) in pairs {
            let (a, b) = (pos.means[j], neg.means[j]);
            d += a - b;
            p += a;
            q += b;
            if !(a * b < 0.0) {
                flip_all[j] = false;
            }
        }
        score[j] = d / n;
        mean_pos[j] = p / n;
        mean_neg[j] = q / n;
    }
    Ok(NeuronScoreTable {
        n_layers,
        d_mlp,
        n_pairs: pairs.len(),
        score,
        mean_pos,
        mean_neg,
        flip_all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolarityMode {
    /// Sign flip between the pair-averaged means.
    #[default]
    Averaged,
    /// Sign flip required within every pair.
    PerPair,
}

/// Neurons whose positive- and negative-side means have strictly opposite
/// signs, in `(layer, neuron)` order.
pub fn polarity_filter(table: &NeuronScoreTable) -> Vec<(usize, usize)> {
    polarity_filter_with(table, PolarityMode::Averaged)
}

pub fn polarity_filter_with(table: &NeuronScoreTable, mode: PolarityMode) -> Vec<(usize, usize)> {
    (0..table.len())
        .filter(|&j| match mode {
            PolarityMode::Averaged => table.mean_pos[j] * table.mean_neg[j] < 0.0,
            PolarityMode::PerPair => table.flip_all[j],
        })
        .map(|j| table.neuron(j))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub polarity_filter: bool,
    #[serde(default)]
    pub polarity_mode: PolarityMode,
}

impl SelectionConfig {
    pub fn top_k(k: usize) -> Self {
        SelectionConfig {
            k,
            polarity_filter: true,
            polarity_mode: PolarityMode::Averaged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub neurons: Vec<(usize, usize)>,
    pub requested: usize,
}

impl Selection {
    pub fn shortfall(&self) -> bool {
        self.neurons.len() < self.requested
    }
}

/// Orders `(layer, neuron, score)` by `|score|` descending, then layer, then
/// neuron index.
pub fn rank_by_magnitude(items: &mut [(usize, usize, f64)]) {
    items.sort_by(|a, b| {
        b.2.abs()
            .total_cmp(&a.2.abs())
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
}

pub fn select_top_k(candidates: &[(usize, usize)], table: &NeuronScoreTable, k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::invalid("top-K selection needs K >= 1"));
    }
    let mut items: Vec<_> = candidates.iter().map(|&(l, i)| (l, i, table.score(l, i))).collect();
    rank_by_magnitude(&mut items);
    Ok(Selection {
        neurons: items.iter().take(k).map(|&(l, i, _)| (l, i)).collect(),
        requested: k,
    })
}

/// Polarity filter (when enabled) followed by top-K.
pub fn select(table: &NeuronScoreTable, cfg: &SelectionConfig) -> Result<Selection> {
    let candidates = if cfg.polarity_filter {
        polarity_filter_with(table, cfg.polarity_mode)
    } else {
        (0..table.len()).map(|j| table.neuron(j)).collect()
    };
    select_top_k(&candidates, table, cfg.k)
}

pub fn build_steering(selection: &Selection, table: &NeuronScoreTable, alpha: f64) -> Result<SteeringSpec> {
    if selection.neurons.is_empty() {
        return Err(Error::Empty("build_steering selection"));
    }
    let entries = selection
        .neurons
        .iter()
        .map(|&(layer, neuron)| SteeringEntry {
            layer,
            neuron,
            value: table.score(layer, neuron),
        })
        .collect();
    SteeringSpec::new(alpha, Provenance::Md, entries)
}

/// `K` distinct neurons drawn uniformly, each valued `±mean|S|` of the
/// polarity-filtered md top-K so magnitudes match the md spec.
pub fn random_steering(cfg: &ModelConfig, k: usize, seed: u64, table: &NeuronScoreTable, alpha: f64) -> Result<SteeringSpec> {
    let total = cfg.n_neurons();
    if k == 0 || k > total {
        return Err(Error::invalid(format!("random steering K = {k} must be in 1..={total}")));
    }
    if (table.n_layers, table.d_mlp) != (cfg.n_layers, cfg.d_mlp) {
        return Err(Error::Shape {
            op: "random_steering",
            left: (cfg.n_layers, cfg.d_mlp),
            right: (table.n_layers, table.d_mlp),
        });
    }
    let md = select(table, &SelectionConfig::top_k(k))?;
    if md.neurons.is_empty() {
        return Err(Error::invalid("random steering: no polarity-filtered neurons to match magnitude against"));
    }
    let magnitude = md.neurons.iter().map(|&(l, i)| table.score(l, i).abs()).sum::<f64>() / md.neurons.len() as f64;
    let mut rng = SeededRng::named(seed, "random-steering", k as u64);
    let mut pool: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: the first k slots become the sample
    for s in 0..k {
        let j = s + rng.below(total - s);
        pool.swap(s, j);
    }
    let entries = pool[..k]
        .iter()
        .map(|&flat| SteeringEntry {
            layer: flat / cfg.d_mlp,
            neuron: flat % cfg.d_mlp,
            value: rng.sign() * magnitude,
        })
        .collect();
    SteeringSpec::new(alpha, Provenance::Random, entries)
}

/// Top-K neurons by `|probe weight|`, valued by the weight itself.
pub fn probe_steering(probe: &ProbeModel, cfg: &ModelConfig, k: usize, alpha: f64) -> Result<(SteeringSpec, Selection)> {
    if k == 0 {
        return Err(Error::invalid("probe steering needs K >= 1"));
    }
    let mut items = Vec::new();
    for (&flat, &w) in probe.feature_indices.iter().zip(&probe.weights) {
        if w == 0.0 {
            continue;
        }
        if flat >= cfg.n_neurons() {
            return Err(Error::OutOfRange(format!(
                "probe feature {flat} outside {} neurons",
                cfg.n_neurons()
            )));
        }
        items.push((flat / cfg.d_mlp, flat % cfg.d_mlp, w));
    }
    if items.is_empty() {
        return Err(Error::invalid("probe has no nonzero weights"));
    }
    rank_by_magnitude(&mut items);
    items.truncate(k);
    let selection = Selection {
        neurons: items.iter().map(|&(l, i, _)| (l, i)).collect(),
        requested: k,
    };
    let entries = items
        .into_iter()
        .map(|(layer, neuron, value)| SteeringEntry { layer, neuron, value })
        .collect();
    Ok((SteeringSpec::new(alpha, Provenance::Probe, entries)?, selection))
}

/// CSV dump: `layer,neuron,S,mu_pos,mu_neg,polarity_kept`.
pub fn write_score_csv<W: Write>(mut out: W, table: &NeuronScoreTable, kept: &[(usize, usize)]) -> Result<()> {
    let kept: std::collections::BTreeSet<_> = kept.iter().copied().collect();
    writeln!(out, "layer,neuron,S,mu_pos,mu_neg,polarity_kept")?;
    for j in 0..table.len() {
        let (l, i) = table.neuron(j);
        writeln!(
            out,
            "{l},{i},{},{},{},{}",
            table.score[j],
            table.mean_pos[j],
            table.mean_neg[j],
            kept.contains(&(l, i)) as u8
        )?;
    }
    Ok(())
}

pub fn steering_to_json(spec: &SteeringSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(spec)?)
}

/// Parses and validates a spec; bounds are checked when `cfg` is given.
pub fn steering_from_json(s: &str, cfg: Option<&ModelConfig>) -> Result<SteeringSpec> {
    let raw: SteeringSpec = serde_json::from_str(s)?;
    let spec = SteeringSpec::new(raw.alpha, raw.provenance, raw.entries.clone())?;
    if spec.entries != raw.entries {
        return Err(Error::invalid("steering entries must be sorted by (layer, neuron)"));
    }
    if let Some(cfg) = cfg {
        spec.validate_for(cfg)?;
    }
    Ok(spec)
}

pub fn save_steering(path: impl AsRef<Path>, spec: &SteeringSpec) -> Result<()> {
    std::fs::write(path, steering_to_json(spec)?)?;
    Ok(())
}

pub fn load_steering(path: impl AsRef<Path>, cfg: Option<&ModelConfig>) -> Result<SteeringSpec> {
    steering_from_json(&std::fs::read_to_string(path)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary(means: Vec<f64>) -> TraceSummary {
        TraceSummary {
            n_layers: 1,
            d_mlp: means.len(),
            means,
        }
    }

    fn table(mean_pos: Vec<f64>, mean_neg: Vec<f64>) -> NeuronScoreTable {
        let n = mean_pos.len();
        NeuronScoreTable {
            n_layers: 1,
            d_mlp: n,
            n_pairs: 1,
            score: mean_pos.iter().zip(&mean_neg).map(|(a, b)| a - b).collect(),
            flip_all: mean_pos.iter().zip(&mean_neg).map(|(a, b)| a * b < 0.0).collect(),
            mean_pos,
            mean_neg,
        }
    }

    #[test]
    fn two_pair_hand_value() {
        let pairs = vec![
            (summary(vec![2.0]), summary(vec![-0.5])),
            (summary(vec![3.0]), summary(vec![-2.0])),
        ];
        let t = md_scores_from_summaries(&pairs).unwrap();
        assert_eq!(t.score, vec![3.75]);
        assert_eq!(t.mean_pos, vec![2.5]);
        assert_eq!(t.mean_neg, vec![-1.25]);
        assert!(md_scores_from_summaries(&[]).is_err());
    }

    #[test]
    fn identical_sides_score_zero() {
        let s = summary(vec![0.3, -1.0, 4.0]);
        let t = md_scores_from_summaries(&[(s.clone(), s)]).unwrap();
        assert!(t.score.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polarity_cases() {
        let t = table(vec![2.0, 2.0, 0.0], vec![-0.5, 0.5, -1.0]);
        assert_eq!(polarity_filter(&t), vec![(0, 0)]);
    }

    #[test]
    fn top_k_cases() {
        let t = table(vec![3.0, -5.0, 1.0], vec![0.0; 3]);
        let all = [(0, 0), (0, 1), (0, 2)];
        let sel = select_top_k(&all, &t, 2).unwrap();
        assert_eq!(sel.neurons, vec![(0, 1), (0, 0)]);
        assert!(!sel.shortfall());
        let sel = select_top_k(&all, &t, 10).unwrap();
        assert_eq!(sel.neurons.len(), 3);
        assert!(sel.shortfall());
        assert!(select_top_k(&all, &t, 0).is_err());

        let mut tie = vec![(2, 3, -1.5), (0, 7, 1.5)];
        rank_by_magnitude(&mut tie);
        assert_eq!((tie[0].0, tie[0].1), (0, 7));
    }

    #[test]
    fn build_steering_cases() {
        let mut t = table(vec![0.0; 5], vec![0.0; 5]);
        t.n_layers = 2;
        t.d_mlp = 5;
        t.score = vec![0.0; 10];
        t.score[9] = 2.5;
        let sel = Selection {
            neurons: vec![(1, 4)],
            requested: 1,
        };
        let spec = build_steering(&sel, &t, 0.3).unwrap();
        assert_eq!(spec.alpha, 0.3);
        assert_eq!(spec.entries, vec![SteeringEntry { layer: 1, neuron: 4, value: 2.5 }]);
        assert_eq!(spec.provenance, Provenance::Md);
        assert!(build_steering(&sel, &t, 0.0).is_ok());
        let empty = Selection {
            neurons: vec![],
            requested: 1,
        };
        assert!(build_steering(&empty, &t, 0.3).is_err());
    }

    fn cfg(n_layers: usize, d_mlp: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 4,
            d_mlp,
            n_heads: 1,
            vocab_size: 8,
            max_seq: 4,
        }
    }

    fn random_table(n_layers: usize, d_mlp: usize, seed: u64) -> NeuronScoreTable {
        let mut rng = SeededRng::new(seed, 1);
        let n = n_layers * d_mlp;
        let mut t = table(
            (0..n).map(|_| rng.normal()).collect(),
            (0..n).map(|_| rng.normal()).collect(),
        );
        t.n_layers = n_layers;
        t.d_mlp = d_mlp;
        t
    }

    #[test]
    fn random_steering_contract() {
        let t = random_table(2, 6, 3);
        let c = cfg(2, 6);
        let a = random_steering(&c, 4, 11, &t, 0.2).unwrap();
        assert_eq!(a, random_steering(&c, 4, 11, &t, 0.2).unwrap());
        assert_eq!(a.provenance, Provenance::Random);

        let md = select(&t, &SelectionConfig::top_k(4)).unwrap();
        let md_mean = md.neurons.iter().map(|&(l, i)| t.score(l, i).abs()).sum::<f64>() / md.neurons.len() as f64;
        let mean = a.entries.iter().map(|e| e.value.abs()).sum::<f64>() / a.entries.len() as f64;
        assert!((mean - md_mean).abs() < 1e-9);

        let full = random_steering(&c, 12, 5, &t, 0.2).unwrap();
        assert_eq!(full.neurons().len(), 12);
        assert!(random_steering(&c, 13, 5, &t, 0.2).is_err());
    }

    fn probe(indices: Vec<usize>, weights: Vec<f64>) -> ProbeModel {
        ProbeModel {
            sigma: vec![1.0; indices.len()],
            feature_indices: indices,
            weights,
            bias: 0.0,
            lambda: 0.1,
            scale_rule: "10sigma".into(),
        }
    }

    #[test]
    fn probe_steering_cases() {
        let c = cfg(1, 3);
        let p = probe(vec![0, 1, 2], vec![0.9, -1.2, 0.1]);
        let (spec, sel) = probe_steering(&p, &c, 2, 0.3).unwrap();
        assert_eq!(sel.neurons, vec![(0, 1), (0, 0)]);
        assert_eq!(spec.provenance, Provenance::Probe);

        let c = cfg(2, 40);
        let mut w = vec![0.0; 80];
        for (k, v) in w.iter_mut().enumerate().take(30) {
            *v = 1.0 + k as f64;
        }
        let (spec, sel) = probe_steering(&probe((0..80).collect(), w), &c, 50, 0.0).unwrap();
        assert_eq!(spec.entries.len(), 30);
        assert!(sel.shortfall());
        assert!(probe_steering(&probe(vec![0], vec![0.0]), &c, 5, 0.1).is_err());
    }

    #[test]
    fn steering_json_round_trip_and_bounds() {
        let spec = SteeringSpec::new(
            0.25,
            Provenance::Md,
            vec![
                SteeringEntry { layer: 0, neuron: 2, value: 0.1 + 0.2 },
                SteeringEntry { layer: 1, neuron: 0, value: -1e-300 },
            ],
        )
        .unwrap();
        let js = steering_to_json(&spec).unwrap();
        let back = steering_from_json(&js, Some(&cfg(2, 3))).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.entries[0].value.to_bits(), spec.entries[0].value.to_bits());
        assert!(matches!(steering_from_json(&js, Some(&cfg(1, 3))), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = table(vec![2.0, 1.0], vec![-1.0, 1.0]);
        let mut buf = Vec::new();
        write_score_csv(&mut buf, &t, &polarity_filter(&t)).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "layer,neuron,S,mu_pos,mu_neg,polarity_kept");
        assert_eq!(s.lines().nth(1).unwrap(), "0,0,3,2,-1,1");
        assert_eq!(s.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn scale_equivariance(seed in 0u64..500, s in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed, 9);
            let pairs: Vec<_> = (0..3)
                .map(|_| (summary((0..8).map(|_| rng.normal()).collect()), summary((0..8).map(|_| rng.normal()).collect())))
                .collect();
            let scaled: Vec<_> = pairs
                .iter()
                .map(|(a, b)| (
                    summary(a.means.iter().map(|v| v * s).collect()),
                    summary(b.means.iter().map(|v| v * s).collect()),
                ))
                .collect();
            let t = md_scores_from_summaries(&pairs).unwrap();
            let ts = md_scores_from_summaries(&scaled).unwrap();
            for (x, y) in t.score.iter().zip(&ts.score) {
                prop_assert!((x * s - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
            prop_assert_eq!(polarity_filter(&t), polarity_filter(&ts));
            let a = select(&t, &SelectionConfig { k: 8, polarity_filter: false, polarity_mode: PolarityMode::Averaged }).unwrap();
            let b = select(&ts, &SelectionConfig { k: 8, polarity_filter: false, polarity_mode: PolarityMode::Averaged }).unwrap();
            prop_assert_eq!(a.neurons, b.neurons);
        }
    }
}
