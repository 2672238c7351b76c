//! Correctness probes on last-token activations: F-statistic feature
//! ranking, 10σ scaling, L1 logistic regression by proximal gradient,
//! stratified cross-validation and AUROC.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationTrace;
use crate::numerics::{sigmoid, stream_id, SeededRng};
use crate::traces::LabeledTrace;

/// Row-major samples × features, with labels and the flat neuron id
/// (`layer * d_mlp + neuron`) of every column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_samples: usize,
    pub n_features: usize,
    pub data: Vec<f64>,
    pub labels: Vec<bool>,
    pub feature_index: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::Length {
                op: "FeatureMatrix labels",
                left: labels.len(),
                right: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * n_features);
        for r in &rows {
            if r.len() != n_features {
                return Err(Error::Length {
                    op: "FeatureMatrix row",
                    left: r.len(),
                    right: n_features,
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("FeatureMatrix"));
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureMatrix {
            n_samples: rows.len(),
            n_features,
            data,
            labels,
            feature_index: (0..n_features).collect(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_features..(r + 1) * self.n_features]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n_features + c]
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y).count();
        (pos, self.n_samples - pos)
    }

    /// Keeps the given rows, in order.
    pub fn subset_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            n_samples: rows.len(),
            n_features: self.n_features,
            data,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_index: self.feature_index.clone(),
        }
    }

    /// Keeps the given columns, in order.
    pub fn subset_cols(&self, cols: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.n_samples * cols.len());
        for r in 0..self.n_samples {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        FeatureMatrix {
            n_samples: self.n_samples,
            n_features: cols.len(),
            data,
            labels: self.labels.clone(),
            feature_index: cols.iter().map(|&c| self.feature_index[c]).collect(),
        }
    }
}

/// All layers' post-activations at the final token, layer-major.
pub fn extract_last_token_features(t: &ActivationTrace) -> Result<Vec<f64>> {
    if t.generated_len() == 0 {
        return Err(Error::Empty("last-token features (no generated tokens)"));
    }
    let last = t.n_tokens() - 1;
    let width = t.n_layers * t.d_mlp;
    Ok(t.activations[last * width..(last + 1) * width]
        .iter()
        .map(|&v| v as f64)
        .collect())
}

pub fn feature_matrix(traces: &[LabeledTrace]) -> Result<FeatureMatrix> {
    let rows = traces
        .iter()
        .map(|t| extract_last_token_features(&t.trace).map_err(|e| e.for_instance(t.instance_id)))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::new(rows, traces.iter().map(|t| t.correct).collect())
}

/// One-way ANOVA F with two groups. Zero within-group spread with nonzero
/// between-group spread gives `+inf`; a feature with no spread at all gives 0.
pub fn f_statistic(x: &FeatureMatrix) -> Result<Vec<f64>> {
    let (n_pos, n_neg) = x.class_counts();
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::SingleClass("f_statistic (each class needs >= 2 samples)"));
    }
    let n = x.n_samples as f64;
    let mut out = Vec::with_capacity(x.n_features);
    for c in 0..x.n_features {
        let (mut sp, mut sn) = (0.0, 0.0);
        for r in 0..x.n_samples {
            if x.labels[r] {
                sp += x.get(r, c);
            } else {
                sn += x.get(r, c);
            }
        }
        let (mp, mn) = (sp / n_pos as f64, sn / n_neg as f64);
        let grand = (sp + sn) / n;
        let ssb = n_pos as f64 * (mp - grand).powi(2) + n_neg as f64 * (mn - grand).powi(2);
        let mut ssw = 0.0;
        for r in 0..x.n_samples {
            let m = if x.labels[r] { mp } else { mn };
            ssw += (x.get(r, c) - m).powi(2);
        }
        // rounding can leave a tiny spread behind on constant groups
        let scale = x.row(0)[c].abs().max(grand.abs()).max(1.0);
        let ssw = if ssw <= 1e-24 * scale * scale * n { 0.0 } else { ssw };
        let ssb = if ssb <= 1e-24 * scale * scale * n { 0.0 } else { ssb };
        out.push(if ssw == 0.0 {
            if ssb > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            ssb / (ssw / (n - 2.0))
        });
    }
    Ok(out)
}

/// Column indices ordered by F descending (ties: lower index first).
pub fn rank_by_f(f: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.len()).collect();
    idx.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub sigma: Vec<f64>,
}

/// Population standard deviation per column.
pub fn fit_normalizer(x: &FeatureMatrix) -> Result<NormalizerStats> {
    if x.n_samples == 0 {
        return Err(Error::Empty("fit_normalizer"));
    }
    let n = x.n_samples as f64;
    let sigma = (0..x.n_features)
        .map(|c| {
            let mean = (0..x.n_samples).map(|r| x.get(r, c)).sum::<f64>() / n;
            let var = (0..x.n_samples).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect();
    Ok(NormalizerStats { sigma })
}

/// `x / (10 σ)`, with zero-σ columns mapped to 0.
pub fn scale_value(v: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        v / (10.0 * sigma)
    } else {
        0.0
    }
}

pub fn normalize(x: &FeatureMatrix, stats: &NormalizerStats) -> Result<FeatureMatrix> {
    if stats.sigma.len() != x.n_features {
        return Err(Error::Length {
            op: "normalize",
            left: x.n_features,
            right: stats.sigma.len(),
        });
    }
    let mut out = x.clone();
    for r in 0..x.n_samples {
        for c in 0..x.n_features {
            out.data[r * x.n_features + c] = scale_value(x.get(r, c), stats.sigma[c]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub feature_indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub sigma: Vec<f64>,
    pub scale_rule: String,
}

impl ProbeModel {
    /// Logit for a full-width raw feature vector (all neurons, layer-major).
    pub fn logit(&self, raw: &[f64]) -> Result<f64> {
        let mut z = self.bias;
        for ((&idx, &w), &s) in self.feature_indices.iter().zip(&self.weights).zip(&self.sigma) {
            let v = *raw.get(idx).ok_or_else(|| {
                Error::OutOfRange(format!("probe feature {idx} outside {} features", raw.len()))
            })?;
            z += w * scale_value(v, s);
        }
        Ok(z)
    }

    /// Logits for every row of `x`, matching columns by feature id.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let cols = self
            .feature_indices
            .iter()
            .map(|f| {
                x.feature_index
                    .iter()
                    .position(|g| g == f)
                    .ok_or_else(|| Error::OutOfRange(format!("probe feature {f} missing from feature matrix")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((0..x.n_samples)
            .map(|r| {
                let row = x.row(r);
                let mut z = self.bias;
                for ((&c, &w), &s) in cols.iter().zip(&self.weights).zip(&self.sigma) {
                    z += w * scale_value(row[c], s);
                }
                z
            })
            .collect())
    }

    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

/// Inverse class frequency, normalized to mean 1 over samples.
pub fn balanced_weights(labels: &[bool]) -> Result<(f64, f64)> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::SingleClass("class weighting"));
    }
    Ok((n / (2.0 * pos), n / (2.0 * neg)))
}

/// Mean class-weighted logistic loss (the smooth part of the objective).
pub fn logistic_loss(x: &FeatureMatrix, class_w: (f64, f64), w: &[f64], b: f64) -> f64 {
    let mut total = 0.0;
    for r in 0..x.n_samples {
        let z = b + x.row(r).iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let y = x.labels[r];
        // log(1 + e^z) - y z, stable in both tails
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        let l = softplus - if y { z } else { 0.0 };
        total += if y { class_w.0 } else { class_w.1 } * l;
    }
    total / x.n_samples as f64
}

pub fn logistic_grad(x: &FeatureMatrix, class_w: (f64, f64), w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; x.n_features];
    let mut gb = 0.0;
    for r in 0..x.n_samples {
        let row = x.row(r);
        let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let y = x.labels[r];
        let cw = if y { class_w.0 } else { class_w.1 };
        let resid = cw * (sigmoid(z) - if y { 1.0 } else { 0.0 });
        for (g, a) in gw.iter_mut().zip(row) {
            *g += resid * a;
        }
        gb += resid;
    }
    let n = x.n_samples as f64;
    gw.iter_mut().for_each(|g| *g /= n);
    (gw, gb / n)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Objective after each accepted iteration; index 0 is the start point.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// L1-penalized, class-balanced logistic regression on already-normalized
/// features, by proximal gradient with backtracking. The bias is not
/// penalized. The returned model carries unit σ; callers fitting on scaled
/// data set `sigma` and `feature_indices` themselves.
pub fn fit_l1_logistic(x: &FeatureMatrix, lambda: f64, max_iter: usize) -> Result<(ProbeModel, FitReport)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("L1 penalty must be > 0, got {lambda}")));
    }
    let cw = balanced_weights(&x.labels)?;
    let p = x.n_features;
    let mut w = vec![0.0; p];
    // prior log-odds under balanced weights is zero
    let mut b = 0.0;
    let objective = |w: &[f64], b: f64| logistic_loss(x, cw, w, b) + lambda * w.iter().map(|v| v.abs()).sum::<f64>();

    // Lipschitz bound of the smooth part: 0.25 * max class weight * ||[X 1]||_F^2 / n
    let frob = x.data.iter().map(|v| v * v).sum::<f64>() + x.n_samples as f64;
    let lip = 0.25 * cw.0.max(cw.1) * frob / x.n_samples as f64;
    let mut step = 1.0 / lip.max(1e-12);

    let mut history = vec![objective(&w, b)];
    if !history[0].is_finite() {
        return Err(Error::NonFinite("logistic objective"));
    }
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let f0 = logistic_loss(x, cw, &w, b);
        let (gw, gb) = logistic_grad(x, cw, &w, b);
        let (nw, nb, f_new) = loop {
            let nw: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(wi, gi)| soft_threshold(wi - step * gi, step * lambda))
                .collect();
            let nb = b - step * gb;
            let f1 = logistic_loss(x, cw, &nw, nb);
            let mut lin = (nb - b) * gb;
            let mut sq = (nb - b).powi(2);
            for i in 0..p {
                let d = nw[i] - w[i];
                lin += d * gw[i];
                sq += d * d;
            }
            if f1 <= f0 + lin + sq / (2.0 * step) + 1e-15 * f0.abs() {
                break (nw, nb, f1);
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::NonFinite("logistic backtracking"));
            }
        };
        let obj = f_new + lambda * nw.iter().map(|v| v.abs()).sum::<f64>();
        if !obj.is_finite() {
            return Err(Error::NonFinite("logistic objective"));
        }
        let prev = *history.last().expect("non-empty");
        let moved = nw.iter().zip(&w).map(|(a, c)| (a - c).abs()).fold((nb - b).abs(), f64::max);
        // The sufficient-decrease test guarantees obj <= prev up to rounding.
        let obj = obj.min(prev);
        w = nw;
        b = nb;
        history.push(obj);
        if moved <= 1e-10 || prev - obj <= 1e-12 * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok((
        ProbeModel {
            feature_indices: x.feature_index.clone(),
            weights: w,
            bias: b,
            lambda,
            sigma: vec![0.1; p],
            scale_rule: "10sigma".into(),
        },
        FitReport {
            objective: history,
            iterations,
            converged,
        },
    ))
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half; computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Length {
            op: "auroc",
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("auroc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub max_iter: usize,
    /// Keep only this many top-F features per fit (`None`: all).
    pub select_top: Option<usize>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            seed: 42,
            max_iter: 50,
            select_top: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub fold: usize,
    pub lambda: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    /// Mean AUROC per grid value, in grid order.
    pub mean_auroc: Vec<f64>,
    pub best_lambda: f64,
    pub best_mean_auroc: f64,
    pub seed: u64,
}

impl CvReport {
    pub fn fold_auroc(&self, lambda: f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.lambda == lambda).map(|r| r.auroc).collect()
    }

    /// CSV `fold,lambda,auroc`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "fold,lambda,auroc")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.fold, r.lambda, r.auroc)?;
        }
        Ok(())
    }
}

/// Stratified fold id per sample: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeededRng::new(seed, stream_id("cv-folds", folds as u64));
    let mut assign = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        for (k, &i) in idx.iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    assign
}

/// Fits scaling, feature selection and the classifier on `train` only.
pub fn fit_probe(train: &FeatureMatrix, lambda: f64, max_iter: usize, select_top: Option<usize>) -> Result<(ProbeModel, FitReport)> {
    let cols: Vec<usize> = match select_top {
        Some(k) if k < train.n_features => {
            let mut top = rank_by_f(&f_statistic(train)?)[..k].to_vec();
            top.sort();
            top
        }
        _ => (0..train.n_features).collect(),
    };
    let sub = train.subset_cols(&cols);
    let stats = fit_normalizer(&sub)?;
    let (mut model, report) = fit_l1_logistic(&normalize(&sub, &stats)?, lambda, max_iter)?;
    model.sigma = stats.sigma;
    Ok((model, report))
}

pub fn cross_validate(x: &FeatureMatrix, cfg: &CvConfig) -> Result<(CvReport, ProbeModel)> {
    if cfg.folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if cfg.lambdas.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let (n_pos, n_neg) = x.class_counts();
    if n_pos < cfg.folds || n_neg < cfg.folds {
        return Err(Error::invalid(format!(
            "each class needs at least {} samples for {}-fold cross-validation (have {n_pos} positive, {n_neg} negative)",
            cfg.folds, cfg.folds
        )));
    }
    let fold_of = stratified_folds(&x.labels, cfg.folds, cfg.seed);
    let mut rows = Vec::new();
    let mut means = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let mut sum = 0.0;
        for fold in 0..cfg.folds {
            let train_idx: Vec<usize> = (0..x.n_samples).filter(|&i| fold_of[i] != fold).collect();
            let test_idx: Vec<usize> = (0..x.n_samples).filter(|&i| fold_of[i] == fold).collect();
            let train = x.subset_rows(&train_idx);
            let test = x.subset_rows(&test_idx);
            let (model, _) = fit_probe(&train, lambda, cfg.max_iter, cfg.select_top)?;
            let scores = model.predict(&test)?;
            let a = auroc(&scores, &test.labels)?;
            sum += a;
            rows.push(CvRow { fold, lambda, auroc: a });
        }
        means.push(sum / cfg.folds as f64);
    }
    let best = crate::numerics::argmax_first(&means)?;
    let best_lambda = cfg.lambdas[best];
    let (model, _) = fit_probe(x, best_lambda, cfg.max_iter, cfg.select_top)?;
    Ok((
        CvReport {
            rows,
            best_mean_auroc: means[best],
            mean_auroc: means,
            best_lambda,
            seed: cfg.seed,
        },
        model,
    ))
}

/// Per-layer projection of activations onto the probe direction, averaged
/// over generated tokens. With `unit_norm` the weights are first scaled to
/// unit length.
pub fn probe_projection(t: &ActivationTrace, probe: &ProbeModel, unit_norm: bool) -> Result<Vec<f64>> {
    if t.generated_len() == 0 {
        return Err(Error::Empty("probe_projection (no generated tokens)"));
    }
    let width = t.n_layers * t.d_mlp;
    if let Some(&bad) = probe.feature_indices.iter().find(|&&f| f >= width) {
        return Err(Error::OutOfRange(format!("probe feature {bad} outside {width} trace neurons")));
    }
    if probe.weights.len() != probe.feature_indices.len() {
        return Err(Error::Length {
            op: "probe_projection",
            left: probe.weights.len(),
            right: probe.feature_indices.len(),
        });
    }
    let norm = if unit_norm {
        let n = probe.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::invalid("probe direction has zero norm"));
        }
        n
    } else {
        1.0
    };
    let mut series = vec![0.0; t.n_layers];
    for tok in t.prompt_len..t.n_tokens() {
        let row = &t.activations[tok * width..(tok + 1) * width];
        for (&f, &w) in probe.feature_indices.iter().zip(&probe.weights) {
            series[f / t.d_mlp] += row[f] as f64 * w / norm;
        }
    }
    let g = t.generated_len() as f64;
    series.iter_mut().for_each(|s| *s /= g);
    Ok(series)
}

pub fn probe_to_json(p: &ProbeModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(p)?)
}

pub fn probe_from_json(s: &str) -> Result<ProbeModel> {
    let p: ProbeModel = serde_json::from_str(s)?;
    if p.weights.len() != p.feature_indices.len() || p.sigma.len() != p.feature_indices.len() {
        return Err(Error::invalid("probe file: feature_indices, weights and sigma lengths differ"));
    }
    if p.scale_rule != "10sigma" {
        return Err(Error::invalid(format!("probe file: unknown scale rule {:?}", p.scale_rule)));
    }
    if p.weights.iter().chain(&p.sigma).any(|v| !v.is_finite()) || !p.bias.is_finite() {
        return Err(Error::NonFinite("probe file"));
    }
    Ok(p)
}

pub fn save_probe(path: impl AsRef<Path>, p: &ProbeModel) -> Result<()> {
    std::fs::write(path, probe_to_json(p)?)?;
    Ok(())
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<ProbeModel> {
    probe_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;

    fn column(pos: &[f64], neg: &[f64]) -> FeatureMatrix {
        let rows = pos.iter().chain(neg).map(|&v| vec![v]).collect();
        let labels = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        FeatureMatrix::new(rows, labels).unwrap()
    }

    #[test]
    fn f_statistic_hand_values() {
        assert_eq!(f_statistic(&column(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0])).unwrap(), vec![13.5]);
        assert_eq!(f_statistic(&column(&[1.0, 3.0], &[0.0, 4.0])).unwrap(), vec![0.0]);
        assert_eq!(f_statistic(&column(&[2.0, 2.0], &[2.0, 2.0])).unwrap(), vec![0.0]);
        assert_eq!(f_statistic(&column(&[1.0, 1.0], &[2.0, 2.0])).unwrap(), vec![f64::INFINITY]);
        assert!(f_statistic(&column(&[1.0], &[2.0, 3.0])).is_err());
    }

    #[test]
    fn normalize_cases() {
        let x = FeatureMatrix::new(vec![vec![5.0, 3.0]], vec![true]).unwrap();
        let out = normalize(&x, &NormalizerStats { sigma: vec![0.5, 0.0] }).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0]);
        assert!(normalize(&x, &NormalizerStats { sigma: vec![1.0] }).is_err());
    }

    #[test]
    fn auroc_cases() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auroc(&s, &[true; 4]).is_err());
    }

    fn separable(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = SeededRng::new(seed, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2 == 0;
            let c = if y { 1.0 } else { -1.0 };
            rows.push(vec![c + 0.4 * rng.uniform_range(-1.0, 1.0), rng.normal()]);
            labels.push(y);
        }
        FeatureMatrix::new(rows, labels).unwrap()
    }

    #[test]
    fn separable_fit_and_lasso_limit() {
        let x = separable(20, 1);
        let (m, rep) = fit_probe(&x, 1e-3, 50, None).unwrap();
        let scores: Vec<f64> = (0..20).map(|r| m.logit(x.row(r)).unwrap()).collect();
        assert_eq!(auroc(&scores, &x.labels).unwrap(), 1.0);
        assert!(rep.objective.windows(2).all(|w| w[1] <= w[0]));

        let (m, _) = fit_probe(&x, 1e3, 50, None).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!(fit_l1_logistic(&x, 0.0, 10).is_err());
    }

    #[test]
    fn smooth_gradient_matches_finite_differences_at_zero() {
        let x = normalize(&separable(30, 2), &NormalizerStats { sigma: vec![0.1, 0.1] }).unwrap();
        let cw = balanced_weights(&x.labels).unwrap();
        let (gw, gb) = logistic_grad(&x, cw, &[0.0, 0.0], 0.0);
        let fd = finite_diff_grad(|p| logistic_loss(&x, cw, &p[..2], p[2]), &[0.0, 0.0, 0.0], 1e-5).unwrap();
        for (a, b) in gw.iter().chain([&gb]).zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-8), "{a} vs {b}");
        }
    }

    #[test]
    fn cv_separable_and_errors() {
        let x = separable(100, 3);
        let (rep, model) = cross_validate(&x, &CvConfig::default()).unwrap();
        assert!(rep.best_mean_auroc >= 0.99, "{rep:?}");
        assert_eq!(rep.rows.len(), 5 * 6);
        assert_eq!(model.lambda, rep.best_lambda);

        let mut small = separable(10, 3);
        small.labels = (0..10).map(|i| i < 3).collect();
        assert!(cross_validate(&small, &CvConfig::default()).is_err());
    }

    #[test]
    fn nonzero_count_shrinks_with_lambda() {
        let mut rng = SeededRng::new(4, 0);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[0] + 0.5 * r[1] > 0.0).collect();
        let x = FeatureMatrix::new(rows, labels).unwrap();
        let lo = fit_probe(&x, 1e-4, 50, None).unwrap().0.nonzero();
        let hi = fit_probe(&x, 10.0, 50, None).unwrap().0.nonzero();
        assert!(hi <= lo);
    }

    #[test]
    fn projection_cases() {
        let t = ActivationTrace {
            tokens: vec![0, 1, 2],
            prompt_len: 1,
            n_layers: 3,
            d_mlp: 2,
            d_model: 2,
            activations: (0..18).map(|v| v as f32).collect(),
            hidden: None,
        };
        let p = ProbeModel {
            feature_indices: vec![4, 5],
            weights: vec![1.0, -2.0],
            bias: 0.0,
            lambda: 1.0,
            sigma: vec![1.0, 1.0],
            scale_rule: "10sigma".into(),
        };
        let s = probe_projection(&t, &p, false).unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
        // tokens 1 and 2: (10 - 22) and (16 - 34)
        assert_eq!(s[2], -15.0);
        let prompt_only = ActivationTrace { prompt_len: 3, ..t };
        assert!(probe_projection(&prompt_only, &p, false).is_err());
    }

    #[test]
    fn probe_json_round_trip() {
        let p = ProbeModel {
            feature_indices: vec![3, 9],
            weights: vec![0.1 + 0.2, -1.0 / 3.0],
            bias: 1e-17,
            lambda: 1e-4,
            sigma: vec![0.7, 0.0],
            scale_rule: "10sigma".into(),
        };
        let back = probe_from_json(&probe_to_json(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(probe_from_json("{\"feature_indices\":[1]}").is_err());
    }

    proptest! {
        #[test]
        fn auroc_monotone_invariance(scores in proptest::collection::vec(-5.0f64..5.0, 4..30), seed in 0u64..100) {
            let mut rng = SeededRng::new(seed, 0);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.uniform() < 0.5).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&scores, &labels).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
            prop_assert_eq!(a, auroc(&t, &labels).unwrap());
        }

        #[test]
        fn f_invariant_to_shift_and_scale(vals in proptest::collection::vec(-10.0f64..10.0, 6), c in -50.0f64..50.0, s in 0.1f64..20.0) {
            let x = column(&vals[..3], &vals[3..]);
            let y = column(
                &vals[..3].iter().map(|v| s * v + c).collect::<Vec<_>>(),
                &vals[3..].iter().map(|v| s * v + c).collect::<Vec<_>>(),
            );
            let (a, b) = (f_statistic(&x).unwrap()[0], f_statistic(&y).unwrap()[0]);
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0) || (a.is_infinite() && b.is_infinite()));
        }
    }
}
