//! Layer-wise residual-stream geometry per token: path length over net
//! displacement (magnitude) and summed turning angle over net angle (angle),
//! averaged over generated tokens. Also the before/after activation shift
//! used for steering heatmaps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationTrace;
use crate::traces::TraceSummary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub epsilon: f64,
    /// Also compute prompt tokens. They never enter the averages.
    pub include_prompt: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            epsilon: 1e-6,
            include_prompt: false,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("trajectory epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub token_index: usize,
    pub magnitude: f64,
    /// `None` when some hidden vector of the token has zero norm.
    pub angle: Option<f64>,
    pub generated: bool,
}

impl TokenGeometry {
    pub fn flagged(&self) -> bool {
        self.angle.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeatures {
    pub tokens: Vec<TokenGeometry>,
    pub m_bar: f64,
    pub a_bar: f64,
    /// Unflagged generated tokens averaged over.
    pub count: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `arccos` of the clamped cosine; `None` for a zero vector.
fn turn(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Some(cos.clamp(-1.0, 1.0).acos())
}

/// Magnitude of one token's `L + 1` points `h^0 … h^L`.
pub fn magnitude_of(points: &[Vec<f64>], eps: f64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("trajectory needs at least two hidden states"));
    }
    let l = (points.len() - 1) as f64;
    let path: f64 = points.windows(2).map(|w| dist(&w[0], &w[1])).sum();
    let net = dist(&points[0], &points[points.len() - 1]);
    Ok(path / (net + eps) / l)
}

/// Angle of one token's `L + 1` points; `None` when any point is zero.
pub fn angle_of(points: &[Vec<f64>], eps: f64) -> Result<Option<f64>> {
    if points.len() < 2 {
        return Err(Error::invalid("trajectory needs at least two hidden states"));
    }
    let l = (points.len() - 1) as f64;
    let mut total = 0.0;
    for w in points.windows(2) {
        match turn(&w[0], &w[1]) {
            Some(a) => total += a,
            None => return Ok(None),
        }
    }
    Ok(turn(&points[0], &points[points.len() - 1]).map(|net| total / (net + eps) / l))
}

fn token_points(t: &ActivationTrace, token: usize) -> Result<Vec<Vec<f64>>> {
    if t.hidden.is_none() {
        return Err(Error::invalid("trace has no hidden states; capture them to compute trajectories"));
    }
    Ok((0..=t.n_layers)
        .map(|l| {
            t.hidden_state(token, l)
                .expect("hidden captured")
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect())
}

fn token_range(t: &ActivationTrace, cfg: &TrajectoryConfig) -> std::ops::Range<usize> {
    let start = if cfg.include_prompt { 0 } else { t.prompt_len };
    start..t.n_tokens()
}

/// Per-token magnitudes over the configured span.
pub fn magnitude(t: &ActivationTrace, cfg: &TrajectoryConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    token_range(t, cfg)
        .map(|tok| magnitude_of(&token_points(t, tok)?, cfg.epsilon))
        .collect()
}

/// Per-token angles over the configured span.
pub fn angle(t: &ActivationTrace, cfg: &TrajectoryConfig) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    token_range(t, cfg)
        .map(|tok| angle_of(&token_points(t, tok)?, cfg.epsilon))
        .collect()
}

/// Means over unflagged generated tokens.
pub fn sequence_average(tokens: &[TokenGeometry]) -> Result<(f64, f64, usize)> {
    let (mut m, mut a, mut n) = (0.0, 0.0, 0usize);
    for tok in tokens.iter().filter(|t| t.generated) {
        if let Some(ang) = tok.angle {
            m += tok.magnitude;
            a += ang;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("unflagged generated tokens"));
    }
    Ok((m / n as f64, a / n as f64, n))
}

pub fn trajectory_features(t: &ActivationTrace, cfg: &TrajectoryConfig) -> Result<TrajectoryFeatures> {
    cfg.validate()?;
    let tokens = token_range(t, cfg)
        .map(|tok| {
            let pts = token_points(t, tok)?;
            Ok(TokenGeometry {
                token_index: tok,
                magnitude: magnitude_of(&pts, cfg.epsilon)?,
                angle: angle_of(&pts, cfg.epsilon)?,
                generated: tok >= t.prompt_len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (m_bar, a_bar, count) = sequence_average(&tokens)?;
    Ok(TrajectoryFeatures {
        tokens,
        m_bar,
        a_bar,
        count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronShift {
    pub layer: usize,
    pub neuron: usize,
    pub shift: f64,
}

/// Mean over traces of the after-minus-before per-trace means, restricted to
/// `neurons` (in the given order).
pub fn activation_shift(before: &[TraceSummary], after: &[TraceSummary], neurons: &[(usize, usize)]) -> Result<Vec<NeuronShift>> {
    if before.len() != after.len() {
        return Err(Error::Length {
            op: "activation_shift",
            left: before.len(),
            right: after.len(),
        });
    }
    let first = before.first().ok_or(Error::Empty("activation_shift traces"))?;
    let shape = (first.n_layers, first.d_mlp);
    for s in before.iter().chain(after) {
        if (s.n_layers, s.d_mlp) != shape {
            return Err(Error::Shape {
                op: "activation_shift",
                left: shape,
                right: (s.n_layers, s.d_mlp),
            });
        }
    }
    if let Some(&(l, i)) = neurons.iter().find(|&&(l, i)| l >= shape.0 || i >= shape.1) {
        return Err(Error::OutOfRange(format!("neuron ({l}, {i}) outside {} x {}", shape.0, shape.1)));
    }
    let n = before.len() as f64;
    Ok(neurons
        .iter()
        .map(|&(l, i)| {
            let b: f64 = before.iter().map(|s| s.get(l, i)).sum::<f64>() / n;
            let a: f64 = after.iter().map(|s| s.get(l, i)).sum::<f64>() / n;
            NeuronShift {
                layer: l,
                neuron: i,
                shift: a - b,
            }
        })
        .collect())
}

/// `trace_id,token_index,M_t,A_t,flagged`; flagged tokens leave `A_t` empty.
pub fn write_token_csv<W: Write>(mut out: W, rows: &[(u64, TrajectoryFeatures)]) -> Result<()> {
    writeln!(out, "trace_id,token_index,M_t,A_t,flagged")?;
    for (id, f) in rows {
        for t in &f.tokens {
            let a = t.angle.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{id},{},{},{a},{}", t.token_index, t.magnitude, t.flagged())?;
        }
    }
    Ok(())
}

/// `trace_id,M_bar,A_bar,T`
pub fn write_summary_csv<W: Write>(mut out: W, rows: &[(u64, TrajectoryFeatures)]) -> Result<()> {
    writeln!(out, "trace_id,M_bar,A_bar,T")?;
    for (id, f) in rows {
        writeln!(out, "{id},{},{},{}", f.m_bar, f.a_bar, f.count)?;
    }
    Ok(())
}

/// `layer,neuron,shift`
pub fn write_shift_csv<W: Write>(mut out: W, shifts: &[NeuronShift]) -> Result<()> {
    writeln!(out, "layer,neuron,shift")?;
    for s in shifts {
        writeln!(out, "{},{},{}", s.layer, s.neuron, s.shift)?;
    }
    Ok(())
}
