//! Contrastive data construction: sample labeled traces per instance, pair
//! correct with incorrect traces of the same instance, and persist them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, ActivationTrace, DecodeConfig, SteeringSpec, Weights};
use crate::numerics::stream_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clean,
    Corrupt,
    /// Instances without a clean/corrupt construction (arithmetic world).
    Natural,
}

/// One prompt plus its correctness oracle (exact match on the answer token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    #[serde(rename = "prompt_tokens")]
    pub prompt: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    pub variant: Variant,
}

impl TaskInstance {
    pub fn judge(&self, answer: Option<u32>) -> bool {
        answer.is_some_and(|a| self.answer_tokens.contains(&a))
    }
}

/// The answer is the last generated token.
pub fn extract_answer(trace: &ActivationTrace) -> Option<u32> {
    trace.generated().last().copied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub instance_id: u64,
    pub trace: ActivationTrace,
    pub answer: Option<u32>,
    pub correct: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub capture_hidden: bool,
}

impl SampleConfig {
    /// Eight traces at temperature 1.0.
    pub fn contrastive(seed: u64, max_new_tokens: usize) -> Self {
        SampleConfig {
            n: 8,
            temperature: 1.0,
            seed,
            max_new_tokens,
            capture_hidden: false,
        }
    }
}

/// Per-trace decoding seed for the `k`-th sample of an instance.
pub fn trace_seed(base: u64, instance_id: u64, k: usize) -> u64 {
    stream_id("trace-seed", base ^ instance_id.rotate_left(32)) ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn sample_traces(
    w: &Weights,
    inst: &TaskInstance,
    cfg: &SampleConfig,
    steering: Option<&SteeringSpec>,
) -> Result<Vec<LabeledTrace>> {
    if cfg.n == 0 {
        return Err(Error::invalid("sample_traces: n must be >= 1").for_instance(inst.id));
    }
    (0..cfg.n)
        .map(|k| {
            let seed = trace_seed(cfg.seed, inst.id, k);
            let mut dc = DecodeConfig::sampled(cfg.temperature, cfg.max_new_tokens, seed, stream_id("sample", inst.id));
            dc.capture_hidden = cfg.capture_hidden;
            let gen = generate(w, &inst.prompt, &dc, steering).map_err(|e| e.for_instance(inst.id))?;
            let trace = gen.trace.expect("capture enabled");
            let answer = extract_answer(&trace);
            Ok(LabeledTrace {
                instance_id: inst.id,
                correct: inst.judge(answer),
                answer,
                trace,
                seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub instance_id: u64,
    pub positive: LabeledTrace,
    pub negative: LabeledTrace,
}

/// Pairs correct with incorrect traces of the same instance, matched in
/// ascending seed order. With `balance = Some((p, q))`, only instances with
/// exactly `p` correct and `q` incorrect traces contribute.
pub fn build_pairs(traces: &[LabeledTrace], balance: Option<(usize, usize)>) -> Vec<ContrastivePair> {
    let mut groups: BTreeMap<u64, (Vec<&LabeledTrace>, Vec<&LabeledTrace>)> = BTreeMap::new();
    for t in traces {
        let g = groups.entry(t.instance_id).or_default();
        if t.correct {
            g.0.push(t);
        } else {
            g.1.push(t);
        }
    }
    let mut pairs = Vec::new();
    for (id, (mut pos, mut neg)) in groups {
        if let Some((p, q)) = balance {
            if pos.len() != p || neg.len() != q {
                continue;
            }
        }
        pos.sort_by_key(|t| t.seed);
        neg.sort_by_key(|t| t.seed);
        for (p, n) in pos.iter().zip(&neg) {
            pairs.push(ContrastivePair {
                instance_id: id,
                positive: (*p).clone(),
                negative: (*n).clone(),
            });
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    Prompt,
    Generated,
    #[default]
    All,
}

impl Span {
    pub fn range(self, t: &ActivationTrace) -> std::ops::Range<usize> {
        match self {
            Span::Prompt => 0..t.prompt_len,
            Span::Generated => t.prompt_len..t.n_tokens(),
            Span::All => 0..t.n_tokens(),
        }
    }
}

/// Per-neuron mean activation of one trace, `n_layers × d_mlp`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub n_layers: usize,
    pub d_mlp: usize,
    pub means: Vec<f64>,
}

impl TraceSummary {
    pub fn get(&self, layer: usize, neuron: usize) -> f64 {
        self.means[layer * self.d_mlp + neuron]
    }
}

pub fn trace_mean(t: &ActivationTrace, span: Span) -> Result<TraceSummary> {
    let range = span.range(t);
    if range.is_empty() {
        return Err(Error::Empty("trace_mean span"));
    }
    let width = t.n_layers * t.d_mlp;
    let mut sums = vec![0.0f64; width];
    for tok in range.clone() {
        let row = &t.activations[tok * width..(tok + 1) * width];
        for (s, &a) in sums.iter_mut().zip(row) {
            *s += a as f64;
        }
    }
    let n = range.len() as f64;
    Ok(TraceSummary {
        n_layers: t.n_layers,
        d_mlp: t.d_mlp,
        means: sums.into_iter().map(|s| s / n).collect(),
    })
}

pub const STORE_MAGIC: &[u8; 8] = b"ADRSTRC1";
pub const STORE_VERSION: u32 = 1;
const FLAG_HIDDEN: u32 = 1;

/// Layout: magic, then `u32` header (version, n_traces, n_layers, d_mlp,
/// d_model, flags), then per trace: instance id `u64`, seed `u64`,
/// correctness `u8`, prompt length `u32`, token count `u32`, token ids `u32`,
/// activations `f32` and optional hidden states `f32`; finally a CRC32 over
/// everything between the magic and the checksum.
pub fn store_to_bytes(traces: &[LabeledTrace]) -> Result<Vec<u8>> {
    let (n_layers, d_mlp, d_model, has_hidden) = match traces.first() {
        Some(t) => (t.trace.n_layers, t.trace.d_mlp, t.trace.d_model, t.trace.hidden.is_some()),
        None => (0, 0, 0, false),
    };
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    let flags = if has_hidden { FLAG_HIDDEN } else { 0 };
    for v in [STORE_VERSION, traces.len() as u32, n_layers as u32, d_mlp as u32, d_model as u32, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for lt in traces {
        let t = &lt.trace;
        t.validate()?;
        if (t.n_layers, t.d_mlp, t.d_model, t.hidden.is_some()) != (n_layers, d_mlp, d_model, has_hidden) {
            return Err(Error::invalid(format!(
                "trace store: trace for instance {} has a different shape or hidden-state presence",
                lt.instance_id
            )));
        }
        out.extend_from_slice(&lt.instance_id.to_le_bytes());
        out.extend_from_slice(&lt.seed.to_le_bytes());
        out.push(lt.correct as u8);
        out.extend_from_slice(&(t.prompt_len as u32).to_le_bytes());
        out.extend_from_slice(&(t.n_tokens() as u32).to_le_bytes());
        for tok in &t.tokens {
            out.extend_from_slice(&tok.to_le_bytes());
        }
        for a in &t.activations {
            out.extend_from_slice(&a.to_le_bytes());
        }
        if let Some(h) = &t.hidden {
            for v in h {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out[STORE_MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated("trace store"))?;
        if end > self.buf.len() {
            return Err(Error::Truncated("trace store"));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated("trace store"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn store_from_bytes(buf: &[u8]) -> Result<Vec<LabeledTrace>> {
    let expected_magic = || String::from_utf8_lossy(STORE_MAGIC).into_owned();
    if buf.len() < STORE_MAGIC.len() || &buf[..8] != STORE_MAGIC {
        return Err(Error::BadMagic {
            expected: expected_magic(),
            found: String::from_utf8_lossy(&buf[..buf.len().min(8)]).into_owned(),
        });
    }
    let mut c = Cursor { buf, pos: 8 };
    let version = c.u32()?;
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "trace store",
            found: version,
            expected: STORE_VERSION,
        });
    }
    if buf.len() < 8 + 24 + 4 {
        return Err(Error::Truncated("trace store"));
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&buf[8..body_end]);
    if stored != computed {
        // A short file usually shows up as a checksum failure; report the
        // more specific cause when the declared contents do not fit.
        return Err(match store_parse(buf, body_end) {
            Err(e @ Error::Truncated(_)) => e,
            _ => Error::Checksum { stored, computed },
        });
    }
    store_parse(buf, body_end)
}

fn store_parse(buf: &[u8], body_end: usize) -> Result<Vec<LabeledTrace>> {
    let mut c = Cursor {
        buf: &buf[..body_end],
        pos: 12,
    };
    let n_traces = c.u32()? as usize;
    let n_layers = c.u32()? as usize;
    let d_mlp = c.u32()? as usize;
    let d_model = c.u32()? as usize;
    let flags = c.u32()?;
    let has_hidden = flags & FLAG_HIDDEN != 0;
    let mut traces = Vec::with_capacity(n_traces.min(1 << 16));
    for _ in 0..n_traces {
        let instance_id = c.u64()?;
        let seed = c.u64()?;
        let correct = c.take(1)?[0] != 0;
        let prompt_len = c.u32()? as usize;
        let n_tokens = c.u32()? as usize;
        let tokens = c
            .take(n_tokens.checked_mul(4).ok_or(Error::Truncated("trace store"))?)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let activations = c.f32s(n_tokens * n_layers * d_mlp)?;
        let hidden = if has_hidden {
            Some(c.f32s(n_tokens * (n_layers + 1) * d_model)?)
        } else {
            None
        };
        let trace = ActivationTrace {
            tokens,
            prompt_len,
            n_layers,
            d_mlp,
            d_model,
            activations,
            hidden,
        };
        trace.validate()?;
        traces.push(LabeledTrace {
            instance_id,
            answer: extract_answer(&trace),
            trace,
            correct,
            seed,
        });
    }
    if c.pos != body_end {
        return Err(Error::invalid(format!("trace store has {} unread bytes", body_end - c.pos)));
    }
    Ok(traces)
}

pub fn save_store(path: impl AsRef<Path>, traces: &[LabeledTrace]) -> Result<()> {
    std::fs::write(path, store_to_bytes(traces)?)?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<Vec<LabeledTrace>> {
    store_from_bytes(&std::fs::read(path)?)
}
