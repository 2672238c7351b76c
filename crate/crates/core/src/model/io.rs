//! Model file: magic `ADRSMDL1`, `u32` version, config fields as `u32`, then
//! every matrix and gain vector in declaration order as little-endian `f32`,
//! row-major.

use std::path::Path;

use super::{LayerWeights, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODEL_MAGIC: &[u8; 8] = b"ADRSMDL1";
pub const MODEL_VERSION: u32 = 1;

pub fn model_to_bytes(w: &Weights) -> Result<Vec<u8>> {
    w.validate()?;
    let cfg = &w.config;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [cfg.n_layers, cfg.d_model, cfg.d_mlp, cfg.n_heads, cfg.vocab_size, cfg.max_seq] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut put = |vals: &[f32]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(w.embed.as_slice());
    for lw in &w.layers {
        put(&lw.attn_norm);
        put(lw.wq.as_slice());
        put(lw.wk.as_slice());
        put(lw.wv.as_slice());
        put(lw.wo.as_slice());
        put(&lw.mlp_norm);
        put(lw.w_gate.as_slice());
        put(lw.w_up.as_slice());
        put(lw.w_down.as_slice());
    }
    put(&w.final_norm);
    put(w.unembed.as_slice());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated("model"))?;
        if end > self.buf.len() {
            return Err(Error::Truncated("model"));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated("model"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.floats(rows * cols)?)
    }
}

pub fn model_from_bytes(buf: &[u8]) -> Result<Weights> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8).map_err(|_| Error::BadMagic {
        expected: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
        found: String::from_utf8_lossy(buf).into_owned(),
    })?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "model",
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let mut fields = [0usize; 6];
    for f in fields.iter_mut() {
        *f = r.u32()? as usize;
    }
    let cfg = ModelConfig {
        n_layers: fields[0],
        d_model: fields[1],
        d_mlp: fields[2],
        n_heads: fields[3],
        vocab_size: fields[4],
        max_seq: fields[5],
    };
    cfg.validate()?;
    let d = cfg.d_model;
    let embed = r.matrix(cfg.vocab_size, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            attn_norm: r.floats(d)?,
            wq: r.matrix(d, d)?,
            wk: r.matrix(d, d)?,
            wv: r.matrix(d, d)?,
            wo: r.matrix(d, d)?,
            mlp_norm: r.floats(d)?,
            w_gate: r.matrix(d, cfg.d_mlp)?,
            w_up: r.matrix(d, cfg.d_mlp)?,
            w_down: r.matrix(cfg.d_mlp, d)?,
        });
    }
    let final_norm = r.floats(d)?;
    let unembed = r.matrix(d, cfg.vocab_size)?;
    if r.pos != buf.len() {
        return Err(Error::invalid(format!(
            "model file has {} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let w = Weights {
        config: cfg,
        embed,
        layers,
        final_norm,
        unembed,
    };
    w.validate()?;
    Ok(w)
}

pub fn save_model(path: impl AsRef<Path>, w: &Weights) -> Result<()> {
    std::fs::write(path, model_to_bytes(w)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Weights> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_random_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 4,
            d_mlp: 6,
            n_heads: 2,
            vocab_size: 9,
            max_seq: 8,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = build_random_model(cfg(), 17).unwrap();
        let bytes = model_to_bytes(&w).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        let bits = |w: &Weights| w.embed.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w), bits(&back));
        assert_eq!(w, back);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let w = build_random_model(cfg(), 17).unwrap();
        let bytes = model_to_bytes(&w).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = model_from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("ADRSMDL1"));

        let mut v99 = bytes.clone();
        v99[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&v99),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));

        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }
}
