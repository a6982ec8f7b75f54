//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | field            | type                                  |
//! |------------------|---------------------------------------|
//! | magic            | 8 bytes `DSPPCKPT`                    |
//! | version          | u32 (currently 1)                     |
//! | schema hash      | u64, see [`schema_hash`]              |
//! | metadata length  | u32                                   |
//! | metadata         | UTF-8 JSON object                     |
//! | parameter count  | u32                                   |
//! | parameters       | repeated: u16 name length, name bytes, u32 rows, u32 cols, rows*cols f64 column-major |
//!
//! The metadata object holds the model configuration under `"model"` and
//! caller-supplied data under `"extra"`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamBlock;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DSPPCKPT";
pub const VERSION: u32 = 1;

/// First 8 bytes (little-endian) of SHA-256 over `name:rows x cols\n` for
/// every block in order.
pub fn schema_hash<'a>(table: impl IntoIterator<Item = (&'a str, usize, usize)>) -> u64 {
    let mut h = Sha256::new();
    for (name, r, c) in table {
        h.update(format!("{name}:{r}x{c}\n").as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Decoded contents of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: serde_json::Value,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(model: &Model, extra: &serde_json::Value) -> Result<Vec<u8>> {
    let blocks = model.blocks();
    let meta = serde_json::to_vec(&Meta {
        model: model.config.clone(),
        extra: extra.clone(),
    })
    .map_err(|e| err(e.to_string()))?;
    let len32 = |n: usize, what: &str| u32::try_from(n).map_err(|_| err(format!("{what} too large")));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let hash = schema_hash(blocks.iter().map(|b| (b.name.as_str(), b.value.nrows(), b.value.ncols())));
    out.extend_from_slice(&hash.to_le_bytes());
    out.extend_from_slice(&len32(meta.len(), "metadata")?.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&len32(blocks.len(), "parameter table")?.to_le_bytes());
    for b in &blocks {
        let name = b.name.as_bytes();
        let nlen = u16::try_from(name.len()).map_err(|_| err("parameter name too long"))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&len32(b.value.nrows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&len32(b.value.ncols(), "cols")?.to_le_bytes());
        for v in b.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(err(format!("truncated {what}")));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice has length N"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

/// Parses the parameter table without building a model.
pub fn decode_table(bytes: &[u8]) -> Result<(serde_json::Value, Vec<ParamBlock>)> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let hash = r.u64("schema hash")?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| err(format!("metadata: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let nlen = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?).map_err(|_| err("parameter name is not UTF-8"))?.to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| err("parameter shape overflows"))?;
        let data = r.take(n, "parameter values")?;
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        blocks.push(ParamBlock::dense(name, DMatrix::from_vec(rows, cols, values)));
    }
    if !r.buf.is_empty() {
        return Err(err("trailing bytes"));
    }
    if schema_hash(blocks.iter().map(|b| (b.name.as_str(), b.value.nrows(), b.value.ncols()))) != hash {
        return Err(err("schema hash mismatch"));
    }
    Ok((meta, blocks))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (meta, blocks) = decode_table(bytes)?;
    let meta: Meta = serde_json::from_value(meta).map_err(|e| err(format!("metadata: {e}")))?;
    let config = meta.model;
    config.validate()?;
    // Every size in the configuration is bounded by some block's length, so
    // a forged header cannot make the skeleton allocate more than the file.
    let stored: usize = blocks.iter().map(|b| b.value.len()).sum();
    let sizes = [config.inducing, config.hidden_width, config.input_dim, config.output_dim];
    if sizes.iter().any(|&s| s > stored) {
        return Err(err("configuration does not match the parameter table"));
    }
    let mut model = Model::skeleton(config)?;
    model.load_blocks(blocks)?;
    Ok(Checkpoint { model, extra: meta.extra })
}

pub fn save(path: &std::path::Path, model: &Model, extra: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(model, extra)?)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tests::small_model;
    use crate::models::Family;
    use crate::quadrature::RuleKind;

    fn bitwise_eq(a: &Model, b: &Model) -> bool {
        let (pa, pb) = (a.params(), b.params());
        pa.names == pb.names && pa.values.iter().zip(&pb.values).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn round_trip_is_bitwise() {
        for (family, layers, kind) in [
            (Family::Svgp, 1, RuleKind::Qr3),
            (Family::Dspp, 2, RuleKind::Qr1),
            (Family::Dspp, 2, RuleKind::GaussHermite),
            (Family::Dgp, 2, RuleKind::Qr3),
        ] {
            let (m, _, _) = small_model(family, layers, kind, 2, 31);
            let extra = serde_json::json!({"note": "x", "scale": [1.5]});
            let bytes = encode(&m, &extra).unwrap();
            let back = decode(&bytes).unwrap();
            assert!(bitwise_eq(&m, &back.model), "{family}");
            assert_eq!(back.model, m);
            assert_eq!(back.extra, extra);
            assert_eq!(encode(&back.model, &extra).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let (m, _, _) = small_model(Family::Dspp, 2, RuleKind::Qr3, 2, 32);
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        for cut in [0, 7, 12, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut hash = bytes.clone();
        hash[12] ^= 1;
        assert!(matches!(decode(&hash), Err(Error::Checkpoint(m)) if m.contains("hash")));
    }

    #[test]
    fn header_layout() {
        let (m, _, _) = small_model(Family::Svgp, 1, RuleKind::Qr3, 1, 33);
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let blocks = m.blocks();
        let h = schema_hash(blocks.iter().map(|b| (b.name.as_str(), b.value.nrows(), b.value.ncols())));
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), h);
    }
}
