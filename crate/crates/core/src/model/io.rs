// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary weight file.
//!
//! Little-endian layout:
//!
//! ```text
//! b"PAHQ"                 magic
//! u32                     version (1)
//! u32 x 8                 n_layers, n_heads, d_model, d_k, vocab, seq_len, batch, d_mlp
//! f32 ...                 tensors, row-major, in this order:
//!                           embed [vocab, d_model]
//!                           pos   [seq_len, d_model]
//!                           per layer:
//!                             ln_gamma [d_model], ln_beta [d_model]
//!                             w_q, w_k, w_v, w_o [d_model, d_model]
//!                             if d_mlp > 0:
//!                               ln_gamma [d_model], ln_beta [d_model]
//!                               w_in [d_model, d_mlp], b_in [d_mlp]
//!                               w_out [d_mlp, d_model], b_out [d_model]
//!                           ln_f_gamma [d_model], ln_f_beta [d_model]
//!                           unembed [d_model, vocab]
//! u64                     FNV-1a 64 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, WeightSet};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

pub const MAGIC: [u8; 4] = *b"PAHQ";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 * 4;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_weights<S: Scalar>(set: &WeightSet<S>) -> Vec<u8> {
    let c = &set.config;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * set.element_count() + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.n_layers, c.n_heads, c.d_model, c.d_k, c.vocab, c.seq_len, c.batch, c.d_mlp] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    set.for_each_tensor(|t| {
        for x in t {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    });
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_weights<S: Scalar>(bytes: &[u8]) -> Result<WeightSet<S>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let f = |i: usize| read_u32(bytes, 8 + 4 * i) as usize;
    let config = ModelConfig {
        n_layers: f(0),
        n_heads: f(1),
        d_model: f(2),
        d_k: f(3),
        vocab: f(4),
        seq_len: f(5),
        batch: f(6),
        d_mlp: f(7),
    };
    config.validate().map_err(|e| Error::Shape(e.to_string()))?;

    let needed = HEADER_LEN + 4 * config.parameter_count() + 8;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingBytes(bytes.len() - needed));
    }
    let stored = u64::from_le_bytes(bytes[needed - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..needed - 8]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut set = WeightSet::<S>::zeros(config);
    let mut at = HEADER_LEN;
    set.for_each_tensor_mut(|t| {
        for x in t.iter_mut() {
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            *x = S::of(f64::from(v));
            at += 4;
        }
    });
    set.validate()?;
    Ok(set)
}

pub fn save_weights<S: Scalar>(set: &WeightSet<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(set))?;
    Ok(())
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<WeightSet<S>> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init::random_weights;

    fn sample() -> WeightSet<f32> {
        random_weights(ModelConfig::new(2, 2, 8, 11, 5).with_mlp(6), 3, 0.5)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = sample();
        let back: WeightSet<f32> = decode_weights(&encode_weights(&w)).unwrap();
        assert!(back.bitwise_eq(&w));
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_weights(&sample());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(
            decode_weights::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_weights::<f32>(&bytes[..20]), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[HEADER_LEN + 5] ^= 0x40;
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::Checksum { .. })));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn inconsistent_head_split_is_a_shape_error() {
        let mut bytes = encode_weights(&sample());
        // d_k field: 3 != 8 / 2
        bytes[8 + 12..8 + 16].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_weights::<f32>(&bytes), Err(Error::Shape(_))));
    }
}
