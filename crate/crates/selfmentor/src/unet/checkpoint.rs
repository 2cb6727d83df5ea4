//! Versioned binary checkpoints for [`UNet`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SMUNETCK"
//! version  u32      currently 1
//! manifest 5 x u32  depth, base_filters, in_channels, out_channels,
//!                   convs_per_block
//! blocks   u32      number of named tensors, then per tensor:
//!   name   u32 length + UTF-8 bytes
//!   dims   u32 rank + u32 per extent
//!   data   f32 little-endian, row-major
//! ```
//!
//! Blocks appear in network construction order; a round trip is bitwise
//! exact.

use std::path::Path;

use super::{UNet, UNetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SMUNETCK";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(net: &UNet) -> Vec<u8> {
    let cfg = net.config();
    let named = net.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    for v in [
        cfg.depth,
        cfg.base_filters,
        cfg.in_channels,
        cfg.out_channels,
        cfg.convs_per_block,
    ] {
        push_u32(&mut out, v as u32);
    }
    push_u32(&mut out, named.len() as u32);
    for (name, param) in &named {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        let shape = param.value.shape();
        push_u32(&mut out, shape.len() as u32);
        for d in shape {
            push_u32(&mut out, *d as u32);
        }
        for v in param.value.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<UNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a U-net checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let depth = r.u32()? as usize;
    let base_filters = r.u32()? as usize;
    let in_channels = r.u32()? as usize;
    let out_channels = r.u32()? as usize;
    let convs_per_block = r.u32()? as usize;
    let config = UNetConfig {
        depth,
        base_filters,
        in_channels,
        out_channels,
        convs_per_block,
    };
    let net = UNet::build(config, 0)?;
    let named = net.named_params();
    let n_blocks = r.u32()? as usize;
    if n_blocks != named.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_blocks} tensors, architecture expects {}",
            named.len()
        )));
    }
    for (expected_name, param) in &named {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Format(format!(
                "checkpoint tensor order mismatch: found {name}, expected {expected_name}"
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != param.value.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} has shape {shape:?}, expected {:?}",
                param.value.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let mut data = param.value.data_mut();
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(net)
}

/// Writes the checkpoint atomically (temp file + rename).
pub fn save(net: &UNet, path: &Path) -> Result<()> {
    crate::pipeline::write_atomic(path, &to_bytes(net))
}

pub fn load(path: &Path) -> Result<UNet> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn byte_round_trip_is_bitwise_exact() {
        let net = UNet::build(UNetConfig::new(2, 3, 1, 1), 17).unwrap();
        let bytes = to_bytes(&net);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
        for (a, b) in net.params().iter().zip(loaded.params().iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn loaded_net_forwards_identically() {
        let net = UNet::build(UNetConfig::new(2, 2, 1, 1), 23).unwrap();
        let loaded = from_bytes(&to_bytes(&net)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(
            &[1, 1, 16, 16],
            (0..256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let a = net.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let net = UNet::build(UNetConfig::new(1, 1, 1, 1), 0).unwrap();
        let mut bytes = to_bytes(&net);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let net = UNet::build(UNetConfig::new(1, 1, 1, 1), 0).unwrap();
        let bytes = to_bytes(&net);
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = UNet::build(UNetConfig::new(2, 2, 1, 1), 5).unwrap();
        save(&net, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(to_bytes(&net), to_bytes(&loaded));
    }
}
