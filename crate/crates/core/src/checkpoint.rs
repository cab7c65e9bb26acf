//! Self-describing binary checkpoints.
//!
//! Layout: `MCAN`, u32 LE format version, u64 LE header length, JSON header
//! (network config, training config, parameter manifest), the parameter
//! arrays as little-endian f64 in manifest order, then a u32 LE CRC32 of
//! every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::network::{MultiAttrNet, NetConfig};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MCAN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the array from the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub net_config: NetConfig,
    pub train_config: TrainConfig,
    pub manifest: Vec<ManifestEntry>,
}

/// Serialises `net` and the config that produced it.
pub fn to_bytes(net: &MultiAttrNet, train_config: &TrainConfig) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let manifest = net
        .params()
        .iter()
        .map(|p| {
            let entry = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += 8 * p.value.numel() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        net_config: net.config().clone(),
        train_config: train_config.clone(),
        manifest,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in net.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn verify_crc(bytes: &[u8]) -> std::result::Result<(), CheckpointError> {
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(())
}

/// Parses a checkpoint, rebuilding the network from its embedded config.
pub fn from_bytes(bytes: &[u8]) -> Result<(MultiAttrNet, TrainConfig)> {
    Ok(parse(bytes)?)
}

fn parse(bytes: &[u8]) -> std::result::Result<(MultiAttrNet, TrainConfig), CheckpointError> {
    use CheckpointError as E;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(E::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(E::Truncated("header prefix incomplete".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(E::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| E::Truncated("header length overflows".into()))?)
        .filter(|&end| end + 4 <= bytes.len())
        .ok_or_else(|| E::Truncated(format!("header of {header_len} bytes does not fit")))?;
    let header: Header = match serde_json::from_slice(&bytes[16..header_end]) {
        Ok(h) => h,
        Err(e) => {
            verify_crc(bytes)?;
            return Err(E::Format(format!("header: {e}")));
        }
    };
    let data_len: usize = header.manifest.iter().map(|m| 8 * m.shape.iter().product::<usize>()).sum();
    let expected = header_end + data_len + 4;
    if bytes.len() < expected {
        return Err(E::Truncated(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(E::Format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    verify_crc(bytes)?;

    let mut net = MultiAttrNet::init_params(header.net_config.clone()).map_err(|e| E::Format(e.to_string()))?;
    if net.params().len() != header.manifest.len() {
        return Err(E::Format(format!(
            "manifest lists {} arrays, config implies {}",
            header.manifest.len(),
            net.params().len()
        )));
    }
    let data = &bytes[header_end..header_end + data_len];
    for (param, entry) in net.params_mut().iter_mut().zip(&header.manifest) {
        if param.name != entry.name || param.value.shape() != entry.shape.as_slice() {
            return Err(E::Format(format!(
                "manifest entry {} {:?} does not match parameter {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        let start = usize::try_from(entry.offset).map_err(|_| E::Format("offset overflows".into()))?;
        let len = 8 * param.value.numel();
        let raw = data
            .get(start..start + len)
            .ok_or_else(|| E::Format(format!("array {} lies outside the data section", entry.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        param.value = Tensor::new(entry.shape.clone(), values).map_err(|e| E::Format(e.to_string()))?;
    }
    Ok((net, header.train_config))
}

pub fn save(net: &MultiAttrNet, train_config: &TrainConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, to_bytes(net, train_config)?)?)
}

pub fn load(path: &Path) -> Result<(MultiAttrNet, TrainConfig)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::transform::TransformParams;

    fn net() -> MultiAttrNet {
        MultiAttrNet::init_params(NetConfig {
            image_size: 8,
            feature_channels: 4,
            num_attributes: 2,
            head_hidden: 2,
            seed: 9,
            ..NetConfig::desk()
        })
        .unwrap()
    }

    fn input() -> Tensor {
        Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 11) as f64 / 10.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let n = net();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let bytes = to_bytes(&n, &cfg).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let (back, back_cfg) = from_bytes(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(back_cfg, cfg);
        let t = TransformParams::new(2.0, 0.5).unwrap();
        assert_eq!(back.predict(&input(), t).unwrap(), n.predict(&input(), t).unwrap());
        assert_eq!(to_bytes(&back, &back_cfg).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        save(&net(), &TrainConfig::default(), &path).unwrap();
        assert_eq!(load(&path).unwrap().0, net());
    }

    fn err(bytes: &[u8]) -> CheckpointError {
        match from_bytes(bytes) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn distinct_failures() {
        let good = to_bytes(&net(), &TrainConfig::default()).unwrap();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(err(&magic), CheckpointError::BadMagic));

        let mut version = good.clone();
        version[4] = 7;
        assert!(matches!(err(&version), CheckpointError::Version { found: 7, .. }));

        assert!(matches!(err(&good[..good.len() - 100]), CheckpointError::Truncated(_)));
        assert!(matches!(err(&good[..10]), CheckpointError::Truncated(_)));

        for pos in [30, good.len() / 2, good.len() - 20] {
            let mut flipped = good.clone();
            flipped[pos] ^= 0x01;
            assert!(matches!(err(&flipped), CheckpointError::Checksum { .. }), "byte {pos}");
        }
    }
}
