//! Directory checkpoints: a text manifest plus one little-endian binary file
//! per target block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::Params;
use super::{BlockParams, ModelConfig};
use crate::error::{CgtError, Result};
use crate::graph::ParentMask;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl FromStr for Dtype {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(CgtError::Checkpoint(format!("unsupported dtype {s:?}"))),
        }
    }
}

/// Trained blocks together with the configuration and masks they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub masks: Vec<ParentMask>,
    pub blocks: Vec<BlockParams>,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    for &v in values {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype, out: &mut [f64]) {
    let w = dtype.width();
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(w)) {
        *v = match dtype {
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
        };
    }
}

fn config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("window".into(), cfg.window.to_string()),
        ("max_lag".into(), cfg.max_lag.to_string()),
        ("channels".into(), cfg.channels.to_string()),
        ("d_model".into(), cfg.d_model.to_string()),
        ("n_heads".into(), cfg.n_heads.to_string()),
        ("n_layers".into(), cfg.n_layers.to_string()),
        ("d_ff".into(), cfg.d_ff.to_string()),
        ("d_latent".into(), cfg.d_latent.to_string()),
        ("mc_samples".into(), cfg.mc_samples.to_string()),
        ("logvar_lo".into(), format!("{:e}", cfg.logvar_lo)),
        ("logvar_hi".into(), format!("{:e}", cfg.logvar_hi)),
        ("positional_encoding".into(), cfg.positional_encoding.to_string()),
        ("input_norm".into(), cfg.input_norm.to_string()),
    ]
}

fn parse_config(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let raw = map
            .get(&format!("config.{key}"))
            .ok_or_else(|| CgtError::Checkpoint(format!("manifest lacks config.{key}")))?;
        raw.parse()
            .map_err(|_| CgtError::Checkpoint(format!("bad value {raw:?} for config.{key}")))
    }
    let cfg = ModelConfig {
        window: get(map, "window")?,
        max_lag: get(map, "max_lag")?,
        channels: get(map, "channels")?,
        d_model: get(map, "d_model")?,
        n_heads: get(map, "n_heads")?,
        n_layers: get(map, "n_layers")?,
        d_ff: get(map, "d_ff")?,
        d_latent: get(map, "d_latent")?,
        mc_samples: get(map, "mc_samples")?,
        logvar_lo: get(map, "logvar_lo")?,
        logvar_hi: get(map, "logvar_hi")?,
        positional_encoding: get(map, "positional_encoding")?,
        input_norm: get(map, "input_norm")?,
    };
    cfg.validate()
        .map_err(|e| CgtError::Checkpoint(format!("invalid stored configuration: {e}")))?;
    Ok(cfg)
}

/// Writes `dir/manifest.txt` and `dir/block_<i>.bin`.
pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint, dtype: Dtype) -> Result<()> {
    let dir = dir.as_ref();
    if ckpt.blocks.len() != ckpt.masks.len() {
        return Err(CgtError::Checkpoint(format!(
            "{} blocks but {} masks",
            ckpt.blocks.len(),
            ckpt.masks.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "version={CHECKPOINT_VERSION}");
    let _ = writeln!(manifest, "dtype={}", dtype.name());
    let _ = writeln!(manifest, "blocks={}", ckpt.blocks.len());
    for (k, v) in config_lines(&ckpt.config) {
        let _ = writeln!(manifest, "config.{k}={v}");
    }
    for m in &ckpt.masks {
        let bits: String = m.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let _ = writeln!(manifest, "mask.{}={bits}", m.target);
    }
    for (i, block) in ckpt.blocks.iter().enumerate() {
        let mut bytes = Vec::new();
        block.visit("", &mut |name, shape, values| {
            let offset = bytes.len();
            let chunk = encode(values, dtype);
            let digest = hex(&Sha256::digest(&chunk));
            bytes.extend_from_slice(&chunk);
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(
                manifest,
                "param {i} {name} {} {offset} {} {digest}",
                dims.join("x"),
                chunk.len()
            );
        });
        fs::write(dir.join(format!("block_{i}.bin")), bytes)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    digest: String,
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| {
        CgtError::Checkpoint(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display()))
    })?;
    let mut map = BTreeMap::new();
    let mut entries: BTreeMap<usize, Vec<ParamEntry>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let bad = || CgtError::Checkpoint(format!("malformed manifest line {}", lineno + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let block: usize = f[0].parse().map_err(|_| bad())?;
            let shape = f[2]
                .split('x')
                .map(|d| d.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            entries.entry(block).or_default().push(ParamEntry {
                name: f[1].to_string(),
                shape,
                offset: f[3].parse().map_err(|_| bad())?,
                len: f[4].parse().map_err(|_| bad())?,
                digest: f[5].to_string(),
            });
        } else if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        } else {
            return Err(CgtError::Checkpoint(format!(
                "malformed manifest line {}",
                lineno + 1
            )));
        }
    }
    let version: u32 = map
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CgtError::Checkpoint("manifest lacks a version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CgtError::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let dtype: Dtype = map
        .get("dtype")
        .ok_or_else(|| CgtError::Checkpoint("manifest lacks a dtype".into()))?
        .parse()?;
    let n_blocks: usize = map
        .get("blocks")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CgtError::Checkpoint("manifest lacks a block count".into()))?;
    let config = parse_config(&map)?;

    let mut masks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let bits = map
            .get(&format!("mask.{i}"))
            .ok_or_else(|| CgtError::Checkpoint(format!("manifest lacks mask.{i}")))?;
        if bits.len() != config.features() || bits.chars().any(|c| c != '0' && c != '1') {
            return Err(CgtError::Checkpoint(format!("mask.{i} is malformed")));
        }
        masks.push(ParentMask {
            target: i,
            bits: bits.chars().map(|c| c == '1').collect(),
        });
    }

    let mut blocks = Vec::with_capacity(n_blocks);
    for (i, mask) in masks.iter().enumerate() {
        let path = dir.join(format!("block_{i}.bin"));
        let bytes = fs::read(&path).map_err(|e| {
            CgtError::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        let stored = entries.remove(&i).unwrap_or_default();
        let mut block = BlockParams::new(&config, mask, &mut ChaCha8Rng::seed_from_u64(0));
        let expected = block.names();
        if expected.len() != stored.len() {
            return Err(CgtError::Checkpoint(format!(
                "block {i} stores {} tensors, configuration expects {}",
                stored.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&stored) {
            if *name != entry.name || *shape != entry.shape {
                return Err(CgtError::Checkpoint(format!(
                    "block {i}: expected {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let n: usize = shape.iter().product();
            if entry.len != n * dtype.width() || entry.offset + entry.len > bytes.len() {
                return Err(CgtError::Checkpoint(format!(
                    "block {i}: parameter {name} has an invalid byte range"
                )));
            }
            let chunk = &bytes[entry.offset..entry.offset + entry.len];
            if hex(&Sha256::digest(chunk)) != entry.digest {
                return Err(CgtError::Checkpoint(format!(
                    "block {i}: checksum mismatch in parameter {name}"
                )));
            }
        }
        let mut k = 0;
        block.visit_mut("", &mut |_, values| {
            let e = &stored[k];
            decode(&bytes[e.offset..e.offset + e.len], dtype, values);
            k += 1;
        });
        blocks.push(block);
    }
    Ok(Checkpoint {
        config,
        masks,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Linear;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            window: 3,
            max_lag: 2,
            channels: 2,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 6,
            d_latent: 2,
            mc_samples: 2,
            ..ModelConfig::default()
        };
        let masks = vec![
            ParentMask { target: 0, bits: vec![true, false, false, true] },
            ParentMask { target: 1, bits: vec![false, false, true, true] },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blocks = masks
            .iter()
            .map(|m| {
                let mut b = BlockParams::new(&config, m, &mut rng);
                b.head.out = Linear::xavier(4, 2, &mut rng);
                b
            })
            .collect();
        Checkpoint { config, masks, blocks }
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        save_checkpoint(dir.path(), &ck, Dtype::F64).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), ck);
    }

    #[test]
    fn f32_roundtrip_matches_rounded_values() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        save_checkpoint(dir.path(), &ck, Dtype::F32).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        let a = ck.blocks[0].flatten();
        let b = back.blocks[0].flatten();
        assert!(a.iter().zip(&b).all(|(x, y)| (*x as f32) as f64 == *y));
    }

    #[test]
    fn corruption_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample(), Dtype::F64).unwrap();
        let path = dir.path().join("block_1.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("gate_logits"), "{err}");
    }

    #[test]
    fn version_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample(), Dtype::F64).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("version=1", "version=2");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
