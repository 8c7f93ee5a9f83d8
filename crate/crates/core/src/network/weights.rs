//! Named parameter arrays and their on-disk container.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"WBND" | u32 version (1) | u64 seed | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 rank | rank x u32 dims
//!            | product(dims) x f32 values
//! ```
//!
//! Entries are written in name order, so saving the same bundle twice gives
//! identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetworkConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WBND";
const VERSION: u32 = 1;
const MAX_ENTRIES: u32 = 1 << 16;
const MAX_VALUES: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub seed: u64,
    pub arrays: BTreeMap<String, ParamArray>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`, fan-in is the product of all but the last dim.
    FanIn,
    Uniform(f32),
    Zero,
    One,
}

/// Every parameter the network reads, with its shape and initializer.
fn layout(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.feat_channels;
    let mid = d / 4;
    let hidden = d * cfg.mlp_ratio;
    let s = cfg.feat_stride;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| v.push((name, shape, init));

    add("feat.conv1".into(), vec![7, 7, 3, 32], Init::FanIn);
    add("feat.conv2".into(), vec![3, 3, 32, 64], Init::FanIn);
    add("feat.conv3".into(), vec![3, 3, 64, d], Init::FanIn);
    for r in 0..2 {
        add(format!("feat.res{r}.reduce"), vec![d, mid], Init::FanIn);
        add(format!("feat.res{r}.conv"), vec![3, 3, mid, mid], Init::FanIn);
        add(format!("feat.res{r}.expand"), vec![mid, d], Init::FanIn);
    }

    let block = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, cross: bool| {
        let mut norm = |n: String| {
            add(format!("{n}.gamma"), vec![d], Init::One);
            add(format!("{n}.beta"), vec![d], Init::Zero);
        };
        norm(format!("{p}.norm1"));
        norm(format!("{p}.norm2"));
        if cross {
            norm(format!("{p}.norm3"));
        }
        let attn: &[&str] = if cross { &["self", "cross"] } else { &["attn"] };
        for a in attn {
            for m in ["q", "k", "v", "o"] {
                add(format!("{p}.{a}.{m}"), vec![d, d], Init::FanIn);
            }
        }
        add(format!("{p}.mlp.fc1"), vec![d, hidden], Init::FanIn);
        add(format!("{p}.mlp.fc1_bias"), vec![hidden], Init::Zero);
        add(format!("{p}.mlp.fc2"), vec![hidden, d], Init::FanIn);
        add(format!("{p}.mlp.fc2_bias"), vec![d], Init::Zero);
    };

    for l in 0..cfg.encoder_layers {
        block(&mut add, &format!("enc{l}"), false);
    }
    for p in 0..cfg.encoder_layers - 1 {
        let k = cfg.patch_kernel;
        add(format!("enc.patch{p}.conv"), vec![k, k, d, d], Init::FanIn);
        add(format!("enc.patch{p}.norm.gamma"), vec![d], Init::One);
        add(format!("enc.patch{p}.norm.beta"), vec![d], Init::Zero);
    }

    for i in 0..cfg.encoder_layers {
        add(format!("seg.unify{i}"), vec![d, super::SEG_CHANNELS], Init::FanIn);
        add(format!("seg.unify{i}_bias"), vec![super::SEG_CHANNELS], Init::Zero);
    }
    add("seg.fuse".into(), vec![super::SEG_CHANNELS, super::SEG_CHANNELS], Init::FanIn);
    add("seg.fuse_bias".into(), vec![super::SEG_CHANNELS], Init::Zero);
    add("seg.out".into(), vec![super::SEG_CHANNELS, 2], Init::FanIn);
    add("seg.out_bias".into(), vec![2], Init::Zero);

    let g = cfg.grid_sizes()[cfg.encoder_layers - 1];
    add("dec.query".into(), vec![g * g, d], Init::Uniform(0.02));
    for l in 0..cfg.decoder_layers {
        block(&mut add, &format!("dec{l}"), true);
    }
    add("dec.head.norm.gamma".into(), vec![d], Init::One);
    add("dec.head.norm.beta".into(), vec![d], Init::Zero);
    add("dec.head.flow".into(), vec![d, 2], Init::FanIn);
    add("dec.head.flow_bias".into(), vec![2], Init::Zero);
    add("dec.head.upmask".into(), vec![d, 9 * s * s], Init::FanIn);
    add("dec.head.upmask_bias".into(), vec![9 * s * s], Init::Zero);
    v
}

impl WeightBundle {
    /// Seeded random initialization; every value lies in `[-1, 1]`.
    pub fn random(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zero => vec![0.0; n],
                    Init::One => vec![1.0; n],
                    Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
                    Init::FanIn => {
                        let fan_in: usize = shape[..shape.len() - 1].iter().product();
                        let a = (1.0 / (fan_in as f64).sqrt()) as f32;
                        (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                    }
                };
                (name, ParamArray { shape, data })
            })
            .collect();
        Ok(Self { seed, arrays })
    }

    /// Every parameter set to zero, including norm scales.
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let arrays = layout(cfg)
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                (name, ParamArray { shape, data: vec![0.0; n] })
            })
            .collect();
        Ok(Self { seed: 0, arrays })
    }

    /// Checks that every expected array is present with the expected shape
    /// and finite values. Extra arrays are rejected.
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        cfg.validate()?;
        let expected = layout(cfg);
        for (name, shape, _) in &expected {
            let a = self.arrays.get(name).ok_or_else(|| Error::data(format!("weight bundle lacks `{name}`")))?;
            if &a.shape != shape {
                return Err(Error::data(format!("`{name}` has shape {:?}, expected {shape:?}", a.shape)));
            }
            if a.data.len() != shape.iter().product::<usize>() {
                return Err(Error::data(format!("`{name}` length does not match its shape")));
            }
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("`{name}` contains non-finite values")));
            }
        }
        if self.arrays.len() != expected.len() {
            let extra = self.arrays.keys().find(|k| !expected.iter().any(|(n, _, _)| n == *k));
            return Err(Error::data(format!("unexpected weight array `{}`", extra.map_or("?", |s| s.as_str()))));
        }
        Ok(())
    }

    /// Values of one array widened to `f64`.
    pub fn get(&self, name: &str) -> Result<Vec<f64>> {
        self.arrays
            .get(name)
            .map(|a| a.data.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| Error::data(format!("weight bundle lacks `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays.values().map(|a| a.data.len()).sum()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, a) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &d in &a.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(a.data.len() * 4);
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a weight bundle"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported weight bundle version {version}")));
        }
        let mut seed = [0u8; 8];
        read_exact(r, &mut seed)?;
        let seed = u64::from_le_bytes(seed);
        let count = read_u32(r)?;
        if count > MAX_ENTRIES {
            return Err(Error::data(format!("implausible entry count {count}")));
        }
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 1024 {
                return Err(Error::data("implausible array name length"));
            }
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::data("array name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::data(format!("`{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= MAX_VALUES)
                .ok_or_else(|| Error::data(format!("`{name}` is implausibly large")))?;
            let mut body = vec![0u8; n * 4];
            read_exact(r, &mut body)?;
            let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if arrays.insert(name.clone(), ParamArray { shape, data }).is_some() {
                return Err(Error::data(format!("duplicate array `{name}`")));
            }
        }
        Ok(Self { seed, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::data("truncated weight bundle"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig::default();
        let w = WeightBundle::random(&cfg, 7).unwrap();
        w.validate(&cfg).unwrap();
        let mut buf = Vec::new();
        w.write(&mut buf).unwrap();
        let back = WeightBundle::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn random_values_bounded_and_seeded() {
        let cfg = NetworkConfig::default();
        let a = WeightBundle::random(&cfg, 1).unwrap();
        let b = WeightBundle::random(&cfg, 1).unwrap();
        let c = WeightBundle::random(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.arrays.values().all(|p| p.data.iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn rejects_corruption() {
        let cfg = NetworkConfig::default();
        let w = WeightBundle::random(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        w.write(&mut buf).unwrap();
        assert!(WeightBundle::read(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(WeightBundle::read(&mut bad.as_slice()).is_err());

        let mut missing = w.clone();
        missing.arrays.remove("seg.out");
        assert!(missing.validate(&cfg).is_err());
        let mut reshaped = w.clone();
        reshaped.arrays.get_mut("seg.out").unwrap().shape = vec![2, 32];
        assert!(reshaped.validate(&cfg).is_err());
    }
}
