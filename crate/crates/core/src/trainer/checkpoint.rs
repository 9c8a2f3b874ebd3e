//! Binary checkpoint format.
//!
//! ```text
//! magic      "TRICE\x01"
//! config     u32 byte length, UTF-8 `key=value` lines (model config, stage, step)
//! count      u32 tensor count
//! tensor     u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 data
//! rng        u32 byte length, 32-byte seed, u64 stream, u128 word position
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{parse_kv, parse_value};
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"TRICE\x01";
const RNG_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Ssg,
    Msg,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Ssg => "ssg",
            Stage::Msg => "msg",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Pretrained, Stage::Ssg, Stage::Msg]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown stage `{s}`")))
    }
}

/// Trained parameters with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    pub stage: Stage,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Fresh parameters for `config`, initialized and seeded from `seed`.
    pub fn fresh(config: &ModelConfig, stage: Stage, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(config, &mut rng)?;
        Ok(Checkpoint { config: config.clone(), params, stage, step: 0, rng })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut text = String::new();
        for (k, v) in self.config.to_pairs() {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&format!("stage={}\nstep={}\n", self.stage, self.step));
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        put_u32(&mut out, RNG_BYTES);
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) { Error::Truncated } else { Error::BadMagic });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let n = r.u32()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Malformed("config is not UTF-8".into()))?;
        let mut pairs = parse_kv(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let stage: Stage = pairs.remove("stage").ok_or_else(|| Error::Malformed("missing stage".into()))?.parse()?;
        let step: u64 =
            parse_value("step", &pairs.remove("step").ok_or_else(|| Error::Malformed("missing step".into()))?)?;
        let config = ModelConfig::from_pairs(&pairs)?;

        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or(Error::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        let n = r.u32()?;
        if n != RNG_BYTES {
            return Err(Error::Malformed(format!("rng blob of {n} bytes, expected {RNG_BYTES}")));
        }
        let blob = r.take(n)?;
        let mut rng = ChaCha8Rng::from_seed(blob[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(blob[40..56].try_into().unwrap()));
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = Parameters::from_map(&config, tensors)?;
        Ok(Checkpoint { config, params, stage, step, rng })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&n.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
