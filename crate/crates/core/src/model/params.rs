use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fine-encoder weights.
const FINE_STD: f64 = 0.02;

/// Weight matrices `[fan_in, fan_out]` outside the fine encoder.
fn fan_in(rows: usize) -> Init {
    Init::Normal((rows as f64).powf(-0.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Truncated normal with this standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

/// Name prefix of the fine-encoder tensors (the randomly initialized part
/// added when extending a single-source model).
pub const FINE_PREFIX: &str = "fine.";

pub fn is_fine_encoder_param(name: &str) -> bool {
    name.starts_with(FINE_PREFIX)
}

fn weight(prefix: &str, rows: usize) -> Init {
    if is_fine_encoder_param(prefix) {
        Init::Normal(FINE_STD)
    } else {
        fan_in(rows)
    }
}

fn attention_specs(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}.w"), vec![d, d], weight(prefix, d)));
        out.push((format!("{prefix}.{p}.b"), vec![d], Init::Zeros));
    }
}

fn norm_specs(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn ffn_specs(prefix: &str, d: usize, d_ff: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.in.w"), vec![d, d_ff], weight(prefix, d)));
    out.push((format!("{prefix}.in.b"), vec![d_ff], Init::Zeros));
    out.push((format!("{prefix}.out.w"), vec![d_ff, d], weight(prefix, d_ff)));
    out.push((format!("{prefix}.out.b"), vec![d], Init::Zeros));
}

/// Every tensor the configuration needs, in a fixed order.
fn specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = vec![
        // token rows are scaled by sqrt(d) on input, giving both tables
        // per-coordinate std 0.5 there
        ("embed.tok".to_string(), vec![cfg.vocab_size, d], Init::Normal(0.5 / (d as f64).sqrt())),
        ("embed.pos".to_string(), vec![cfg.max_len, d], Init::Normal(0.5)),
    ];
    for i in 0..cfg.coarse_layers {
        attention_specs(&format!("coarse.{i}.self_attn"), d, &mut out);
        norm_specs(&format!("coarse.{i}.self_norm"), d, &mut out);
        ffn_specs(&format!("coarse.{i}.ffn"), d, cfg.d_ff, &mut out);
        norm_specs(&format!("coarse.{i}.ffn_norm"), d, &mut out);
    }
    for i in 0..cfg.effective_fine_layers() {
        attention_specs(&format!("fine.{i}.self_attn"), d, &mut out);
        norm_specs(&format!("fine.{i}.self_norm"), d, &mut out);
        if cfg.fine_encoder_cross_attention && cfg.sources > 1 {
            attention_specs(&format!("fine.{i}.cross_attn"), d, &mut out);
            norm_specs(&format!("fine.{i}.cross_norm"), d, &mut out);
        }
        ffn_specs(&format!("fine.{i}.ffn"), d, cfg.d_ff, &mut out);
        norm_specs(&format!("fine.{i}.ffn_norm"), d, &mut out);
    }
    for i in 0..cfg.decoder_layers {
        attention_specs(&format!("decoder.{i}.self_attn"), d, &mut out);
        norm_specs(&format!("decoder.{i}.self_norm"), d, &mut out);
        attention_specs(&format!("decoder.{i}.cross_attn"), d, &mut out);
        norm_specs(&format!("decoder.{i}.cross_norm"), d, &mut out);
        ffn_specs(&format!("decoder.{i}.ffn"), d, cfg.d_ff, &mut out);
        norm_specs(&format!("decoder.{i}.ffn_norm"), d, &mut out);
    }
    out
}

/// Draws from N(0, std²) truncated to two standard deviations.
fn truncated_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

/// Named model tensors. The output projection is tied to `embed.tok`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Expected `(name, shape)` pairs for `cfg`, in construction order.
    pub fn expected(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.check_shapes()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in specs(cfg) {
            let n = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal(std) => truncated_normal(rng, n, std).into_iter().map(T::lit).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Parameters { tensors })
    }

    /// Fresh values for the tensors selected by `pick`, keeping the rest.
    pub fn reinit_where(&mut self, cfg: &ModelConfig, rng: &mut impl Rng, pick: impl Fn(&str) -> bool) -> Result<()> {
        for (name, shape, init) in specs(cfg) {
            if !pick(&name) {
                continue;
            }
            let n = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal(std) => truncated_normal(rng, n, std).into_iter().map(T::lit).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            self.tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(())
    }

    /// Wraps an existing map after checking it has exactly the names and
    /// shapes `cfg` requires.
    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let expected = Self::expected(cfg);
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::NameSetMismatch { missing: name.clone() }),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Architecture(vec![name.clone()]));
                }
                Some(_) => {}
            }
        }
        if tensors.len() != expected.len() {
            let extra = tensors.keys().filter(|k| !expected.iter().any(|(n, _)| n == *k)).cloned().collect();
            return Err(Error::Architecture(extra));
        }
        Ok(Parameters { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn name_set_is_function_of_config() {
        let cfg = ModelConfig::micro();
        let a = Parameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Parameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(a.names().eq(b.names()));
        assert_ne!(a, b);
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let cfg = ModelConfig::micro();
        let p = Parameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fine = p.names().filter(|n| is_fine_encoder_param(n)).count();
        let rest = p.names().filter(|n| !is_fine_encoder_param(n)).count();
        assert!(fine > 0 && rest > 0);
        assert_eq!(fine + rest, p.len());
        // the single-source variant has exactly the non-fine names
        let ss = Parameters::<f32>::expected(&cfg.single_source());
        assert_eq!(ss.len(), rest);
        assert!(ss.iter().all(|(n, _)| p.get(n).is_some() && !is_fine_encoder_param(n)));
    }

    #[test]
    fn init_is_truncated() {
        let cfg = ModelConfig::micro();
        let p = Parameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bound = |name: &str| p.get(name).unwrap().data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        // micro width 8: token std 0.5 / sqrt(8), fan-in std 1 / sqrt(8) and 1 / sqrt(16)
        assert!(bound("embed.tok") <= 2.0 * 0.5 / 8f64.sqrt());
        assert!(bound("embed.pos") <= 1.0);
        assert!(bound("coarse.0.self_attn.q.w") <= 2.0 / 8f64.sqrt());
        assert!(bound("decoder.1.ffn.out.w") <= 2.0 / 16f64.sqrt());
        assert!(bound("fine.0.cross_attn.k.w") <= 0.04);
        assert!(bound("fine.0.ffn.out.w") <= 0.04);
        assert!(p.get("coarse.0.self_norm.gain").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(p.get("coarse.0.ffn.in.b").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn from_map_reports_missing_name() {
        let cfg = ModelConfig::micro();
        let p = Parameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut map = p.into_map();
        map.remove("embed.pos");
        match Parameters::from_map(&cfg, map) {
            Err(Error::NameSetMismatch { missing }) => assert_eq!(missing, "embed.pos"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
