use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moments per parameter name, created on the first
/// gradient a parameter receives.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
    /// Reject non-finite gradients before touching any parameter.
    pub checked: bool,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new(), checked: false }
    }
}

/// One bias-corrected Adam step. Parameters without a gradient entry are
/// left untouched.
pub fn adam_update<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::NameSetMismatch { missing: name.clone() })?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_update",
                format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if state.checked && !g.all_finite() {
            return Err(Error::Contract(format!("non-finite gradient for `{name}` at step {}", state.step + 1)));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step_size = T::lit(lr / (1.0 - beta1.powi(t)));
    let v_corr = T::lit(1.0 / (1.0 - beta2.powi(t)));
    let eps = T::lit(eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p -= step_size * *m / ((*v * v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`
pub fn lr_inverse_sqrt(step: u64, warmup: u64, d: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn one_tensor(value: f64) -> (Parameters<f64>, BTreeMap<String, Tensor<f64>>) {
        let cfg = ModelConfig::micro();
        let params = Parameters::<f64>::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let name = "embed.tok".to_string();
        let g = Tensor::full(params.get(&name).unwrap().shape(), value);
        (params, BTreeMap::from([(name, g)]))
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut p, g) = one_tensor(0.0);
        let before = p.clone();
        adam_update(&mut p, &g, &mut AdamState::new(AdamConfig::default()), 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, g) = one_tensor(1.0);
        let before = p.get("embed.tok").unwrap().clone();
        adam_update(&mut p, &g, &mut AdamState::new(AdamConfig::default()), 1.0).unwrap();
        for (a, b) in before.data().iter().zip(p.get("embed.tok").unwrap().data()) {
            // m_hat = 1, v_hat = 1, update = 1 / (1 + 1e-9)
            assert!((a - b - 1.0 / (1.0 + 1e-9)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tensors_stay_identical() {
        let (mut p, _) = one_tensor(0.0);
        let w = p.get("decoder.0.ffn.in.w").unwrap().clone();
        *p.get_mut("decoder.1.ffn.in.w").unwrap() = w.clone();
        let g = Tensor::new(w.shape().to_vec(), (0..w.len()).map(|i| (i as f64).sin()).collect()).unwrap();
        let grads =
            BTreeMap::from([("decoder.0.ffn.in.w".to_string(), g.clone()), ("decoder.1.ffn.in.w".to_string(), g)]);
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam_update(&mut p, &grads, &mut state, 0.1).unwrap();
        }
        assert_eq!(p.get("decoder.0.ffn.in.w"), p.get("decoder.1.ffn.in.w"));
        assert_eq!(state.first["decoder.0.ffn.in.w"].shape(), w.shape());
    }

    #[test]
    fn checked_mode_rejects_nan() {
        let (mut p, mut g) = one_tensor(1.0);
        g.get_mut("embed.tok").unwrap().data_mut()[3] = f64::NAN;
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default());
        state.checked = true;
        let e = adam_update(&mut p, &g, &mut state, 1.0).unwrap_err().to_string();
        assert!(e.contains("embed.tok"), "{e}");
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let (w, d) = (500, 64);
        assert!((lr_inverse_sqrt(w, w, d) - (w as f64).powf(-0.5) / 8.0).abs() < 1e-15);
        let half = lr_inverse_sqrt(w / 2, w, d);
        assert!((half - (250.0 * 500f64.powf(-1.5)) / 8.0).abs() < 1e-15);
        assert!((lr_inverse_sqrt(4 * w, w, d) - lr_inverse_sqrt(w, w, d) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::<f64>::full(&[4], 1.0))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 2.0);
        assert!(g["a"].data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert_eq!(clip_global_norm(&mut g, 5.0), 1.0);
        assert!(g["a"].data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }
}
