//! Test support: a central finite-difference oracle that only ever evaluates
//! forward values, independent of the tape's backward pass.
#![allow(dead_code)]

pub mod reference;

use msgen::{Tape, Tensor, Var};

/// Central difference of `f` with respect to element `idx` of input `which`.
pub fn central_difference(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    idx: usize,
    eps: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[idx] += eps;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[idx] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Relative error with an absolute floor so that parameters whose true
/// gradient is zero are judged by absolute deviation.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds a scalar on a fresh tape from `inputs` (all registered as params),
/// then compares every input element's analytic gradient against central
/// differences. Returns the largest relative error seen.
pub fn max_gradient_error(build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>], eps: f64) -> f64 {
    let forward = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (w, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[w].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for i in 0..inputs[w].len() {
            let numeric = central_difference(&forward, inputs, w, i, eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric, 1e-6));
        }
    }
    worst
}

/// Deterministic pseudo-random fill in `[-scale, scale]`.
pub fn filled(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Micro-config parameters with entries spread well beyond the default
/// init, so every sublayer is in a visibly nonlinear regime.
pub fn spread_params(cfg: &msgen::model::ModelConfig, seed: u64) -> msgen::model::Parameters<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = msgen::model::Parameters::<f64>::init(cfg, &mut rng).unwrap();
    for (i, (name, t)) in p.iter_mut().enumerate() {
        let noise = filled(t.shape(), seed.wrapping_mul(1000).wrapping_add(i as u64), 0.5);
        let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x = base + n;
        }
    }
    p
}

/// Denominator floor for the full-model check. Central differences of a loss
/// near 2 carry roundoff of about 2.2e-16 * 2 / 1e-4 ≈ 4e-12 in absolute
/// terms, so entries whose true gradient is exactly zero (key biases, for
/// instance) need a floor of at least 4e-6 to be judged at 1e-6.
pub const FULL_MODEL_FLOOR: f64 = 1e-5;

/// Full-model gradient check on the micro-config: returns the worst
/// relative error and the number of sampled parameters.
pub fn full_model_gradient_check(samples: usize, seed: u64) -> (f64, usize) {
    use msgen::model::{ModelConfig, Net, PaddedSeqs, Parameters, SourceBatch};
    use rand::{Rng, SeedableRng};

    let cfg = ModelConfig::micro();
    let params = spread_params(&cfg, seed);
    // two items, uneven lengths so both source and target padding occur
    let sources = SourceBatch::from_examples(&[
        vec![vec![5u32, 7, 8, 9], vec![6u32, 10, 11]],
        vec![vec![5u32, 12], vec![6u32, 9, 7, 8, 10]],
    ])
    .unwrap();
    let targets = PaddedSeqs::new(&[vec![1u32, 7, 11, 2], vec![1u32, 12, 2]]).unwrap();
    let loss_of = |p: &Parameters<f64>| -> f64 {
        let mut net = Net::new(&cfg, p).unwrap();
        let out = net.forward(&sources, &targets).unwrap();
        net.tape.value(out.loss).data()[0]
    };

    let mut net = Net::new(&cfg, &params).unwrap();
    let out = net.forward(&sources, &targets).unwrap();
    let grads = net.tape.backward(out.loss).unwrap();
    let named = net.named_gradients(&grads);

    let names: Vec<String> = params.names().cloned().collect();
    let total = params.scalar_count();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        // uniform over all scalars
        let mut flat = rng.gen_range(0..total);
        let mut pick = None;
        for n in &names {
            let len = params.get(n).unwrap().len();
            if flat < len {
                pick = Some((n.clone(), flat));
                break;
            }
            flat -= len;
        }
        let (name, idx) = pick.unwrap();
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().data_mut()[idx] += eps;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().data_mut()[idx] -= eps;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        let analytic = named.get(&name).map_or(0.0, |g| g.data()[idx]);
        let e = relative_error(analytic, numeric, FULL_MODEL_FLOOR);
        if std::env::var("GRADCHECK_TRACE").is_ok() && e > 1e-7 {
            eprintln!("{name}[{idx}] analytic {analytic:e} numeric {numeric:e} rel {e:e}");
        }
        worst = worst.max(e);
    }
    (worst, samples)
}
