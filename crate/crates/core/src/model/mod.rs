//! The multi-source network: embeddings, coarse encoder, fine encoder and a
//! decoder with per-source cross-attention combined by mean pooling.

mod batch;
mod config;
mod net;
mod params;

pub use batch::{PaddedSeqs, SourceBatch, SourceLayout};
pub use config::ModelConfig;
pub use net::{split_sources, Encoded, FineLayerOutput, ForwardOutput, Net};
pub use params::{is_fine_encoder_param, Parameters};

use crate::scalar::Scalar;

/// Constant sinusoidal offset for source `k` (1-based for real sources).
/// Even dimensions use `sin(1000 k / 10000^(2i/d))`, odd dimensions the
/// matching cosine.
pub fn segment_embedding<T: Scalar>(k: usize, d: usize) -> Vec<T> {
    (0..d)
        .map(|j| {
            let two_i = (j - j % 2) as f64;
            let angle = 1000.0 * k as f64 / 10000f64.powf(two_i / d as f64);
            T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_zero_is_sin_cos_of_zero() {
        let e: Vec<f64> = segment_embedding(0, 8);
        for (j, &x) in e.iter().enumerate() {
            assert_eq!(x, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn segment_one_first_dim() {
        let e: Vec<f64> = segment_embedding(1, 8);
        // sin(1000 rad), evaluated independently with 30-digit arithmetic
        assert!((e[0] - 0.826_879_540_532_002_8).abs() < 1e-12);
    }

    #[test]
    fn segments_pairwise_distinct() {
        let rows: Vec<Vec<f64>> = (1..=4).map(|k| segment_embedding(k, 8)).collect();
        for a in 0..4 {
            for b in a + 1..4 {
                let diff: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 1e-3, "segments {} and {} coincide", a + 1, b + 1);
            }
        }
    }
}
