use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Family, NetParams, NetSpec};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64, fold: bool) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        if fold {
            (v * std).abs()
        } else {
            v * std
        }
    })
}

/// Fan-in scaled Gaussian weights, zero biases.
///
/// For SupportNet the hidden-to-hidden and output weights are drawn from
/// `|N(0, s²)|` with `s` half the fan-in scale, which keeps them
/// non-negative while offsetting the folded distribution's positive mean.
pub fn init_params(spec: &NetSpec, seed: u64) -> NetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetParams::zeros(spec);
    let fold = spec.family == Family::SupportNet;
    let (h, d) = (spec.width, spec.input_dim);
    let scale = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    for layer in &mut p.layers {
        if let Some(w) = &mut layer.hidden {
            let s = if fold { 0.5 * scale(h) } else { scale(h) };
            *w = gaussian(&mut rng, h, h, s, fold);
        }
        if let Some(w) = &mut layer.input {
            *w = gaussian(&mut rng, h, d, scale(d), false);
        }
    }
    let s = if fold { 0.5 * scale(h) } else { scale(h) };
    p.out_weight = gaussian(&mut rng, spec.out_dim(), h, s, fold);
    p
}
