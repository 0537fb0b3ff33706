//! Network families, parameters and evaluation.
//!
//! Both families share one constant-width layout with `L` hidden layers:
//!
//! ```text
//! z1     = σ(W0x·x + b0)
//! z(i+1) = [z(i) +] σ(Wz_i·z(i) + [Wx_i·x] + b_i)      i = 1 .. L-1
//! out    = W_L·z(L) + b_L
//! ```
//!
//! `Wx_i` exists only on the `n_x` re-injection layers and the residual term
//! only when enabled. SupportNet has `c` outputs (one support estimate per
//! cluster) and recovers keys as input gradients; KeyNet has `c·d` outputs,
//! read as `c` predicted keys.

pub mod activation;
mod eval;
mod init;
mod io;
pub mod sizing;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub use eval::{
    forward, forward_batch, input_gradient, input_gradient_batch, predict_keys,
    predict_keys_batch, score_batch,
};
pub use init::init_params;
pub use io::{load_model, save_model, PARAMS_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    SupportNet,
    KeyNet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::SupportNet => "supportnet",
            Family::KeyNet => "keynet",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "supportnet" | "support" => Ok(Family::SupportNet),
            "keynet" | "key" => Ok(Family::KeyNet),
            other => Err(Error::invalid(format!("unknown model family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub family: Family,
    /// Number of hidden layers `L`.
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub clusters: usize,
    /// Hidden layers after the first that receive the input again (`n_x`).
    pub reinject: usize,
    pub residual: bool,
    /// Wrap as `‖x‖·g(x/‖x‖)`; SupportNet only.
    pub homogenize: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl NetSpec {
    /// Spec with the default activation and no optional blocks.
    pub fn new(family: Family, depth: usize, width: usize, input_dim: usize, clusters: usize) -> Self {
        Self {
            family,
            depth,
            width,
            input_dim,
            clusters,
            reinject: 0,
            residual: false,
            homogenize: false,
            alpha: activation::DEFAULT_ALPHA,
            beta: activation::DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.width == 0 {
            return bad("width must be at least 1");
        }
        if self.input_dim == 0 || self.clusters == 0 {
            return bad("input dimension and cluster count must be positive");
        }
        if self.reinject > self.depth - 1 {
            return Err(Error::invalid(format!(
                "n_x = {} exceeds depth - 1 = {}",
                self.reinject,
                self.depth - 1
            )));
        }
        if self.homogenize && self.family != Family::SupportNet {
            return bad("the homogenization wrapper applies to SupportNet only");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        match self.family {
            Family::SupportNet => self.clusters,
            Family::KeyNet => self.clusters * self.input_dim,
        }
    }

    /// Which layers read `x`. Layer 0 always does; the `n_x` hidden
    /// re-injections sit at layers `⌈k·(L-1)/n_x⌉`, `k = 1..n_x`.
    pub fn injection_layers(&self) -> Vec<bool> {
        let mut inj = vec![false; self.depth];
        inj[0] = true;
        let span = self.depth - 1;
        for k in 1..=self.reinject {
            inj[(k * span).div_ceil(self.reinject)] = true;
        }
        inj
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (h, d, l, o) = (self.width, self.input_dim, self.depth, self.out_dim());
        (1 + self.reinject) * d * h + (l - 1) * h * h + h * o + l * h + o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `h×h`; absent on layer 0.
    pub hidden: Option<Array2<f64>>,
    /// `h×d`; present on layer 0 and re-injection layers.
    pub input: Option<Array2<f64>>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
    /// `d_out×h`.
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

impl NetParams {
    pub fn zeros(spec: &NetSpec) -> Self {
        let (h, d) = (spec.width, spec.input_dim);
        let layers = spec
            .injection_layers()
            .into_iter()
            .enumerate()
            .map(|(i, inj)| LayerParams {
                hidden: (i > 0).then(|| Array2::zeros((h, h))),
                input: inj.then(|| Array2::zeros((h, d))),
                bias: Array1::zeros(h),
            })
            .collect();
        Self {
            layers,
            out_weight: Array2::zeros((spec.out_dim(), h)),
            out_bias: Array1::zeros(spec.out_dim()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        z
    }

    /// Tensors in file order: per layer (hidden, input, bias), then output
    /// weight and bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            if let Some(w) = &l.hidden {
                out.push(w.as_slice().expect("standard layout"));
            }
            if let Some(w) = &l.input {
                out.push(w.as_slice().expect("standard layout"));
            }
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(self.out_weight.as_slice().expect("standard layout"));
        out.push(self.out_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            if let Some(w) = &mut l.hidden {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            if let Some(w) = &mut l.input {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.out_weight.as_slice_mut().expect("standard layout"));
        out.push(self.out_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Matrices whose sign decides input convexity: every hidden-to-hidden
    /// weight plus the output weight, which also multiplies hidden states.
    pub fn convexity_weights(&self) -> Vec<&Array2<f64>> {
        self.layers
            .iter()
            .filter_map(|l| l.hidden.as_ref())
            .chain(std::iter::once(&self.out_weight))
            .collect()
    }

    /// Copy with the convexity-relevant weights clamped at zero.
    pub fn clamped_nonneg(&self) -> Self {
        let mut p = self.clone();
        for l in &mut p.layers {
            if let Some(w) = &mut l.hidden {
                w.mapv_inplace(|v| v.max(0.0));
            }
        }
        p.out_weight.mapv_inplace(|v| v.max(0.0));
        p
    }

    pub fn check_shapes(&self, spec: &NetSpec) -> Result<()> {
        let want = NetParams::zeros(spec);
        let shapes = |p: &NetParams| p.slices().iter().map(|s| s.len()).collect::<Vec<_>>();
        let same_layout = self.layers.len() == want.layers.len()
            && self.layers.iter().zip(&want.layers).all(|(a, b)| {
                a.hidden.as_ref().map(|w| w.dim()) == b.hidden.as_ref().map(|w| w.dim())
                    && a.input.as_ref().map(|w| w.dim()) == b.input.as_ref().map(|w| w.dim())
                    && a.bias.len() == b.bias.len()
            })
            && self.out_weight.dim() == want.out_weight.dim()
            && self.out_bias.len() == want.out_bias.len();
        if !same_layout || shapes(self) != shapes(&want) {
            return Err(Error::invalid("parameter shapes do not match the network spec"));
        }
        Ok(())
    }
}

/// Soft non-negativity penalty `Σ ‖relu(-W)‖²` over the convexity weights,
/// with its gradient. Zero for KeyNet.
pub fn nonneg_penalty(spec: &NetSpec, params: &NetParams) -> (f64, NetParams) {
    let mut grad = params.zeros_like();
    if spec.family != Family::SupportNet {
        return (0.0, grad);
    }
    let mut total = 0.0;
    let mut visit = |w: &Array2<f64>, g: &mut Array2<f64>| {
        for (gv, &v) in g.iter_mut().zip(w.iter()) {
            if v < 0.0 {
                total += v * v;
                *gv = 2.0 * v;
            }
        }
    };
    for (l, gl) in params.layers.iter().zip(&mut grad.layers) {
        if let (Some(w), Some(g)) = (&l.hidden, &mut gl.hidden) {
            visit(w, g);
        }
    }
    visit(&params.out_weight, &mut grad.out_weight);
    (total, grad)
}

/// A network spec together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetSpec,
    pub params: NetParams,
}

impl Model {
    pub fn new(spec: NetSpec, params: NetParams) -> Result<Self> {
        spec.validate()?;
        params.check_shapes(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, seed);
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, x)
    }

    pub fn predict_keys(&self, x: &[f64]) -> Result<Array2<f64>> {
        predict_keys(&self.spec, &self.params, x)
    }
}
