//! Inference paths: forward values and analytic input Jacobians, batched over
//! rows of `x`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};

use super::activation::{activation, activation_d1};
use super::{Family, NetParams, NetSpec};
use crate::error::{Error, Result};

struct BaseForward {
    out: Array2<f64>,
    /// Pre-activations of every hidden layer, kept for the backward sweep.
    pre: Vec<Array2<f64>>,
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t())
}

fn base_forward(spec: &NetSpec, p: &NetParams, x: ArrayView2<f64>, keep: bool) -> BaseForward {
    let (a, b) = (spec.alpha, spec.beta);
    let mut pre_all = Vec::with_capacity(if keep { spec.depth } else { 0 });
    let mut z: Array2<f64> = Array2::zeros((0, 0));
    for (i, layer) in p.layers.iter().enumerate() {
        let mut pre = match &layer.hidden {
            Some(wz) => z.dot(&wz.t()),
            None => Array2::zeros((x.nrows(), spec.width)),
        };
        if let Some(wx) = &layer.input {
            pre += &affine(&x, wx);
        }
        pre += &layer.bias;
        let act = pre.mapv(|v| activation(v, a, b));
        z = if i > 0 && spec.residual { z + act } else { act };
        if keep {
            pre_all.push(pre);
        }
    }
    let mut out = z.dot(&p.out_weight.t());
    out += &p.out_bias;
    BaseForward { out, pre: pre_all }
}

/// Rows of `∂ out_j / ∂x` for every output `j`: `B×d_out×d`.
fn base_input_jacobian(spec: &NetSpec, p: &NetParams, fwd: &BaseForward, batch: usize) -> Array3<f64> {
    let (a, b) = (spec.alpha, spec.beta);
    let d_out = spec.out_dim();
    let d1: Vec<Array2<f64>> = fwd
        .pre
        .iter()
        .map(|pre| pre.mapv(|v| activation_d1(v, a, b)))
        .collect();
    let mut jac = Array3::zeros((batch, d_out, spec.input_dim));
    for j in 0..d_out {
        let seed = p.out_weight.row(j);
        let mut delta = Array2::from_shape_fn((batch, spec.width), |(_, k)| seed[k]);
        let mut gx = Array2::<f64>::zeros((batch, spec.input_dim));
        for i in (0..spec.depth).rev() {
            let dpre = &delta * &d1[i];
            let layer = &p.layers[i];
            if let Some(wx) = &layer.input {
                gx += &dpre.dot(wx);
            }
            if let Some(wz) = &layer.hidden {
                let back = dpre.dot(wz);
                delta = if spec.residual { delta + back } else { back };
            }
        }
        jac.slice_mut(s![.., j, ..]).assign(&gx);
    }
    jac
}

fn row_norms(x: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate {
            row: i,
            detail: "homogenized network evaluated at the origin".into(),
        });
    }
    Ok(norms)
}

fn check_input(spec: &NetSpec, p: &NetParams, x: &ArrayView2<f64>) -> Result<()> {
    spec.validate()?;
    p.check_shapes(spec)?;
    Error::check_dim(spec.input_dim, x.ncols())
}

/// Network outputs for every row of `x`: `B×d_out`.
pub fn forward_batch(spec: &NetSpec, p: &NetParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(spec, p, &x)?;
    if !spec.homogenize {
        return Ok(base_forward(spec, p, x, false).out);
    }
    let norms = row_norms(&x)?;
    let u = &x / &norms.view().insert_axis(Axis(1));
    let mut out = base_forward(spec, p, u.view(), false).out;
    out *= &norms.view().insert_axis(Axis(1));
    Ok(out)
}

/// SupportNet input Jacobian: `B×c×d`, row `j` is `∇_x f(x)_j`.
///
/// With the wrapper `f = ‖x‖·g(u)`, `u = x/‖x‖`, each row is
/// `g_j(u)·u + (I - u uᵀ)·∇g_j(u)`.
pub fn input_gradient_batch(spec: &NetSpec, p: &NetParams, x: ArrayView2<f64>) -> Result<Array3<f64>> {
    check_input(spec, p, &x)?;
    if spec.family != Family::SupportNet {
        return Err(Error::invalid("input gradients are defined for SupportNet only"));
    }
    let batch = x.nrows();
    if !spec.homogenize {
        let fwd = base_forward(spec, p, x, true);
        return Ok(base_input_jacobian(spec, p, &fwd, batch));
    }
    let norms = row_norms(&x)?;
    let u = &x / &norms.view().insert_axis(Axis(1));
    let fwd = base_forward(spec, p, u.view(), true);
    let mut jac = base_input_jacobian(spec, p, &fwd, batch);
    for (i, mut rows) in jac.axis_iter_mut(Axis(0)).enumerate() {
        let ui = u.row(i);
        for (j, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
            let proj = row.dot(&ui);
            let g = fwd.out[[i, j]];
            Zip::from(&mut row).and(&ui).for_each(|r, &uk| *r += (g - proj) * uk);
        }
    }
    Ok(jac)
}

/// Predicted keys `B×c×d`: input gradients for SupportNet, reshaped outputs
/// for KeyNet.
pub fn predict_keys_batch(spec: &NetSpec, p: &NetParams, x: ArrayView2<f64>) -> Result<Array3<f64>> {
    match spec.family {
        Family::SupportNet => input_gradient_batch(spec, p, x),
        Family::KeyNet => {
            let out = forward_batch(spec, p, x)?;
            let batch = out.nrows();
            // a unit-width product comes back column-major
            Ok(out
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((batch, spec.clusters, spec.input_dim))
                .expect("c·d outputs"))
        }
    }
}

/// Per-cluster support estimates `B×c`: the outputs of a SupportNet, or
/// `⟨F(x)_j, x⟩` for a KeyNet.
pub fn score_batch(spec: &NetSpec, p: &NetParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let out = forward_batch(spec, p, x)?;
    match spec.family {
        Family::SupportNet => Ok(out),
        Family::KeyNet => {
            let (batch, c, d) = (x.nrows(), spec.clusters, spec.input_dim);
            Ok(Array2::from_shape_fn((batch, c), |(i, j)| {
                out.slice(s![i, j * d..(j + 1) * d]).dot(&x.row(i))
            }))
        }
    }
}

fn single(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row vector")
}

pub fn forward(spec: &NetSpec, p: &NetParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_batch(spec, p, single(x))?.into_raw_vec_and_offset().0)
}

/// `c×d` Jacobian of a SupportNet at `x`.
pub fn input_gradient(spec: &NetSpec, p: &NetParams, x: &[f64]) -> Result<Array2<f64>> {
    Ok(input_gradient_batch(spec, p, single(x))?.index_axis_move(Axis(0), 0))
}

/// `c×d` predicted keys at `x`.
pub fn predict_keys(spec: &NetSpec, p: &NetParams, x: &[f64]) -> Result<Array2<f64>> {
    Ok(predict_keys_batch(spec, p, single(x))?.index_axis_move(Axis(0), 0))
}
