//! A small batched reverse-mode tape over 2-D `f64` arrays.
//!
//! Training needs gradients of losses that themselves contain input
//! gradients (SupportNet's gradient-matching term). The network's backward
//! sweep is therefore recorded on the tape as ordinary ops, and one reverse
//! pass over the whole record yields exact second-order parameter gradients.
//!
//! Values are `rows×cols` matrices; row vectors (`1×n`) carry biases and
//! `1×1` matrices carry scalars.

use ndarray::{Array2, Axis, Zip};

use crate::nets::activation::{activation, activation_d1, activation_d2};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `a · bᵀ`
    MatMulT(Var, Var),
    /// `a · b`
    MatMul(Var, Var),
    /// `a + row` with `row` broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a[i, k] · s[i, 0]`
    MulCol(Var, Var),
    /// Column `j` as `rows×1`.
    Col(Var, usize),
    /// Row `i` as `1×cols`.
    Row(Var, usize),
    /// Row sums as `rows×1`.
    RowSum(Var),
    /// Sum of every entry as `1×1`.
    SumAll(Var),
    Act(Var, f64, f64),
    ActD1(Var, f64, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input held fixed during differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let g = self.needs(a) || self.needs(b);
        self.push(value, op, g)
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let g = self.needs(a);
        self.push(value, op, g)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.unary(a, v, Op::Scale(a, k))
    }

    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).ncols(), 1);
        let v = self.value(a) * self.value(s);
        self.binary(a, s, v, Op::MulCol(a, s))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a).column(j).to_owned().insert_axis(Axis(1));
        self.unary(a, v, Op::Col(a, j))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).row(i).to_owned().insert_axis(Axis(0));
        self.unary(a, v, Op::Row(a, i))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, v, Op::RowSum(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Soft leaky ReLU, elementwise.
    pub fn act(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let v = self.value(a).mapv(|x| activation(x, alpha, beta));
        self.unary(a, v, Op::Act(a, alpha, beta))
    }

    /// Derivative of the soft leaky ReLU, elementwise.
    pub fn act_d1(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let v = self.value(a).mapv(|x| activation_d1(x, alpha, beta));
        self.unary(a, v, Op::ActD1(a, alpha, beta))
    }

    /// Reverse sweep from the scalar `root`; returns adjoints indexed by node,
    /// `None` for nodes that do not depend on any parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node.op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Array2<f64>>],
        v: Var,
        make: impl FnOnce() -> Array2<f64>,
    ) {
        if self.needs(v) {
            self.accumulate(grads, v, make());
        }
    }

    fn propagate(&self, op: Op, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMulT(a, b) => {
                self.accumulate_with(grads, a, || g.dot(self.value(b)));
                self.accumulate_with(grads, b, || g.t().dot(self.value(a)));
            }
            Op::MatMul(a, b) => {
                self.accumulate_with(grads, a, || g.dot(&self.value(b).t()));
                self.accumulate_with(grads, b, || self.value(a).t().dot(g));
            }
            Op::AddRow(a, row) => {
                self.accumulate_with(grads, a, || g.clone());
                self.accumulate_with(grads, row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, a, || g.clone());
                self.accumulate_with(grads, b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, a, || g.clone());
                self.accumulate_with(grads, b, || -g);
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, a, || g * self.value(b));
                self.accumulate_with(grads, b, || g * self.value(a));
            }
            Op::Scale(a, k) => self.accumulate_with(grads, a, || g * k),
            Op::MulCol(a, s) => {
                self.accumulate_with(grads, a, || g * self.value(s));
                self.accumulate_with(grads, s, || {
                    (g * self.value(a)).sum_axis(Axis(1)).insert_axis(Axis(1))
                });
            }
            Op::Col(a, j) => self.accumulate_with(grads, a, || {
                let mut full = Array2::zeros(self.value(a).raw_dim());
                full.column_mut(j).assign(&g.column(0));
                full
            }),
            Op::Row(a, i) => self.accumulate_with(grads, a, || {
                let mut full = Array2::zeros(self.value(a).raw_dim());
                full.row_mut(i).assign(&g.row(0));
                full
            }),
            Op::RowSum(a) => self.accumulate_with(grads, a, || {
                let mut full = Array2::zeros(self.value(a).raw_dim());
                full += g;
                full
            }),
            Op::SumAll(a) => self.accumulate_with(grads, a, || {
                Array2::from_elem(self.value(a).raw_dim(), g[[0, 0]])
            }),
            Op::Act(a, alpha, beta) => self.accumulate_with(grads, a, || {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(self.value(a))
                    .for_each(|o, &x| *o *= activation_d1(x, alpha, beta));
                out
            }),
            Op::ActD1(a, alpha, beta) => self.accumulate_with(grads, a, || {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(self.value(a))
                    .for_each(|o, &x| *o *= activation_d2(x, alpha, beta));
                out
            }),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`; `None` when `v` does not depend on a parameter.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, at: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(at.raw_dim());
        for idx in 0..at.len() {
            let mut p = at.clone();
            let mut m = at.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let x = array![[0.3, -0.2, 0.5], [1.0, 0.4, -0.7]];
        let w0 = array![[0.1, 0.2, -0.3], [0.5, -0.1, 0.2]];
        let b0 = array![[0.05, -0.02]];
        let s = array![[2.0], [-1.0]];
        let eval = |w: &Array2<f64>, grad: bool| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = if grad { t.param(w.clone()) } else { t.constant(w.clone()) };
            let bv = t.constant(b0.clone());
            let sv = t.constant(s.clone());
            let pre = t.matmul_t(xv, wv);
            let pre = t.add_row(pre, bv);
            let a = t.act(pre, 0.1, 20.0);
            let d = t.act_d1(pre, 0.1, 20.0);
            let m = t.mul(a, d);
            let m = t.mul_col(m, sv);
            let back = t.matmul(m, wv);
            let r0 = t.row(wv, 1);
            let back = t.add_row(back, r0);
            let r = t.row_sum(back);
            let c0 = t.col(a, 1);
            let q = t.sub(r, c0);
            let q = t.square(q);
            let q = t.scale(q, 0.5);
            let loss = t.sum_all(q);
            (t.scalar(loss), if grad { t.backward(loss).get(wv).cloned() } else { None })
        };
        let (_, g) = eval(&w0, true);
        let fd = numeric_grad(|w| eval(w, false).0, &w0);
        let g = g.unwrap();
        for (a, b) in g.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let m = t.mul(c, p);
        let s = t.sum_all(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
