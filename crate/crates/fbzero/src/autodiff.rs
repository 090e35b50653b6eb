//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Define-by-run: every operation on a [`Var`] computes its value eagerly and
//! records the operation in a reference-counted graph. [`grad`] walks the
//! graph in reverse topological order and builds the cotangents *as graph
//! operations themselves*, so gradients are differentiable again. That is
//! what makes the discriminator gradient penalty (a loss term containing an
//! input gradient) exactly differentiable with the same machinery.
//!
//! Supported primitives: elementwise arithmetic with row/column/scalar
//! broadcasting, matmul, transpose, relu/tanh/exp/ln/sqrt/sigmoid/softplus,
//! clamp, elementwise min, sum/mean reductions, column concat/slice, and
//! stop-gradient ([`Var::detach`]). Layer norm and mish are compositions.

use crate::tensor::Tensor;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Clone)]
pub struct Var {
    node: Rc<Node>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value().shape())
            .field("requires_grad", &self.requires_grad())
            .finish_non_exhaustive()
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

// Some variants carry forward-pass parameters that the backward pass does
// not need again; they are kept so each node fully describes its op.
#[allow(dead_code)]
enum Op {
    Leaf,
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Embed `[n, len]` into `[n, total]` zeros starting at column `offset`.
    PadCols(Var, usize, usize),
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let r = if a.0 == b.0 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else if b.0 == 1 {
        a.0
    } else {
        panic!("incompatible broadcast rows: {a:?} vs {b:?}")
    };
    let c = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        panic!("incompatible broadcast cols: {a:?} vs {b:?}")
    };
    (r, c)
}

fn binary_value(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if ar == 1 { 0 } else { r };
        let rb = if br == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if ac == 1 { 0 } else { c };
            let cb = if bc == 1 { 0 } else { c };
            out.push(f(ad[ra * ac + ca], bd[rb * bc + cb]));
        }
    }
    Tensor::new(rows, cols, out)
}

impl Var {
    fn from_op(value: Tensor, requires_grad: bool, op: Op) -> Var {
        Var { node: Rc::new(Node { value, requires_grad, op }) }
    }

    /// A differentiable leaf (parameter or penalized input).
    pub fn leaf(value: Tensor) -> Var {
        Var::from_op(value, true, Op::Leaf)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(value: Tensor) -> Var {
        Var::from_op(value, false, Op::Leaf)
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Stop-gradient: same value, no backward flow.
    pub fn detach(&self) -> Var {
        Var::from_op(self.node.value.clone(), false, Op::Detach(self.clone()))
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = binary_value(self.value(), other.value(), |a, b| a + b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(v, rg, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = binary_value(self.value(), other.value(), |a, b| a - b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(v, rg, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = binary_value(self.value(), other.value(), |a, b| a * b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(v, rg, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = binary_value(self.value(), other.value(), |a, b| a / b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(v, rg, Op::Div(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|v| -v), self.requires_grad(), Op::Neg(self.clone()))
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(self.value().map(|v| v * s), self.requires_grad(), Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(self.value().map(|v| v + s), self.requires_grad(), Op::AddScalar(self.clone(), s))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.value().matmul(other.value());
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(v, rg, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn transpose(&self) -> Var {
        Var::from_op(self.value().transpose(), self.requires_grad(), Op::Transpose(self.clone()))
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.value().map(|v| v.max(0.0)), self.requires_grad(), Op::Relu(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f64::tanh), self.requires_grad(), Op::Tanh(self.clone()))
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), self.requires_grad(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f64::ln), self.requires_grad(), Op::Ln(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f64::sqrt), self.requires_grad(), Op::Sqrt(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        Var::from_op(v, self.requires_grad(), Op::Sigmoid(self.clone()))
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Var {
        let v = self.value().map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        Var::from_op(v, self.requires_grad(), Op::Softplus(self.clone()))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let v = self.value().map(|x| x.clamp(lo, hi));
        Var::from_op(v, self.requires_grad(), Op::Clamp(self.clone(), lo, hi))
    }

    /// Elementwise minimum; gradient follows the smaller operand.
    pub fn minimum(&self, other: &Var) -> Var {
        let v = binary_value(self.value(), other.value(), f64::min);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(v, rg, Op::Min(self.clone(), other.clone()))
    }

    /// `x * tanh(softplus(x))`.
    pub fn mish(&self) -> Var {
        self.mul(&self.softplus().tanh())
    }

    pub fn sum_all(&self) -> Var {
        let s: f64 = self.value().data().iter().sum();
        Var::from_op(Tensor::scalar(s), self.requires_grad(), Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Var {
        self.sum_all().scale(1.0 / self.value().len() as f64)
    }

    /// Column sums: `[n, m] -> [1, m]`.
    pub fn sum_rows(&self) -> Var {
        let (n, m) = self.shape();
        let d = self.value().data();
        let mut out = vec![0.0; m];
        for r in 0..n {
            for c in 0..m {
                out[c] += d[r * m + c];
            }
        }
        Var::from_op(Tensor::new(1, m, out), self.requires_grad(), Op::SumRows(self.clone()))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&self) -> Var {
        let (n, m) = self.shape();
        let d = self.value().data();
        let mut out = vec![0.0; n];
        for r in 0..n {
            out[r] = d[r * m..(r + 1) * m].iter().sum();
        }
        Var::from_op(Tensor::new(n, 1, out), self.requires_grad(), Op::SumCols(self.clone()))
    }

    /// Row means keeping the column axis: `[n, m] -> [n, 1]`.
    pub fn mean_cols(&self) -> Var {
        let m = self.shape().1 as f64;
        self.sum_cols().scale(1.0 / m)
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = parts[0].shape().0;
        let total: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                assert_eq!(p.shape().0, n, "concat_cols row mismatch");
                out.extend_from_slice(p.value().row_slice(r));
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        Var::from_op(Tensor::new(n, total, out), rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&self, offset: usize, len: usize) -> Var {
        let (n, m) = self.shape();
        assert!(offset + len <= m, "slice_cols out of range");
        let d = self.value().data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&d[r * m + offset..r * m + offset + len]);
        }
        Var::from_op(Tensor::new(n, len, out), self.requires_grad(), Op::SliceCols(self.clone(), offset, len))
    }

    fn pad_cols(&self, total: usize, offset: usize) -> Var {
        let (n, m) = self.shape();
        assert!(offset + m <= total);
        let d = self.value().data();
        let mut out = vec![0.0; n * total];
        for r in 0..n {
            out[r * total + offset..r * total + offset + m].copy_from_slice(&d[r * m..(r + 1) * m]);
        }
        Var::from_op(Tensor::new(n, total, out), self.requires_grad(), Op::PadCols(self.clone(), total, offset))
    }

    /// Per-row layer normalization (no affine): mean 0, variance 1.
    pub fn layer_norm(&self, eps: f64) -> Var {
        let mu = self.mean_cols();
        let centered = self.sub(&mu);
        let var = centered.square().mean_cols();
        centered.div(&var.add_scalar(eps).sqrt())
    }

    /// Sum of `row_i . row_i'` per row: `[n, m] x [n, m] -> [n, 1]`.
    pub fn row_dot(&self, other: &Var) -> Var {
        self.mul(other).sum_cols()
    }

    /// Rows rescaled to Euclidean norm `radius`: `[n, m] -> [n, m]`.
    /// Zero rows map to zero (the norm is regularized away from 0).
    pub fn sphere_rows(&self, radius: f64) -> Var {
        let norm = self.square().sum_cols().add_scalar(1e-24).sqrt();
        self.scale(radius).div(&norm)
    }
}

/// A constant step mask of `x > 0`, used for relu/clamp/min backward.
fn gt_zero_mask(x: &Tensor) -> Var {
    Var::constant(x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// Reduce `g` (output-shaped) back to the shape of a broadcast operand.
fn reduce_to(g: &Var, shape: (usize, usize)) -> Var {
    let gs = g.shape();
    if gs == shape {
        return g.clone();
    }
    match shape {
        (1, 1) => g.sum_all(),
        (1, c) => {
            assert_eq!(c, gs.1);
            g.sum_rows()
        }
        (r, 1) => {
            assert_eq!(r, gs.0);
            g.sum_cols()
        }
        _ => panic!("cannot reduce gradient {gs:?} to {shape:?}"),
    }
}

/// Gradients of a scalar `output` with respect to each var in `wrt`.
///
/// Returned gradients are themselves graph nodes, so they can be used inside
/// another differentiated expression (double backprop). Vars unreachable from
/// `output` get zero gradients.
pub fn grad(output: &Var, wrt: &[&Var]) -> Vec<Var> {
    assert_eq!(output.shape(), (1, 1), "grad expects a scalar output");

    // Reverse topological order over the subgraph that requires gradients.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || visited.contains_key(&v.ptr()) {
            continue;
        }
        visited.insert(v.ptr(), true);
        stack.push((v.clone(), true));
        for p in parents(&v.node.op) {
            stack.push((p, false));
        }
    }

    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.ptr(), Var::constant(Tensor::ones(1, 1)));

    let accumulate = |grads: &mut HashMap<usize, Var>, v: &Var, g: Var| {
        if !v.requires_grad() {
            return;
        }
        match grads.remove(&v.ptr()) {
            Some(existing) => {
                grads.insert(v.ptr(), existing.add(&g));
            }
            None => {
                grads.insert(v.ptr(), g);
            }
        }
    };

    for v in order.iter().rev() {
        let Some(g) = grads.get(&v.ptr()).cloned() else { continue };
        match &v.node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                accumulate(&mut grads, a, reduce_to(&g, a.shape()));
                accumulate(&mut grads, b, reduce_to(&g, b.shape()));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, a, reduce_to(&g, a.shape()));
                accumulate(&mut grads, b, reduce_to(&g.neg(), b.shape()));
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads, a, reduce_to(&g.mul(b), a.shape()));
                accumulate(&mut grads, b, reduce_to(&g.mul(a), b.shape()));
            }
            Op::Div(a, b) => {
                accumulate(&mut grads, a, reduce_to(&g.div(b), a.shape()));
                let gb = g.mul(v).div(b).neg();
                accumulate(&mut grads, b, reduce_to(&gb, b.shape()));
            }
            Op::Neg(a) => accumulate(&mut grads, a, g.neg()),
            Op::Scale(a, s) => accumulate(&mut grads, a, g.scale(*s)),
            Op::AddScalar(a, _) => accumulate(&mut grads, a, g),
            Op::MatMul(a, b) => {
                accumulate(&mut grads, a, g.matmul(&b.transpose()));
                accumulate(&mut grads, b, a.transpose().matmul(&g));
            }
            Op::Transpose(a) => accumulate(&mut grads, a, g.transpose()),
            Op::Relu(a) => accumulate(&mut grads, a, g.mul(&gt_zero_mask(a.value()))),
            Op::Tanh(a) => {
                let d = v.square().neg().add_scalar(1.0);
                accumulate(&mut grads, a, g.mul(&d));
            }
            Op::Exp(a) => accumulate(&mut grads, a, g.mul(v)),
            Op::Ln(a) => accumulate(&mut grads, a, g.div(a)),
            Op::Sqrt(a) => accumulate(&mut grads, a, g.div(v).scale(0.5)),
            Op::Sigmoid(a) => {
                let d = v.mul(&v.neg().add_scalar(1.0));
                accumulate(&mut grads, a, g.mul(&d));
            }
            Op::Softplus(a) => accumulate(&mut grads, a, g.mul(&a.sigmoid())),
            Op::Clamp(a, lo, hi) => {
                let mask = Var::constant(
                    a.value().map(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 }),
                );
                accumulate(&mut grads, a, g.mul(&mask));
            }
            Op::Min(a, b) => {
                // Ties route to the first operand.
                let mask = Var::constant(binary_value(a.value(), b.value(), |x, y| {
                    if x <= y {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let ga = reduce_to(&g.mul(&mask), a.shape());
                let gb = reduce_to(&g.mul(&mask.neg().add_scalar(1.0)), b.shape());
                accumulate(&mut grads, a, ga);
                accumulate(&mut grads, b, gb);
            }
            Op::SumAll(a) => {
                let (n, m) = a.shape();
                accumulate(&mut grads, a, Var::constant(Tensor::ones(n, m)).mul(&g));
            }
            Op::SumRows(a) => {
                let (n, m) = a.shape();
                accumulate(&mut grads, a, Var::constant(Tensor::ones(n, m)).mul(&g));
            }
            Op::SumCols(a) => {
                let (n, m) = a.shape();
                accumulate(&mut grads, a, Var::constant(Tensor::ones(n, m)).mul(&g));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = p.shape().1;
                    accumulate(&mut grads, p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::SliceCols(a, offset, _) => {
                accumulate(&mut grads, a, g.pad_cols(a.shape().1, *offset));
            }
            Op::PadCols(a, _, offset) => {
                accumulate(&mut grads, a, g.slice_cols(*offset, a.shape().1));
            }
        }
    }

    wrt.iter()
        .map(|v| {
            grads.get(&v.ptr()).cloned().unwrap_or_else(|| {
                let (r, c) = v.shape();
                Var::constant(Tensor::zeros(r, c))
            })
        })
        .collect()
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Detach(_) => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::Min(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Clamp(a, _, _)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::SliceCols(a, _, _)
        | Op::PadCols(a, _, _) => vec![a.clone()],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x0: &[f64], analytic: &[f64], tol: f64) {
        let eps = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.to_vec();
            let mut xm = x0.to_vec();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "fd mismatch at {i}: fd={fd}, analytic={}",
                analytic[i]
            );
        }
    }

    #[test]
    fn sphere_rows_norms_and_gradient() {
        let x0 = vec![0.6, -0.8, 0.3, 1.5, -0.2, 0.4];
        let mk = |x: &[f64], leaf: bool| {
            let t = Tensor::new(2, 3, x.to_vec());
            if leaf { Var::leaf(t) } else { Var::constant(t) }
        };
        let y = mk(&x0, false).sphere_rows(3f64.sqrt());
        for r in 0..2 {
            let n: f64 = (0..3).map(|c| y.value().get(r, c).powi(2)).sum::<f64>().sqrt();
            assert!((n - 3f64.sqrt()).abs() < 1e-9, "row {r} norm {n}");
        }
        // loss = sum(sphere_rows(x) * w) for a fixed weighting w
        let w = Tensor::new(2, 3, vec![0.7, -0.3, 1.1, 0.2, 0.9, -0.6]);
        let xv = mk(&x0, true);
        let l = xv.sphere_rows(3f64.sqrt()).mul(&Var::constant(w.clone())).sum_all();
        let gs = grad(&l, &[&xv]);
        fd_check(
            |x| {
                mk(x, false)
                    .sphere_rows(3f64.sqrt())
                    .mul(&Var::constant(w.clone()))
                    .sum_all()
                    .value()
                    .item()
            },
            &x0,
            gs[0].value().data(),
            1e-6,
        );
    }

    #[test]
    fn matmul_bias_chain_matches_fd() {
        // loss = sum(tanh(x W + b)^2)
        let x0 = vec![0.3, -0.8, 0.5, 1.2, -0.1, 0.7];
        let w0 = vec![0.2, -0.4, 0.9, 0.1, -0.5, 0.3];
        let b0 = vec![0.05, -0.2];
        let eval = |w: &[f64], b: &[f64]| {
            let x = Var::constant(Tensor::new(2, 3, x0.clone()));
            let wv = Var::leaf(Tensor::new(3, 2, w.to_vec()));
            let bv = Var::leaf(Tensor::new(1, 2, b.to_vec()));
            let y = x.matmul(&wv).add(&bv).tanh();
            y.square().sum_all()
        };
        let loss = eval(&w0, &b0);
        let x = Var::constant(Tensor::new(2, 3, x0.clone()));
        let wv = Var::leaf(Tensor::new(3, 2, w0.clone()));
        let bv = Var::leaf(Tensor::new(1, 2, b0.clone()));
        let y = x.matmul(&wv).add(&bv).tanh();
        let l = y.square().sum_all();
        assert!((l.value().item() - loss.value().item()).abs() < 1e-12);
        let gs = grad(&l, &[&wv, &bv]);
        fd_check(
            |w| {
                let x = Var::constant(Tensor::new(2, 3, x0.clone()));
                let wv = Var::constant(Tensor::new(3, 2, w.to_vec()));
                let bv = Var::constant(Tensor::new(1, 2, b0.clone()));
                x.matmul(&wv).add(&bv).tanh().square().sum_all().value().item()
            },
            &w0,
            gs[0].value().data(),
            1e-6,
        );
        fd_check(
            |b| {
                let x = Var::constant(Tensor::new(2, 3, x0.clone()));
                let wv = Var::constant(Tensor::new(3, 2, w0.clone()));
                let bv = Var::constant(Tensor::new(1, 2, b.to_vec()));
                x.matmul(&wv).add(&bv).tanh().square().sum_all().value().item()
            },
            &b0,
            gs[1].value().data(),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Var::leaf(Tensor::new(3, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 0.5, 2.0, 10.0, 10.0, 10.0, 11.0]));
        let y = x.layer_norm(1e-10);
        for r in 0..3 {
            let row = y.value().row_slice(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "row {r} var {var}");
        }
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let a = Var::leaf(Tensor::scalar(2.0));
        let b = a.detach().mul(&a);
        let g = grad(&b.sum_all(), &[&a]);
        // Only the non-detached factor contributes: d/da (c * a) = c = 2.
        assert_eq!(g[0].value().item(), 2.0);
    }

    #[test]
    fn double_backprop_through_input_gradient() {
        // f(x) = x^3 (via exp(3 ln x)); g = df/dx = 3x^2; h = g^2 = 9x^4.
        // dh/dx = 36 x^3.
        let x = Var::leaf(Tensor::scalar(1.3));
        let f = x.ln().scale(3.0).exp();
        let g = grad(&f, &[&x]);
        let h = g[0].square().sum_all();
        assert!((h.value().item() - 9.0 * 1.3f64.powi(4)).abs() < 1e-9);
        let dh = grad(&h, &[&x]);
        assert!((dh[0].value().item() - 36.0 * 1.3f64.powi(3)).abs() < 1e-9);
    }

    #[test]
    fn mish_values() {
        let x = Var::leaf(Tensor::new(1, 2, vec![0.0, 1.0]));
        let y = x.mish();
        assert!(y.value().data()[0].abs() < 1e-12);
        // x tanh(ln(1+e^x)) at x=1
        let expected = 1.0 * (1.0f64 + std::f64::consts::E).ln().tanh();
        assert!((y.value().data()[1] - expected).abs() < 1e-12);
        assert!((y.value().data()[1] - 0.86509).abs() < 1e-5);
    }

    #[test]
    fn min_and_clamp_route_gradients() {
        let a = Var::leaf(Tensor::new(1, 2, vec![1.0, 5.0]));
        let b = Var::leaf(Tensor::new(1, 2, vec![2.0, 3.0]));
        let m = a.minimum(&b).sum_all();
        let gs = grad(&m, &[&a, &b]);
        assert_eq!(gs[0].value().data(), &[1.0, 0.0]);
        assert_eq!(gs[1].value().data(), &[0.0, 1.0]);

        let c = Var::leaf(Tensor::new(1, 3, vec![-2.0, 0.5, 9.0]));
        let gc = grad(&c.clamp(-1.0, 1.0).sum_all(), &[&c]);
        assert_eq!(gc[0].value().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let a = Var::leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = Var::leaf(Tensor::new(2, 1, vec![5.0, 6.0]));
        let cat = Var::concat_cols(&[a.clone(), b.clone()]);
        let loss = cat.slice_cols(1, 2).square().sum_all();
        let gs = grad(&loss, &[&a, &b]);
        assert_eq!(gs[0].value().data(), &[0.0, 4.0, 0.0, 8.0]);
        assert_eq!(gs[1].value().data(), &[10.0, 12.0]);
    }
}
