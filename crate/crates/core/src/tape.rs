//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! accumulates adjoints. The record is append-only and each node refers
//! only to earlier nodes, so the graph is acyclic by construction.
//!
//! ```
//! use pialab_core::tape::Tape;
//! use pialab_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(theta).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(theta).unwrap().data(), &[6.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Square(usize),
    Sum(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Silu(usize),
    Tanh(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Recorded computation graph for one loss evaluation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`. Values the output does not depend on get zeros.
    pub fn get(&self, var: Var) -> Result<Tensor> {
        if var.tape != self.tape || var.idx >= self.adjoints.len() {
            return Err(Error::UnsupportedOperation(
                "variable was not recorded on the differentiated tape".into(),
            ));
        }
        let shape = self.shapes[var.idx].clone();
        Ok(match &self.adjoints[var.idx] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.check(var)?;
        Ok(&self.nodes[var.idx].value)
    }

    /// All leaves recorded with [`Tape::param`], in recording order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(idx, _)| Var { tape: self.id, idx })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.idx >= self.nodes.len() {
            return Err(Error::UnsupportedOperation(
                "operand was not recorded on this tape".into(),
            ));
        }
        Ok(var.idx)
    }

    fn record(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        Ok(self.push(value, op, false))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: fn(usize, usize) -> Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        va.ensure_same_shape(vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.record(out, op(ia, ib), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| c * v);
        self.record(out, Op::Scale(ia, c), "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * v);
        self.record(out, Op::Square(ia), "square")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(silu);
        self.record(out, Op::Silu(ia), "silu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        self.record(out, Op::Tanh(ia), "tanh")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::from_parts(vec![1], vec![self.nodes[ia].value.sum()]);
        self.record(out, Op::Sum(ia), "sum")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = matmul_dims(va.shape(), vb.shape())?;
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        self.record(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib), "matmul")
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = match (va.shape(), vb.shape()) {
            ([_, n], [nb]) if n == nb => *n,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![va.shape().last().copied().unwrap_or(0)],
                    actual: vb.shape().to_vec(),
                })
            }
        };
        let data = va
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb.data()).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.record(out, Op::AddRowBias(ia, ib), "add_row_bias")
    }

    /// Propagates adjoints from the scalar `root` back to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.check(root)?;
        if self.nodes[ir].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; ir + 1];
        adj[ir] = Some(vec![1.0]);

        for i in (0..=ir).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g.iter().copied());
                    accumulate(&mut adj, b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, a, g.iter().copied());
                    accumulate(&mut adj, b, g.iter().map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                    accumulate(&mut adj, a, g.iter().zip(vb).map(|(g, y)| g * y));
                    accumulate(&mut adj, b, g.iter().zip(va).map(|(g, x)| g * x));
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, g.iter().map(|v| c * v)),
                Op::Square(a) => {
                    let va = self.nodes[a].value.data();
                    accumulate(&mut adj, a, g.iter().zip(va).map(|(g, x)| 2.0 * x * g));
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    accumulate(&mut adj, a, std::iter::repeat_n(g[0], n));
                }
                Op::Silu(a) => {
                    let va = self.nodes[a].value.data();
                    accumulate(&mut adj, a, g.iter().zip(va).map(|(g, &x)| g * silu_grad(x)));
                }
                Op::Tanh(a) => {
                    let vy = node.value.data();
                    accumulate(&mut adj, a, g.iter().zip(vy).map(|(g, y)| g * (1.0 - y * y)));
                }
                Op::AddRowBias(a, b) => {
                    let n = self.nodes[b].value.len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, a, g.iter().copied());
                    accumulate(&mut adj, b, gb.into_iter());
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(&g, (n as isize, 1), vb.data(), (1, n as isize), &mut ga, m, n, k);
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(va.data(), (1, k as isize), &g, (n as isize, 1), &mut gb, k, m, n);
                    accumulate(&mut adj, a, ga.into_iter());
                    accumulate(&mut adj, b, gb.into_iter());
                }
            }
            // Leaves keep their adjoint; interior buffers are dropped once consumed.
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }

        let adjoints = adj;
        if adjoints.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients {
            tape: self.id,
            adjoints,
            shapes: self.nodes[..=ir].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, g: impl Iterator<Item = f64>) {
    match &mut adj[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.collect()),
    }
}


pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [kb, n]) if k == kb => Ok((*m, *k, *n)),
        _ => Err(Error::ShapeMismatch {
            expected: a.to_vec(),
            actual: b.to_vec(),
        }),
    }
}

/// `out[m, n] = a[m, k] · b[k, n]`, with `out` zeroed by the caller.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k as isize, 1), b, (n as isize, 1), out, m, k, n);
}

/// `out += A·B` for an `[m, k]` matrix `A` and a `[k, n]` matrix `B`, each
/// addressed through `(row, column)` element strides; `out` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the assertion bounds every index the kernel touches, given
    // that the strides describe dense `[m, k]` and `[k, n]` layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Value and gradient of `f` with respect to each of `params`.
///
/// `f` receives a fresh tape with `params` already recorded as trainable
/// leaves (in order) and must return a scalar variable.
pub fn grad<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out)?.data()[0];
    let grads = tape.backward(out)?;
    let g = vars.iter().map(|&v| grads.get(v)).collect::<Result<_>>()?;
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_of_scalar() {
        let (v, g) = grad(&[Tensor::scalar(3.0)], |t, p| t.square(p[0])).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let (v, g) = grad(&[Tensor::vector(vec![1.0, -2.0])], |t, _| {
            let c = t.constant(Tensor::scalar(4.0));
            t.sum(c)
        })
        .unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut other = Tape::new();
        let foreign = other.param(Tensor::scalar(1.0));
        let err = grad(&[Tensor::scalar(1.0)], |t, p| t.add(p[0], foreign)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOperation(_)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    fn central_diff(params: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, h: f64) -> Vec<Vec<f64>> {
        params
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                (0..p.len())
                    .map(|j| {
                        let mut plus = params.to_vec();
                        plus[pi].data_mut()[j] += h;
                        let mut minus = params.to_vec();
                        minus[pi].data_mut()[j] -= h;
                        (f(&plus) - f(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    // Each primitive composed with a fixed random projection so the output is scalar.
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], |t, p| t.add(p[0], p[1])),
            ("sub", vec![vec![2, 3], vec![2, 3]], |t, p| t.sub(p[0], p[1])),
            ("mul", vec![vec![2, 3], vec![2, 3]], |t, p| t.mul(p[0], p[1])),
            ("scale", vec![vec![2, 3]], |t, p| t.scale(p[0], -1.7)),
            ("square", vec![vec![2, 3]], |t, p| t.square(p[0])),
            ("silu", vec![vec![2, 3]], |t, p| t.silu(p[0])),
            ("tanh", vec![vec![2, 3]], |t, p| t.tanh(p[0])),
            ("matmul", vec![vec![2, 4], vec![4, 3]], |t, p| t.matmul(p[0], p[1])),
            ("bias", vec![vec![2, 3], vec![3]], |t, p| t.add_row_bias(p[0], p[1])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, shapes, build) in cases {
            for _ in 0..5 {
                let params: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let proj = random(&mut rng, &[2, 3]);
                let scalar = |t: &mut Tape, p: &[Var]| -> Result<Var> {
                    let y = build(t, p)?;
                    let w = t.constant(proj.clone());
                    let prod = t.mul(y, w)?;
                    t.sum(prod)
                };
                let (_, g) = grad(&params, scalar).unwrap();
                let f = |p: &[Tensor]| grad(p, scalar).unwrap().0;
                let fd = central_diff(&params, &f, 1e-5);
                for (gt, ft) in g.iter().zip(&fd) {
                    for (a, b) in gt.data().iter().zip(ft) {
                        assert!(rel_err(*a, *b) < 1e-4, "{name}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        // 1 input -> 2 hidden -> 1 output: 2 + 2 + 2 + 1 = 7 weights, plus one
        // extra bias scale = 8 parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            random(&mut rng, &[1, 2]),
            random(&mut rng, &[2]),
            random(&mut rng, &[2, 1]),
            random(&mut rng, &[1]),
            random(&mut rng, &[1]),
        ];
        assert_eq!(params.iter().map(Tensor::len).sum::<usize>(), 8);
        let x = random(&mut rng, &[3, 1]);
        let y = random(&mut rng, &[3, 1]);
        let loss = |t: &mut Tape, p: &[Var]| -> Result<Var> {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, p[0])?;
            let h = t.add_row_bias(h, p[1])?;
            let h = t.silu(h)?;
            let o = t.matmul(h, p[2])?;
            let o = t.add_row_bias(o, p[3])?;
            let o = t.add_row_bias(o, p[4])?;
            let yv = t.constant(y.clone());
            let d = t.sub(o, yv)?;
            let s = t.square(d)?;
            t.sum(s)
        };
        let (_, g) = grad(&params, loss).unwrap();
        let fd = central_diff(&params, &|p| grad(p, loss).unwrap().0, 1e-5);
        for (gt, ft) in g.iter().zip(&fd) {
            for (a, b) in gt.data().iter().zip(ft) {
                assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }
}
