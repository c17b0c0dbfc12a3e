//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass in topological order
//! (parents always precede children). [`Tape::backward`] sweeps the record once
//! in reverse and returns the gradient of the root with respect to every node,
//! in particular every registered parameter leaf. Tapes are built fresh for each
//! forward pass.

use crate::error::{EivError, Result};
use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// Tensor times one-element node.
    MulScalar(Var, Var),
    /// Tensor plus one-element node.
    AddScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    /// log-sum-exp over consecutive groups of the given size.
    GroupLogSumExp(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(String, Var)>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to `var`; exact zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Number of entries of `var`.
    pub fn numel(&self, var: Var) -> usize {
        self.shapes[var.0].iter().product()
    }

    /// Borrowed gradient buffer; `None` means identically zero.
    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradients of all registered parameter leaves, in registration order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.leaves.iter().map(|(name, v)| (name.as_str(), self.wrt(*v)))
    }

    pub fn by_name(&self, name: &str) -> Option<Tensor> {
        self.leaves
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.wrt(*v))
    }
}

fn acc<'a>(slot: &'a mut Option<Vec<f64>>, len: usize) -> &'a mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    /// Registers a differentiable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Param, true);
        self.leaves.push((name.into(), v));
        v
    }

    /// A leaf that takes no gradient (data, masks, frozen noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn leaf_registry(&self) -> &[(String, Var)] {
        &self.leaves
    }

    fn expect_same(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        self.value(a).same_shape(self.value(b), ctx)
    }

    fn expect_scalar(&self, s: Var, ctx: &str) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(EivError::shape(ctx, &[1], self.shape(s)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EivError::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), ng))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(EivError::shape("add_row", &[sa.get(1).copied().unwrap_or(0)], sb));
        }
        let m = sa[1];
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, bj) in row.iter_mut().zip(&b) {
                *x += bj;
            }
        }
        let value = Tensor::from_parts(sa.to_vec(), data);
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "mul_scalar")?;
        let c = self.value(s).item();
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect());
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(value, Op::MulScalar(a, s), ng))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "add_scalar")?;
        let c = self.value(s).item();
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v + c).collect());
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(value, Op::AddScalar(a, s), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        self.unary(a, Op::Powf(a, e), |x| x.powf(e))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `[n, m] -> [n]`, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = (x.rows(), x.cols());
        let data = x.data().chunks(m).map(|r| r.iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![n], data), Op::RowSum(a), ng)
    }

    /// Stable log-sum-exp over consecutive groups of `group` entries: `[g * k] -> [k]`.
    pub fn group_logsumexp(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || x.len() % group != 0 {
            return Err(EivError::Usage(format!(
                "group_logsumexp: {} entries not divisible into groups of {group}",
                x.len()
            )));
        }
        let data = x
            .data()
            .chunks(group)
            .map(|g| crate::loss::logsumexp_unchecked(g))
            .collect::<Vec<_>>();
        let k = data.len();
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![k], data), Op::GroupLogSumExp(a, group), ng))
    }

    /// Seeds the root with ones (for a scalar root, `d root / d root = 1`).
    pub fn grad(&self, root: Var) -> Result<Gradients> {
        let seed = Tensor::filled(self.shape(root), 1.0);
        self.backward(root, &seed)
    }

    /// One reverse sweep from `root`, seeded with `seed` (same shape as the root).
    pub fn backward(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(EivError::Usage(
                "backward called before a forward pass recorded the root".into(),
            ));
        }
        self.value(root).same_shape(seed, "backward seed")?;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.data().to_vec());

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(n, None);
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            leaves: self.leaves.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let da = acc(&mut grads[a.0], n * k);
                    matmul_nt_acc(g, self.value(b).data(), da, n, m, k);
                }
                if self.needs(b) {
                    let db = acc(&mut grads[b.0], k * m);
                    matmul_tn_acc(self.value(a).data(), g, db, n, k, m);
                }
            }
            Op::AddRow(a, b) => {
                let m = self.shape(b)[0];
                if self.needs(a) {
                    let da = acc(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.needs(b) {
                    let db = acc(&mut grads[b.0], m);
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(a) {
                    let da = acc(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.needs(b) {
                    let db = acc(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.value(b).data();
                    let da = acc(&mut grads[a.0], g.len());
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    let db = acc(&mut grads[b.0], g.len());
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = acc(&mut grads[a.0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
            }
            Op::AddConst(a) => {
                let da = acc(&mut grads[a.0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::MulScalar(a, s) => {
                let c = self.value(s).item();
                if self.needs(a) {
                    let da = acc(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
                if self.needs(s) {
                    let av = self.value(a).data();
                    let total: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc(&mut grads[s.0], 1)[0] += total;
                }
            }
            Op::AddScalar(a, s) => {
                if self.needs(a) {
                    let da = acc(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.needs(s) {
                    acc(&mut grads[s.0], 1)[0] += g.iter().sum::<f64>();
                }
            }
            Op::Relu(a) => {
                let av = self.value(a).data();
                let da = acc(&mut grads[a.0], g.len());
                for ((d, x), y) in da.iter_mut().zip(g).zip(av) {
                    if *y > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::Tanh(a) => {
                let da = acc(&mut grads[a.0], g.len());
                for ((d, x), t) in da.iter_mut().zip(g).zip(out) {
                    *d += x * (1.0 - t * t);
                }
            }
            Op::Exp(a) => {
                let da = acc(&mut grads[a.0], g.len());
                for ((d, x), e) in da.iter_mut().zip(g).zip(out) {
                    *d += x * e;
                }
            }
            Op::Ln(a) => {
                let av = self.value(a).data();
                let da = acc(&mut grads[a.0], g.len());
                for ((d, x), y) in da.iter_mut().zip(g).zip(av) {
                    *d += x / y;
                }
            }
            Op::Powf(a, e) => {
                let av = self.value(a).data();
                let da = acc(&mut grads[a.0], g.len());
                for ((d, x), y) in da.iter_mut().zip(g).zip(av) {
                    *d += x * e * y.powf(e - 1.0);
                }
            }
            Op::Square(a) => {
                let av = self.value(a).data();
                let da = acc(&mut grads[a.0], g.len());
                for ((d, x), y) in da.iter_mut().zip(g).zip(av) {
                    *d += 2.0 * y * x;
                }
            }
            Op::Sum(a) => {
                let len = self.value(a).len();
                let da = acc(&mut grads[a.0], len);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::RowSum(a) => {
                let m = self.value(a).cols();
                let len = self.value(a).len();
                let da = acc(&mut grads[a.0], len);
                for (row, x) in da.chunks_mut(m).zip(g) {
                    row.iter_mut().for_each(|d| *d += x);
                }
            }
            Op::GroupLogSumExp(a, group) => {
                let av = self.value(a).data();
                let da = acc(&mut grads[a.0], av.len());
                for (k, (dchunk, achunk)) in da.chunks_mut(group).zip(av.chunks(group)).enumerate() {
                    for (d, v) in dchunk.iter_mut().zip(achunk) {
                        *d += g[k] * (v - out[k]).exp();
                    }
                }
            }
        }
    }
}
