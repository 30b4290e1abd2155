use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant sparse target distribution for one row: `(column, probability)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRow {
    pub entries: Vec<(u32, f64)>,
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Ln { a: Var, floor: S },
    Pow(Var, S),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<u32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, rstd: Vec<S> },
    CausalMask(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Slice { a: Var, r0: usize, c0: usize },
    Assemble { parts: Vec<(Var, usize, usize)> },
    GatherCols { a: Var, idx: Vec<u32> },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
    Nll { logp: Var, targets: Vec<u32>, weights: Vec<f64> },
    SparseKl { logp: Var, rows: Vec<SparseRow>, weights: Vec<f64> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient buffer of `v`, allocated on first use; `None` for nodes that do
/// not require gradients.
fn grad_slot<'g, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'g mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'g mut [S]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// Tape of operations recorded in creation order; creation order is a valid
/// topological order, so backward is a single reverse sweep.
///
/// Shape errors in op construction are programming errors and panic.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient accumulates across `backward` calls.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.view(a, ta), self.view(b, tb));
        assert_eq!(
            av.cols(),
            bv.rows(),
            "matmul: {:?} x {:?} (ta={ta}, tb={tb})",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let (m, n) = (av.rows(), bv.cols());
        let mut out = vec![S::zero(); m * n];
        gemm(av, bv, &mut out, S::one(), S::zero());
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul { a, b, ta, tb },
            rg,
        )
    }

    fn view(&self, v: Var, t: bool) -> MatRef<'_, S> {
        let m = self.value(v).mat();
        if t {
            m.t()
        } else {
            m
        }
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds a `[1, cols]` (or `[cols]`) bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        assert_eq!(b.len(), cols, "add_row bias width");
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(bias);
        self.push(t, Op::AddRow { a, bias }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = S::from_f64(s);
        self.map(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        self.map(a, |v| v + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |v| v.exp(), Op::Exp(a))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where clamped.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let floor = S::from_f64(floor);
        self.map(a, |v| v.max(floor).ln(), Op::Ln { a, floor })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.ln_floor(a, 0.0)
    }

    /// `x^p` for non-negative `x`.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let p = S::from_f64(p);
        self.map(a, |v| v.powf(p), Op::Pow(a, p))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (S::from_f64(GELU_C), S::from_f64(GELU_K));
        let half = S::from_f64(0.5);
        self.map(
            a,
            |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    // ----- model building blocks -----------------------------------------

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!((id as usize) < t.rows(), "embedding id {id} out of range");
            data.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], data).unwrap();
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), cols, "layer_norm gamma width");
        assert_eq!(bv.len(), cols, "layer_norm beta width");
        let mut data = Vec::with_capacity(rows * cols);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mu).powi(2))
                .sum::<f64>()
                / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            let (mu_s, rs_s) = (S::from_f64(mu), S::from_f64(rs));
            for j in 0..cols {
                data.push((row[j] - mu_s) * rs_s * gv[j] + bv[j]);
            }
            mean.push(mu_s);
            rstd.push(rs_s);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Sets entries above the (bottom-right aligned) diagonal to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        assert!(rows <= cols, "causal_mask needs rows <= cols");
        let shift = cols - rows;
        let mut data = x.data().to_vec();
        for i in 0..rows {
            for v in &mut data[i * cols + i + shift + 1..(i + 1) * cols] {
                *v = S::neg_infinity();
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::CausalMask(a), rg)
    }

    /// Row softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: f64 = row.iter().map(|v| (*v - max).as_f64().exp()).sum();
            let lse = max + S::from_f64(sum.ln());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Rectangular block `[r0..r0+rows, c0..c0+cols]` of a 2-D value.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Var {
        let x = self.value(a);
        let src_cols = x.cols();
        assert!(r0 + rows <= x.rows() && c0 + cols <= src_cols, "slice out of bounds");
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&x.data()[r * src_cols + c0..r * src_cols + c0 + cols]);
        }
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Slice { a, r0, c0 }, rg)
    }

    /// Places 2-D blocks at `(row, col)` offsets into a zero `[rows, cols]` value.
    pub fn assemble(&mut self, rows: usize, cols: usize, parts: &[(Var, usize, usize)]) -> Var {
        let mut data = vec![S::zero(); rows * cols];
        let mut rg = false;
        for &(p, r0, c0) in parts {
            let v = self.value(p);
            let (pr, pc) = (v.rows(), v.cols());
            assert!(r0 + pr <= rows && c0 + pc <= cols, "assemble block out of bounds");
            for i in 0..pr {
                data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + pc].copy_from_slice(v.row(i));
            }
            rg |= self.rg(p);
        }
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(
            t,
            Op::Assemble {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// `out[r, j] = a[r, idx[r * k + j]]` with `k = idx.len() / rows`.
    pub fn gather_cols(&mut self, a: Var, idx: &[u32]) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        assert!(rows > 0 && idx.len().is_multiple_of(rows), "gather_cols index count");
        let k = idx.len() / rows;
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!((c as usize) < cols, "gather_cols column out of range");
                x.data()[(i / k) * cols + c as usize]
            })
            .collect();
        let t = Tensor::new(vec![rows, k], data).unwrap();
        let rg = self.rg(a);
        self.push(
            t,
            Op::GatherCols {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(S::from_f64(s)), Op::SumAll(a), rg)
    }

    /// `sum_i w_i * a_i` over same-shape operands, accumulated in `f64` and
    /// rounded once.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let shape = self.value(terms[0].0).shape().to_vec();
        let n = self.value(terms[0].0).len();
        let mut acc = vec![0.0f64; n];
        for &(v, w) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), shape.as_slice(), "weighted_sum shape mismatch");
            for (a, &b) in acc.iter_mut().zip(x.data()) {
                *a += w * b.as_f64();
            }
        }
        let t = Tensor::new(shape, acc.into_iter().map(S::from_f64).collect()).unwrap();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(t, Op::WeightedSum(terms.to_vec()), rg)
    }

    // ----- losses ---------------------------------------------------------

    /// `-sum_r w_r * logp[r, target_r]`, accumulated in `f64`.
    pub fn nll(&mut self, logp: Var, targets: &[u32], weights: &[f64]) -> Var {
        let lp = self.value(logp);
        let cols = lp.cols();
        assert_eq!(targets.len(), lp.rows(), "nll target count");
        assert_eq!(weights.len(), lp.rows(), "nll weight count");
        let total: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(r, (&t, &w))| -w * lp.data()[r * cols + t as usize].as_f64())
            .sum();
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(S::from_f64(total)),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// `sum_r w_r * KL(p_r || q_r)` for constant sparse `p_r` and model
    /// log-probabilities `logp`. Only the support of `p_r` is visited.
    pub fn sparse_kl(&mut self, logp: Var, rows: Vec<SparseRow>, weights: &[f64]) -> Var {
        let lp = self.value(logp);
        let cols = lp.cols();
        assert_eq!(rows.len(), lp.rows(), "sparse_kl row count");
        assert_eq!(weights.len(), lp.rows(), "sparse_kl weight count");
        let mut total = 0.0f64;
        for (r, (row, &w)) in rows.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let kl: f64 = row
                .entries
                .iter()
                .filter(|(_, p)| *p > 0.0)
                .map(|&(v, p)| p * (p.ln() - lp.data()[r * cols + v as usize].as_f64()))
                .sum();
            total += w * kl;
        }
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(S::from_f64(total)),
            Op::SparseKl {
                logp,
                rows,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Mean cross-entropy of row logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let lp = self.log_softmax(logits);
        let w = vec![1.0 / targets.len() as f64; targets.len()];
        self.nll(lp, targets, &w)
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`]; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += S::one(),
            slot => *slot = Some(vec![S::one()]),
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, g: &[S]) {
        let Graph { nodes, grads } = self;
        let nodes: &[Node<S>] = nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:block) => {
                if let Some($ga) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = {
                    let m = val(a).mat();
                    if ta {
                        m.t()
                    } else {
                        m
                    }
                };
                let bv = {
                    let m = val(b).mat();
                    if tb {
                        m.t()
                    } else {
                        m
                    }
                };
                let gv = MatRef::new(g, av.rows(), bv.cols());
                with_grad!(a, |ga| {
                    if ta {
                        gemm(bv, gv.t(), ga, S::one(), S::one());
                    } else {
                        gemm(gv, bv.t(), ga, S::one(), S::one());
                    }
                });
                with_grad!(b, |gb| {
                    if tb {
                        gemm(gv.t(), av, gb, S::one(), S::one());
                    } else {
                        gemm(av.t(), gv, gb, S::one(), S::one());
                    }
                });
            }
            &Op::Add(a, b) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                });
                with_grad!(b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                });
            }
            &Op::Sub(a, b) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                });
                with_grad!(b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d);
                });
            }
            &Op::Mul(a, b) => {
                with_grad!(a, |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(val(b).data()) {
                        *x += d * y;
                    }
                });
                with_grad!(b, |gb| {
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(val(a).data()) {
                        *x += d * y;
                    }
                });
            }
            &Op::AddRow { a, bias } => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                });
                with_grad!(bias, |gb| {
                    for row in g.chunks_exact(gb.len()) {
                        gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                    }
                });
            }
            &Op::Scale(a, s) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * s);
                });
            }
            &Op::AddScalar(a) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                });
            }
            &Op::Exp(a) => {
                with_grad!(a, |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += d * y;
                    }
                });
            }
            &Op::Ln { a, floor } => {
                with_grad!(a, |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(val(a).data()) {
                        if v > floor {
                            *x += d / v;
                        }
                    }
                });
            }
            &Op::Pow(a, p) => {
                if p != S::zero() {
                    with_grad!(a, |ga| {
                        for ((x, &d), &v) in ga.iter_mut().zip(g).zip(val(a).data()) {
                            *x += d * p * v.powf(p - S::one());
                        }
                    });
                }
            }
            &Op::Gelu(a) => {
                let (c, k) = (S::from_f64(GELU_C), S::from_f64(GELU_K));
                let half = S::from_f64(0.5);
                let three = S::from_f64(3.0);
                with_grad!(a, |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(val(a).data()) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * k * v * v);
                        *x += d * (half * (S::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, &dd)| *x += dd);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gam = val(*gamma).data();
                let cols = xv.cols();
                let n = S::from_f64(cols as f64);
                let xhat = |r: usize, j: usize| (xv.data()[r * cols + j] - mean[r]) * rstd[r];
                with_grad!(*gamma, |gg| {
                    for r in 0..xv.rows() {
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * xhat(r, j);
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(v, &d)| *v += d);
                    }
                });
                with_grad!(*x, |gx| {
                    for r in 0..xv.rows() {
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..cols {
                            let dxh = g[r * cols + j] * gam[j];
                            sum_d += dxh;
                            sum_dx += dxh * xhat(r, j);
                        }
                        let (md, mdx) = (sum_d / n, sum_dx / n);
                        for j in 0..cols {
                            let dxh = g[r * cols + j] * gam[j];
                            gx[r * cols + j] += rstd[r] * (dxh - md - xhat(r, j) * mdx);
                        }
                    }
                });
            }
            &Op::CausalMask(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                let shift = cols - rows;
                with_grad!(a, |ga| {
                    for r in 0..rows {
                        for j in 0..=(r + shift) {
                            ga[r * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let cols = out.cols();
                with_grad!(a, |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_exact_mut(cols)
                        .zip(out.data().chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let dot: S = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                        for ((x, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += y * (d - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let cols = out.cols();
                with_grad!(a, |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_exact_mut(cols)
                        .zip(out.data().chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let sum: S = dr.iter().copied().sum();
                        for ((x, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += d - y.exp() * sum;
                        }
                    }
                });
            }
            &Op::Slice { a, r0, c0 } => {
                let src_cols = val(a).cols();
                let (rows, cols) = (out.rows(), out.cols());
                with_grad!(a, |ga| {
                    for r in 0..rows {
                        let dst = &mut ga[(r0 + r) * src_cols + c0..(r0 + r) * src_cols + c0 + cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, &d)| *x += d);
                    }
                });
            }
            Op::Assemble { parts } => {
                let cols = out.cols();
                for &(p, r0, c0) in parts {
                    let pv = val(p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    with_grad!(p, |gp| {
                        for r in 0..pr {
                            let src = &g[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + pc];
                            gp[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &d)| *x += d);
                        }
                    });
                }
            }
            Op::GatherCols { a, idx } => {
                let cols = val(*a).cols();
                let k = out.cols();
                with_grad!(*a, |ga| {
                    for (i, &c) in idx.iter().enumerate() {
                        ga[(i / k) * cols + c as usize] += g[i];
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let w = S::from_f64(w);
                    with_grad!(v, |gv| {
                        gv.iter_mut().zip(g).for_each(|(x, &d)| *x += w * d);
                    });
                }
            }
            &Op::SumAll(a) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::Nll {
                logp,
                targets,
                weights,
            } => {
                let cols = val(*logp).cols();
                with_grad!(*logp, |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        gl[r * cols + t as usize] -= S::from_f64(w) * g[0];
                    }
                });
            }
            Op::SparseKl {
                logp,
                rows,
                weights,
            } => {
                let cols = val(*logp).cols();
                with_grad!(*logp, |gl| {
                    for (r, (row, &w)) in rows.iter().zip(weights).enumerate() {
                        for &(v, p) in &row.entries {
                            gl[r * cols + v as usize] -= S::from_f64(w * p) * g[0];
                        }
                    }
                });
            }
        }
    }
}
