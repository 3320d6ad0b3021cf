use std::borrow::Cow;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::error::{NnError, Result};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    DivScalar { a: Var, s: Var },
    Scale(Var, f64),
    // Adds a constant (mask) to its input; gradient is the identity.
    Passthrough(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize { a: Var, norms: Vec<f64> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout { a: Var, mask: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. Inputs are never mutated.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves keep
/// their gradient; intermediate buffers are released during the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameters of one [`ParamStore`] bound into a graph as leaves.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.index_of(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Gradient of each parameter, aligned with the store order.
    pub fn grads<'g>(&self, grads: &'g Gradients) -> Vec<Option<&'g [f64]>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    c_shape: (usize, usize),
) {
    let a = ArrayView2::from_shape(a_shape, a).expect("lhs shape");
    let b = ArrayView2::from_shape(b_shape, b).expect("rhs shape");
    let mut c = ArrayViewMut2::from_shape(c_shape, c).expect("out shape");
    let a = if trans_a { a.t() } else { a };
    let b = if trans_b { b.t() } else { b };
    general_mat_mul(1.0, &a, &b, 1.0, &mut c);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through one `exp_m1`, noticeably cheaper than libm's `tanh`.
fn tanh(u: f64) -> f64 {
    if u > 20.0 {
        return 1.0;
    }
    let e = (2.0 * u).exp_m1();
    e / (e + 2.0)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.to_vec()).expect("node shape is consistent")
    }

    /// Leaf owning its data. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(NnError::InvalidTensor(format!(
                "leaf {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// Leaf borrowing a tensor; viewed as `rows() x cols()`.
    pub fn tensor(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), Op::Leaf, requires_grad)
    }

    /// Binds every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &'a ParamStore, requires_grad: bool) -> BoundParams<'a> {
        let vars = (0..store.len())
            .map(|i| self.tensor(store.tensor(i), requires_grad))
            .collect();
        BoundParams { store, vars }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NnError::ShapeMismatch {
                op,
                lhs: vec![sa.0, sa.1],
                rhs: vec![sb.0, sb.1],
            });
        }
        Ok(sa)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (inner, out_cols) = if trans_b { (bc, br) } else { (br, bc) };
        if ac != inner {
            return Err(NnError::ShapeMismatch {
                op: if trans_b { "matmul_t" } else { "matmul" },
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        let mut out = vec![0.0; ar * out_cols];
        gemm(
            self.value(a),
            (ar, ac),
            false,
            self.value(b),
            (br, bc),
            trans_b,
            &mut out,
            (ar, out_cols),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), ar, out_cols, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b), ng))
    }

    /// Broadcast-adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(NnError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![rr, rc],
            });
        }
        let bias = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|x| x.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow { a, row }, ng))
    }

    /// Divides every element of `a` by the `1 x 1` node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(s) != (1, 1) {
            let (sr, sc) = self.shape(s);
            return Err(NnError::ShapeMismatch {
                op: "div_scalar",
                lhs: vec![r, c],
                rhs: vec![sr, sc],
            });
        }
        let d = self.scalar(s);
        let out = self.value(a).iter().map(|x| x / d).collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(Cow::Owned(out), r, c, Op::DivScalar { a, s }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Scale(a, factor), ng)
    }

    /// Additive mask: positions where `masked[i]` is true become `-inf`.
    pub fn add_mask(&mut self, a: Var, masked: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if masked.len() != r * c {
            return Err(NnError::ShapeMismatch {
                op: "add_mask",
                lhs: vec![r, c],
                rhs: vec![masked.len()],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(masked)
            .map(|(&x, &m)| if m { f64::NEG_INFINITY } else { x })
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Passthrough(a), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_K * x * x * x))))
            .collect();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Log(a), ng)
    }

    /// Row-wise softmax with max subtraction. `-inf` entries are masked out;
    /// a row with no finite entry is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for (row, (x, y)) in self.value(a).chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            softmax_row(x, y).ok_or(NnError::AllMasked { row })?;
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Softmax(a), ng))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                let (pr, pc) = self.shape(p);
                return Err(NnError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: vec![pr, pc],
                });
            }
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gamma), self.value(beta));
        for (i, x) in self.value(a).chunks_exact(c).enumerate() {
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (x[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[a, gamma, beta]);
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (tr, c) = self.shape(table);
        if ids.is_empty() {
            return Err(NnError::InvalidTensor("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        let t = self.value(table);
        for &id in ids {
            if id >= tr {
                return Err(NnError::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: tr,
                });
            }
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            c,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NnError::InvalidTensor("empty concat".into()))?;
        let c = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(NnError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![self.shape(first).0, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(Cow::Owned(out), rows, c, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NnError::InvalidTensor("empty concat".into()))?;
        let r = self.shape(first).0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r, self.shape(first).1],
                    rhs: vec![pr, pc],
                });
            }
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Cow::Owned(out), r, c, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(NnError::OutOfRange {
                what: "row slice",
                index: start + len,
                size: r,
            });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), len, c, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(NnError::OutOfRange {
                what: "column slice",
                index: start + len,
                size: c,
            });
        }
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols { a, start }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), c, r, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Mean(a), ng)
    }

    /// Scales every row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for (i, x) in self.value(a).chunks_exact(c).enumerate() {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(NnError::NonFinite(format!("l2_normalize: row {i} has norm {n}")));
            }
            norms.push(n);
            out.extend(x.iter().map(|v| v / n));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), r, c, Op::L2Normalize { a, norms }, ng))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    /// `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.shape(logits);
        if targets.len() != r {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, v],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, (x, p)) in self.value(logits).chunks_exact(v).zip(probs.chunks_exact_mut(v)).enumerate() {
            let Some(t) = targets[i] else { continue };
            if t >= v {
                return Err(NnError::OutOfRange {
                    what: "vocabulary",
                    index: t,
                    size: v,
                });
            }
            softmax_row(x, p).ok_or(NnError::AllMasked { row: i })?;
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - x[t];
            count += 1;
        }
        if count == 0 {
            return Err(NnError::AllIgnored);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Cow::Owned(vec![total / count as f64]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Dropout { a, mask }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(NnError::ShapeMismatch {
                op: "backward",
                lhs: vec![r, c],
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'a>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                if let Some(ga) = self.grad_buf(*a, grads) {
                    // dA = dC · Bᵀ (or dC · B when C = A·Bᵀ)
                    gemm(dy, (rows, cols), false, self.value(*b), (br, bc), !trans_b, ga, (ar, ac));
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    if *trans_b {
                        gemm(dy, (rows, cols), true, self.value(*a), (ar, ac), false, gb, (br, bc));
                    } else {
                        gemm(self.value(*a), (ar, ac), true, dy, (rows, cols), false, gb, (br, bc));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |g| axpy(g, dy, 1.0));
                self.accumulate(*b, grads, |g| axpy(g, dy, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, |g| axpy(g, dy, 1.0));
                self.accumulate(*b, grads, |g| axpy(g, dy, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(*a, grads, |g| {
                    g.iter_mut().zip(dy).zip(vb).for_each(|((g, d), y)| *g += d * y)
                });
                self.accumulate(*b, grads, |g| {
                    g.iter_mut().zip(dy).zip(va).for_each(|((g, d), x)| *g += d * x)
                });
            }
            Op::AddRow { a, row } => {
                self.accumulate(*a, grads, |g| axpy(g, dy, 1.0));
                self.accumulate(*row, grads, |g| {
                    for d in dy.chunks_exact(cols) {
                        axpy(g, d, 1.0);
                    }
                });
            }
            Op::DivScalar { a, s } => {
                let d = self.scalar(*s);
                self.accumulate(*a, grads, |g| axpy(g, dy, 1.0 / d));
                let va = self.value(*a);
                self.accumulate(*s, grads, |g| {
                    g[0] -= dy.iter().zip(va).map(|(d_, x)| d_ * x).sum::<f64>() / (d * d)
                });
            }
            Op::Scale(a, f) => self.accumulate(*a, grads, |g| axpy(g, dy, *f)),
            Op::Passthrough(a) => self.accumulate(*a, grads, |g| axpy(g, dy, 1.0)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accumulate(*a, grads, |g| {
                    for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                        let t = tanh(GELU_C * (x + GELU_K * x * x * x));
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.accumulate(*a, grads, |g| {
                    g.iter_mut().zip(dy).zip(y.iter()).for_each(|((g, d), y)| *g += d * y)
                });
            }
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(*a, grads, |g| {
                    g.iter_mut().zip(dy).zip(x).for_each(|((g, d), x)| *g += d / x)
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                self.accumulate(*a, grads, |g| {
                    for ((g, d), y) in g.chunks_exact_mut(cols).zip(dy.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                        let dot: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                        for j in 0..cols {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma);
                self.accumulate(*gamma, grads, |g| {
                    for (d, h) in dy.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            g[j] += d[j] * h[j];
                        }
                    }
                });
                self.accumulate(*beta, grads, |g| {
                    for d in dy.chunks_exact(cols) {
                        axpy(g, d, 1.0);
                    }
                });
                self.accumulate(*a, grads, |g| {
                    let n = cols as f64;
                    for (i, ((g, d), h)) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(xhat.chunks_exact(cols))
                        .enumerate()
                    {
                        let dh: Vec<f64> = d.iter().zip(gm).map(|(d, g)| d * g).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            g[j] += rstd[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                self.accumulate(*table, grads, |g| {
                    for (d, &id) in dy.chunks_exact(cols).zip(ids) {
                        axpy(&mut g[id * cols..(id + 1) * cols], d, 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(p, grads, |g| axpy(g, &dy[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    self.accumulate(p, grads, |g| {
                        for (gr, d) in g.chunks_exact_mut(pc).zip(dy.chunks_exact(cols)) {
                            axpy(gr, &d[col..col + pc], 1.0);
                        }
                    });
                    col += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let c = cols;
                self.accumulate(*a, grads, |g| axpy(&mut g[start * c..(start + rows) * c], dy, 1.0));
            }
            Op::SliceCols { a, start } => {
                let ac = self.shape(*a).1;
                self.accumulate(*a, grads, |g| {
                    for (gr, d) in g.chunks_exact_mut(ac).zip(dy.chunks_exact(cols)) {
                        axpy(&mut gr[*start..start + cols], d, 1.0);
                    }
                });
            }
            Op::Transpose(a) => {
                // node is cols_a x rows_a
                self.accumulate(*a, grads, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j * rows + i] += dy[i * cols + j];
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(*a, grads, |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(*a, grads, |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::L2Normalize { a, norms } => {
                let y = &node.value;
                self.accumulate(*a, grads, |g| {
                    for (((g, d), y), n) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                        .zip(norms)
                    {
                        let dot: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                        for j in 0..cols {
                            g[j] += (d[j] - y[j] * dot) / n;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits).1;
                let scale = dy[0] / *count as f64;
                self.accumulate(*logits, grads, |g| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut g[i * v..(i + 1) * v];
                        axpy(row, &probs[i * v..(i + 1) * v], scale);
                        row[t] -= scale;
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate(*a, grads, |g| {
                    g.iter_mut().zip(dy).zip(mask).for_each(|((g, d), m)| *g += d * m)
                });
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.grad_buf(v, grads) {
            f(g);
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Writes the softmax of `x` into `y`; `None` when every entry is `-inf`.
fn softmax_row(x: &[f64], y: &mut [f64]) -> Option<()> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for (y, &x) in y.iter_mut().zip(x) {
        *y = (x - max).exp();
        total += *y;
    }
    y.iter_mut().for_each(|y| *y /= total);
    Some(())
}
