//! Reverse-mode autodiff on f64 ndarrays.
//!
//! A `Graph` is a define-by-run tape: every op evaluates eagerly and records
//! enough to replay the chain rule in reverse. All values are `ArrayD<f64>`;
//! scalars are 0-d arrays, vectors 1-d, matrices 2-d. Shape mismatches are
//! programming errors and panic. Model parameters live in a `ParamStore` and
//! enter the graph as named leaves; `backward` returns gradients keyed by
//! parameter name.

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::collections::{BTreeMap, HashMap};

pub type NodeId = usize;
pub type Gradients = BTreeMap<String, ArrayD<f64>>;

/// Named parameter arrays in stable creation order. Creation order is the
/// canonical iteration order for init and optimizer state, so runs with the
/// same seed touch the same bytes in the same order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Names in creation order.
    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    /// Named leaf; the name lives in `Graph::param_leaves`.
    Param,
    Add,
    Sub,
    Mul,
    AddConst,
    ScaleConst(f64),
    AddConstArr,
    MulConstArr(ArrayD<f64>),
    MatMul,
    Transpose,
    /// Matrix [n,d] plus a broadcast row vector [d].
    AddRow,
    /// Elementwise product of an array with a 0-d scalar node.
    MulScalar,
    Sum,
    Reshape(IxDyn),
    SliceRows {
        start: usize,
    },
    SliceCols {
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(Vec<usize>),
    /// Stack 0-d scalar nodes into a 1-d vector.
    StackScalars,
    /// Softmax over the last axis (1-d: whole vector; 2-d: each row).
    SoftmaxRows,
    /// log(sum(exp(row))) per row: [n,c] -> [n], or [c] -> scalar.
    RowLogSumExp,
    /// Parents: x [n,d], gamma [d], beta [d]. Per-row normalization.
    LayerNorm {
        eps: f64,
    },
    /// Rows scaled to unit L2 norm with an epsilon added to the norm.
    NormalizeRows {
        eps: f64,
    },
    Gelu,
    Sigmoid,
    Softplus,
    Ln,
    Sqrt,
    Recip,
    Abs,
    Clamp {
        lo: f64,
        hi: f64,
    },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: ArrayD<f64>,
}

/// Result of a backward pass: per-parameter gradients plus raw per-node
/// gradients (handy for checking gradients w.r.t. non-parameter leaves).
pub struct BackwardResult {
    pub params: Gradients,
    node_grads: Vec<Option<ArrayD<f64>>>,
}

impl BackwardResult {
    pub fn node_grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.node_grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<String, NodeId>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d array")
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over the last axis, returned with the same shape.
fn softmax_last(v: &ArrayD<f64>) -> ArrayD<f64> {
    match v.ndim() {
        1 => {
            let x = v.view().into_dimensionality::<Ix1>().unwrap();
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e = x.mapv(|t| (t - m).exp());
            let s = e.sum();
            (e / s).into_dyn()
        }
        2 => {
            let x = as2(v);
            let mut out = x.to_owned();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|t| (t - m).exp());
                let s = row.sum();
                row.mapv_inplace(|t| t / s);
            }
            out.into_dyn()
        }
        d => panic!("softmax expects 1-d or 2-d input, got {d}-d"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: ArrayD<f64>) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    /// Named parameter leaf; repeated calls for one name share a node so
    /// gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.param_leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Param, vec![], store.get(name).clone());
        self.param_leaves.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            va + vb
        };
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
            assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
            va - vb
        };
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
            assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
            va * vb
        };
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value + c;
        self.push(Op::AddConst, vec![a], v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(Op::ScaleConst(c), vec![a], v)
    }

    pub fn add_const_arr(&mut self, a: NodeId, c: ArrayD<f64>) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), c.shape(), "add_const_arr shape");
        let v = &self.nodes[a].value + &c;
        self.push(Op::AddConstArr, vec![a], v)
    }

    pub fn mul_const_arr(&mut self, a: NodeId, c: ArrayD<f64>) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), c.shape(), "mul_const_arr shape");
        let v = &self.nodes[a].value * &c;
        self.push(Op::MulConstArr(c), vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (as2(&self.nodes[a].value), as2(&self.nodes[b].value));
            assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim mismatch");
            va.dot(&vb).into_dyn()
        };
        self.push(Op::MatMul, vec![a, b], v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(&self.nodes[a].value).t().to_owned().into_dyn();
        self.push(Op::Transpose, vec![a], v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = {
            let m = as2(&self.nodes[a].value);
            let r = self.nodes[row]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("add_row: bias must be 1-d");
            assert_eq!(m.ncols(), r.len(), "add_row width mismatch");
            (&m + &r).into_dyn()
        };
        self.push(Op::AddRow, vec![a, row], v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = &self.nodes[a].value * sv;
        self.push(Op::MulScalar, vec![a, s], v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = ndarray::arr0(self.nodes[a].value.sum()).into_dyn();
        self.push(Op::Sum, vec![a], v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let orig = IxDyn(self.nodes[a].value.shape());
        let v = self.nodes[a]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(Op::Reshape(orig), vec![a], v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = {
            let m = as2(&self.nodes[a].value);
            assert!(start + len <= m.nrows(), "slice_rows out of range");
            m.slice(ndarray::s![start..start + len, ..]).to_owned().into_dyn()
        };
        self.push(Op::SliceRows { start }, vec![a], v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = {
            let m = as2(&self.nodes[a].value);
            assert!(start + len <= m.ncols(), "slice_cols out of range");
            m.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn()
        };
        self.push(Op::SliceCols { start }, vec![a], v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.nodes[p].value)).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        self.push(Op::ConcatRows(sizes), parts.to_vec(), v.into_dyn())
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.nodes[p].value)).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        self.push(Op::ConcatCols(sizes), parts.to_vec(), v.into_dyn())
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let v = {
            let m = as2(&self.nodes[a].value);
            let mut out = ndarray::Array2::<f64>::zeros((rows.len(), m.ncols()));
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).assign(&m.row(r));
            }
            out.into_dyn()
        };
        self.push(Op::GatherRows(rows.to_vec()), vec![a], v)
    }

    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack_scalars: empty");
        let v: Vec<f64> = parts.iter().map(|&p| self.scalar(p)).collect();
        self.push(
            Op::StackScalars,
            parts.to_vec(),
            ndarray::Array1::from(v).into_dyn(),
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_last(&self.nodes[a].value);
        self.push(Op::SoftmaxRows, vec![a], v)
    }

    pub fn row_logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = match self.nodes[a].value.ndim() {
            1 => {
                let x = self.nodes[a].value.view().into_dimensionality::<Ix1>().unwrap();
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ndarray::arr0(m + x.mapv(|t| (t - m).exp()).sum().ln()).into_dyn()
            }
            2 => {
                let x = as2(&self.nodes[a].value);
                let mut out = ndarray::Array1::<f64>::zeros(x.nrows());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    out[i] = m + row.mapv(|t| (t - m).exp()).sum().ln();
                }
                out.into_dyn()
            }
            d => panic!("row_logsumexp expects 1-d or 2-d, got {d}-d"),
        };
        self.push(Op::RowLogSumExp, vec![a], v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = {
            let m = as2(&self.nodes[x].value);
            let g = self.nodes[gamma].value.view().into_dimensionality::<Ix1>().unwrap();
            let b = self.nodes[beta].value.view().into_dimensionality::<Ix1>().unwrap();
            assert_eq!(m.ncols(), g.len(), "layer_norm gamma width");
            assert_eq!(m.ncols(), b.len(), "layer_norm beta width");
            let mut out = m.to_owned();
            for mut row in out.rows_mut() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|t| (t - mean) * (t - mean)).mean().unwrap();
                let s = (var + eps).sqrt();
                row.mapv_inplace(|t| (t - mean) / s);
            }
            ((&out * &g) + &b).into_dyn()
        };
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], v)
    }

    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = {
            let m = as2(&self.nodes[a].value);
            let mut out = m.to_owned();
            for mut row in out.rows_mut() {
                let norm = row.mapv(|t| t * t).sum().sqrt();
                row.mapv_inplace(|t| t / (norm + eps));
            }
            out.into_dyn()
        };
        self.push(Op::NormalizeRows { eps }, vec![a], v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu);
        self.push(Op::Gelu, vec![a], v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid_stable);
        self.push(Op::Sigmoid, vec![a], v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(softplus_stable);
        self.push(Op::Softplus, vec![a], v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        self.push(Op::Ln, vec![a], v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::recip);
        self.push(Op::Recip, vec![a], v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        self.push(Op::Abs, vec![a], v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|t| t.clamp(lo, hi));
        self.push(Op::Clamp { lo, hi }, vec![a], v)
    }

    /// x @ w + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mm = self.matmul(x, w);
        self.add_row(mm, b)
    }

    /// 1 - x.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let n = self.scale(a, -1.0);
        self.add_const(n, 1.0)
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: NodeId) -> BackwardResult {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));

        for k in (0..=root).rev() {
            let node = &self.nodes[k];
            if matches!(node.op, Op::Constant | Op::Param) {
                continue; // leaves keep their accumulated gradient
            }
            let g = match grads[k].take() {
                Some(g) => g,
                None => continue,
            };
            let parent_grads: Vec<(NodeId, ArrayD<f64>)> = match &node.op {
                Op::Constant | Op::Param => vec![],
                Op::Add => vec![(node.parents[0], g.clone()), (node.parents[1], g.clone())],
                Op::Sub => vec![
                    (node.parents[0], g.clone()),
                    (node.parents[1], g.mapv(|t| -t)),
                ],
                Op::Mul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    vec![
                        (a, &g * &self.nodes[b].value),
                        (b, &g * &self.nodes[a].value),
                    ]
                }
                Op::AddConst => vec![(node.parents[0], g.clone())],
                Op::ScaleConst(c) => vec![(node.parents[0], &g * *c)],
                Op::AddConstArr => vec![(node.parents[0], g.clone())],
                Op::MulConstArr(c) => vec![(node.parents[0], &g * c)],
                Op::MatMul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let gm = as2(&g);
                    let va = as2(&self.nodes[a].value);
                    let vb = as2(&self.nodes[b].value);
                    vec![
                        (a, gm.dot(&vb.t()).into_dyn()),
                        (b, va.t().dot(&gm).into_dyn()),
                    ]
                }
                Op::Transpose => vec![(node.parents[0], as2(&g).t().to_owned().into_dyn())],
                Op::AddRow => {
                    let gm = as2(&g);
                    vec![
                        (node.parents[0], g.clone()),
                        (node.parents[1], gm.sum_axis(Axis(0)).into_dyn()),
                    ]
                }
                Op::MulScalar => {
                    let (a, s) = (node.parents[0], node.parents[1]);
                    let sv = *self.nodes[s].value.iter().next().unwrap();
                    let ga = &g * sv;
                    let gs = (&g * &self.nodes[a].value).sum();
                    vec![(a, ga), (s, ndarray::arr0(gs).into_dyn())]
                }
                Op::Sum => {
                    let gv = *g.iter().next().unwrap();
                    vec![(
                        node.parents[0],
                        ArrayD::from_elem(self.nodes[node.parents[0]].value.raw_dim(), gv),
                    )]
                }
                Op::Reshape(orig) => vec![(
                    node.parents[0],
                    g.as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(orig.clone())
                        .unwrap(),
                )],
                Op::SliceRows { start } => {
                    let p = node.parents[0];
                    let mut gp = ArrayD::zeros(self.nodes[p].value.raw_dim());
                    {
                        let mut gp2 = gp.view_mut().into_dimensionality::<Ix2>().unwrap();
                        let gs = as2(&g);
                        gp2.slice_mut(ndarray::s![*start..*start + gs.nrows(), ..])
                            .assign(&gs);
                    }
                    vec![(p, gp)]
                }
                Op::SliceCols { start } => {
                    let p = node.parents[0];
                    let mut gp = ArrayD::zeros(self.nodes[p].value.raw_dim());
                    {
                        let mut gp2 = gp.view_mut().into_dimensionality::<Ix2>().unwrap();
                        let gs = as2(&g);
                        gp2.slice_mut(ndarray::s![.., *start..*start + gs.ncols()])
                            .assign(&gs);
                    }
                    vec![(p, gp)]
                }
                Op::ConcatRows(sizes) => {
                    let gm = as2(&g);
                    let mut out = Vec::with_capacity(sizes.len());
                    let mut at = 0;
                    for (i, &sz) in sizes.iter().enumerate() {
                        out.push((
                            node.parents[i],
                            gm.slice(ndarray::s![at..at + sz, ..]).to_owned().into_dyn(),
                        ));
                        at += sz;
                    }
                    out
                }
                Op::ConcatCols(sizes) => {
                    let gm = as2(&g);
                    let mut out = Vec::with_capacity(sizes.len());
                    let mut at = 0;
                    for (i, &sz) in sizes.iter().enumerate() {
                        out.push((
                            node.parents[i],
                            gm.slice(ndarray::s![.., at..at + sz]).to_owned().into_dyn(),
                        ));
                        at += sz;
                    }
                    out
                }
                Op::GatherRows(rows) => {
                    let p = node.parents[0];
                    let mut gp = ArrayD::zeros(self.nodes[p].value.raw_dim());
                    {
                        let mut gp2 = gp.view_mut().into_dimensionality::<Ix2>().unwrap();
                        let gs = as2(&g);
                        for (i, &r) in rows.iter().enumerate() {
                            let updated = &gp2.row(r) + &gs.row(i);
                            gp2.row_mut(r).assign(&updated);
                        }
                    }
                    vec![(p, gp)]
                }
                Op::StackScalars => {
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    node.parents
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| (p, ndarray::arr0(gv[i]).into_dyn()))
                        .collect()
                }
                Op::SoftmaxRows => {
                    let s = &node.value;
                    let gp = match s.ndim() {
                        1 => {
                            let sv = s.view().into_dimensionality::<Ix1>().unwrap();
                            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                            let dot = (&sv * &gv).sum();
                            ((&gv - dot) * &sv).into_dyn()
                        }
                        _ => {
                            let sv = as2(s);
                            let gv = as2(&g);
                            let mut out = gv.to_owned();
                            for (mut orow, (srow, grow)) in out
                                .rows_mut()
                                .into_iter()
                                .zip(sv.rows().into_iter().zip(gv.rows()))
                            {
                                let dot = srow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum::<f64>();
                                for (o, (s, gr)) in
                                    orow.iter_mut().zip(srow.iter().zip(grow.iter()))
                                {
                                    *o = (gr - dot) * s;
                                }
                            }
                            out.into_dyn()
                        }
                    };
                    vec![(node.parents[0], gp)]
                }
                Op::RowLogSumExp => {
                    let p = node.parents[0];
                    let sm = softmax_last(&self.nodes[p].value);
                    let gp = match sm.ndim() {
                        1 => {
                            let gv = *g.iter().next().unwrap();
                            &sm * gv
                        }
                        _ => {
                            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                            let mut out = as2(&sm).to_owned();
                            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                                row.mapv_inplace(|t| t * gv[i]);
                            }
                            out.into_dyn()
                        }
                    };
                    vec![(p, gp)]
                }
                Op::LayerNorm { eps } => {
                    let (xid, gid, bid) = (node.parents[0], node.parents[1], node.parents[2]);
                    let x = as2(&self.nodes[xid].value);
                    let gamma = self.nodes[gid]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let gout = as2(&g);
                    let d = x.ncols() as f64;
                    let mut gx = ndarray::Array2::<f64>::zeros(x.raw_dim());
                    let mut ggamma = ndarray::Array1::<f64>::zeros(gamma.len());
                    let mut gbeta = ndarray::Array1::<f64>::zeros(gamma.len());
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|t| (t - mean) * (t - mean)).mean().unwrap();
                        let s = (var + eps).sqrt();
                        let xhat = row.mapv(|t| (t - mean) / s);
                        let grow = gout.row(i);
                        let gg = &grow * &gamma;
                        let m1 = gg.mean().unwrap();
                        let m2 = (&gg * &xhat).mean().unwrap();
                        let gxr = xhat.mapv(|h| -h * m2) + &gg - m1;
                        gx.row_mut(i).assign(&(gxr / s));
                        ggamma = ggamma + &(&grow * &xhat);
                        gbeta = gbeta + &grow;
                        let _ = d;
                    }
                    vec![
                        (xid, gx.into_dyn()),
                        (gid, ggamma.into_dyn()),
                        (bid, gbeta.into_dyn()),
                    ]
                }
                Op::NormalizeRows { eps } => {
                    let p = node.parents[0];
                    let x = as2(&self.nodes[p].value);
                    let gout = as2(&g);
                    let mut gx = ndarray::Array2::<f64>::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let r = row.mapv(|t| t * t).sum().sqrt();
                        let denom = r + eps;
                        let grow = gout.row(i);
                        let xg: f64 = row.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        // y = x/(r+eps); dy/dx = I/(r+eps) - x x^T / (r (r+eps)^2)
                        let coef = if r > 0.0 { xg / (r * denom * denom) } else { 0.0 };
                        let gxr = grow.mapv(|t| t / denom) - row.mapv(|t| t * coef);
                        gx.row_mut(i).assign(&gxr);
                    }
                    vec![(p, gx.into_dyn())]
                }
                Op::Gelu => vec![(
                    node.parents[0],
                    &g * &self.nodes[node.parents[0]].value.mapv(gelu_grad),
                )],
                Op::Sigmoid => {
                    let y = &node.value;
                    vec![(node.parents[0], &g * &(y * &y.mapv(|t| 1.0 - t)))]
                }
                Op::Softplus => vec![(
                    node.parents[0],
                    &g * &self.nodes[node.parents[0]].value.mapv(sigmoid_stable),
                )],
                Op::Ln => vec![(
                    node.parents[0],
                    &g / &self.nodes[node.parents[0]].value,
                )],
                Op::Sqrt => {
                    let y = &node.value;
                    vec![(node.parents[0], &g * &y.mapv(|t| 0.5 / t))]
                }
                Op::Recip => {
                    let y = &node.value;
                    vec![(node.parents[0], &g * &y.mapv(|t| -t * t))]
                }
                Op::Abs => vec![(
                    node.parents[0],
                    &g * &self.nodes[node.parents[0]].value.mapv(|t| {
                        if t > 0.0 {
                            1.0
                        } else if t < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                )],
                Op::Clamp { lo, hi } => vec![(
                    node.parents[0],
                    &g * &self.nodes[node.parents[0]]
                        .value
                        .mapv(|t| if t >= *lo && t <= *hi { 1.0 } else { 0.0 }),
                )],
            };
            for (p, pg) in parent_grads {
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }

        let mut params = Gradients::new();
        for (name, &id) in &self.param_leaves {
            if let Some(g) = &grads[id] {
                params.insert(name.clone(), g.clone());
            }
        }
        BackwardResult {
            params,
            node_grads: grads,
        }
    }
}

/// Central-difference numerical gradient of `f` w.r.t. one scalar entry of a
/// named parameter. `f` must rebuild its computation from the store each call.
pub fn numerical_grad<F>(store: &ParamStore, name: &str, flat_idx: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut plus = store.clone();
    plus.get_mut(name).as_slice_mut().unwrap()[flat_idx] += h;
    let mut minus = store.clone();
    minus.get_mut(name).as_slice_mut().unwrap()[flat_idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Worst relative error between analytic and central-difference gradients,
/// checked entry by entry over every parameter in the store. The relative
/// error for a pair (a, n) is |a - n| / max(|a|, |n|) when either magnitude
/// exceeds `floor`, else 0.
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_idx: usize,
    pub checked: usize,
}

pub fn check_gradients<F>(
    store: &ParamStore,
    analytic: &Gradients,
    h: f64,
    floor: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_idx: 0,
        checked: 0,
    };
    for (name, value) in store.iter() {
        let ga = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
        // accumulated gradients are not always standard layout; logical order
        // matches the store's memory order because params are created dense
        let ga: Vec<f64> = ga.iter().copied().collect();
        for idx in 0..value.len() {
            let gn = numerical_grad(store, name, idx, h, &mut f);
            let a = ga[idx];
            let denom = a.abs().max(gn.abs());
            let rel = if denom > floor { (a - gn).abs() / denom } else { 0.0 };
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = name.to_string();
                report.worst_idx = idx;
            }
        }
    }
    report
}
