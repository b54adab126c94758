use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Logit assigned to masked attention entries before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask laid out as `[groups, q_len, k_len]`.
///
/// Every group is an independent attention problem: queries of group `g`
/// only see keys of group `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(groups: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), groups * q_len * k_len, "mask size mismatch");
        Self {
            groups,
            q_len,
            k_len,
            allowed,
        }
    }

    pub fn full(groups: usize, q_len: usize, k_len: usize) -> Self {
        Self::new(groups, q_len, k_len, vec![true; groups * q_len * k_len])
    }

    /// Self-attention over tokens: `i` may attend `j` iff both are valid.
    pub fn self_attention(groups: usize, len: usize, valid: &[bool]) -> Self {
        assert_eq!(valid.len(), groups * len);
        let mut allowed = Vec::with_capacity(groups * len * len);
        for g in 0..groups {
            for i in 0..len {
                for j in 0..len {
                    allowed.push(valid[g * len + i] && valid[g * len + j]);
                }
            }
        }
        Self::new(groups, len, len, allowed)
    }

    /// Causal self-attention: `i` attends `j <= i`.
    pub fn causal(groups: usize, len: usize) -> Self {
        let mut allowed = Vec::with_capacity(groups * len * len);
        for _ in 0..groups {
            for i in 0..len {
                for j in 0..len {
                    allowed.push(j <= i);
                }
            }
        }
        Self::new(groups, len, len, allowed)
    }

    /// Cross attention where every query of a group sees that group's valid keys.
    pub fn keys(groups: usize, q_len: usize, key_valid: &[bool]) -> Self {
        let k_len = key_valid.len() / groups.max(1);
        assert_eq!(key_valid.len(), groups * k_len);
        let mut allowed = Vec::with_capacity(groups * q_len * k_len);
        for g in 0..groups {
            for _ in 0..q_len {
                allowed.extend_from_slice(&key_valid[g * k_len..(g + 1) * k_len]);
            }
        }
        Self::new(groups, q_len, k_len, allowed)
    }

    #[inline]
    pub fn get(&self, g: usize, i: usize, j: usize) -> bool {
        self.allowed[(g * self.q_len + i) * self.k_len + j]
    }

    /// True when query `i` of group `g` has at least one visible key.
    pub fn row_has_key(&self, g: usize, i: usize) -> bool {
        let start = (g * self.q_len + i) * self.k_len;
        self.allowed[start..start + self.k_len].iter().any(|&a| a)
    }
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: AttentionMask,
    /// `[groups, heads, q_len, k_len]`
    weights: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaxPool(Var, Vec<usize>),
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode automatic differentiation tape over 2-D `f64` matrices.
///
/// Values are computed eagerly as nodes are appended. Calling
/// [`Graph::backward`] walks the tape from a scalar root and returns the
/// gradients of every parameter and every tracked input that influenced it.
/// The same tape may be differentiated from several roots.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape_or_broadcast(a: &Mat, b: &Mat) -> (usize, usize) {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let r = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        panic!("incompatible rows {ar} vs {br}")
    };
    let c = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        panic!("incompatible cols {ac} vs {bc}")
    };
    (r, c)
}

/// Sum `grad` down to `shape`, undoing row/column broadcasting.
fn reduce_to(grad: Mat, shape: (usize, usize)) -> Mat {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradients (inference only).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Toggle whether parameters and tracked inputs created from now on
    /// require gradients. Returns the previous setting.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Constant, false)
    }

    /// An input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        let ng = self.grad_enabled;
        self.push(value.as_standard_layout().into_owned(), Op::Input, ng)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let ng = self.grad_enabled;
        self.push(store.get(id).clone(), Op::Param(id), ng)
    }

    /// Copy of `a` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape_or_broadcast(va, vb);
        let v = (va + vb).as_standard_layout().into_owned();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape_or_broadcast(va, vb);
        let v = (va - vb).as_standard_layout().into_owned();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape_or_broadcast(va, vb);
        let v = (va * vb).as_standard_layout().into_owned();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape_or_broadcast(va, vb);
        let v = (va / vb).as_standard_layout().into_owned();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise clamp; the gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum of two same-shaped matrices. Ties route the
    /// gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let mut v = self.value(a).clone();
        Zip::from(&mut v)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Minimum(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .expect("concat_cols row mismatch")
            .as_standard_layout()
            .into_owned();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views)
            .expect("concat_rows col mismatch")
            .as_standard_layout()
            .into_owned();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice(s![.., start..end])
            .as_standard_layout()
            .into_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Rows picked by `index`; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut v = Array2::zeros((index.len(), cols));
        for (r, &i) in index.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, index.to_vec()), ng)
    }

    /// Multiply every row `i` by `keep[i]` (0 or 1), a constant row mask.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        assert_eq!(keep.len(), self.value(a).nrows());
        let m = Array2::from_shape_fn((keep.len(), 1), |(i, _)| f64::from(u8::from(keep[i])));
        let m = self.constant(m);
        self.mul(a, m)
    }

    /// Column-wise max over each group of `len` consecutive rows, skipping
    /// rows whose `valid` flag is false. Groups with no valid row pool to zero.
    pub fn masked_max_pool(&mut self, a: Var, len: usize, valid: &[bool]) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert_eq!(rows % len, 0);
        assert_eq!(valid.len(), rows);
        let groups = rows / len;
        let mut v = Array2::zeros((groups, cols));
        let mut arg = vec![usize::MAX; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = usize::MAX;
                for t in 0..len {
                    let r = g * len + t;
                    if valid[r] && x[[r, c]] > best {
                        best = x[[r, c]];
                        best_row = r;
                    }
                }
                if best_row != usize::MAX {
                    v[[g, c]] = best;
                    arg[g * cols + c] = best_row;
                }
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::MaxPool(a, arg), ng)
    }

    /// Masked scaled dot-product attention for `heads` heads.
    ///
    /// `q` is `[groups * q_len, d]`, `k` and `v` are `[groups * k_len, d]`;
    /// each head uses a contiguous `d / heads` column block. Masked logits are
    /// set to [`MASKED_LOGIT`] before the softmax. A query row with no visible
    /// key produces a zero output and zero weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        assert_eq!(d % heads, 0, "width must divide into heads");
        let AttentionMask {
            groups,
            q_len,
            k_len,
            ..
        } = mask;
        assert_eq!(qv.nrows(), groups * q_len);
        assert_eq!(kv.nrows(), groups * k_len);
        assert_eq!(vv.nrows(), groups * k_len);
        let dk = d / heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let qs = qv.as_slice().expect("standard layout");
        let ks = kv.as_slice().expect("standard layout");
        let vs = vv.as_slice().expect("standard layout");
        let mut out = vec![0.0; groups * q_len * d];
        let mut weights = vec![0.0; groups * heads * q_len * k_len];
        let mut logits = vec![0.0; k_len];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..q_len {
                    if !mask.row_has_key(g, i) {
                        continue;
                    }
                    let qrow = &qs[(g * q_len + i) * d + c0..(g * q_len + i) * d + c0 + dk];
                    let mut max = f64::NEG_INFINITY;
                    for (j, l) in logits.iter_mut().enumerate() {
                        *l = if mask.get(g, i, j) {
                            let krow = &ks[(g * k_len + j) * d + c0..(g * k_len + j) * d + c0 + dk];
                            dot(qrow, krow) * inv
                        } else {
                            MASKED_LOGIT
                        };
                        max = max.max(*l);
                    }
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let wbase = ((g * heads + h) * q_len + i) * k_len;
                    let orow = (g * q_len + i) * d + c0;
                    for j in 0..k_len {
                        let w = logits[j] / z;
                        weights[wbase + j] = w;
                        if w != 0.0 {
                            let vrow = &vs[(g * k_len + j) * d + c0..(g * k_len + j) * d + c0 + dk];
                            for (o, &x) in out[orow..orow + dk].iter_mut().zip(vrow) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Array2::from_shape_vec((groups * q_len, d), out).expect("shape");
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            mask,
            weights,
        };
        self.push(value, Op::Attention(Box::new(cache)), ng)
    }

    /// Attention weights `[groups, heads, q_len, k_len]` recorded by an
    /// [`Graph::attention`] node, with the mask that produced them.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], usize, &AttentionMask)> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some((&c.weights, c.heads, &c.mask)),
            _ => None,
        }
    }

    /// Gradients of the scalar `root` with respect to every parameter and
    /// tracked input reachable from it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        let mut leaves: HashMap<usize, Mat> = HashMap::new();
        let mut params: HashMap<ParamId, Mat> = HashMap::new();
        if !self.nodes[root.0].needs_grad {
            return Gradients { leaves, params };
        }
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => match params.get_mut(id) {
                    Some(existing) => *existing += &g,
                    None => {
                        params.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], reduce_to(g, self.shape(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], reduce_to(-g, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = (&g * self.value(*b)).as_standard_layout().into_owned();
                        accumulate(&mut grads[a.0], reduce_to(ga, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        let gb = (&g * self.value(*a)).as_standard_layout().into_owned();
                        accumulate(&mut grads[b.0], reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    if self.ng(*a) {
                        let ga = (&g / vb).as_standard_layout().into_owned();
                        accumulate(&mut grads[a.0], reduce_to(ga, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        // d(a/b)/db = -a / b^2 = -out / b
                        let gb = (-(&g * &node.value) / vb).as_standard_layout().into_owned();
                        accumulate(&mut grads[b.0], reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], g * &node.value),
                Op::Ln(a) => accumulate(&mut grads[a.0], g / self.value(*a)),
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= 0.5 / y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= sigmoid(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x < *lo || x > *hi {
                                *gv = 0.0
                            }
                        });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(va)
                        .and(vb)
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = 0.0
                            } else {
                                *ga = 0.0
                            }
                        });
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads[a.0], Array2::from_elem(self.shape(*a), s));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            let gp = g.slice(s![.., c0..c0 + w]).as_standard_layout().into_owned();
                            accumulate(&mut grads[p.0], gp);
                        }
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.ng(*p) {
                            let gp = g.slice(s![r0..r0 + h, ..]).to_owned();
                            accumulate(&mut grads[p.0], gp);
                        }
                        r0 += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Array2::zeros((r, c));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GatherRows(a, index) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Array2::zeros((r, c));
                    for (row, &src) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(row);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MaxPool(a, arg) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Array2::zeros((r, c));
                    let groups = g.nrows();
                    for gi in 0..groups {
                        for col in 0..c {
                            let src = arg[gi * c + col];
                            if src != usize::MAX {
                                ga[[src, col]] += g[[gi, col]];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv) = self.attention_backward(cache, &g);
                    if self.ng(cache.q) {
                        accumulate(&mut grads[cache.q.0], gq);
                    }
                    if self.ng(cache.k) {
                        accumulate(&mut grads[cache.k.0], gk);
                    }
                    if self.ng(cache.v) {
                        accumulate(&mut grads[cache.v.0], gv);
                    }
                }
            }
        }
        Gradients { leaves, params }
    }

    fn attention_backward(&self, c: &AttentionCache, gout: &Mat) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.ncols();
        let heads = c.heads;
        let dk = d / heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let AttentionMask {
            groups,
            q_len,
            k_len,
            ..
        } = c.mask;
        let qs = qv.as_slice().expect("layout");
        let ks = kv.as_slice().expect("layout");
        let vs = vv.as_slice().expect("layout");
        let go = gout.as_standard_layout();
        let gos = go.as_slice().expect("layout");
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gvv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; k_len];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..q_len {
                    if !c.mask.row_has_key(g, i) {
                        continue;
                    }
                    let wbase = ((g * heads + h) * q_len + i) * k_len;
                    let w = &c.weights[wbase..wbase + k_len];
                    let orow = (g * q_len + i) * d + c0;
                    let grow = &gos[orow..orow + dk];
                    let mut wdp = 0.0;
                    for j in 0..k_len {
                        if w[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = (g * k_len + j) * d + c0;
                        dp[j] = dot(grow, &vs[vrow..vrow + dk]);
                        wdp += w[j] * dp[j];
                        for (acc, &x) in gvv[vrow..vrow + dk].iter_mut().zip(grow) {
                            *acc += w[j] * x;
                        }
                    }
                    let qrow = orow;
                    for j in 0..k_len {
                        if w[j] == 0.0 {
                            continue;
                        }
                        let ds = w[j] * (dp[j] - wdp) * inv;
                        let krow = (g * k_len + j) * d + c0;
                        for t in 0..dk {
                            gq[qrow + t] += ds * ks[krow + t];
                            gk[krow + t] += ds * qs[qrow + t];
                        }
                    }
                }
            }
        }
        (
            Array2::from_shape_vec(qv.dim(), gq).expect("shape"),
            Array2::from_shape_vec(kv.dim(), gk).expect("shape"),
            Array2::from_shape_vec(vv.dim(), gvv).expect("shape"),
        )
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Mat>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    /// Gradient with respect to an [`Graph::input`] leaf. `None` means the
    /// root does not depend on it at all.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
