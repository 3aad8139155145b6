//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with
//! its output value. [`Tape::backward`] walks the record in reverse and
//! accumulates the gradient of a scalar root into every parameter leaf
//! that was marked trainable. Nodes that cannot reach a trainable leaf
//! are skipped on the way back.

use super::gaussian::sym_kl_slices;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter `{name}`");
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Per-parameter gradients, indexed like the store that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// `self += scale · other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_scaled(t, scale),
                    None => {
                        let mut c = t.clone();
                        c.scale_in_place(scale);
                        *mine = Some(c);
                    }
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// 1-D convolution geometry over the row (time) axis. Output length
/// equals input length; `pad_left` zero rows precede the input and
/// `dilation·(kernel−1) − pad_left` follow it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub pad_left: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            dilation,
            pad_left: dilation * (kernel - 1) / 2,
        }
    }

    pub fn causal(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            dilation,
            pad_left: dilation * (kernel - 1),
        }
    }

    #[inline]
    fn source_row(&self, t: usize, tap: usize, len: usize) -> Option<usize> {
        let pos = t as isize - self.pad_left as isize + (tap * self.dilation) as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Conv1d { x: Var, w: Var, b: Var, spec: ConvSpec },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var, usize),
    Mse { pred: Var, target: Tensor },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Tensor },
    SymKld { mp: Var, lp: Var, mq: Var, lq: Var },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    trainable: &'a [bool],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Tape<'a> {
    /// `trainable[i]` marks whether parameter `i` receives a gradient.
    pub fn new(store: &'a ParamStore, trainable: &'a [bool]) -> Self {
        assert_eq!(store.len(), trainable.len(), "trainable mask length");
        Self {
            store,
            trainable,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param(id), self.trainable[id.0]);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(av.cols(), bv.cols(), "bias width");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -1.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Gradient passes where `lo ≤ x ≤ hi`, zero elsewhere.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// `x: T × C_in`, `w: (K·C_in) × C_out`, `b: 1 × C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.rows(), spec.kernel * xv.cols(), "conv weight rows");
        let cols = im2col(xv, spec);
        let mut value = cols.matmul(wv);
        let bv = self.value(b);
        assert_eq!(bv.shape(), (1, wv.cols()), "conv bias shape");
        for r in 0..value.rows() {
            for (o, bb) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Conv1d { x, w, b, spec }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut value = Tensor::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(value, Op::Gather { table, ids }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).concat_cols(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let value = self.value(a).repeat_rows(times);
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a, times), rg)
    }

    /// `mean + exp(½·log_var) ⊙ noise`.
    pub fn reparam(&mut self, mean: Var, log_var: Var, noise: Tensor) -> Var {
        let half = self.scale(log_var, 0.5);
        let std = self.exp(half);
        let eps = self.constant(noise);
        let spread = self.mul(std, eps);
        self.add(mean, spread)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape");
        let n = pv.len() as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Row-averaged cross-entropy of softmax(logits) against class ids.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "xent target count");
        let probs = softmax_rows(lv);
        let mut acc = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            acc += -log_softmax_at(lv.row(r), t);
        }
        let value = Tensor::scalar(acc / targets.len() as f64);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Row-averaged symmetrized KL between two row-aligned diagonal
    /// Gaussian sequences given as mean / log-variance matrices.
    pub fn sym_kld(&mut self, mp: Var, lp: Var, mq: Var, lq: Var) -> Var {
        let shape = self.value(mp).shape();
        for v in [lp, mq, lq] {
            assert_eq!(self.value(v).shape(), shape, "sym_kld shape");
        }
        let rows = shape.0;
        let mut acc = 0.0;
        for r in 0..rows {
            acc += sym_kl_slices(
                self.value(mp).row(r),
                self.value(lp).row(r),
                self.value(mq).row(r),
                self.value(lq).row(r),
            );
        }
        let rg = self.rg(mp) || self.rg(lp) || self.rg(mq) || self.rg(lq);
        self.push(
            Tensor::scalar(acc / rows as f64),
            Op::SymKld { mp, lp, mq, lq },
            rg,
        )
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        let mut rg = false;
        for &(v, w) in terms {
            s += w * self.value(v).item();
            rg |= self.rg(v);
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Gradient of the scalar `root` with respect to every trainable
    /// parameter that was bound on this tape.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut out = Gradients::empty(self.store.len());
        if !self.rg(root) {
            return out;
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        self.acc_with(&mut grads, *a, |ga| g.matmul_nt_into(bv, ga));
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        self.acc_with(&mut grads, *b, |gb| av.matmul_tn_into(&g, gb));
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.rg(*bias) {
                        let cs = g.col_sums();
                        self.acc_with(&mut grads, *bias, |gb| gb.add_assign(&cs));
                    }
                    self.acc_with(&mut grads, *a, |ga| ga.add_assign(&g));
                }
                Op::Add(a, b) => {
                    self.acc_with(&mut grads, *a, |ga| ga.add_assign(&g));
                    self.acc_with(&mut grads, *b, |gb| gb.add_assign(&g));
                }
                Op::Sub(a, b) => {
                    self.acc_with(&mut grads, *a, |ga| ga.add_assign(&g));
                    self.acc_with(&mut grads, *b, |gb| gb.add_scaled(&g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc_with(&mut grads, *a, |ga| {
                        for ((x, gg), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *x += gg * y;
                        }
                    });
                    self.acc_with(&mut grads, *b, |gb| {
                        for ((x, gg), y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *x += gg * y;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    self.acc_with(&mut grads, *a, |ga| ga.add_scaled(&g, *s));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    self.acc_with(&mut grads, *a, |ga| {
                        for ((x, gg), yy) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                            *x += gg * (1.0 - yy * yy);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    self.acc_with(&mut grads, *a, |ga| {
                        for ((x, gg), yy) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                            *x += gg * yy;
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let xin = self.value(*a);
                    self.acc_with(&mut grads, *a, |ga| {
                        for ((x, gg), v) in ga.data_mut().iter_mut().zip(g.data()).zip(xin.data()) {
                            if *v >= *lo && *v <= *hi {
                                *x += gg;
                            }
                        }
                    });
                }
                Op::Conv1d { x, w, b, spec } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.rg(*b) {
                        let cs = g.col_sums();
                        self.acc_with(&mut grads, *b, |gb| gb.add_assign(&cs));
                    }
                    if self.rg(*w) {
                        let cols = im2col(xv, *spec);
                        self.acc_with(&mut grads, *w, |gw| cols.matmul_tn_into(&g, gw));
                    }
                    if self.rg(*x) {
                        let mut gcols = Tensor::zeros(g.rows(), wv.rows());
                        g.matmul_nt_into(wv, &mut gcols);
                        self.acc_with(&mut grads, *x, |gx| col2im_acc(&gcols, *spec, gx));
                    }
                }
                Op::Gather { table, ids } => {
                    self.acc_with(&mut grads, *table, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (x, gg) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                *x += gg;
                            }
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).cols();
                    self.acc_with(&mut grads, *a, |ga| {
                        for r in 0..g.rows() {
                            for (x, gg) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..split]) {
                                *x += gg;
                            }
                        }
                    });
                    self.acc_with(&mut grads, *b, |gb| {
                        for r in 0..g.rows() {
                            for (x, gg) in gb.row_mut(r).iter_mut().zip(&g.row(r)[split..]) {
                                *x += gg;
                            }
                        }
                    });
                }
                Op::SliceCols(a, start) => {
                    self.acc_with(&mut grads, *a, |ga| {
                        for r in 0..g.rows() {
                            let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                            for (x, gg) in dst.iter_mut().zip(g.row(r)) {
                                *x += gg;
                            }
                        }
                    });
                }
                Op::SliceRows(a, start) => {
                    self.acc_with(&mut grads, *a, |ga| {
                        for r in 0..g.rows() {
                            for (x, gg) in ga.row_mut(start + r).iter_mut().zip(g.row(r)) {
                                *x += gg;
                            }
                        }
                    });
                }
                Op::RepeatRows(a, times) => {
                    self.acc_with(&mut grads, *a, |ga| {
                        for r in 0..g.rows() {
                            for (x, gg) in ga.row_mut(r / times).iter_mut().zip(g.row(r)) {
                                *x += gg;
                            }
                        }
                    });
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = g.item() * 2.0 / pv.len() as f64;
                    self.acc_with(&mut grads, *pred, |gp| {
                        for ((x, p), t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                            *x += k * (p - t);
                        }
                    });
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let k = g.item() / targets.len() as f64;
                    self.acc_with(&mut grads, *logits, |gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = gl.row_mut(r);
                            for (x, p) in row.iter_mut().zip(probs.row(r)) {
                                *x += k * p;
                            }
                            row[t] -= k;
                        }
                    });
                }
                Op::SymKld { mp, lp, mq, lq } => {
                    let (mpv, lpv, mqv, lqv) = (
                        self.value(*mp),
                        self.value(*lp),
                        self.value(*mq),
                        self.value(*lq),
                    );
                    let rows = mpv.rows();
                    let k = g.item() / rows as f64;
                    let n = mpv.len();
                    let mut d_mp = vec![0.0; n];
                    let mut d_lp = vec![0.0; n];
                    let mut d_lq = vec![0.0; n];
                    for i in 0..n {
                        let a = lpv.data()[i].exp();
                        let b = lqv.data()[i].exp();
                        let d = mpv.data()[i] - mqv.data()[i];
                        d_mp[i] = k * 0.5 * d * (1.0 / a + 1.0 / b);
                        d_lp[i] = k * 0.25 * (a / b - (b + d * d) / a);
                        d_lq[i] = k * 0.25 * (b / a - (a + d * d) / b);
                    }
                    self.acc_with(&mut grads, *mp, |x| add_slice(x, &d_mp, 1.0));
                    self.acc_with(&mut grads, *mq, |x| add_slice(x, &d_mp, -1.0));
                    self.acc_with(&mut grads, *lp, |x| add_slice(x, &d_lp, 1.0));
                    self.acc_with(&mut grads, *lq, |x| add_slice(x, &d_lq, 1.0));
                }
                Op::WeightedSum(terms) => {
                    let gs = g.item();
                    for &(v, w) in terms {
                        self.acc_with(&mut grads, v, |gv| gv.data_mut()[0] += gs * w);
                    }
                }
            }
        }
        out
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }
}

fn add_slice(t: &mut Tensor, src: &[f64], sign: f64) {
    for (x, s) in t.data_mut().iter_mut().zip(src) {
        *x += sign * s;
    }
}

/// `T × (K·C)` matrix whose row `t` holds the `K` dilated taps feeding output `t`.
pub(crate) fn im2col(x: &Tensor, spec: ConvSpec) -> Tensor {
    let (t_len, c) = x.shape();
    let mut cols = Tensor::zeros(t_len, spec.kernel * c);
    for t in 0..t_len {
        let row = cols.row_mut(t);
        for tap in 0..spec.kernel {
            if let Some(src) = spec.source_row(t, tap, t_len) {
                row[tap * c..(tap + 1) * c].copy_from_slice(x.row(src));
            }
        }
    }
    cols
}

fn col2im_acc(gcols: &Tensor, spec: ConvSpec, gx: &mut Tensor) {
    let (t_len, c) = gx.shape();
    for t in 0..gcols.rows() {
        let row = gcols.row(t);
        for tap in 0..spec.kernel {
            if let Some(dst) = spec.source_row(t, tap, t_len) {
                for (x, gg) in gx.row_mut(dst).iter_mut().zip(&row[tap * c..(tap + 1) * c]) {
                    *x += gg;
                }
            }
        }
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[index] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.add(*n, t.clone());
        }
        s
    }

    #[test]
    fn square_gradient() {
        let store = store_with(&[("w", Tensor::scalar(3.0))]);
        let mask = vec![true];
        let mut tape = Tape::new(&store, &mask);
        let w = tape.param(ParamId(0));
        let y = tape.mul(w, w);
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.backward(y);
        assert_eq!(g.get(ParamId(0)).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let store = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(5.0))]);
        let mask = vec![true, false];
        let mut tape = Tape::new(&store, &mask);
        let a = tape.param(ParamId(0));
        let b = tape.param(ParamId(1));
        let y = tape.mul(a, b);
        let g = tape.backward(y);
        assert_eq!(g.get(ParamId(0)).unwrap().item(), 5.0);
        assert!(g.get(ParamId(1)).is_none());
    }

    #[test]
    fn conv_geometry() {
        let x = Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let causal = im2col(&x, ConvSpec::causal(2, 2));
        assert_eq!(causal.row(0), &[0.0, 1.0]);
        assert_eq!(causal.row(3), &[2.0, 4.0]);
        let same = im2col(&x, ConvSpec::same(3, 1));
        assert_eq!(same.row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(same.row(3), &[3.0, 4.0, 0.0]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let t = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let p = softmax_rows(&t);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((log_softmax_at(&[0.0; 4], 2) + 4f64.ln()).abs() < 1e-12);
    }
}
