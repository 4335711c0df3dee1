//! Tape-based reverse-mode differentiation over a closed primitive set
//! (matmul, elementwise maps, softmax, the selective scan, and the scalar
//! losses). Ops append nodes in execution order, so the tape itself is a
//! topological order and backward is a single reverse sweep.
//!
//! Shape errors inside the tape are programming errors of the caller and
//! panic; user-facing validation happens at the public op boundaries.

use crate::flops;
use crate::matrix::{dot_f64, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    /// Position of this node in the tape; indexes the gradient list
    /// returned by `Tape::backward`.
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
    /// Loss nodes keep their f64 total so scalar readout does not round
    /// through f32 (finite-difference checks need the extra precision).
    scalar64: Option<f64>,
}

enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId },
    /// a * b^T
    MatmulNT { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    /// Broadcast a 1 x cols row vector over every row of `a`.
    AddRow { a: VarId, v: VarId },
    /// Elementwise multiply every row of `a` by a 1 x cols row vector.
    MulRow { a: VarId, v: VarId },
    Scale { a: VarId, c: f32 },
    SliceCols { a: VarId, start: usize, len: usize },
    ConcatCols { parts: Vec<VarId> },
    /// out[:, i*times + j] = a[:, i]
    RepeatCols { a: VarId, times: usize },
    /// a is L x (groups*block); out block (g, j) = input block g.
    RepeatBlocks { a: VarId, block: usize, times: usize },
    Exp { a: VarId },
    Softplus { a: VarId },
    Silu { a: VarId },
    Softmax { a: VarId },
    /// Square score matrix; row t is a softmax over columns 0..=t, zero after.
    CausalSoftmax { a: VarId },
    RmsNorm { a: VarId, gain: VarId },
    Gather { table: VarId, ids: Vec<u32> },
    /// Selective-scan recurrence, one sequence, heads-major channel layout.
    Scan {
        abar: VarId,
        bbar: VarId,
        u: VarId,
        c: VarId,
        heads: usize,
        d_v: usize,
        n_state: usize,
        saved_h: Vec<f32>,
    },
    /// Depthwise causal convolution; kernel is channels x width.
    CausalConv { a: VarId, kernel: VarId },
    CrossEntropy {
        logits: VarId,
        targets: Vec<u32>,
        row_mask: Option<Vec<bool>>,
    },
    /// KL(p || alpha*p + (1-alpha)*q) against a constant reference p,
    /// averaged over unmasked rows. Gradient flows into q.
    SkewKl {
        q: VarId,
        p: Matrix,
        alpha: f32,
        row_mask: Option<Vec<bool>>,
    },
    /// Mean over all elements of the unmasked rows.
    MeanAll { a: VarId, row_mask: Option<Vec<bool>> },
    /// Weighted sum of scalar nodes.
    AddScaled { terms: Vec<(f32, VarId)> },
}

const RMSNORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Drop every node recorded after `len`. Lets a frozen model stage its
    /// leaves once and rewind after each forward.
    pub fn truncate(&mut self, len: usize) {
        assert!(len <= self.nodes.len(), "truncate beyond tape length");
        self.nodes.truncate(len);
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            scalar64: None,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, op: Op, value: f64, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value: Matrix::from_vec(1, 1, vec![value as f32]),
            needs_grad,
            scalar64: Some(value),
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A trainable parameter leaf; its gradient is produced by `backward`.
    pub fn param(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// A constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b)).expect("tape matmul");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, v, ng)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self
            .value(a)
            .matmul_nt(self.value(b))
            .expect("tape matmul_nt");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNT { a, b }, v, ng)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).add(self.value(b)).expect("tape add");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, v, ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b)).expect("tape sub");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, v, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "tape mul shape");
        let mut v = va.clone();
        for (o, &x) in v.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, v, ng)
    }

    pub fn add_row(&mut self, a: VarId, v: VarId) -> VarId {
        let (ma, mv) = (self.value(a), self.value(v));
        assert_eq!(mv.rows(), 1, "add_row expects a row vector");
        assert_eq!(ma.cols(), mv.cols(), "add_row width");
        let mut out = ma.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, &x) in row.iter_mut().zip(&mv.data()[..cols]) {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push(Op::AddRow { a, v }, out, ng)
    }

    pub fn mul_row(&mut self, a: VarId, v: VarId) -> VarId {
        let (ma, mv) = (self.value(a), self.value(v));
        assert_eq!(mv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(ma.cols(), mv.cols(), "mul_row width");
        let mut out = ma.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, &x) in row.iter_mut().zip(&mv.data()[..cols]) {
                *o *= x;
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push(Op::MulRow { a, v }, out, ng)
    }

    pub fn scale(&mut self, a: VarId, c: f32) -> VarId {
        let v = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, v, ng)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let ma = self.value(a);
        assert!(start + len <= ma.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(ma.rows(), len, |r, c| ma.get(r, start + c));
        let ng = self.needs(a);
        self.push(Op::SliceCols { a, start, len }, out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let mp = self.value(p);
            assert_eq!(mp.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                let src = mp.row(r).to_vec();
                out.row_mut(r)[off..off + src.len()].copy_from_slice(&src);
            }
            off += mp.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            ng,
        )
    }

    pub fn repeat_cols(&mut self, a: VarId, times: usize) -> VarId {
        let ma = self.value(a);
        let out = Matrix::from_fn(ma.rows(), ma.cols() * times, |r, c| ma.get(r, c / times));
        let ng = self.needs(a);
        self.push(Op::RepeatCols { a, times }, out, ng)
    }

    pub fn repeat_blocks(&mut self, a: VarId, block: usize, times: usize) -> VarId {
        let ma = self.value(a);
        assert_eq!(ma.cols() % block, 0, "repeat_blocks block size");
        let groups = ma.cols() / block;
        let out = Matrix::from_fn(ma.rows(), groups * times * block, |r, c| {
            let g = c / (times * block);
            let inner = c % block;
            ma.get(r, g * block + inner)
        });
        let ng = self.needs(a);
        self.push(Op::RepeatBlocks { a, block, times }, out, ng)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        let ng = self.needs(a);
        self.push(Op::Exp { a }, v, ng)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = softplus(*x);
        }
        let ng = self.needs(a);
        self.push(Op::Softplus { a }, v, ng)
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let mut v = self.value(a).clone();
        flops::add(flops::ACT_COST * v.data().len() as u64);
        for x in v.data_mut() {
            *x = *x * sigmoid(*x);
        }
        let ng = self.needs(a);
        self.push(Op::Silu { a }, v, ng)
    }

    pub fn softmax(&mut self, a: VarId) -> VarId {
        let ma = self.value(a);
        flops::add(flops::SOFTMAX_COST * ma.data().len() as u64);
        let mut v = ma.clone();
        for r in 0..v.rows() {
            softmax_row(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(Op::Softmax { a }, v, ng)
    }

    pub fn causal_softmax(&mut self, a: VarId) -> VarId {
        let ma = self.value(a);
        assert_eq!(ma.rows(), ma.cols(), "causal_softmax expects square scores");
        let rows = ma.rows();
        flops::add(flops::SOFTMAX_COST * (rows * (rows + 1) / 2) as u64);
        let mut v = ma.clone();
        for r in 0..rows {
            let row = v.row_mut(r);
            softmax_row(&mut row[..=r]);
            for x in &mut row[r + 1..] {
                *x = 0.0;
            }
        }
        let ng = self.needs(a);
        self.push(Op::CausalSoftmax { a }, v, ng)
    }

    pub fn rmsnorm(&mut self, a: VarId, gain: VarId) -> VarId {
        let (ma, mg) = (self.value(a), self.value(gain));
        assert_eq!(mg.rows(), 1, "rmsnorm gain is a row vector");
        assert_eq!(ma.cols(), mg.cols(), "rmsnorm width");
        flops::add(flops::NORM_COST * ma.data().len() as u64);
        let mut out = Matrix::zeros(ma.rows(), ma.cols());
        for r in 0..ma.rows() {
            let x = ma.row(r);
            let inv = rms_inv(x);
            let o = out.row_mut(r);
            for ((ov, &xv), &gv) in o.iter_mut().zip(x).zip(mg.data()) {
                *ov = (xv as f64 * inv) as f32 * gv;
            }
        }
        let ng = self.needs(a) || self.needs(gain);
        self.push(Op::RmsNorm { a, gain }, out, ng)
    }

    pub fn gather(&mut self, table: VarId, ids: &[u32]) -> VarId {
        let mt = self.value(table);
        let mut out = Matrix::zeros(ids.len(), mt.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!((id as usize) < mt.rows(), "gather id out of range");
            out.row_mut(r).copy_from_slice(mt.row(id as usize));
        }
        let ng = self.needs(table);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            ng,
        )
    }

    /// Selective-scan recurrence over one sequence.
    ///
    /// Per head `i`, value channel `cv` and state index `n`:
    ///   H_t = abar_t[i,cv] * H_{t-1} + bbar_t[i,n] * u_t[i,cv]
    ///   y_t[i,cv] = sum_n c_t[i,n] * H_t[i,cv,n]
    pub fn scan(
        &mut self,
        abar: VarId,
        bbar: VarId,
        u: VarId,
        c: VarId,
        heads: usize,
        d_v: usize,
        n_state: usize,
    ) -> VarId {
        let len = self.value(u).rows();
        assert_eq!(self.value(abar).shape(), (len, heads * d_v), "scan abar");
        assert_eq!(self.value(u).shape(), (len, heads * d_v), "scan u");
        assert_eq!(self.value(bbar).shape(), (len, heads * n_state), "scan bbar");
        assert_eq!(self.value(c).shape(), (len, heads * n_state), "scan c");

        let channels = heads * d_v;
        let state_len = channels * n_state;
        flops::add(flops::SCAN_COST * (len * state_len) as u64);
        // the running state is a reduction over time: accumulate in f64
        let mut state = vec![0.0f64; state_len];
        let mut saved_h = vec![0.0f32; len * state_len];
        let mut y = Matrix::zeros(len, channels);
        {
            let (ma, mb, mu, mc) = (
                self.value(abar),
                self.value(bbar),
                self.value(u),
                self.value(c),
            );
            for t in 0..len {
                let arow = ma.row(t);
                let brow = mb.row(t);
                let urow = mu.row(t);
                let crow = mc.row(t);
                for i in 0..heads {
                    for cv in 0..d_v {
                        let idx = i * d_v + cv;
                        let a = arow[idx] as f64;
                        let uv = urow[idx] as f64;
                        let s = &mut state[idx * n_state..(idx + 1) * n_state];
                        let b = &brow[i * n_state..(i + 1) * n_state];
                        let cj = &crow[i * n_state..(i + 1) * n_state];
                        let mut acc = 0.0f64;
                        for n in 0..n_state {
                            s[n] = a * s[n] + b[n] as f64 * uv;
                            acc += cj[n] as f64 * s[n];
                        }
                        y.set(t, idx, acc as f32);
                    }
                }
                for (dst, &s) in saved_h[t * state_len..(t + 1) * state_len]
                    .iter_mut()
                    .zip(state.iter())
                {
                    *dst = s as f32;
                }
            }
        }
        let ng = self.needs(abar) || self.needs(bbar) || self.needs(u) || self.needs(c);
        self.push(
            Op::Scan {
                abar,
                bbar,
                u,
                c,
                heads,
                d_v,
                n_state,
                saved_h,
            },
            y,
            ng,
        )
    }

    pub fn causal_conv(&mut self, a: VarId, kernel: VarId) -> VarId {
        let (ma, mk) = (self.value(a), self.value(kernel));
        assert_eq!(ma.cols(), mk.rows(), "causal_conv channels");
        let width = mk.cols();
        let mut out = Matrix::zeros(ma.rows(), ma.cols());
        for t in 0..ma.rows() {
            for ch in 0..ma.cols() {
                let mut acc = 0.0f64;
                for j in 0..width {
                    let s = t as isize - (width as isize - 1) + j as isize;
                    if s >= 0 {
                        acc += mk.get(ch, j) as f64 * ma.get(s as usize, ch) as f64;
                    }
                }
                out.set(t, ch, acc as f32);
            }
        }
        let ng = self.needs(a) || self.needs(kernel);
        self.push(Op::CausalConv { a, kernel }, out, ng)
    }

    /// Mean negative log-softmax probability of the targets over unmasked rows.
    pub fn cross_entropy(
        &mut self,
        logits: VarId,
        targets: &[u32],
        row_mask: Option<&[bool]>,
    ) -> VarId {
        let ml = self.value(logits);
        assert_eq!(ml.rows(), targets.len(), "cross_entropy rows");
        let vocab = ml.cols();
        for &t in targets {
            assert!((t as usize) < vocab, "cross_entropy target {t} >= {vocab}");
        }
        let mask: Option<Vec<bool>> = row_mask.map(|m| m.to_vec());
        if let Some(m) = &mask {
            assert_eq!(m.len(), targets.len(), "cross_entropy mask");
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..ml.rows() {
            if mask.as_ref().map_or(true, |m| m[r]) {
                total += row_nll(ml.row(r), targets[r] as usize);
                count += 1;
            }
        }
        assert!(count > 0, "cross_entropy: no scored rows");
        let ng = self.needs(logits);
        self.push_scalar(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_mask: mask,
            },
            total / count as f64,
            ng,
        )
    }

    /// Skew KL divergence KL(p || alpha*p + (1-alpha)*q), p held constant,
    /// averaged over unmasked rows; q must be a probability matrix node.
    pub fn skew_kl_vs_const(
        &mut self,
        q: VarId,
        p: Matrix,
        alpha: f32,
        row_mask: Option<&[bool]>,
    ) -> VarId {
        let mq = self.value(q);
        assert_eq!(mq.shape(), p.shape(), "skew_kl shapes");
        let mask: Option<Vec<bool>> = row_mask.map(|m| m.to_vec());
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..mq.rows() {
            if mask.as_ref().map_or(true, |m| m[r]) {
                total += skew_kl_row(p.row(r), mq.row(r), alpha);
                count += 1;
            }
        }
        assert!(count > 0, "skew_kl: no scored rows");
        let ng = self.needs(q);
        self.push_scalar(
            Op::SkewKl {
                q,
                p,
                alpha,
                row_mask: mask,
            },
            total / count as f64,
            ng,
        )
    }

    pub fn mean_all(&mut self, a: VarId, row_mask: Option<&[bool]>) -> VarId {
        let ma = self.value(a);
        let mask: Option<Vec<bool>> = row_mask.map(|m| m.to_vec());
        let mut total = 0.0f64;
        let mut rows = 0usize;
        for r in 0..ma.rows() {
            if mask.as_ref().map_or(true, |m| m[r]) {
                for &x in ma.row(r) {
                    total += x as f64;
                }
                rows += 1;
            }
        }
        assert!(rows > 0, "mean_all: no rows");
        let ng = self.needs(a);
        let cols = ma.cols();
        self.push_scalar(
            Op::MeanAll { a, row_mask: mask },
            total / (rows * cols) as f64,
            ng,
        )
    }

    pub fn add_scaled(&mut self, terms: &[(f32, VarId)]) -> VarId {
        assert!(!terms.is_empty());
        let mut total = 0.0f64;
        for &(w, id) in terms {
            assert_eq!(self.shape(id), (1, 1), "add_scaled expects scalars");
            total += w as f64 * self.scalar(id);
        }
        let ng = terms.iter().any(|&(_, id)| self.needs(id));
        self.push_scalar(
            Op::AddScaled {
                terms: terms.to_vec(),
            },
            total,
            ng,
        )
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        let node = &self.nodes[id.0];
        assert_eq!(node.value.shape(), (1, 1), "scalar() on non-scalar node");
        node.scalar64.unwrap_or(node.value.get(0, 0) as f64)
    }

    /// Reverse sweep from `root` (a scalar node). Returns one gradient slot
    /// per node; only nodes on a differentiable path to the root are filled.
    pub fn backward(&self, root: VarId) -> Vec<Option<Matrix>> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Matrix>], id: VarId, delta: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    let da = g.matmul_nt(self.value(*b)).expect("dA");
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = self.value(*a).matmul_tn(g).expect("dB");
                    self.acc(grads, *b, db);
                }
            }
            Op::MatmulNT { a, b } => {
                // out = a b^T; da = g b ; db = g^T a
                if self.needs(*a) {
                    let da = g.matmul(self.value(*b)).expect("dA nt");
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.matmul_tn(self.value(*a)).expect("dB nt");
                    self.acc(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (o, &x) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= x;
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    for (o, &x) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= x;
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::AddRow { a, v } => {
                self.acc(grads, *a, g.clone());
                if self.needs(*v) {
                    let mut dv = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in dv.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *v, dv);
                }
            }
            Op::MulRow { a, v } => {
                let mv = self.value(*v);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (o, &x) in da.row_mut(r).iter_mut().zip(mv.data()) {
                            *o *= x;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs(*v) {
                    let ma = self.value(*a);
                    let mut dv = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let cur = dv.get(0, c) + g.get(r, c) * ma.get(r, c);
                            dv.set(0, c, cur);
                        }
                    }
                    self.acc(grads, *v, dv);
                }
            }
            Op::Scale { a, c } => {
                self.acc(grads, *a, g.scale(*c));
            }
            Op::SliceCols { a, start, len } => {
                let ma = self.value(*a);
                let mut da = Matrix::zeros(ma.rows(), ma.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, da);
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let dp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        self.acc(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::RepeatCols { a, times } => {
                let ma = self.value(*a);
                let mut da = Matrix::zeros(ma.rows(), ma.cols());
                for r in 0..g.rows() {
                    for c in 0..ma.cols() {
                        let mut s = 0.0f64;
                        for j in 0..*times {
                            s += g.get(r, c * times + j) as f64;
                        }
                        da.set(r, c, s as f32);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::RepeatBlocks { a, block, times } => {
                let ma = self.value(*a);
                let groups = ma.cols() / block;
                let mut da = Matrix::zeros(ma.rows(), ma.cols());
                for r in 0..g.rows() {
                    for gix in 0..groups {
                        for inner in 0..*block {
                            let mut s = 0.0f64;
                            for j in 0..*times {
                                s += g.get(r, (gix * times + j) * block + inner) as f64;
                            }
                            da.set(r, gix * block + inner, s as f32);
                        }
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Exp { a } => {
                let out = &self.nodes[i].value;
                let mut da = g.clone();
                for (o, &y) in da.data_mut().iter_mut().zip(out.data()) {
                    *o *= y;
                }
                self.acc(grads, *a, da);
            }
            Op::Softplus { a } => {
                let ma = self.value(*a);
                let mut da = g.clone();
                for (o, &x) in da.data_mut().iter_mut().zip(ma.data()) {
                    *o *= sigmoid(x);
                }
                self.acc(grads, *a, da);
            }
            Op::Silu { a } => {
                let ma = self.value(*a);
                let mut da = g.clone();
                for (o, &x) in da.data_mut().iter_mut().zip(ma.data()) {
                    let s = sigmoid(x);
                    *o *= s * (1.0 + x * (1.0 - s));
                }
                self.acc(grads, *a, da);
            }
            Op::Softmax { a } => {
                let p = &self.nodes[i].value;
                let mut da = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    softmax_backward_row(p.row(r), g.row(r), da.row_mut(r));
                }
                self.acc(grads, *a, da);
            }
            Op::CausalSoftmax { a } => {
                let p = &self.nodes[i].value;
                let mut da = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    softmax_backward_row(
                        &p.row(r)[..=r],
                        &g.row(r)[..=r],
                        &mut da.row_mut(r)[..=r],
                    );
                }
                self.acc(grads, *a, da);
            }
            Op::RmsNorm { a, gain } => {
                let ma = self.value(*a);
                let mg = self.value(*gain);
                let n = ma.cols();
                let mut da = Matrix::zeros(ma.rows(), n);
                let mut dgain = Matrix::zeros(1, n);
                for r in 0..ma.rows() {
                    let x = ma.row(r);
                    let gr = g.row(r);
                    let inv = rms_inv(x);
                    // s = sum_j gain_j * dy_j * x_j
                    let mut s = 0.0f64;
                    for j in 0..n {
                        s += mg.get(0, j) as f64 * gr[j] as f64 * x[j] as f64;
                    }
                    let k = s * inv * inv * inv / n as f64;
                    let dar = da.row_mut(r);
                    for j in 0..n {
                        dar[j] =
                            ((mg.get(0, j) as f64 * gr[j] as f64) * inv - x[j] as f64 * k) as f32;
                    }
                    for j in 0..n {
                        let cur = dgain.get(0, j) as f64 + gr[j] as f64 * x[j] as f64 * inv;
                        dgain.set(0, j, cur as f32);
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *gain, dgain);
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let mt = self.value(*table);
                    let mut dt = Matrix::zeros(mt.rows(), mt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = dt.row_mut(id as usize);
                        for (o, &x) in dst.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *table, dt);
                }
            }
            Op::Scan {
                abar,
                bbar,
                u,
                c,
                heads,
                d_v,
                n_state,
                saved_h,
            } => {
                self.scan_backward(
                    g, *abar, *bbar, *u, *c, *heads, *d_v, *n_state, saved_h, grads,
                );
            }
            Op::CausalConv { a, kernel } => {
                let ma = self.value(*a);
                let mk = self.value(*kernel);
                let width = mk.cols();
                if self.needs(*a) {
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    for t in 0..ma.rows() {
                        for ch in 0..ma.cols() {
                            let gv = g.get(t, ch);
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..width {
                                let s = t as isize - (width as isize - 1) + j as isize;
                                if s >= 0 {
                                    let cur = da.get(s as usize, ch) + gv * mk.get(ch, j);
                                    da.set(s as usize, ch, cur);
                                }
                            }
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs(*kernel) {
                    let mut dk = Matrix::zeros(mk.rows(), mk.cols());
                    for t in 0..ma.rows() {
                        for ch in 0..ma.cols() {
                            let gv = g.get(t, ch) as f64;
                            for j in 0..width {
                                let s = t as isize - (width as isize - 1) + j as isize;
                                if s >= 0 {
                                    let cur = dk.get(ch, j) as f64
                                        + gv * ma.get(s as usize, ch) as f64;
                                    dk.set(ch, j, cur as f32);
                                }
                            }
                        }
                    }
                    self.acc(grads, *kernel, dk);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_mask,
            } => {
                let ml = self.value(*logits);
                let up = g.get(0, 0);
                let count = row_mask
                    .as_ref()
                    .map_or(ml.rows(), |m| m.iter().filter(|&&b| b).count());
                let w = up / count as f32;
                let mut dl = Matrix::zeros(ml.rows(), ml.cols());
                for r in 0..ml.rows() {
                    if row_mask.as_ref().map_or(true, |m| m[r]) {
                        let mut p = ml.row(r).to_vec();
                        softmax_row(&mut p);
                        let dst = dl.row_mut(r);
                        for (o, &pv) in dst.iter_mut().zip(&p) {
                            *o = pv * w;
                        }
                        dst[targets[r] as usize] -= w;
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::SkewKl {
                q,
                p,
                alpha,
                row_mask,
            } => {
                let mq = self.value(*q);
                let up = g.get(0, 0) as f64;
                let count = row_mask
                    .as_ref()
                    .map_or(mq.rows(), |m| m.iter().filter(|&&b| b).count());
                let w = up / count as f64;
                let a = *alpha as f64;
                let mut dq = Matrix::zeros(mq.rows(), mq.cols());
                for r in 0..mq.rows() {
                    if row_mask.as_ref().map_or(true, |m| m[r]) {
                        let dst = dq.row_mut(r);
                        for ((o, &pv), &qv) in dst.iter_mut().zip(p.row(r)).zip(mq.row(r)) {
                            let m = (a * pv as f64 + (1.0 - a) * qv as f64).max(1e-38);
                            *o = (-(1.0 - a) * pv as f64 / m * w) as f32;
                        }
                    }
                }
                self.acc(grads, *q, dq);
            }
            Op::MeanAll { a, row_mask } => {
                let ma = self.value(*a);
                let rows = row_mask
                    .as_ref()
                    .map_or(ma.rows(), |m| m.iter().filter(|&&b| b).count());
                let w = g.get(0, 0) / (rows * ma.cols()) as f32;
                let mut da = Matrix::zeros(ma.rows(), ma.cols());
                for r in 0..ma.rows() {
                    if row_mask.as_ref().map_or(true, |m| m[r]) {
                        da.row_mut(r).iter_mut().for_each(|x| *x = w);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::AddScaled { terms } => {
                let up = g.get(0, 0);
                for &(w, id) in terms {
                    self.acc(grads, id, Matrix::from_vec(1, 1, vec![w * up]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_backward(
        &self,
        g: &Matrix,
        abar: VarId,
        bbar: VarId,
        u: VarId,
        c: VarId,
        heads: usize,
        d_v: usize,
        n_state: usize,
        saved_h: &[f32],
        grads: &mut [Option<Matrix>],
    ) {
        let (ma, mb, mu, mc) = (
            self.value(abar),
            self.value(bbar),
            self.value(u),
            self.value(c),
        );
        let len = mu.rows();
        let channels = heads * d_v;
        let state_len = channels * n_state;

        let mut da = Matrix::zeros(len, channels);
        let mut dbb = Matrix::zeros(len, heads * n_state);
        let mut du = Matrix::zeros(len, channels);
        let mut dc = Matrix::zeros(len, heads * n_state);
        // adjoint of H_t, filled progressively while walking t backwards
        let mut gh = vec![0.0f64; state_len];

        for t in (0..len).rev() {
            let h_t = &saved_h[t * state_len..(t + 1) * state_len];
            let h_prev: Option<&[f32]> = if t > 0 {
                Some(&saved_h[(t - 1) * state_len..t * state_len])
            } else {
                None
            };
            for i in 0..heads {
                for n in 0..n_state {
                    // dc[t,i,n] = sum_cv dy[t,i,cv] * H_t[i,cv,n]
                    let mut s = 0.0f64;
                    for cv in 0..d_v {
                        let idx = i * d_v + cv;
                        s += g.get(t, idx) as f64 * h_t[idx * n_state + n] as f64;
                    }
                    dc.set(t, i * n_state + n, s as f32);
                }
                for cv in 0..d_v {
                    let idx = i * d_v + cv;
                    let dy = g.get(t, idx) as f64;
                    let ghrow = &mut gh[idx * n_state..(idx + 1) * n_state];
                    let crow = &mc.row(t)[i * n_state..(i + 1) * n_state];
                    // G_t = incoming recurrent adjoint + dy * c_t
                    for (gv, &cv2) in ghrow.iter_mut().zip(crow) {
                        *gv += dy * cv2 as f64;
                    }
                    // d abar = sum_n G * H_{t-1}
                    let mut s_a = 0.0f64;
                    if let Some(hp) = h_prev {
                        let hrow = &hp[idx * n_state..(idx + 1) * n_state];
                        for (gv, &hv) in ghrow.iter().zip(hrow) {
                            s_a += gv * hv as f64;
                        }
                    }
                    da.set(t, idx, s_a as f32);
                    // d u = sum_n G * bbar
                    let brow = &mb.row(t)[i * n_state..(i + 1) * n_state];
                    let mut s_u = 0.0f64;
                    for (gv, &bv) in ghrow.iter().zip(brow) {
                        s_u += gv * bv as f64;
                    }
                    du.set(t, idx, s_u as f32);
                    // d bbar[i,n] += G[idx,n] * u[t,idx]
                    let uv = mu.get(t, idx) as f64;
                    for n in 0..n_state {
                        let cur = dbb.get(t, i * n_state + n) as f64 + ghrow[n] * uv;
                        dbb.set(t, i * n_state + n, cur as f32);
                    }
                    // pass adjoint to t-1 through abar_t
                    let av = ma.get(t, idx) as f64;
                    for gv in ghrow.iter_mut() {
                        *gv *= av;
                    }
                }
            }
        }
        if self.needs(abar) {
            self.acc(grads, abar, da);
        }
        if self.needs(bbar) {
            self.acc(grads, bbar, dbb);
        }
        if self.needs(u) {
            self.acc(grads, u, du);
        }
        if self.needs(c) {
            self.acc(grads, c, dc);
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// In-place numerically stable softmax with f64 accumulation.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x = (*x as f64 * inv) as f32;
    }
}

fn softmax_backward_row(p: &[f32], dy: &[f32], out: &mut [f32]) {
    let mut s = 0.0f64;
    for (&pv, &gv) in p.iter().zip(dy) {
        s += pv as f64 * gv as f64;
    }
    for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(dy) {
        *o = (pv as f64 * (gv as f64 - s)) as f32;
    }
}

/// 1 / rms(x) with f64 accumulation.
fn rms_inv(x: &[f32]) -> f64 {
    let mut ss = 0.0f64;
    for &v in x {
        ss += v as f64 * v as f64;
    }
    1.0 / (ss / x.len() as f64 + RMSNORM_EPS).sqrt()
}

/// -log softmax(row)[target] in f64.
pub fn row_nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    for &x in row {
        sum += (x as f64 - max).exp();
    }
    -(row[target] as f64 - max - sum.ln())
}

/// KL(p || alpha*p + (1-alpha)*q) for one row, 0*ln(0) treated as 0.
pub fn skew_kl_row(p: &[f32], q: &[f32], alpha: f32) -> f64 {
    let a = alpha as f64;
    let mut s = 0.0f64;
    for (&pv, &qv) in p.iter().zip(q) {
        let pv = pv as f64;
        if pv > 0.0 {
            let m = (a * pv + (1.0 - a) * qv as f64).max(1e-38);
            s += pv * (pv.ln() - m.ln());
        }
    }
    s
}

pub fn attention_dot(a: &[f32], b: &[f32]) -> f64 {
    dot_f64(a, b)
}
