//! Causal multi-head attention (MHA/GQA) with incremental KV-cache decoding,
//! plus the masked linear-attention forms that anchor the attention-to-SSM
//! weight transfer: a direct prefix-sum evaluation and an equivalent linear
//! RNN with a constant d_k x d_v state per head.

use crate::flops;
use crate::matrix::{dot_f64, Matrix, SequenceTensor};
use crate::tape;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerWeights {
    /// d x (h * d_k)
    pub w_q: Matrix,
    /// d x (h_kv * d_k)
    pub w_k: Matrix,
    /// d x (h_kv * d_v)
    pub w_v: Matrix,
    /// (h * d_v) x d
    pub w_o: Matrix,
    pub heads: usize,
    pub kv_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionLayerWeights {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("{} heads not divisible by {} kv heads", self.heads, self.kv_heads),
            ));
        }
        let checks = [
            (self.w_q.shape(), (d, self.heads * self.d_k), "w_q"),
            (self.w_k.shape(), (d, self.kv_heads * self.d_k), "w_k"),
            (self.w_v.shape(), (d, self.kv_heads * self.d_v), "w_v"),
            (self.w_o.shape(), (self.heads * self.d_v, d), "w_o"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::shape(
                    "attention",
                    format!("{name}: {got:?}, expected {want:?}"),
                ));
            }
        }
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            m.check_finite("attention weights")?;
        }
        Ok(())
    }

    /// How many query heads read each kv head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// Grown-by-one-slot-per-token decode cache for a single attention layer.
#[derive(Debug, Clone)]
pub struct KVCache {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
    kv_heads: usize,
    d_k: usize,
    d_v: usize,
}

impl KVCache {
    pub fn new(kv_heads: usize, d_k: usize, d_v: usize) -> Self {
        KVCache {
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
            kv_heads,
            d_k,
            d_v,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Current cache footprint: L*h_kv*d_k + L*h_kv*d_v values, 4 bytes each.
    pub fn byte_size(&self) -> usize {
        (self.keys.len() + self.values.len()) * 4
    }

    fn push(&mut self, k_row: &[f32], v_row: &[f32]) {
        debug_assert_eq!(k_row.len(), self.kv_heads * self.d_k);
        debug_assert_eq!(v_row.len(), self.kv_heads * self.d_v);
        self.keys.extend_from_slice(k_row);
        self.values.extend_from_slice(v_row);
        self.len += 1;
    }

    fn key_at(&self, t: usize, g: usize) -> &[f32] {
        let w = self.kv_heads * self.d_k;
        &self.keys[t * w + g * self.d_k..t * w + (g + 1) * self.d_k]
    }

    fn value_at(&self, t: usize, g: usize) -> &[f32] {
        let w = self.kv_heads * self.d_v;
        &self.values[t * w + g * self.d_v..t * w + (g + 1) * self.d_v]
    }
}

/// m_{s,t} of the causal mask: 1 while s <= t, else 0.
pub fn causal_mask(s: usize, t: usize) -> f32 {
    if s <= t {
        1.0
    } else {
        0.0
    }
}

fn check_input(w: &AttentionLayerWeights, x: &SequenceTensor) -> Result<()> {
    w.validate(w.model_dim())?;
    if x.dim() != w.model_dim() {
        return Err(Error::shape(
            "attention_forward",
            format!("input dim {} vs model dim {}", x.dim(), w.model_dim()),
        ));
    }
    Ok(())
}

/// Full-sequence causal softmax attention.
pub fn attention_forward(w: &AttentionLayerWeights, x: &SequenceTensor) -> Result<SequenceTensor> {
    check_input(w, x)?;
    let mut out = SequenceTensor::zeros(x.batch(), x.length(), x.dim());
    for b in 0..x.batch() {
        let y = attention_forward_seq(w, &x.seq(b))?;
        out.set_seq(b, &y);
    }
    Ok(out)
}

/// One sequence of softmax attention; computes the full score matrix per head
/// and applies the causal mask inside the row softmax.
pub fn attention_forward_seq(w: &AttentionLayerWeights, x: &Matrix) -> Result<Matrix> {
    let len = x.rows();
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    let scale = 1.0 / (w.d_k as f32).sqrt();
    let group = w.group_size();

    let mut mixed = Matrix::zeros(len, w.heads * w.d_v);
    for head in 0..w.heads {
        let g = head / group;
        let qh = slice_cols(&q, head * w.d_k, w.d_k);
        let kh = slice_cols(&k, g * w.d_k, w.d_k);
        let vh = slice_cols(&v, g * w.d_v, w.d_v);
        let mut scores = qh.matmul_nt(&kh)?.scale(scale);
        flops::add(flops::SOFTMAX_COST * (len * (len + 1) / 2) as u64);
        for t in 0..len {
            let row = scores.row_mut(t);
            tape::softmax_row(&mut row[..=t]);
            for s in &mut row[t + 1..] {
                *s = 0.0;
            }
        }
        let yh = scores.matmul(&vh)?;
        for t in 0..len {
            mixed.row_mut(t)[head * w.d_v..(head + 1) * w.d_v].copy_from_slice(yh.row(t));
        }
    }
    let out = mixed.matmul(&w.w_o)?;
    out.check_finite("attention_forward")?;
    Ok(out)
}

/// Incremental decode: appends this token's K/V to the cache and returns the
/// attention output for the new position.
pub fn attention_step(
    w: &AttentionLayerWeights,
    cache: &mut KVCache,
    x_t: &[f32],
) -> Result<Vec<f32>> {
    if x_t.len() != w.model_dim() {
        return Err(Error::shape(
            "attention_step",
            format!("token dim {} vs model dim {}", x_t.len(), w.model_dim()),
        ));
    }
    if cache.kv_heads != w.kv_heads || cache.d_k != w.d_k || cache.d_v != w.d_v {
        return Err(Error::shape(
            "attention_step",
            "cache shape does not match layer",
        ));
    }
    let xm = Matrix::from_vec(1, x_t.len(), x_t.to_vec());
    let q = xm.matmul(&w.w_q)?;
    let k = xm.matmul(&w.w_k)?;
    let v = xm.matmul(&w.w_v)?;
    cache.push(k.row(0), v.row(0));

    let t_now = cache.len();
    let scale = 1.0 / (w.d_k as f32).sqrt();
    let group = w.group_size();
    let mut mixed = Matrix::zeros(1, w.heads * w.d_v);
    for head in 0..w.heads {
        let g = head / group;
        let qh = &q.row(0)[head * w.d_k..(head + 1) * w.d_k];
        let mut scores = vec![0.0f32; t_now];
        for (s, sc) in scores.iter_mut().enumerate() {
            *sc = (dot_f64(qh, cache.key_at(s, g)) * scale as f64) as f32;
        }
        flops::add_matmul(1, t_now, w.d_k);
        flops::add(flops::SOFTMAX_COST * t_now as u64);
        tape::softmax_row(&mut scores);
        let dst = &mut mixed.row_mut(0)[head * w.d_v..(head + 1) * w.d_v];
        for (s, &p) in scores.iter().enumerate() {
            crate::matrix::axpy(dst, p, cache.value_at(s, g));
        }
        flops::add_matmul(1, w.d_v, t_now);
    }
    let out = mixed.matmul(&w.w_o)?;
    Ok(out.row(0).to_vec())
}

/// Masked linear attention evaluated from its definition: per head,
/// y_t = (1/sqrt(d_k)) * Q_t^T (sum_{s<=t} K_s V_s^T), the K_s V_s product
/// read as the outer product K_s V_s^T (the only reading under which the
/// shapes compose).
pub fn linear_attention_direct(
    w: &AttentionLayerWeights,
    x: &SequenceTensor,
) -> Result<SequenceTensor> {
    check_input(w, x)?;
    let mut out = SequenceTensor::zeros(x.batch(), x.length(), x.dim());
    for b in 0..x.batch() {
        let y = linear_attention_seq(w, &x.seq(b), LinearPath::Direct)?;
        out.set_seq(b, &y);
    }
    Ok(out)
}

/// Same map in linear RNN form: h_t = m_{t-1,t} h_{t-1} + K_t V_t^T with a
/// fixed-size d_k x d_v state per kv head, y_t = Q_t^T h_t / sqrt(d_k).
pub fn linear_attention_recurrent(
    w: &AttentionLayerWeights,
    x: &SequenceTensor,
) -> Result<SequenceTensor> {
    check_input(w, x)?;
    let mut out = SequenceTensor::zeros(x.batch(), x.length(), x.dim());
    for b in 0..x.batch() {
        let y = linear_attention_seq(w, &x.seq(b), LinearPath::Recurrent)?;
        out.set_seq(b, &y);
    }
    Ok(out)
}

enum LinearPath {
    Direct,
    Recurrent,
}

fn linear_attention_seq(
    w: &AttentionLayerWeights,
    x: &Matrix,
    path: LinearPath,
) -> Result<Matrix> {
    let len = x.rows();
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    let scale = 1.0 / (w.d_k as f32).sqrt();
    let group = w.group_size();

    // One d_k x d_v state per kv head; the direct path recomputes the prefix
    // sum from scratch at every position instead of carrying it.
    let mut mixed = Matrix::zeros(len, w.heads * w.d_v);
    let mut states = vec![vec![0.0f32; w.d_k * w.d_v]; w.kv_heads];
    for t in 0..len {
        match path {
            LinearPath::Recurrent => {
                for (g, state) in states.iter_mut().enumerate() {
                    let kg = &k.row(t)[g * w.d_k..(g + 1) * w.d_k];
                    let vg = &v.row(t)[g * w.d_v..(g + 1) * w.d_v];
                    // m_{t-1,t} = 1 inside the causal range: pure accumulation
                    for (i, &kv) in kg.iter().enumerate() {
                        crate::matrix::axpy(&mut state[i * w.d_v..(i + 1) * w.d_v], kv, vg);
                    }
                }
            }
            LinearPath::Direct => {
                for (g, state) in states.iter_mut().enumerate() {
                    state.iter_mut().for_each(|s| *s = 0.0);
                    for s in 0..=t {
                        let kg = &k.row(s)[g * w.d_k..(g + 1) * w.d_k];
                        let vg = &v.row(s)[g * w.d_v..(g + 1) * w.d_v];
                        for (i, &kv) in kg.iter().enumerate() {
                            crate::matrix::axpy(&mut state[i * w.d_v..(i + 1) * w.d_v], kv, vg);
                        }
                    }
                }
            }
        }
        for head in 0..w.heads {
            let g = head / group;
            let qh = &q.row(t)[head * w.d_k..(head + 1) * w.d_k];
            let dst = &mut mixed.row_mut(t)[head * w.d_v..(head + 1) * w.d_v];
            for cv in 0..w.d_v {
                let mut acc = 0.0f64;
                for (i, &qv) in qh.iter().enumerate() {
                    acc += qv as f64 * states[g][i * w.d_v + cv] as f64;
                }
                dst[cv] = (acc * scale as f64) as f32;
            }
        }
    }
    mixed.matmul(&w.w_o)
}

/// Per-head linear-RNN state size in bytes, independent of sequence length.
pub fn linear_state_bytes(w: &AttentionLayerWeights) -> usize {
    w.kv_heads * w.d_k * w.d_v * 4
}

fn slice_cols(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c))
}

/// Leaf ids of one attention mixer inside a training tape.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub w_q: crate::tape::VarId,
    pub w_k: crate::tape::VarId,
    pub w_v: crate::tape::VarId,
    pub w_o: crate::tape::VarId,
}

/// Differentiable causal attention forward for one normed sequence.
pub fn tape_forward(
    t: &mut crate::tape::Tape,
    w: &AttentionLayerWeights,
    vars: &AttentionVars,
    xn: crate::tape::VarId,
) -> crate::tape::VarId {
    let q = t.matmul(xn, vars.w_q);
    let k = t.matmul(xn, vars.w_k);
    let v = t.matmul(xn, vars.w_v);
    let scale = 1.0 / (w.d_k as f32).sqrt();
    let group = w.group_size();
    let mut head_outs = Vec::with_capacity(w.heads);
    for head in 0..w.heads {
        let g = head / group;
        let qh = t.slice_cols(q, head * w.d_k, w.d_k);
        let kh = t.slice_cols(k, g * w.d_k, w.d_k);
        let vh = t.slice_cols(v, g * w.d_v, w.d_v);
        let scores = t.matmul_nt(qh, kh);
        let scores = t.scale(scores, scale);
        let probs = t.causal_softmax(scores);
        head_outs.push(t.matmul(probs, vh));
    }
    let mixed = t.concat_cols(&head_outs);
    t.matmul(mixed, vars.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::max_rel_err;
    use crate::rng::{seeded, Stream};

    fn random_layer(
        d: usize,
        heads: usize,
        kv_heads: usize,
        d_k: usize,
        seed: u64,
    ) -> AttentionLayerWeights {
        let mut rng = seeded(seed, Stream::WeightInit);
        AttentionLayerWeights {
            w_q: Matrix::kaiming(d, heads * d_k, &mut rng),
            w_k: Matrix::kaiming(d, kv_heads * d_k, &mut rng),
            w_v: Matrix::kaiming(d, kv_heads * d_k, &mut rng),
            w_o: Matrix::kaiming(heads * d_k, d, &mut rng),
            heads,
            kv_heads,
            d_k,
            d_v: d_k,
        }
    }

    #[test]
    fn mask_recursion_holds_by_enumeration() {
        // m_{s,t} = m_{t-1,t} * m_{s,t-1} for every strictly historical
        // entry 1 <= s < t <= 64; the s = t entry is the fresh K_t V_t term
        // of the recurrence and enters with coefficient 1, not through the
        // recursion.
        for t in 1..=64usize {
            for s in 1..t {
                let lhs = causal_mask(s, t);
                let rhs = causal_mask(t - 1, t) * causal_mask(s, t - 1);
                assert_eq!(lhs, rhs, "s={s} t={t}");
            }
            assert_eq!(causal_mask(t, t), 1.0);
        }
    }

    #[test]
    fn single_token_is_value_projection() {
        let w = random_layer(8, 2, 2, 4, 1);
        let mut rng = seeded(2, Stream::WeightInit);
        let x = SequenceTensor::randn(1, 1, 8, 1.0, &mut rng);
        let y = attention_forward(&w, &x).unwrap();
        // softmax over a single score is 1: output = W_O . V row
        let v = x.seq(0).matmul(&w.w_v).unwrap();
        let want = v.matmul(&w.w_o).unwrap();
        assert!(max_rel_err(y.seq(0).data(), want.data()) < 1e-6);
    }

    #[test]
    fn identical_tokens_average_value_rows() {
        let w = random_layer(8, 2, 2, 4, 3);
        let mut rng = seeded(4, Stream::WeightInit);
        let row: Vec<f32> = (0..8).map(|_| crate::rng::normal(&mut rng)).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = SequenceTensor::from_vec(1, 2, 8, data);
        let y = attention_forward(&w, &x).unwrap();
        // both tokens identical -> uniform scores at position 2 -> average of
        // two identical value rows = the value row itself = position-1 output
        let y0 = y.seq(0).row(0).to_vec();
        let y1 = y.seq(0).row(1).to_vec();
        assert!(max_rel_err(&y0, &y1) < 1e-5);
    }

    #[test]
    fn matches_per_position_oracle() {
        let w = random_layer(8, 2, 1, 4, 5);
        let mut rng = seeded(6, Stream::WeightInit);
        let x = SequenceTensor::randn(1, 5, 8, 1.0, &mut rng);
        let y = attention_forward(&w, &x).unwrap();

        // brute-force per-position oracle in f64
        let xm = x.seq(0);
        let q = xm.matmul(&w.w_q).unwrap();
        let k = xm.matmul(&w.w_k).unwrap();
        let v = xm.matmul(&w.w_v).unwrap();
        let mut mixed = Matrix::zeros(5, w.heads * w.d_v);
        for t in 0..5 {
            for head in 0..w.heads {
                let g = head / w.group_size();
                let qh: Vec<f64> = q.row(t)[head * w.d_k..(head + 1) * w.d_k]
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                let mut scores = vec![0.0f64; t + 1];
                for (s, sc) in scores.iter_mut().enumerate() {
                    let kh = &k.row(s)[g * w.d_k..(g + 1) * w.d_k];
                    *sc = qh
                        .iter()
                        .zip(kh)
                        .map(|(&a, &b)| a * b as f64)
                        .sum::<f64>()
                        / (w.d_k as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = scores.iter().map(|&s| (s - mx).exp()).sum();
                for s in 0..=t {
                    let p = (scores[s] - mx).exp() / sum;
                    let vh = &v.row(s)[g * w.d_v..(g + 1) * w.d_v];
                    for cv in 0..w.d_v {
                        let cur = mixed.get(t, head * w.d_v + cv) as f64 + p * vh[cv] as f64;
                        mixed.set(t, head * w.d_v + cv, cur as f32);
                    }
                }
            }
        }
        let want = mixed.matmul(&w.w_o).unwrap();
        assert!(max_rel_err(y.seq(0).data(), want.data()) < 1e-5);
    }

    #[test]
    fn stepwise_decode_equals_full_forward() {
        let w = random_layer(8, 4, 2, 4, 7);
        let mut rng = seeded(8, Stream::WeightInit);
        let x = SequenceTensor::randn(1, 6, 8, 1.0, &mut rng);
        let full = attention_forward(&w, &x).unwrap();
        let mut cache = KVCache::new(w.kv_heads, w.d_k, w.d_v);
        let xm = x.seq(0);
        for t in 0..6 {
            let y = attention_step(&w, &mut cache, xm.row(t)).unwrap();
            assert!(
                max_rel_err(&y, full.seq(0).row(t)) < 1e-5,
                "mismatch at position {t}"
            );
            // cache grows by exactly one slot per decoded token
            assert_eq!(cache.byte_size(), 2 * (t + 1) * w.kv_heads * w.d_k * 4);
        }
    }

    #[test]
    fn empty_cache_first_token_matches_l1_forward() {
        let w = random_layer(8, 2, 2, 4, 9);
        let mut rng = seeded(10, Stream::WeightInit);
        let x = SequenceTensor::randn(1, 1, 8, 1.0, &mut rng);
        let full = attention_forward(&w, &x).unwrap();
        let mut cache = KVCache::new(w.kv_heads, w.d_k, w.d_v);
        let y = attention_step(&w, &mut cache, x.seq(0).row(0)).unwrap();
        assert!(max_rel_err(&y, full.seq(0).row(0)) < 1e-6);
    }

    #[test]
    fn causality_perturbation_only_affects_later_positions() {
        let w = random_layer(8, 2, 1, 4, 11);
        let mut rng = seeded(12, Stream::WeightInit);
        for _ in 0..5 {
            let x = SequenceTensor::randn(1, 7, 8, 1.0, &mut rng);
            let y = attention_forward(&w, &x).unwrap();
            use rand::Rng;
            let j = rng.gen_range(0..7);
            let mut xp = x.seq(0);
            for c in 0..8 {
                xp.set(j, c, xp.get(j, c) + crate::rng::normal(&mut rng));
            }
            let yp = attention_forward(&w, &SequenceTensor::single(&xp)).unwrap();
            for t in 0..j {
                assert_eq!(
                    y.seq(0).row(t),
                    yp.seq(0).row(t),
                    "position {t} changed by perturbing {j}"
                );
            }
        }
    }

    #[test]
    fn linear_attention_single_term_and_annihilation() {
        let w = random_layer(8, 2, 2, 4, 13);
        let mut rng = seeded(14, Stream::WeightInit);
        let x = SequenceTensor::randn(1, 1, 8, 1.0, &mut rng);
        let y = linear_attention_direct(&w, &x).unwrap();
        // L=1: y_1 = (Q_1^T K_1) V_1 / sqrt(d_k), head-wise, then W_O
        let xm = x.seq(0);
        let q = xm.matmul(&w.w_q).unwrap();
        let k = xm.matmul(&w.w_k).unwrap();
        let v = xm.matmul(&w.w_v).unwrap();
        let mut mixed = Matrix::zeros(1, w.heads * w.d_v);
        for head in 0..w.heads {
            let g = head / w.group_size();
            let qh = &q.row(0)[head * w.d_k..(head + 1) * w.d_k];
            let kh = &k.row(0)[g * w.d_k..(g + 1) * w.d_k];
            let dotp = dot_f64(qh, kh) / (w.d_k as f64).sqrt();
            for cv in 0..w.d_v {
                mixed.set(0, head * w.d_v + cv, (dotp * v.get(0, g * w.d_v + cv) as f64) as f32);
            }
        }
        let want = mixed.matmul(&w.w_o).unwrap();
        assert!(max_rel_err(y.seq(0).data(), want.data()) < 1e-5);

        // orthogonal Q vs K: zero W_Q rows kill every score -> zero output
        let mut wz = w.clone();
        wz.w_q = Matrix::zeros(8, w.heads * w.d_k);
        let x2 = SequenceTensor::randn(1, 4, 8, 1.0, &mut rng);
        let y2 = linear_attention_direct(&wz, &x2).unwrap();
        assert!(y2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_direct_matches_double_sum_oracle() {
        let w = random_layer(8, 2, 2, 4, 15);
        let mut rng = seeded(16, Stream::WeightInit);
        let x = SequenceTensor::randn(1, 7, 8, 1.0, &mut rng);
        let y = linear_attention_direct(&w, &x).unwrap();

        let xm = x.seq(0);
        let q = xm.matmul(&w.w_q).unwrap();
        let k = xm.matmul(&w.w_k).unwrap();
        let v = xm.matmul(&w.w_v).unwrap();
        let mut mixed = Matrix::zeros(7, w.heads * w.d_v);
        for t in 0..7 {
            for head in 0..w.heads {
                let g = head / w.group_size();
                for cv in 0..w.d_v {
                    let mut acc = 0.0f64;
                    for s in 0..=t {
                        for i in 0..w.d_k {
                            acc += q.get(t, head * w.d_k + i) as f64
                                * k.get(s, g * w.d_k + i) as f64
                                * v.get(s, g * w.d_v + cv) as f64;
                        }
                    }
                    mixed.set(t, head * w.d_v + cv, (acc / (w.d_k as f64).sqrt()) as f32);
                }
            }
        }
        let want = mixed.matmul(&w.w_o).unwrap();
        assert!(max_rel_err(y.seq(0).data(), want.data()) < 1e-5);
    }

    #[test]
    fn recurrent_equals_direct() {
        for seed in 0..8u64 {
            let w = random_layer(8, 4, 2, 4, 100 + seed);
            let mut rng = seeded(200 + seed, Stream::WeightInit);
            let x = SequenceTensor::randn(2, 12, 8, 1.0, &mut rng);
            let a = linear_attention_direct(&w, &x).unwrap();
            let b = linear_attention_recurrent(&w, &x).unwrap();
            assert!(max_rel_err(a.data(), b.data()) < 1e-5);
        }
    }

    #[test]
    fn recurrent_state_is_constant_size() {
        let w = random_layer(8, 2, 2, 4, 31);
        assert_eq!(linear_state_bytes(&w), 2 * 4 * 4 * 4);
        // state footprint does not depend on sequence length by construction;
        // the recurrent path allocates it once before the time loop.
    }
}
