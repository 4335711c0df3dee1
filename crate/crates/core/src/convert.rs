//! Closed-form attention-to-SSM weight transfer and hybrid assembly from a
//! pretrained all-attention teacher. The structural alignment: the SSM's C,
//! B and x projections take the donor's Q, K and V projection weights
//! verbatim, W_O is reused, the state size becomes the donor's d_k, and the
//! donor's 1/sqrt(d_k) score scaling is recorded as an output scaling.

use crate::attention::AttentionLayerWeights;
use crate::layout::{LayerKind, LayerLayout};
use crate::mamba::MambaLayerWeights;
use crate::matrix::{max_rel_err, Matrix, SequenceTensor};
use crate::model::{self, HybridModel, Mixer};
use crate::rng::{seeded, Stream};
use crate::{Error, Result};

/// Options for the non-transferred parts of a converted mixer.
#[derive(Debug, Clone, Copy)]
pub struct TransferOptions {
    /// Depthwise conv width (0 = off). Initialized to an identity impulse so
    /// the transferred function is unchanged at step 0.
    pub conv_kernel: usize,
    /// Multiplicative gate branch, initialized to a unit gate.
    pub gated: bool,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            conv_kernel: 0,
            gated: false,
        }
    }
}

/// Build an SSM mixer from a donor attention layer.
///
/// W_C := W_Q, W_B := W_K, W_x := W_V (bit-identical copies), W_O reused,
/// N := d_k. The decay ramp and delta bias follow the scratch-init scheme;
/// D starts at zero because the donor has no skip path.
pub fn transfer_attention_to_mamba(
    src: &AttentionLayerWeights,
    opts: &TransferOptions,
) -> Result<MambaLayerWeights> {
    src.validate(src.model_dim())?;
    let d = src.model_dim();
    let n_state = src.d_k;
    let w = MambaLayerWeights {
        w_x: src.w_v.clone(),
        w_b: src.w_k.clone(),
        w_c: src.w_q.clone(),
        w_delta: Matrix::zeros(d, src.heads),
        b_delta: model::delta_bias_init(src.heads),
        a_log: model::a_log_ramp(src.heads, src.d_v),
        d_skip: Matrix::zeros(1, src.heads * src.d_v),
        w_o: src.w_o.clone(),
        heads: src.heads,
        kv_heads: src.kv_heads,
        d_v: src.d_v,
        n_state,
        out_scale: 1.0 / (src.d_k as f32).sqrt(),
        conv_kernel: (opts.conv_kernel >= 2).then(|| {
            model::identity_conv_kernel(src.kv_heads * src.d_v, opts.conv_kernel)
        }),
        gate: opts.gated.then(|| model::unit_gate(d, src.heads * src.d_v)),
    };
    w.validate()?;
    Ok(w)
}

/// Assemble a hybrid from an all-attention teacher: T positions copy the
/// teacher layer verbatim, M positions carry transferred mixers (keeping the
/// teacher's norms and MLP), embeddings and head are copied.
pub fn assemble_hybrid(
    teacher: &HybridModel,
    layout: &LayerLayout,
    opts: &TransferOptions,
) -> Result<HybridModel> {
    if layout.len() != teacher.depth() {
        return Err(Error::Layout(format!(
            "layout length {} does not match teacher depth {}",
            layout.len(),
            teacher.depth()
        )));
    }
    let mut out = teacher.clone();
    out.cfg.conv_kernel = opts.conv_kernel;
    out.cfg.gated_ssm = opts.gated;
    for (i, block) in out.blocks.iter_mut().enumerate() {
        let donor = match &block.mixer {
            Mixer::Attention(a) => a,
            Mixer::Mamba(_) => {
                return Err(Error::invalid(
                    "assemble_hybrid",
                    format!("teacher layer {i} is not an attention layer"),
                ))
            }
        };
        if layout.kind(i) == LayerKind::M {
            block.mixer = Mixer::Mamba(transfer_attention_to_mamba(donor, opts)?);
        }
    }
    out.cfg.n_state = teacher.cfg.d_k;
    Ok(out)
}

/// Max relative error between each transferred layer in emulation mode and
/// the donor's masked linear attention, over random probe input. This is the
/// transfer-fidelity self test the convert command reports.
pub fn emulation_self_test(
    teacher: &HybridModel,
    hybrid: &HybridModel,
    probe_len: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded(seed, Stream::Probe);
    let mut worst = 0.0f64;
    for (i, (tb, hb)) in teacher.blocks.iter().zip(&hybrid.blocks).enumerate() {
        let Mixer::Mamba(m) = &hb.mixer else { continue };
        let Mixer::Attention(a) = &tb.mixer else {
            return Err(Error::invalid("self_test", "teacher mixer not attention"));
        };
        let x = SequenceTensor::randn(1, probe_len, teacher.cfg.dim, 1.0, &mut rng);
        let want = crate::attention::linear_attention_direct(a, &x)?;
        let got = crate::mamba::mamba_forward_emulation(m, &x)?;
        let err = max_rel_err(got.data(), want.data());
        if err > worst {
            worst = err;
        }
        let _ = i;
    }
    Ok(worst)
}

/// Forward of the teacher with every attention mixer's softmax removed
/// (masked linear attention in place of attention). Reference for the
/// all-M emulation equivalence.
pub fn teacher_forward_softmax_removed(
    teacher: &HybridModel,
    tokens: &[u32],
) -> Result<Matrix> {
    let cfg = &teacher.cfg;
    if tokens.len() > cfg.max_seq {
        return Err(Error::invalid("forward", "sequence exceeds max_seq"));
    }
    let mut x = Matrix::zeros(tokens.len(), cfg.dim);
    for (t, &tok) in tokens.iter().enumerate() {
        for c in 0..cfg.dim {
            x.set(
                t,
                c,
                teacher.tok_emb.get(tok as usize, c) + teacher.pos_emb.get(t, c),
            );
        }
    }
    for b in &teacher.blocks {
        let Mixer::Attention(a) = &b.mixer else {
            return Err(Error::invalid("forward", "teacher mixer not attention"));
        };
        let xn = rmsnorm_mat(&x, &b.norm_mixer);
        let mix =
            crate::attention::linear_attention_direct(a, &SequenceTensor::single(&xn))?.seq(0);
        x = x.add(&mix)?;
        let xn2 = rmsnorm_mat(&x, &b.norm_mlp);
        let mut h = xn2.matmul(&b.mlp.w_up)?;
        for v in h.data_mut() {
            *v *= crate::tape::sigmoid(*v);
        }
        let mlp_out = h.matmul(&b.mlp.w_down)?;
        x = x.add(&mlp_out)?;
    }
    let hn = rmsnorm_mat(&x, &teacher.final_norm);
    hn.matmul(&teacher.head)
}

/// Forward of a hybrid with every SSM mixer forced into emulation mode.
pub fn hybrid_forward_emulated(hybrid: &HybridModel, tokens: &[u32]) -> Result<Matrix> {
    let cfg = &hybrid.cfg;
    let mut x = Matrix::zeros(tokens.len(), cfg.dim);
    for (t, &tok) in tokens.iter().enumerate() {
        for c in 0..cfg.dim {
            x.set(
                t,
                c,
                hybrid.tok_emb.get(tok as usize, c) + hybrid.pos_emb.get(t, c),
            );
        }
    }
    for b in &hybrid.blocks {
        let xn = rmsnorm_mat(&x, &b.norm_mixer);
        let mix = match &b.mixer {
            Mixer::Attention(a) => {
                crate::attention::attention_forward(a, &SequenceTensor::single(&xn))?.seq(0)
            }
            Mixer::Mamba(m) => {
                crate::mamba::mamba_forward_emulation(m, &SequenceTensor::single(&xn))?.seq(0)
            }
        };
        x = x.add(&mix)?;
        let xn2 = rmsnorm_mat(&x, &b.norm_mlp);
        let mut h = xn2.matmul(&b.mlp.w_up)?;
        for v in h.data_mut() {
            *v *= crate::tape::sigmoid(*v);
        }
        let mlp_out = h.matmul(&b.mlp.w_down)?;
        x = x.add(&mlp_out)?;
    }
    let hn = rmsnorm_mat(&x, &hybrid.final_norm);
    hn.matmul(&hybrid.head)
}

fn rmsnorm_mat(x: &Matrix, gain: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ss = crate::matrix::dot_f64(row, row);
        let inv = 1.0 / (ss / row.len() as f64 + 1e-5).sqrt();
        for (c, (&v, &g)) in row.iter().zip(gain.data()).enumerate() {
            out.set(r, c, (v as f64 * inv) as f32 * g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, Strategy};
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            depth: 4,
            heads: 4,
            kv_heads: 2,
            d_k: 4,
            d_v: 4,
            n_state: 4,
            d_ff: 32,
            vocab: 13,
            max_seq: 48,
            conv_kernel: 0,
            gated_ssm: false,
        }
    }

    #[test]
    fn transfer_copies_weights_bit_exactly() {
        let teacher = HybridModel::new_teacher(cfg(), 21).unwrap();
        let Mixer::Attention(a) = &teacher.blocks[0].mixer else {
            unreachable!()
        };
        let m = transfer_attention_to_mamba(a, &TransferOptions::default()).unwrap();
        assert_eq!(m.w_c, a.w_q);
        assert_eq!(m.w_b, a.w_k);
        assert_eq!(m.w_x, a.w_v);
        assert_eq!(m.w_o, a.w_o);
        assert_eq!(m.n_state, a.d_k);
        assert_eq!(m.out_scale, 1.0 / (a.d_k as f32).sqrt());
        // idempotent on weights: transferring again gives the same copies
        let m2 = transfer_attention_to_mamba(a, &TransferOptions::default()).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn transferred_layer_emulates_linear_attention() {
        let teacher = HybridModel::new_teacher(cfg(), 22).unwrap();
        let Mixer::Attention(a) = &teacher.blocks[1].mixer else {
            unreachable!()
        };
        let m = transfer_attention_to_mamba(a, &TransferOptions::default()).unwrap();
        let mut rng = seeded(23, Stream::Probe);
        let x = SequenceTensor::randn(2, 16, 16, 1.0, &mut rng);
        let want = crate::attention::linear_attention_direct(a, &x).unwrap();
        let got = crate::mamba::mamba_forward_emulation(&m, &x).unwrap();
        assert!(max_rel_err(got.data(), want.data()) < 1e-5);
    }

    #[test]
    fn zero_values_give_zero_emulation_output() {
        let teacher = HybridModel::new_teacher(cfg(), 24).unwrap();
        let Mixer::Attention(a) = &teacher.blocks[0].mixer else {
            unreachable!()
        };
        let mut a = a.clone();
        a.w_v = Matrix::zeros(16, 2 * 4);
        let m = transfer_attention_to_mamba(&a, &TransferOptions::default()).unwrap();
        let mut rng = seeded(25, Stream::Probe);
        let x = SequenceTensor::randn(1, 8, 16, 1.0, &mut rng);
        let y = crate::mamba::mamba_forward_emulation(&m, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_t_layout_is_identity_conversion() {
        let teacher = HybridModel::new_teacher(cfg(), 26).unwrap();
        let hybrid = assemble_hybrid(
            &teacher,
            &LayerLayout::all_t(4),
            &TransferOptions::default(),
        )
        .unwrap();
        assert_eq!(hybrid, teacher);
    }

    #[test]
    fn partial_layout_keeps_t_layers_bit_equal() {
        let teacher = HybridModel::new_teacher(cfg(), 27).unwrap();
        let layout = LayerLayout::parse("TMTM").unwrap();
        let hybrid = assemble_hybrid(&teacher, &layout, &TransferOptions::default()).unwrap();
        assert_eq!(hybrid.blocks[0], teacher.blocks[0]);
        assert_eq!(hybrid.blocks[2], teacher.blocks[2]);
        assert_eq!(hybrid.tok_emb, teacher.tok_emb);
        assert_eq!(hybrid.head, teacher.head);
        assert_eq!(hybrid.layout().to_string(), "TMTM");
        let worst = emulation_self_test(&teacher, &hybrid, 16, 1).unwrap();
        assert!(worst < 1e-5, "self test {worst}");
    }

    #[test]
    fn all_m_emulated_forward_matches_softmax_removed_teacher() {
        let teacher = HybridModel::new_teacher(cfg(), 28).unwrap();
        let hybrid = assemble_hybrid(
            &teacher,
            &LayerLayout::all_m(4),
            &TransferOptions::default(),
        )
        .unwrap();
        let tokens: Vec<u32> = vec![1, 5, 2, 12, 0, 3, 9, 4];
        let want = teacher_forward_softmax_removed(&teacher, &tokens).unwrap();
        let got = hybrid_forward_emulated(&hybrid, &tokens).unwrap();
        assert!(
            max_rel_err(got.data(), want.data()) < 1e-5,
            "layer-swap mismatch {}",
            max_rel_err(got.data(), want.data())
        );
    }

    #[test]
    fn assemble_respects_strategy_layouts() {
        let teacher = HybridModel::new_teacher(cfg(), 29).unwrap();
        let layout = build_layout(Strategy::Sandwich, 4, 1, 1).unwrap();
        let hybrid = assemble_hybrid(&teacher, &layout, &TransferOptions::default()).unwrap();
        assert_eq!(hybrid.layout(), layout);
        assert!(assemble_hybrid(
            &teacher,
            &LayerLayout::all_t(6),
            &TransferOptions::default()
        )
        .is_err());
    }
}
