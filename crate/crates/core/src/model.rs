//! The hybrid model: token/position embeddings, a stack of blocks whose
//! mixer is either causal attention or a selective SSM (each followed by the
//! block's MLP, pre-norm residuals throughout), a final norm and an output
//! head. One code path builds the forward on a tape (training, evaluation,
//! activation tracing); a separate incremental path decodes with per-layer
//! caches/states.

use crate::attention::{self, AttentionLayerWeights, AttentionVars, KVCache};
use crate::layout::{LayerKind, LayerLayout};
use crate::mamba::{self, MambaLayerWeights, MambaVars, SSMState, GATE_UNIT_BIAS};
use crate::matrix::{dot_f64, Matrix};
use crate::rng::{seeded, Stream};
use crate::tape::{self, Tape, VarId};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// SSM state size per head; set to d_k at transfer time.
    pub n_state: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Depthwise conv width for SSM mixers; 0 disables the branch.
    pub conv_kernel: usize,
    /// Multiplicative gate branch on SSM mixers.
    pub gated_ssm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            )));
        }
        if self.heads * self.d_k != self.dim {
            return Err(Error::Config(format!(
                "heads*d_k = {} must equal dim {}",
                self.heads * self.d_k,
                self.dim
            )));
        }
        if self.conv_kernel == 1 {
            return Err(Error::Config("conv kernel width must be 0 or >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Attention(AttentionLayerWeights),
    Mamba(MambaLayerWeights),
}

impl Mixer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Mixer::Attention(_) => LayerKind::T,
            Mixer::Mamba(_) => LayerKind::M,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm_mixer: Matrix,
    pub mixer: Mixer,
    pub norm_mlp: Matrix,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub cfg: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Matrix,
    pub head: Matrix,
}

pub fn attention_mixer_init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> AttentionLayerWeights {
    let d = cfg.dim;
    // residual-branch outputs scaled down with depth, GPT-2 style
    let o_scale = 1.0 / ((2 * cfg.depth) as f32).sqrt();
    AttentionLayerWeights {
        w_q: Matrix::kaiming(d, cfg.heads * cfg.d_k, rng),
        w_k: Matrix::kaiming(d, cfg.kv_heads * cfg.d_k, rng),
        w_v: Matrix::kaiming(d, cfg.kv_heads * cfg.d_v, rng),
        w_o: Matrix::kaiming(cfg.heads * cfg.d_v, d, rng).scale(o_scale),
        heads: cfg.heads,
        kv_heads: cfg.kv_heads,
        d_k: cfg.d_k,
        d_v: cfg.d_v,
    }
}

/// Default decay ramp: A[head, channel] = -(1 + channel), stored as a_log.
pub fn a_log_ramp(heads: usize, d_v: usize) -> Matrix {
    Matrix::from_fn(1, heads * d_v, |_, c| (1.0 + (c % d_v) as f32).ln())
}

/// Bias giving softplus(b) ~ 0.05, so Abar starts near 1.
pub fn delta_bias_init(heads: usize) -> Matrix {
    Matrix::filled(1, heads, (0.05f32.exp() - 1.0).ln())
}

pub fn identity_conv_kernel(channels: usize, width: usize) -> Matrix {
    Matrix::from_fn(channels, width, |_, j| if j == width - 1 { 1.0 } else { 0.0 })
}

pub fn unit_gate(dim: usize, channels: usize) -> (Matrix, Matrix) {
    (
        Matrix::zeros(dim, channels),
        Matrix::filled(1, channels, GATE_UNIT_BIAS),
    )
}

/// Freshly initialized SSM mixer (no weight transfer); D starts at 1 like
/// stock Mamba blocks.
pub fn mamba_mixer_init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MambaLayerWeights {
    let d = cfg.dim;
    let o_scale = 1.0 / ((2 * cfg.depth) as f32).sqrt();
    MambaLayerWeights {
        w_x: Matrix::kaiming(d, cfg.kv_heads * cfg.d_v, rng),
        w_b: Matrix::kaiming(d, cfg.kv_heads * cfg.n_state, rng),
        w_c: Matrix::kaiming(d, cfg.heads * cfg.n_state, rng),
        w_delta: Matrix::kaiming(d, cfg.heads, rng),
        b_delta: delta_bias_init(cfg.heads),
        a_log: a_log_ramp(cfg.heads, cfg.d_v),
        d_skip: Matrix::filled(1, cfg.heads * cfg.d_v, 1.0),
        w_o: Matrix::kaiming(cfg.heads * cfg.d_v, d, rng).scale(o_scale),
        heads: cfg.heads,
        kv_heads: cfg.kv_heads,
        d_v: cfg.d_v,
        n_state: cfg.n_state,
        out_scale: 1.0 / (cfg.n_state as f32).sqrt(),
        conv_kernel: (cfg.conv_kernel >= 2)
            .then(|| identity_conv_kernel(cfg.kv_heads * cfg.d_v, cfg.conv_kernel)),
        gate: cfg.gated_ssm.then(|| unit_gate(d, cfg.heads * cfg.d_v)),
    }
}

fn mlp_init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MlpWeights {
    let o_scale = 1.0 / ((2 * cfg.depth) as f32).sqrt();
    MlpWeights {
        w_up: Matrix::kaiming(cfg.dim, cfg.d_ff, rng),
        w_down: Matrix::kaiming(cfg.d_ff, cfg.dim, rng).scale(o_scale),
    }
}

impl HybridModel {
    /// Random init with the given layout; the all-T case is the teacher.
    pub fn new_random(cfg: ModelConfig, layout: &LayerLayout, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if layout.len() != cfg.depth {
            return Err(Error::Config(format!(
                "layout length {} does not match depth {}",
                layout.len(),
                cfg.depth
            )));
        }
        let mut rng = seeded(seed, Stream::WeightInit);
        let emb_std = 1.0 / (cfg.dim as f32).sqrt();
        let tok_emb = Matrix::randn(cfg.vocab, cfg.dim, emb_std, &mut rng);
        let pos_emb = Matrix::randn(cfg.max_seq, cfg.dim, emb_std, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mixer = match layout.kind(i) {
                LayerKind::T => Mixer::Attention(attention_mixer_init(&cfg, &mut rng)),
                LayerKind::M => Mixer::Mamba(mamba_mixer_init(&cfg, &mut rng)),
            };
            blocks.push(Block {
                norm_mixer: Matrix::filled(1, cfg.dim, 1.0),
                mixer,
                norm_mlp: Matrix::filled(1, cfg.dim, 1.0),
                mlp: mlp_init(&cfg, &mut rng),
            });
        }
        let head = Matrix::kaiming(cfg.dim, cfg.vocab, &mut rng);
        Ok(HybridModel {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Matrix::filled(1, cfg.dim, 1.0),
            head,
        })
    }

    pub fn new_teacher(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let layout = LayerLayout::all_t(cfg.depth);
        Self::new_random(cfg, &layout, seed)
    }

    pub fn layout(&self) -> LayerLayout {
        LayerLayout::new(self.blocks.iter().map(|b| b.mixer.kind()).collect())
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Canonical parameter order; staging, the optimizer and checkpoints all
    /// follow this walk.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            names.push(format!("block{i}.norm_mixer"));
            match &b.mixer {
                Mixer::Attention(_) => {
                    for f in ["w_q", "w_k", "w_v", "w_o"] {
                        names.push(format!("block{i}.attn.{f}"));
                    }
                }
                Mixer::Mamba(m) => {
                    for f in [
                        "w_x", "w_b", "w_c", "w_delta", "b_delta", "a_log", "d_skip", "w_o",
                    ] {
                        names.push(format!("block{i}.ssm.{f}"));
                    }
                    if m.conv_kernel.is_some() {
                        names.push(format!("block{i}.ssm.conv_kernel"));
                    }
                    if m.gate.is_some() {
                        names.push(format!("block{i}.ssm.gate_w"));
                        names.push(format!("block{i}.ssm.gate_b"));
                    }
                }
            }
            names.push(format!("block{i}.norm_mlp"));
            names.push(format!("block{i}.mlp.w_up"));
            names.push(format!("block{i}.mlp.w_down"));
        }
        names.push("final_norm".to_string());
        names.push("head".to_string());
        names
    }

    pub fn export_params(&self) -> Vec<Matrix> {
        let mut out = vec![self.tok_emb.clone(), self.pos_emb.clone()];
        for b in &self.blocks {
            out.push(b.norm_mixer.clone());
            match &b.mixer {
                Mixer::Attention(a) => {
                    out.extend([a.w_q.clone(), a.w_k.clone(), a.w_v.clone(), a.w_o.clone()]);
                }
                Mixer::Mamba(m) => {
                    out.extend([
                        m.w_x.clone(),
                        m.w_b.clone(),
                        m.w_c.clone(),
                        m.w_delta.clone(),
                        m.b_delta.clone(),
                        m.a_log.clone(),
                        m.d_skip.clone(),
                        m.w_o.clone(),
                    ]);
                    if let Some(k) = &m.conv_kernel {
                        out.push(k.clone());
                    }
                    if let Some((gw, gb)) = &m.gate {
                        out.push(gw.clone());
                        out.push(gb.clone());
                    }
                }
            }
            out.push(b.norm_mlp.clone());
            out.push(b.mlp.w_up.clone());
            out.push(b.mlp.w_down.clone());
        }
        out.push(self.final_norm.clone());
        out.push(self.head.clone());
        out
    }

    pub fn import_params(&mut self, params: &[Matrix]) -> Result<()> {
        let mut it = params.iter();
        let mut next = |what: &str| -> Result<Matrix> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter tensor for {what}")))
        };
        self.tok_emb = next("tok_emb")?;
        self.pos_emb = next("pos_emb")?;
        for b in &mut self.blocks {
            b.norm_mixer = next("norm_mixer")?;
            match &mut b.mixer {
                Mixer::Attention(a) => {
                    a.w_q = next("w_q")?;
                    a.w_k = next("w_k")?;
                    a.w_v = next("w_v")?;
                    a.w_o = next("w_o")?;
                }
                Mixer::Mamba(m) => {
                    m.w_x = next("w_x")?;
                    m.w_b = next("w_b")?;
                    m.w_c = next("w_c")?;
                    m.w_delta = next("w_delta")?;
                    m.b_delta = next("b_delta")?;
                    m.a_log = next("a_log")?;
                    m.d_skip = next("d_skip")?;
                    m.w_o = next("w_o")?;
                    if m.conv_kernel.is_some() {
                        m.conv_kernel = Some(next("conv_kernel")?);
                    }
                    if m.gate.is_some() {
                        m.gate = Some((next("gate_w")?, next("gate_b")?));
                    }
                }
            }
            b.norm_mlp = next("norm_mlp")?;
            b.mlp.w_up = next("w_up")?;
            b.mlp.w_down = next("w_down")?;
        }
        self.final_norm = next("final_norm")?;
        self.head = next("head")?;
        if it.next().is_some() {
            return Err(Error::Config("too many parameter tensors".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.export_params().iter().map(|m| m.data().len()).sum()
    }
}

enum StagedMixer {
    Attn(AttentionVars),
    Ssm(MambaVars),
}

struct StagedBlock {
    norm_mixer: VarId,
    mixer: StagedMixer,
    norm_mlp: VarId,
    w_up: VarId,
    w_down: VarId,
}

/// Parameter leaves of one model inside a tape, in canonical order.
pub struct StagedModel {
    pub leaf_ids: Vec<VarId>,
    tok_emb: VarId,
    pos_emb: VarId,
    blocks: Vec<StagedBlock>,
    final_norm: VarId,
    head: VarId,
}

impl HybridModel {
    /// Create one leaf per parameter from `values` (canonical order) and
    /// remember the ids. Trainable staging produces gradients on backward.
    pub fn stage(&self, t: &mut Tape, values: &[Matrix], trainable: bool) -> StagedModel {
        let mut ids = Vec::with_capacity(values.len());
        let mut k = 0usize;
        let leaf = |t: &mut Tape, k: &mut usize, ids: &mut Vec<VarId>| -> VarId {
            let m = values[*k].clone();
            *k += 1;
            let id = if trainable { t.param(m) } else { t.constant(m) };
            ids.push(id);
            id
        };
        let tok_emb = leaf(t, &mut k, &mut ids);
        let pos_emb = leaf(t, &mut k, &mut ids);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let norm_mixer = leaf(t, &mut k, &mut ids);
            let mixer = match &b.mixer {
                Mixer::Attention(_) => StagedMixer::Attn(AttentionVars {
                    w_q: leaf(t, &mut k, &mut ids),
                    w_k: leaf(t, &mut k, &mut ids),
                    w_v: leaf(t, &mut k, &mut ids),
                    w_o: leaf(t, &mut k, &mut ids),
                }),
                Mixer::Mamba(m) => {
                    let w_x = leaf(t, &mut k, &mut ids);
                    let w_b = leaf(t, &mut k, &mut ids);
                    let w_c = leaf(t, &mut k, &mut ids);
                    let w_delta = leaf(t, &mut k, &mut ids);
                    let b_delta = leaf(t, &mut k, &mut ids);
                    let a_log = leaf(t, &mut k, &mut ids);
                    let d_skip = leaf(t, &mut k, &mut ids);
                    let w_o = leaf(t, &mut k, &mut ids);
                    let conv_kernel = m.conv_kernel.as_ref().map(|_| leaf(t, &mut k, &mut ids));
                    let gate = m
                        .gate
                        .as_ref()
                        .map(|_| (leaf(t, &mut k, &mut ids), leaf(t, &mut k, &mut ids)));
                    StagedMixer::Ssm(MambaVars {
                        w_x,
                        w_b,
                        w_c,
                        w_delta,
                        b_delta,
                        a_log,
                        d_skip,
                        w_o,
                        conv_kernel,
                        gate,
                    })
                }
            };
            let norm_mlp = leaf(t, &mut k, &mut ids);
            let w_up = leaf(t, &mut k, &mut ids);
            let w_down = leaf(t, &mut k, &mut ids);
            blocks.push(StagedBlock {
                norm_mixer,
                mixer,
                norm_mlp,
                w_up,
                w_down,
            });
        }
        let final_norm = leaf(t, &mut k, &mut ids);
        let head = leaf(t, &mut k, &mut ids);
        assert_eq!(k, values.len(), "staging consumed {k} of {} values", values.len());
        StagedModel {
            leaf_ids: ids,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
        }
    }

    /// Differentiable forward of one sequence; returns logits and the final
    /// normed hidden states (the pre-logit representation).
    pub fn tape_logits(
        &self,
        t: &mut Tape,
        staged: &StagedModel,
        tokens: &[u32],
    ) -> Result<(VarId, VarId)> {
        let (logits, hidden, _) = self.tape_logits_inner(t, staged, tokens, false)?;
        Ok((logits, hidden))
    }

    /// Forward that also reports each block's input and output node, for
    /// activation-similarity scoring.
    pub fn tape_logits_traced(
        &self,
        t: &mut Tape,
        staged: &StagedModel,
        tokens: &[u32],
    ) -> Result<(VarId, VarId, Vec<(VarId, VarId)>)> {
        self.tape_logits_inner(t, staged, tokens, true)
    }

    fn tape_logits_inner(
        &self,
        t: &mut Tape,
        staged: &StagedModel,
        tokens: &[u32],
        trace: bool,
    ) -> Result<(VarId, VarId, Vec<(VarId, VarId)>)> {
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::invalid(
                "forward",
                format!(
                    "sequence length {} exceeds max_seq {}",
                    tokens.len(),
                    self.cfg.max_seq
                ),
            ));
        }
        for &tok in tokens {
            if tok as usize >= self.cfg.vocab {
                return Err(Error::TargetOutOfVocab {
                    id: tok,
                    vocab: self.cfg.vocab,
                });
            }
        }
        let pos_ids: Vec<u32> = (0..tokens.len() as u32).collect();
        let emb = t.gather(staged.tok_emb, tokens);
        let pos = t.gather(staged.pos_emb, &pos_ids);
        let mut x = t.add(emb, pos);
        let mut spans = Vec::new();
        for (b, sb) in self.blocks.iter().zip(&staged.blocks) {
            let x_in = x;
            let xn = t.rmsnorm(x, sb.norm_mixer);
            let mix = match (&b.mixer, &sb.mixer) {
                (Mixer::Attention(w), StagedMixer::Attn(vars)) => {
                    attention::tape_forward(t, w, vars, xn)
                }
                (Mixer::Mamba(w), StagedMixer::Ssm(vars)) => mamba::tape_forward(t, w, vars, xn),
                _ => unreachable!("staged mixer kind mismatch"),
            };
            x = t.add(x, mix);
            let xn2 = t.rmsnorm(x, sb.norm_mlp);
            let h = t.matmul(xn2, sb.w_up);
            let h = t.silu(h);
            let mlp_out = t.matmul(h, sb.w_down);
            x = t.add(x, mlp_out);
            if trace {
                spans.push((x_in, x));
            }
        }
        let hidden = t.rmsnorm(x, staged.final_norm);
        let logits = t.matmul(hidden, staged.head);
        Ok((logits, hidden, spans))
    }

    /// Non-differentiable convenience forward: logits and final hidden for
    /// one token sequence.
    pub fn sequence_logits(&self, tokens: &[u32]) -> Result<(Matrix, Matrix)> {
        let values = self.export_params();
        let mut t = Tape::new();
        let staged = self.stage(&mut t, &values, false);
        let (logits, hidden) = self.tape_logits(&mut t, &staged, tokens)?;
        Ok((t.value(logits).clone(), t.value(hidden).clone()))
    }
}

enum MixerState {
    Attn(KVCache),
    Ssm(SSMState),
}

/// Incremental decoding session; owns one cache/state per layer.
pub struct DecodeSession<'m> {
    model: &'m HybridModel,
    states: Vec<MixerState>,
    pos: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m HybridModel) -> Self {
        let states = model
            .blocks
            .iter()
            .map(|b| match &b.mixer {
                Mixer::Attention(a) => MixerState::Attn(KVCache::new(a.kv_heads, a.d_k, a.d_v)),
                Mixer::Mamba(m) => MixerState::Ssm(SSMState::new(m)),
            })
            .collect();
        DecodeSession {
            model,
            states,
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Total bytes held in KV caches plus SSM states right now.
    pub fn cache_bytes(&self) -> usize {
        self.states
            .iter()
            .map(|s| match s {
                MixerState::Attn(c) => c.byte_size(),
                MixerState::Ssm(s) => s.byte_size(),
            })
            .sum()
    }

    /// Feed one token, get next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let cfg = &self.model.cfg;
        if token as usize >= cfg.vocab {
            return Err(Error::TargetOutOfVocab {
                id: token,
                vocab: cfg.vocab,
            });
        }
        if self.pos >= cfg.max_seq {
            return Err(Error::invalid(
                "decode",
                format!("position {} exceeds max_seq {}", self.pos, cfg.max_seq),
            ));
        }
        let mut x: Vec<f32> = self.model.tok_emb.row(token as usize).to_vec();
        for (xv, &pv) in x.iter_mut().zip(self.model.pos_emb.row(self.pos)) {
            *xv += pv;
        }
        for (b, st) in self.model.blocks.iter().zip(self.states.iter_mut()) {
            let xn = rmsnorm_vec(&x, &b.norm_mixer);
            let mix = match (&b.mixer, st) {
                (Mixer::Attention(w), MixerState::Attn(cache)) => {
                    attention::attention_step(w, cache, &xn)?
                }
                (Mixer::Mamba(w), MixerState::Ssm(state)) => mamba::mamba_step(w, state, &xn)?,
                _ => unreachable!("decode state kind mismatch"),
            };
            for (xv, &mv) in x.iter_mut().zip(&mix) {
                *xv += mv;
            }
            let xn2 = rmsnorm_vec(&x, &b.norm_mlp);
            let xm = Matrix::from_vec(1, xn2.len(), xn2);
            let mut h = xm.matmul(&b.mlp.w_up)?;
            crate::flops::add(crate::flops::ACT_COST * h.data().len() as u64);
            for v in h.data_mut() {
                *v *= tape::sigmoid(*v);
            }
            let mlp_out = h.matmul(&b.mlp.w_down)?;
            for (xv, &mv) in x.iter_mut().zip(mlp_out.data()) {
                *xv += mv;
            }
        }
        let hn = rmsnorm_vec(&x, &self.model.final_norm);
        let hm = Matrix::from_vec(1, hn.len(), hn);
        let logits = hm.matmul(&self.model.head)?;
        self.pos += 1;
        Ok(logits.into_data())
    }
}

fn rmsnorm_vec(x: &[f32], gain: &Matrix) -> Vec<f32> {
    crate::flops::add(crate::flops::NORM_COST * x.len() as u64);
    let inv = {
        let ss = dot_f64(x, x);
        1.0 / (ss / x.len() as f64 + 1e-5).sqrt()
    };
    x.iter()
        .zip(gain.data())
        .map(|(&v, &g)| (v as f64 * inv) as f32 * g)
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum SampleMode {
    Greedy,
    TopK(usize),
}

/// Autoregressive generation from a prompt. Stops after `max_new` tokens or
/// at `eos`. Returns only the generated tokens.
pub fn generate(
    model: &HybridModel,
    prompt: &[u32],
    max_new: usize,
    mode: SampleMode,
    eos: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::invalid("generate", "empty prompt"));
    }
    let mut sess = DecodeSession::new(model);
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = sess.step(tok)?;
    }
    let mut out = Vec::new();
    for _ in 0..max_new {
        if sess.position() >= model.cfg.max_seq {
            break;
        }
        let next = match mode {
            SampleMode::Greedy => argmax(&logits),
            SampleMode::TopK(k) => sample_topk(&logits, k.max(1), rng),
        } as u32;
        if Some(next) == eos {
            break;
        }
        out.push(next);
        logits = sess.step(next)?;
    }
    Ok(out)
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold(0usize, |b, (i, &v)| if v > xs[b] { i } else { b })
}

fn sample_topk(logits: &[f32], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    let mut probs: Vec<f32> = idx.iter().map(|&i| logits[i]).collect();
    tape::softmax_row(&mut probs);
    let u: f32 = rng.gen();
    let mut cum = 0.0f32;
    for (j, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return idx[j];
        }
    }
    idx[idx.len() - 1]
}
