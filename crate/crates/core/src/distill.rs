//! Teacher training and multi-level distillation: ground-truth cross
//! entropy, skew-KL between teacher and student logits, and an MSE constraint
//! on the final hidden representations, with per-component logging, held-out
//! evaluation snapshots, and the loss-component ablation harness.

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::matrix::Matrix;
use crate::model::{generate, HybridModel, SampleMode};
use crate::rng::{seeded, Stream};
use crate::tape::{self, Tape};
use crate::tasks::{edit_distance, Dataset, Sample};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub lr: f32,
    pub steps: usize,
    /// Dynamic batch size: samples are packed until this many scored tokens.
    pub batch_tokens: usize,
    /// Skew coefficient of KL(p || alpha p + (1-alpha) q).
    pub alpha_skew: f32,
    pub lambda_ce: f32,
    pub lambda_logits: f32,
    pub lambda_emb: f32,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    /// Keep retained attention blocks frozen during recovery.
    pub freeze_t: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lr: 1e-3,
            steps: 1000,
            batch_tokens: 256,
            alpha_skew: 0.1,
            lambda_ce: 1.0,
            lambda_logits: 1.0,
            lambda_emb: 1.0,
            seed: 42,
            log_every: 50,
            eval_every: 0,
            freeze_t: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.lambda_ce <= 0.0 && self.lambda_logits <= 0.0 && self.lambda_emb <= 0.0 {
            return Err(Error::Config("at least one lambda must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_skew) {
            return Err(Error::Config(format!(
                "alpha_skew {} outside [0,1]",
                self.alpha_skew
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub logits: f64,
    pub emb: f64,
    pub eval_ce: Option<f64>,
    pub eval_ter: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
    /// Total loss at every step, for convergence diagnostics.
    pub step_totals: Vec<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,ce,logits,emb,eval_ce,eval_ter";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{},{}\n",
                r.step,
                r.total,
                r.ce,
                r.logits,
                r.emb,
                opt(r.eval_ce),
                opt(r.eval_ter)
            ));
        }
        out
    }

    pub fn final_eval_ce(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_ce)
    }

    pub fn final_eval_ter(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_ter)
    }

    pub fn total_at_step(&self, step: usize) -> Option<f64> {
        self.step_totals.get(step.checked_sub(1)?).copied()
    }
}

/// Fraction of `window`-step windows in which the `ma`-step moving average
/// of the total loss did not increase end-to-end.
pub fn monotone_fraction(step_totals: &[f64], window: usize, ma: usize) -> f64 {
    if step_totals.len() < window || window < 2 * ma {
        return 1.0;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut ok = 0usize;
    let mut n = 0usize;
    for i in 0..=step_totals.len() - window {
        let head = mean(&step_totals[i..i + ma]);
        let tail = mean(&step_totals[i + window - ma..i + window]);
        if tail <= head {
            ok += 1;
        }
        n += 1;
    }
    ok as f64 / n as f64
}

/// Forward outputs of one model on one sequence.
pub struct BatchOutputs<'a> {
    pub logits: &'a Matrix,
    pub hidden: &'a Matrix,
    pub targets: &'a [u32],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub logits: f64,
    pub emb: f64,
}

/// Per-sequence distillation loss in f64: CE of the student against the
/// targets, mean skew KL from teacher to student distributions over scored
/// positions, and MSE between the final hidden states over scored positions.
/// The training path mirrors this through the tape; tests pin the two
/// against each other.
pub fn distill_loss(
    teacher: &BatchOutputs,
    student: &BatchOutputs,
    cfg: &DistillConfig,
) -> Result<LossComponents> {
    if teacher.logits.shape() != student.logits.shape()
        || teacher.hidden.shape() != student.hidden.shape()
    {
        return Err(Error::shape(
            "distill_loss",
            format!(
                "teacher {:?}/{:?} vs student {:?}/{:?}",
                teacher.logits.shape(),
                teacher.hidden.shape(),
                student.logits.shape(),
                student.hidden.shape()
            ),
        ));
    }
    let ce =
        crate::losses::cross_entropy_masked(student.logits, student.targets, Some(student.mask))?;
    let mut kl = 0.0f64;
    let mut mse = 0.0f64;
    let mut rows = 0usize;
    for r in 0..student.logits.rows() {
        if !student.mask[r] {
            continue;
        }
        let mut p = teacher.logits.row(r).to_vec();
        tape::softmax_row(&mut p);
        let mut q = student.logits.row(r).to_vec();
        tape::softmax_row(&mut q);
        kl += tape::skew_kl_row(&p, &q, cfg.alpha_skew);
        for (&a, &b) in student.hidden.row(r).iter().zip(teacher.hidden.row(r)) {
            let d = a as f64 - b as f64;
            mse += d * d;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::invalid("distill_loss", "no scored rows"));
    }
    let kl = kl / rows as f64;
    let mse = mse / (rows * student.hidden.cols()) as f64;
    Ok(LossComponents {
        total: cfg.lambda_ce as f64 * ce
            + cfg.lambda_logits as f64 * kl
            + cfg.lambda_emb as f64 * mse,
        ce,
        logits: kl,
        emb: mse,
    })
}

/// What supervises the student.
pub enum TrainMode<'a> {
    /// Plain next-token cross entropy (teacher pretraining).
    NextToken,
    /// Multi-level distillation from a frozen teacher.
    Distill { teacher: &'a HybridModel },
}

struct Batcher<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    cursor: usize,
    epoch_rng: rand_chacha::ChaCha8Rng,
    batch_tokens: usize,
}

impl<'a> Batcher<'a> {
    fn new(ds: &'a Dataset, batch_tokens: usize, seed: u64) -> Self {
        Batcher {
            ds,
            order: (0..ds.samples.len()).collect(),
            cursor: usize::MAX, // force an initial shuffle
            epoch_rng: seeded(seed, Stream::Batching),
            batch_tokens,
        }
    }

    fn next_batch(&mut self) -> Vec<&'a Sample> {
        let mut batch = Vec::new();
        let mut tokens = 0usize;
        loop {
            if self.cursor >= self.order.len() {
                crate::rng::shuffle(&mut self.epoch_rng, &mut self.order);
                self.cursor = 0;
            }
            let s = &self.ds.samples[self.order[self.cursor]];
            let cost = s.tokens.len() - 1;
            if !batch.is_empty() && tokens + cost > self.batch_tokens {
                break;
            }
            batch.push(s);
            tokens += cost;
            self.cursor += 1;
            if tokens >= self.batch_tokens {
                break;
            }
        }
        batch
    }
}

/// Optimize the student on the task, returning the loss report. The student
/// is updated in place; training is bit-reproducible for a fixed config.
pub fn train(
    student: &mut HybridModel,
    mode: TrainMode,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if train_ds.samples.is_empty() {
        return Err(Error::Task("empty training dataset".into()));
    }
    if train_ds.max_len() > student.cfg.max_seq {
        return Err(Error::Config(format!(
            "dataset sequence length {} exceeds model max_seq {}",
            train_ds.max_len(),
            student.cfg.max_seq
        )));
    }
    if let TrainMode::Distill { teacher } = &mode {
        if teacher.cfg.vocab != student.cfg.vocab
            || teacher.cfg.dim != student.cfg.dim
            || teacher.depth() != student.depth()
        {
            return Err(Error::Config(
                "teacher and student must share vocab, dim and depth".into(),
            ));
        }
    }

    let names = student.param_names();
    let mut params = student.export_params();
    let sizes: Vec<usize> = params.iter().map(|m| m.data().len()).collect();
    let mut adam = AdamState::new(&sizes);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let frozen: Vec<bool> = if cfg.freeze_t {
        let t_blocks: Vec<bool> = student
            .blocks
            .iter()
            .map(|b| matches!(b.mixer, crate::model::Mixer::Attention(_)))
            .collect();
        names
            .iter()
            .map(|n| {
                n.strip_prefix("block")
                    .and_then(|rest| rest.split('.').next())
                    .and_then(|i| i.parse::<usize>().ok())
                    .map(|i| t_blocks[i])
                    .unwrap_or(false)
            })
            .collect()
    } else {
        vec![false; names.len()]
    };

    // the frozen teacher stages once; its tape rewinds to the leaves after
    // every forward
    let mut teacher_tape = Tape::new();
    let teacher_staged = match &mode {
        TrainMode::Distill { teacher } => {
            let tvals = teacher.export_params();
            Some(teacher.stage(&mut teacher_tape, &tvals, false))
        }
        TrainMode::NextToken => None,
    };
    let teacher_mark = teacher_tape.len();

    let mut batcher = Batcher::new(train_ds, cfg.batch_tokens, cfg.seed);
    let mut report = LossReport::default();
    let mut eval_model = student.clone();

    for step in 1..=cfg.steps {
        let batch = batcher.next_batch();
        let nb = batch.len() as f32;

        let mut t = Tape::new();
        let staged = student.stage(&mut t, &params, true);
        let mut seq_totals = Vec::with_capacity(batch.len());
        let mut sum_ce = 0.0f64;
        let mut sum_kl = 0.0f64;
        let mut sum_emb = 0.0f64;
        for sample in &batch {
            let (inputs, targets, mask) = sample.training_view();
            let (logits, hidden) = student.tape_logits(&mut t, &staged, inputs)?;
            match &mode {
                TrainMode::NextToken => {
                    let ce = t.cross_entropy(logits, targets, Some(&mask));
                    sum_ce += t.scalar(ce);
                    seq_totals.push(ce);
                }
                TrainMode::Distill { teacher } => {
                    let (tl, th) = {
                        let ts = teacher_staged.as_ref().unwrap();
                        let (tl_id, th_id) = teacher.tape_logits(&mut teacher_tape, ts, inputs)?;
                        let out = (
                            teacher_tape.value(tl_id).clone(),
                            teacher_tape.value(th_id).clone(),
                        );
                        teacher_tape.truncate(teacher_mark);
                        out
                    };
                    let mut terms = Vec::new();
                    let ce = t.cross_entropy(logits, targets, Some(&mask));
                    sum_ce += t.scalar(ce);
                    if cfg.lambda_ce > 0.0 {
                        terms.push((cfg.lambda_ce, ce));
                    }

                    let mut teacher_probs = tl;
                    for r in 0..teacher_probs.rows() {
                        tape::softmax_row(teacher_probs.row_mut(r));
                    }
                    let q = t.softmax(logits);
                    let kl = t.skew_kl_vs_const(q, teacher_probs, cfg.alpha_skew, Some(&mask));
                    sum_kl += t.scalar(kl);
                    if cfg.lambda_logits > 0.0 {
                        terms.push((cfg.lambda_logits, kl));
                    }

                    let th_const = t.constant(th);
                    let diff = t.sub(hidden, th_const);
                    let sq = t.mul(diff, diff);
                    let emb = t.mean_all(sq, Some(&mask));
                    sum_emb += t.scalar(emb);
                    if cfg.lambda_emb > 0.0 {
                        terms.push((cfg.lambda_emb, emb));
                    }

                    let seq_total = t.add_scaled(&terms);
                    seq_totals.push(seq_total);
                }
            }
        }
        let inv = 1.0 / nb;
        let batch_terms: Vec<(f32, tape::VarId)> =
            seq_totals.iter().map(|&id| (inv, id)).collect();
        let total_node = t.add_scaled(&batch_terms);
        let total = t.scalar(total_node);
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("total loss {total}"),
            });
        }
        report.step_totals.push(total);

        let grads_by_node = t.backward(total_node);
        let mut grads: Vec<Matrix> = Vec::with_capacity(params.len());
        for (i, id) in staged.leaf_ids.iter().enumerate() {
            let g = match &grads_by_node[id.index()] {
                Some(g) if !frozen[i] => g.clone(),
                _ => Matrix::zeros(params[i].rows(), params[i].cols()),
            };
            grads.push(g);
        }
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;

        let want_eval = eval_ds.is_some()
            && ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps);
        let want_log =
            (cfg.log_every > 0 && step % cfg.log_every == 0) || step == cfg.steps || want_eval;
        if want_log {
            let (eval_ce, eval_ter) = if want_eval {
                eval_model.import_params(&params)?;
                let m = evaluate(&eval_model, eval_ds.unwrap(), 0)?;
                (Some(m.ce), Some(m.ter))
            } else {
                (None, None)
            };
            report.rows.push(LossRow {
                step,
                total,
                ce: sum_ce * inv as f64,
                logits: sum_kl * inv as f64,
                emb: sum_emb * inv as f64,
                eval_ce,
                eval_ter,
            });
        }
    }
    student.import_params(&params)?;
    Ok(report)
}

/// Train a fresh all-attention teacher on next-token prediction.
pub fn train_teacher(
    teacher: &mut HybridModel,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<LossReport> {
    train(teacher, TrainMode::NextToken, train_ds, eval_ds, cfg)
}

/// Distill a frozen teacher into the student (both already assembled).
pub fn distill(
    teacher: &HybridModel,
    student: &mut HybridModel,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<LossReport> {
    train(student, TrainMode::Distill { teacher }, train_ds, eval_ds, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LenBucket {
    pub lo: usize,
    pub hi: usize,
    pub ter: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Teacher-forced masked cross entropy.
    pub ce: f64,
    /// Teacher-forced next-token accuracy over scored positions.
    pub accuracy: f64,
    /// Corpus token error rate of greedy decodes (total edits over total
    /// reference tokens, EOS excluded from both sides).
    pub ter: f64,
    pub per_length: Vec<LenBucket>,
}

/// Evaluate CE/accuracy (teacher-forced) and TER (greedy decode) on a
/// dataset; `max_samples` of 0 means the whole set.
pub fn evaluate(model: &HybridModel, ds: &Dataset, max_samples: usize) -> Result<EvalMetrics> {
    let n = if max_samples == 0 {
        ds.samples.len()
    } else {
        ds.samples.len().min(max_samples)
    };
    if n == 0 {
        return Err(Error::Task("empty evaluation dataset".into()));
    }
    let eos = ds.tokenizer.eos();
    let mut ce_sum = 0.0f64;
    let mut acc_hits = 0usize;
    let mut acc_total = 0usize;
    let mut edits = 0usize;
    let mut ref_tokens = 0usize;
    let mut buckets: std::collections::BTreeMap<usize, (usize, usize)> =
        std::collections::BTreeMap::new();
    const BUCKET: usize = 8;

    for sample in ds.samples.iter().take(n) {
        let (inputs, targets, mask) = sample.training_view();
        let (logits, _) = model.sequence_logits(inputs)?;
        ce_sum += crate::losses::cross_entropy_masked(&logits, targets, Some(&mask))?;
        for (r, (&tgt, &m)) in targets.iter().zip(&mask).enumerate() {
            if m {
                acc_total += 1;
                if crate::model::argmax(logits.row(r)) == tgt as usize {
                    acc_hits += 1;
                }
            }
        }
        // greedy decode of the answer span
        let mut reference: Vec<u32> = sample.target().to_vec();
        if reference.last() == Some(&eos) {
            reference.pop();
        }
        if reference.is_empty() {
            continue;
        }
        let budget = (reference.len() * 2 + 8).min(model.cfg.max_seq - sample.prompt().len());
        let mut dummy = seeded(0, Stream::Sampling);
        let hyp = generate(
            model,
            sample.prompt(),
            budget,
            SampleMode::Greedy,
            Some(eos),
            &mut dummy,
        )?;
        let e = edit_distance(&hyp, &reference);
        edits += e;
        ref_tokens += reference.len();
        let b = (reference.len() - 1) / BUCKET;
        let entry = buckets.entry(b).or_insert((0, 0));
        entry.0 += e;
        entry.1 += reference.len();
    }
    let per_length = buckets
        .into_iter()
        .map(|(b, (e, r))| LenBucket {
            lo: b * BUCKET + 1,
            hi: (b + 1) * BUCKET,
            ter: e as f64 / r as f64,
            count: r,
        })
        .collect();
    Ok(EvalMetrics {
        ce: ce_sum / n as f64,
        accuracy: if acc_total == 0 {
            0.0
        } else {
            acc_hits as f64 / acc_total as f64
        },
        ter: if ref_tokens == 0 {
            0.0
        } else {
            edits as f64 / ref_tokens as f64
        },
        per_length,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub eval_ce: f64,
    pub eval_ter: f64,
}

/// Distill the same student four times (full objective, then each component
/// dropped) under identical seeds and data order.
pub fn ablate_losses(
    teacher: &HybridModel,
    student_template: &HybridModel,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &DistillConfig,
) -> Result<Vec<AblationRow>> {
    let variants: [(&str, f32, f32, f32); 4] = [
        ("full", cfg.lambda_ce, cfg.lambda_logits, cfg.lambda_emb),
        ("no_ce", 0.0, cfg.lambda_logits, cfg.lambda_emb),
        ("no_logits", cfg.lambda_ce, 0.0, cfg.lambda_emb),
        ("no_emb", cfg.lambda_ce, cfg.lambda_logits, 0.0),
    ];
    let mut rows = Vec::new();
    for (name, ce, lg, emb) in variants {
        let mut vcfg = cfg.clone();
        vcfg.lambda_ce = ce;
        vcfg.lambda_logits = lg;
        vcfg.lambda_emb = emb;
        let mut student = student_template.clone();
        distill(teacher, &mut student, train_ds, Some(eval_ds), &vcfg)?;
        let metrics = evaluate(&student, eval_ds, 0)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            eval_ce: metrics.ce,
            eval_ter: metrics.ter,
        });
    }
    Ok(rows)
}
