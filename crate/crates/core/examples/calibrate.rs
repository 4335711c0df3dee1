// Calibration sweeps behind the pinned test configurations: teacher quality
// versus steps, distillation recovery, init comparison, ablation direction,
// and the recall gap. Run with --release.
use mtra_core::convert::{assemble_hybrid, TransferOptions};
use mtra_core::distill::*;
use mtra_core::layout::{build_layout, LayerLayout, Strategy};
use mtra_core::model::HybridModel;
use mtra_core::rng::Stream;
use mtra_core::runconfig::RunConfig;
use mtra_core::tasks;
use std::time::Instant;

fn main() {
    let what = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if what == "teacher" || what == "all" {
        teacher_and_distill();
    }
    if what == "init" || what == "all" {
        init_comparison();
    }
    if what == "ablate" || what == "all" {
        ablation();
    }
    if what == "recall" || what == "all" {
        recall_gap();
    }
}

fn teacher_and_distill() {
    println!("== teacher (d=64 depth=6 copy) ==");
    let rc = RunConfig::default();
    let spec = rc.task_spec().unwrap();
    let train_ds = tasks::generate(&spec, Stream::TrainData).unwrap();
    let mut espec = spec.clone();
    espec.samples = 128;
    espec.seed = spec.seed + 1;
    let eval_ds = tasks::generate(&espec, Stream::EvalData).unwrap();

    let cfg = rc.model_config(train_ds.tokenizer.vocab()).unwrap();
    let mut teacher = HybridModel::new_teacher(cfg, rc.seed).unwrap();
    let tcfg = DistillConfig {
        steps: 1500,
        batch_tokens: 256,
        lr: 1e-3,
        log_every: 250,
        eval_every: 250,
        seed: rc.seed,
        ..Default::default()
    };
    let t0 = Instant::now();
    let rep = train_teacher(&mut teacher, &train_ds, Some(&eval_ds), &tcfg).unwrap();
    for r in &rep.rows {
        if let Some(ce) = r.eval_ce {
            let acc = evaluate(&teacher, &eval_ds, 32).map(|m| m.accuracy).unwrap_or(-1.0);
            println!(
                "  step {:4}: total {:.4} eval_ce {:.4} eval_ter {:.4} (acc-now {:.3})",
                r.step, r.total, ce, r.eval_ter.unwrap(), acc
            );
        }
    }
    let tm = evaluate(&teacher, &eval_ds, 0).unwrap();
    println!(
        "  teacher final: ce {:.4} acc {:.4} ter {:.4}  [{:.0}s]",
        tm.ce, tm.accuracy, tm.ter, t0.elapsed().as_secs_f64()
    );

    println!("== distill 1:1 blockbeg ==");
    let layout = build_layout(Strategy::BlockBeg, 6, 1, 1).unwrap();
    let mut student = assemble_hybrid(&teacher, &layout, &TransferOptions::default()).unwrap();
    let m0 = evaluate(&student, &eval_ds, 0).unwrap();
    println!("  student at init: ce {:.4} acc {:.4} ter {:.4}", m0.ce, m0.accuracy, m0.ter);
    let dcfg = DistillConfig {
        steps: 2000,
        batch_tokens: 256,
        lr: 1e-3,
        log_every: 250,
        eval_every: 500,
        seed: rc.seed,
        ..Default::default()
    };
    let t0 = Instant::now();
    let rep = distill(&teacher, &mut student, &train_ds, Some(&eval_ds), &dcfg).unwrap();
    for r in &rep.rows {
        if let Some(ce) = r.eval_ce {
            println!(
                "  step {:4}: total {:.4} eval_ce {:.4} eval_ter {:.4}",
                r.step, r.total, ce, r.eval_ter.unwrap()
            );
        }
    }
    let sm = evaluate(&student, &eval_ds, 0).unwrap();
    println!(
        "  student final: ce {:.4} ({:+.1}% vs teacher) acc {:.4} ter {:.4} (teacher {:.4})  [{:.0}s]",
        sm.ce,
        100.0 * (sm.ce / tm.ce - 1.0),
        sm.accuracy,
        sm.ter,
        tm.ter,
        t0.elapsed().as_secs_f64()
    );
    println!(
        "  monotone fraction (500-window, 100-ma): {:.3}",
        monotone_fraction(&rep.step_totals, 500, 100)
    );
}

fn small_rc() -> RunConfig {
    let mut rc = RunConfig::default();
    rc.dim = 32;
    rc.depth = 4;
    rc.heads = 4;
    rc.kv_heads = 2;
    rc.d_ff = 64;
    rc.payload_min = 3;
    rc.payload_max = 8;
    rc.samples = 1024;
    rc.max_seq = 64;
    rc
}

fn init_comparison() {
    println!("== init comparison (transfer vs random), small class ==");
    for seed in 0..5u64 {
        let mut rc = small_rc();
        rc.seed = 100 + seed;
        let spec = rc.task_spec().unwrap();
        let train_ds = tasks::generate(&spec, Stream::TrainData).unwrap();
        let cfg = rc.model_config(train_ds.tokenizer.vocab()).unwrap();
        let mut teacher = HybridModel::new_teacher(cfg, rc.seed).unwrap();
        let tcfg = DistillConfig {
            steps: 800,
            batch_tokens: 128,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        train_teacher(&mut teacher, &train_ds, None, &tcfg).unwrap();

        let layout = build_layout(Strategy::BlockBeg, 4, 1, 1).unwrap();
        let dcfg = DistillConfig {
            steps: 2000,
            batch_tokens: 128,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        let mut transferred =
            assemble_hybrid(&teacher, &layout, &TransferOptions::default()).unwrap();
        let rep_t = distill(&teacher, &mut transferred, &train_ds, None, &dcfg).unwrap();
        let mut random = HybridModel::new_random(cfg, &layout, rc.seed + 5000).unwrap();
        let rep_r = distill(&teacher, &mut random, &train_ds, None, &dcfg).unwrap();
        let at = |rep: &LossReport, s: usize| rep.total_at_step(s).unwrap();
        println!(
            "  seed {seed}: transfer {:.4}/{:.4}/{:.4}  random {:.4}/{:.4}/{:.4}  wins {} {} {}",
            at(&rep_t, 500),
            at(&rep_t, 1000),
            at(&rep_t, 2000),
            at(&rep_r, 500),
            at(&rep_r, 1000),
            at(&rep_r, 2000),
            at(&rep_t, 500) < at(&rep_r, 500),
            at(&rep_t, 1000) < at(&rep_r, 1000),
            at(&rep_t, 2000) < at(&rep_r, 2000),
        );
    }
}

fn ablation() {
    println!("== loss ablation (small class) ==");
    for seed in 0..3u64 {
        let mut rc = small_rc();
        rc.seed = 200 + seed;
        let spec = rc.task_spec().unwrap();
        let train_ds = tasks::generate(&spec, Stream::TrainData).unwrap();
        let mut espec = spec.clone();
        espec.samples = 96;
        espec.seed = spec.seed + 1;
        let eval_ds = tasks::generate(&espec, Stream::EvalData).unwrap();
        let cfg = rc.model_config(train_ds.tokenizer.vocab()).unwrap();
        let mut teacher = HybridModel::new_teacher(cfg, rc.seed).unwrap();
        let tcfg = DistillConfig {
            steps: 800,
            batch_tokens: 128,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        train_teacher(&mut teacher, &train_ds, None, &tcfg).unwrap();
        let tm = evaluate(&teacher, &eval_ds, 0).unwrap();

        let layout = build_layout(Strategy::BlockBeg, 4, 1, 1).unwrap();
        let student = assemble_hybrid(&teacher, &layout, &TransferOptions::default()).unwrap();
        let dcfg = DistillConfig {
            steps: 500,
            batch_tokens: 128,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        let t0 = Instant::now();
        let rows = ablate_losses(&teacher, &student, &train_ds, &eval_ds, &dcfg).unwrap();
        print!("  seed {seed} (teacher ter {:.4}):", tm.ter);
        for r in &rows {
            print!("  {} ter {:.4} ce {:.4}", r.variant, r.eval_ter, r.eval_ce);
        }
        println!("  [{:.0}s]", t0.elapsed().as_secs_f64());
    }
}

fn recall_gap() {
    println!("== hybrid vs pure-mamba on kv_recall (small class) ==");
    for seed in 0..3u64 {
        let mut rc = small_rc();
        rc.seed = 300 + seed;
        rc.task = "kv_recall".into();
        rc.pairs = 6;
        rc.keys = 12;
        rc.values = 12;
        rc.samples = 2048;
        let spec = rc.task_spec().unwrap();
        let train_ds = tasks::generate(&spec, Stream::TrainData).unwrap();
        let mut espec = spec.clone();
        espec.samples = 192;
        espec.seed = spec.seed + 1;
        let eval_ds = tasks::generate(&espec, Stream::EvalData).unwrap();
        let cfg = rc.model_config(train_ds.tokenizer.vocab()).unwrap();
        let mut teacher = HybridModel::new_teacher(cfg, rc.seed).unwrap();
        let tcfg = DistillConfig {
            steps: 1200,
            batch_tokens: 128,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        train_teacher(&mut teacher, &train_ds, None, &tcfg).unwrap();
        let tm = evaluate(&teacher, &eval_ds, 0).unwrap();

        let dcfg = DistillConfig {
            steps: 1200,
            batch_tokens: 128,
            log_every: 0,
            seed: rc.seed,
            ..Default::default()
        };
        let hybrid_layout = build_layout(Strategy::BlockBeg, 4, 1, 1).unwrap();
        let mut hybrid =
            assemble_hybrid(&teacher, &hybrid_layout, &TransferOptions::default()).unwrap();
        distill(&teacher, &mut hybrid, &train_ds, None, &dcfg).unwrap();
        let hm = evaluate(&hybrid, &eval_ds, 0).unwrap();

        let mut pure =
            assemble_hybrid(&teacher, &LayerLayout::all_m(4), &TransferOptions::default())
                .unwrap();
        distill(&teacher, &mut pure, &train_ds, None, &dcfg).unwrap();
        let pm = evaluate(&pure, &eval_ds, 0).unwrap();
        println!(
            "  seed {seed}: teacher acc {:.4} | hybrid acc {:.4} ter {:.4} ({} params) | pure-M acc {:.4} ter {:.4} ({} params)",
            tm.accuracy,
            hm.accuracy,
            hm.ter,
            hybrid.param_count(),
            pm.accuracy,
            pm.ter,
            pure.param_count()
        );
    }
}
