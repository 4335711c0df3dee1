// Quick training throughput probe used while sizing the default configs.
use mtra_core::distill::{distill, train_teacher, DistillConfig};
use mtra_core::layout::{build_layout, Strategy};
use mtra_core::model::{HybridModel, ModelConfig};
use mtra_core::rng::Stream;
use mtra_core::runconfig::RunConfig;
use mtra_core::tasks;
use std::time::Instant;

fn main() {
    let rc = RunConfig::default();
    let spec = rc.task_spec().unwrap();
    let ds = tasks::generate(&spec, Stream::TrainData).unwrap();
    let cfg: ModelConfig = rc.model_config(ds.tokenizer.vocab()).unwrap();
    let mut teacher = HybridModel::new_teacher(cfg, 1).unwrap();
    println!("params: {}", teacher.param_count());

    let tcfg = DistillConfig {
        steps: 30,
        batch_tokens: 256,
        log_every: 0,
        eval_every: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    train_teacher(&mut teacher, &ds, None, &tcfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "teacher: {:.1} ms/step at batch_tokens={}",
        1000.0 * dt / 30.0,
        tcfg.batch_tokens
    );

    let layout = build_layout(Strategy::BlockBeg, 6, 1, 1).unwrap();
    let mut student = mtra_core::convert::assemble_hybrid(
        &teacher,
        &layout,
        &mtra_core::convert::TransferOptions::default(),
    )
    .unwrap();
    let t0 = Instant::now();
    distill(&teacher, &mut student, &ds, None, &tcfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("distill: {:.1} ms/step", 1000.0 * dt / 30.0);

    // smaller model class used by the directional experiments
    let mut rc2 = RunConfig::default();
    rc2.dim = 32;
    rc2.depth = 4;
    rc2.heads = 4;
    rc2.kv_heads = 2;
    rc2.d_ff = 64;
    rc2.payload_min = 3;
    rc2.payload_max = 8;
    let spec2 = rc2.task_spec().unwrap();
    let ds2 = tasks::generate(&spec2, Stream::TrainData).unwrap();
    let cfg2: ModelConfig = rc2.model_config(ds2.tokenizer.vocab()).unwrap();
    let mut teacher2 = HybridModel::new_teacher(cfg2, 1).unwrap();
    let tcfg2 = DistillConfig {
        steps: 60,
        batch_tokens: 128,
        log_every: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    train_teacher(&mut teacher2, &ds2, None, &tcfg2).unwrap();
    println!(
        "small teacher: {:.1} ms/step at batch_tokens=128",
        1000.0 * t0.elapsed().as_secs_f64() / 60.0
    );
    let layout2 = build_layout(Strategy::BlockBeg, 4, 1, 1).unwrap();
    let mut student2 = mtra_core::convert::assemble_hybrid(
        &teacher2,
        &layout2,
        &mtra_core::convert::TransferOptions::default(),
    )
    .unwrap();
    let t0 = Instant::now();
    distill(&teacher2, &mut student2, &ds2, None, &tcfg2).unwrap();
    println!(
        "small distill: {:.1} ms/step",
        1000.0 * t0.elapsed().as_secs_f64() / 60.0
    );
}
