//! Finite-difference validation of every tape primitive. Each case reduces
//! the op output to a scalar through a fixed random weighting so that all
//! output elements receive distinct cotangents.

use mtra_core::gradcheck::grad_check;
use mtra_core::matrix::Matrix;
use mtra_core::rng::{seeded, Stream};
use mtra_core::tape::{Tape, VarId};

type Build = dyn Fn(&mut Tape, &[VarId]) -> VarId;

fn check(name: &str, params: Vec<Matrix>, build: &Build) {
    let mut wrng = seeded(0xC0FFEE, Stream::GradCheck);
    // weighting fixed per case, captured by the closure below
    let mut weights: Option<Matrix> = None;
    {
        let mut t = Tape::new();
        let ids: Vec<VarId> = params.iter().map(|p| t.param(p.clone())).collect();
        let out = build(&mut t, &ids);
        let (r, c) = t.shape(out);
        weights = Some(Matrix::randn(r, c, 1.0, &mut wrng));
    }
    let weights = weights.unwrap();

    let f = |ps: &[Matrix], want: bool| {
        let mut t = Tape::new();
        let ids: Vec<VarId> = ps.iter().map(|p| t.param(p.clone())).collect();
        let out = build(&mut t, &ids);
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w);
        let loss = t.mean_all(prod, None);
        let val = t.scalar(loss);
        if want {
            let grads = t.backward(loss);
            let gs = ids
                .iter()
                .map(|&id| grads[id_index(id)].clone().expect("missing grad"))
                .collect();
            Ok((val, Some(gs)))
        } else {
            Ok((val, None))
        }
    };
    let mut rng = seeded(7, Stream::GradCheck);
    let worst = grad_check(&params, &f, 1e-3, 0, &mut rng).unwrap();
    assert!(worst < 1e-3, "{name}: worst rel err {worst}");
}

fn id_index(id: VarId) -> usize {
    id.index()
}

fn randm(r: usize, c: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed, Stream::WeightInit);
    Matrix::randn(r, c, 1.0, &mut rng)
}

#[test]
fn matmul_grads() {
    check(
        "matmul",
        vec![randm(3, 4, 1), randm(4, 5, 2)],
        &|t, ids| t.matmul(ids[0], ids[1]),
    );
}

#[test]
fn matmul_nt_grads() {
    check(
        "matmul_nt",
        vec![randm(3, 4, 3), randm(5, 4, 4)],
        &|t, ids| t.matmul_nt(ids[0], ids[1]),
    );
}

#[test]
fn add_sub_mul_grads() {
    check("add", vec![randm(3, 4, 5), randm(3, 4, 6)], &|t, ids| {
        t.add(ids[0], ids[1])
    });
    check("sub", vec![randm(3, 4, 7), randm(3, 4, 8)], &|t, ids| {
        t.sub(ids[0], ids[1])
    });
    check("mul", vec![randm(3, 4, 9), randm(3, 4, 10)], &|t, ids| {
        t.mul(ids[0], ids[1])
    });
}

#[test]
fn row_broadcast_grads() {
    check(
        "add_row",
        vec![randm(4, 6, 11), randm(1, 6, 12)],
        &|t, ids| t.add_row(ids[0], ids[1]),
    );
    check(
        "mul_row",
        vec![randm(4, 6, 13), randm(1, 6, 14)],
        &|t, ids| t.mul_row(ids[0], ids[1]),
    );
}

#[test]
fn shape_op_grads() {
    check("scale", vec![randm(3, 4, 15)], &|t, ids| {
        t.scale(ids[0], -1.7)
    });
    check("slice_cols", vec![randm(3, 8, 16)], &|t, ids| {
        t.slice_cols(ids[0], 2, 4)
    });
    check(
        "concat_cols",
        vec![randm(3, 2, 17), randm(3, 5, 18)],
        &|t, ids| t.concat_cols(&[ids[0], ids[1], ids[0]]),
    );
    check("repeat_cols", vec![randm(3, 2, 19)], &|t, ids| {
        t.repeat_cols(ids[0], 3)
    });
    check("repeat_blocks", vec![randm(3, 6, 20)], &|t, ids| {
        // 2 groups of block 3, repeated twice
        t.repeat_blocks(ids[0], 3, 2)
    });
}

#[test]
fn elementwise_grads() {
    check("exp", vec![randm(3, 4, 21)], &|t, ids| t.exp(ids[0]));
    check("softplus", vec![randm(3, 4, 22)], &|t, ids| {
        t.softplus(ids[0])
    });
    check("silu", vec![randm(3, 4, 23)], &|t, ids| t.silu(ids[0]));
}

#[test]
fn softmax_grads() {
    check("softmax", vec![randm(4, 5, 24)], &|t, ids| {
        t.softmax(ids[0])
    });
    check("causal_softmax", vec![randm(5, 5, 25)], &|t, ids| {
        t.causal_softmax(ids[0])
    });
}

#[test]
fn rmsnorm_grads() {
    check(
        "rmsnorm",
        vec![randm(4, 6, 26), randm(1, 6, 27)],
        &|t, ids| t.rmsnorm(ids[0], ids[1]),
    );
}

#[test]
fn gather_grads() {
    check("gather", vec![randm(5, 3, 28)], &|t, ids| {
        t.gather(ids[0], &[4, 0, 0, 2])
    });
}

#[test]
fn scan_grads() {
    // heads=2, d_v=3, n_state=2, L=4; abar drawn directly inside (0,1)
    let len = 4;
    let (heads, d_v, n_state) = (2usize, 3usize, 2usize);
    let mut arng = seeded(29, Stream::WeightInit);
    use rand::Rng;
    let abar = Matrix::from_fn(len, heads * d_v, |_, _| arng.gen_range(0.2..0.95f32));
    let bbar = randm(len, heads * n_state, 30);
    let u = randm(len, heads * d_v, 31);
    let c = randm(len, heads * n_state, 32);
    check("scan", vec![abar, bbar, u, c], &move |t, ids| {
        t.scan(ids[0], ids[1], ids[2], ids[3], heads, d_v, n_state)
    });
}

#[test]
fn causal_conv_grads() {
    check(
        "causal_conv",
        vec![randm(6, 4, 33), randm(4, 3, 34)],
        &|t, ids| t.causal_conv(ids[0], ids[1]),
    );
}

#[test]
fn loss_grads() {
    // cross entropy with a mask
    let logits = randm(5, 7, 35);
    let targets = vec![3u32, 1, 6, 0, 2];
    let mask = vec![true, false, true, true, false];
    {
        let f = move |ps: &[Matrix], want: bool| {
            let mut t = Tape::new();
            let l = t.param(ps[0].clone());
            let loss = t.cross_entropy(l, &targets, Some(&mask));
            let val = t.scalar(loss);
            if want {
                let grads = t.backward(loss);
                Ok((val, Some(vec![grads[0].clone().unwrap()])))
            } else {
                Ok((val, None))
            }
        };
        let mut rng = seeded(77, Stream::GradCheck);
        let worst = grad_check(&[logits], &f, 1e-3, 0, &mut rng).unwrap();
        assert!(worst < 1e-3, "cross_entropy: {worst}");
    }

    // skew kl vs a constant teacher distribution, gradient through softmax
    let slogits = randm(4, 6, 36);
    let mut p = randm(4, 6, 37);
    for r in 0..4 {
        mtra_core::tape::softmax_row(p.row_mut(r));
    }
    let mask2 = vec![true, true, false, true];
    for &alpha in &[0.0f32, 0.1, 0.9] {
        let p2 = p.clone();
        let m2 = mask2.clone();
        let f = move |ps: &[Matrix], want: bool| {
            let mut t = Tape::new();
            let l = t.param(ps[0].clone());
            let q = t.softmax(l);
            let loss = t.skew_kl_vs_const(q, p2.clone(), alpha, Some(&m2));
            let val = t.scalar(loss);
            if want {
                let grads = t.backward(loss);
                Ok((val, Some(vec![grads[0].clone().unwrap()])))
            } else {
                Ok((val, None))
            }
        };
        let mut rng = seeded(78, Stream::GradCheck);
        let worst = grad_check(&[slogits.clone()], &f, 1e-3, 0, &mut rng).unwrap();
        assert!(worst < 1e-3, "skew_kl alpha {alpha}: {worst}");
    }
}

#[test]
fn mean_and_weighted_sum_grads() {
    let a = randm(4, 3, 38);
    let b = randm(4, 3, 39);
    let mask = vec![true, false, true, true];
    let f = move |ps: &[Matrix], want: bool| {
        let mut t = Tape::new();
        let x = t.param(ps[0].clone());
        let y = t.param(ps[1].clone());
        let d = t.sub(x, y);
        let sq = t.mul(d, d);
        let m1 = t.mean_all(sq, Some(&mask));
        let m2 = t.mean_all(x, None);
        let loss = t.add_scaled(&[(0.7, m1), (-0.3, m2)]);
        let val = t.scalar(loss);
        if want {
            let grads = t.backward(loss);
            Ok((
                val,
                Some(vec![grads[0].clone().unwrap(), grads[1].clone().unwrap()]),
            ))
        } else {
            Ok((val, None))
        }
    };
    let mut rng = seeded(79, Stream::GradCheck);
    let worst = grad_check(&[a, b], &f, 1e-3, 0, &mut rng).unwrap();
    assert!(worst < 1e-3, "mse composite: {worst}");
}

#[test]
fn full_attention_layer_grad_check() {
    // d=8, L=4 full attention mixer loss passes at rel err < 1e-3
    use mtra_core::attention::{tape_forward, AttentionLayerWeights, AttentionVars};
    let d = 8;
    let w = AttentionLayerWeights {
        w_q: randm(d, 8, 40),
        w_k: randm(d, 4, 41),
        w_v: randm(d, 4, 42),
        w_o: randm(8, d, 43),
        heads: 2,
        kv_heads: 1,
        d_k: 4,
        d_v: 4,
    };
    let x = randm(4, d, 44);
    let params = vec![
        w.w_q.clone(),
        w.w_k.clone(),
        w.w_v.clone(),
        w.w_o.clone(),
        x,
    ];
    let wmeta = w.clone();
    let f = move |ps: &[Matrix], want: bool| {
        let mut t = Tape::new();
        let vars = AttentionVars {
            w_q: t.param(ps[0].clone()),
            w_k: t.param(ps[1].clone()),
            w_v: t.param(ps[2].clone()),
            w_o: t.param(ps[3].clone()),
        };
        let xid = t.param(ps[4].clone());
        let y = tape_forward(&mut t, &wmeta, &vars, xid);
        let sq = t.mul(y, y);
        let loss = t.mean_all(sq, None);
        let val = t.scalar(loss);
        if want {
            let grads = t.backward(loss);
            let ids = [vars.w_q, vars.w_k, vars.w_v, vars.w_o, xid];
            Ok((
                val,
                Some(
                    ids.iter()
                        .map(|&i| grads[id_index(i)].clone().unwrap())
                        .collect(),
                ),
            ))
        } else {
            Ok((val, None))
        }
    };
    let mut rng = seeded(80, Stream::GradCheck);
    let worst = grad_check(&params, &f, 1e-3, 0, &mut rng).unwrap();
    assert!(worst < 1e-3, "attention layer: {worst}");
}

#[test]
fn full_mamba_layer_grad_check() {
    // d=8, N=4, L=4 selective-scan mixer loss passes at rel err < 1e-3
    use mtra_core::mamba::{tape_forward, MambaLayerWeights, MambaVars};
    let d = 8;
    let (heads, kv_heads, d_v, n_state) = (2usize, 1usize, 4usize, 4usize);
    let w = MambaLayerWeights {
        w_x: randm(d, kv_heads * d_v, 50),
        w_b: randm(d, kv_heads * n_state, 51),
        w_c: randm(d, heads * n_state, 52),
        w_delta: randm(d, heads, 53).scale(0.3),
        b_delta: Matrix::filled(1, heads, -1.0),
        a_log: Matrix::from_fn(1, heads * d_v, |_, c| (1.0 + (c % d_v) as f32).ln()),
        d_skip: randm(1, heads * d_v, 54),
        w_o: randm(heads * d_v, d, 55),
        heads,
        kv_heads,
        d_v,
        n_state,
        out_scale: 0.5,
        conv_kernel: Some(randm(kv_heads * d_v, 3, 56)),
        gate: Some((randm(d, heads * d_v, 57), randm(1, heads * d_v, 58))),
    };
    let x = randm(4, d, 59);
    let params = vec![
        w.w_x.clone(),
        w.w_b.clone(),
        w.w_c.clone(),
        w.w_delta.clone(),
        w.b_delta.clone(),
        w.a_log.clone(),
        w.d_skip.clone(),
        w.w_o.clone(),
        w.conv_kernel.clone().unwrap(),
        w.gate.clone().unwrap().0,
        w.gate.clone().unwrap().1,
        x,
    ];
    let wmeta = w.clone();
    let f = move |ps: &[Matrix], want: bool| {
        let mut t = Tape::new();
        let vars = MambaVars {
            w_x: t.param(ps[0].clone()),
            w_b: t.param(ps[1].clone()),
            w_c: t.param(ps[2].clone()),
            w_delta: t.param(ps[3].clone()),
            b_delta: t.param(ps[4].clone()),
            a_log: t.param(ps[5].clone()),
            d_skip: t.param(ps[6].clone()),
            w_o: t.param(ps[7].clone()),
            conv_kernel: Some(t.param(ps[8].clone())),
            gate: Some((t.param(ps[9].clone()), t.param(ps[10].clone()))),
        };
        let xid = t.param(ps[11].clone());
        let y = tape_forward(&mut t, &wmeta, &vars, xid);
        let sq = t.mul(y, y);
        let loss = t.mean_all(sq, None);
        let val = t.scalar(loss);
        if want {
            let grads = t.backward(loss);
            let mut ids = vec![
                vars.w_x,
                vars.w_b,
                vars.w_c,
                vars.w_delta,
                vars.b_delta,
                vars.a_log,
                vars.d_skip,
                vars.w_o,
            ];
            ids.push(vars.conv_kernel.unwrap());
            let (gz, bz) = vars.gate.unwrap();
            ids.push(gz);
            ids.push(bz);
            ids.push(xid);
            Ok((
                val,
                Some(
                    ids.iter()
                        .map(|&i| grads[id_index(i)].clone().unwrap())
                        .collect(),
                ),
            ))
        } else {
            Ok((val, None))
        }
    };
    let mut rng = seeded(81, Stream::GradCheck);
    let worst = grad_check(&params, &f, 1e-3, 0, &mut rng).unwrap();
    assert!(worst < 1e-3, "mamba layer: {worst}");
}

#[test]
fn tape_forward_matches_plain_attention() {
    use mtra_core::attention::{
        attention_forward, tape_forward, AttentionLayerWeights, AttentionVars,
    };
    use mtra_core::matrix::max_rel_err;
    use mtra_core::SequenceTensor;
    let d = 8;
    let w = AttentionLayerWeights {
        w_q: randm(d, 8, 60),
        w_k: randm(d, 8, 61),
        w_v: randm(d, 8, 62),
        w_o: randm(8, d, 63),
        heads: 2,
        kv_heads: 2,
        d_k: 4,
        d_v: 4,
    };
    let x = randm(5, d, 64);
    let plain = attention_forward(&w, &SequenceTensor::single(&x)).unwrap();
    let mut t = Tape::new();
    let vars = AttentionVars {
        w_q: t.constant(w.w_q.clone()),
        w_k: t.constant(w.w_k.clone()),
        w_v: t.constant(w.w_v.clone()),
        w_o: t.constant(w.w_o.clone()),
    };
    let xid = t.constant(x);
    let y = tape_forward(&mut t, &w, &vars, xid);
    assert!(max_rel_err(t.value(y).data(), plain.seq(0).data()) < 1e-6);
}

#[test]
fn tape_forward_matches_plain_mamba() {
    use mtra_core::mamba::{ssm_scan_recurrent, tape_forward, MambaLayerWeights, MambaVars};
    use mtra_core::matrix::max_rel_err;
    use mtra_core::SequenceTensor;
    let d = 8;
    let (heads, kv_heads, d_v, n_state) = (2usize, 1usize, 4usize, 4usize);
    let w = MambaLayerWeights {
        w_x: randm(d, kv_heads * d_v, 70),
        w_b: randm(d, kv_heads * n_state, 71),
        w_c: randm(d, heads * n_state, 72),
        w_delta: randm(d, heads, 73).scale(0.3),
        b_delta: Matrix::filled(1, heads, -1.0),
        a_log: Matrix::from_fn(1, heads * d_v, |_, c| (1.0 + (c % d_v) as f32).ln()),
        d_skip: randm(1, heads * d_v, 74),
        w_o: randm(heads * d_v, d, 75),
        heads,
        kv_heads,
        d_v,
        n_state,
        out_scale: 0.5,
        conv_kernel: None,
        gate: None,
    };
    let x = randm(6, d, 76);
    let plain = ssm_scan_recurrent(&w, &SequenceTensor::single(&x)).unwrap();
    let mut t = Tape::new();
    let vars = MambaVars {
        w_x: t.constant(w.w_x.clone()),
        w_b: t.constant(w.w_b.clone()),
        w_c: t.constant(w.w_c.clone()),
        w_delta: t.constant(w.w_delta.clone()),
        b_delta: t.constant(w.b_delta.clone()),
        a_log: t.constant(w.a_log.clone()),
        d_skip: t.constant(w.d_skip.clone()),
        w_o: t.constant(w.w_o.clone()),
        conv_kernel: None,
        gate: None,
    };
    let xid = t.constant(x);
    let y = tape_forward(&mut t, &w, &vars, xid);
    assert!(max_rel_err(t.value(y).data(), plain.seq(0).data()) < 1e-5);
}
