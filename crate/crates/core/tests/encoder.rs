mod common;

use common::{fd_check, random_tensor, weighted_sum};
use tsa::encoder::{
    attention_scores, attention_values, attention_weights, ffn, multi_head_self_attention, relative_index,
    AttentionMask, Encoder, EncoderConfig, PositionMode, Rpr,
};
use tsa::numerics::{Mode, ParamBuilder, ParamSet, Rng, Tape, Tensor};

fn config(d_model: usize, heads: usize, layers: usize, k_clip: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        num_heads: heads,
        d_model,
        d_ff: 2 * d_model,
        k_clip,
        p_attn: 0.1,
        p_res: 0.2,
        ln_eps: 1e-6,
        position: PositionMode::Relative,
    }
}

fn build(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamSet) {
    let mut params = ParamSet::new();
    let mut rng = Rng::new(seed);
    let enc = Encoder::build(cfg, &mut ParamBuilder::init(&mut params, &mut rng)).unwrap();
    (enc, params)
}

fn randomize_rpr(params: &mut ParamSet, seed: u64) {
    let mut rng = Rng::new(seed);
    for name in ["enc.rpr.aK", "enc.rpr.aV"] {
        let id = params.require(name).unwrap();
        let shape = params.value(id).shape().to_vec();
        params.get_mut(id).value = random_tensor(&shape, &mut rng);
    }
}

fn zero_param(params: &mut ParamSet, name: &str) {
    let id = params.require(name).unwrap();
    let shape = params.value(id).shape().to_vec();
    params.get_mut(id).value = Tensor::zeros(&shape);
}

fn rpr_consts(tape: &mut Tape, ak: Tensor, av: Tensor, k: usize) -> Rpr {
    Rpr {
        key: tape.constant(ak),
        value: tape.constant(av),
        k_clip: k,
    }
}

fn eval_encode(enc: &Encoder, params: &ParamSet, x: &Tensor, lengths: &[usize]) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mask = AttentionMask::from_lengths(lengths, x.shape()[1]).unwrap();
    let y = enc.encode(&mut tape, params, xv, &mask, Mode::Eval, &mut Rng::new(0)).unwrap();
    tape.value(y).clone()
}

#[test]
fn relative_index_examples() {
    for k in [0, 1, 10] {
        assert_eq!(relative_index(7, 7, k), k);
    }
    assert_eq!(relative_index(0, 25, 10), 20);
    assert_eq!(relative_index(25, 0, 10), 0);
}

#[test]
fn scores_zero_and_hand_case() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    let s = attention_scores(&mut tape, z, z, None).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v == 0.0));

    let q = tape.constant(Tensor::new(vec![1, 1, 1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap());
    let rpr = rpr_consts(&mut tape, Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4]), 1);
    let s = attention_scores(&mut tape, q, q, Some(&rpr)).unwrap();
    assert_eq!(tape.value(s).data(), &[2.0]);
}

#[test]
fn scores_match_dense_oracle_with_and_without_tables() {
    let mut rng = Rng::new(11);
    let (t, dz, k) = (3, 4, 1);
    let q = random_tensor(&[1, 1, t, dz], &mut rng);
    let kk = random_tensor(&[1, 1, t, dz], &mut rng);
    let ak = random_tensor(&[2 * k + 1, dz], &mut rng);
    for table in [Tensor::zeros(&[2 * k + 1, dz]), ak] {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(kk.clone());
        let rpr = rpr_consts(&mut tape, table.clone(), Tensor::zeros(&[2 * k + 1, dz]), k);
        let s = attention_scores(&mut tape, qv, kv, Some(&rpr)).unwrap();
        let got = tape.value(s).data();
        for i in 0..t {
            for j in 0..t {
                let r = relative_index(i, j, k);
                let dot: f64 = (0..dz)
                    .map(|d| q.data()[i * dz + d] * (kk.data()[j * dz + d] + table.data()[r * dz + d]))
                    .sum();
                assert!((got[i * t + j] - dot / (dz as f64).sqrt()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn weights_uniform_masked_and_normalised() {
    let mut rng = Rng::new(0);
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::full(&[1, 1, 4, 4], 0.7));
    let mask = AttentionMask::from_lengths(&[4], 4).unwrap();
    let a = attention_weights(&mut tape, s, &mask, 0.1, Mode::Eval, &mut rng).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| v == 0.25));

    let s = tape.constant(random_tensor(&[1, 2, 3, 3], &mut rng));
    let mask = AttentionMask::from_lengths(&[2], 3).unwrap();
    let a = attention_weights(&mut tape, s, &mask, 0.1, Mode::Eval, &mut rng).unwrap();
    let v = tape.value(a);
    for row in 0..6 {
        let r = v.row(row);
        assert_eq!(r[2], 0.0);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn values_selection_average_and_single_token() {
    let mut rng = Rng::new(12);
    let v = random_tensor(&[1, 1, 3, 2], &mut rng);
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let onehot = Tensor::new(vec![1, 1, 3, 3], vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]).unwrap();
    let a = tape.constant(onehot);
    let rpr = rpr_consts(&mut tape, Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2]), 1);
    let z = attention_values(&mut tape, a, vv, Some(&rpr)).unwrap();
    let zd = tape.value(z).data();
    assert_eq!(&zd[0..2], &v.data()[2..4]);
    assert_eq!(&zd[2..4], &v.data()[4..6]);
    assert_eq!(&zd[4..6], &v.data()[0..2]);

    let v2 = random_tensor(&[1, 1, 2, 3], &mut rng);
    let vv = tape.constant(v2.clone());
    let a = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
    let z = attention_values(&mut tape, a, vv, None).unwrap();
    for i in 0..2 {
        for d in 0..3 {
            let want = (v2.data()[d] + v2.data()[3 + d]) / 2.0;
            assert!((tape.value(z).data()[i * 3 + d] - want).abs() < 1e-15);
        }
    }

    let v1 = random_tensor(&[1, 1, 1, 2], &mut rng);
    let av = random_tensor(&[5, 2], &mut rng);
    let vv = tape.constant(v1.clone());
    let a = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let rpr = rpr_consts(&mut tape, Tensor::zeros(&[5, 2]), av.clone(), 2);
    let z = attention_values(&mut tape, a, vv, Some(&rpr)).unwrap();
    for d in 0..2 {
        assert!((tape.value(z).data()[d] - (v1.data()[d] + av.data()[2 * 2 + d])).abs() < 1e-15);
    }
}

#[test]
fn values_match_dense_oracle_with_tables() {
    let mut rng = Rng::new(13);
    let (t, dz, k) = (5, 3, 2);
    let alpha = random_tensor(&[1, 1, t, t], &mut rng);
    let v = random_tensor(&[1, 1, t, dz], &mut rng);
    let av = random_tensor(&[2 * k + 1, dz], &mut rng);
    let mut tape = Tape::new();
    let (a, vv) = (tape.constant(alpha.clone()), tape.constant(v.clone()));
    let rpr = rpr_consts(&mut tape, Tensor::zeros(&[2 * k + 1, dz]), av.clone(), k);
    let z = attention_values(&mut tape, a, vv, Some(&rpr)).unwrap();
    for i in 0..t {
        for d in 0..dz {
            let want: f64 = (0..t)
                .map(|j| alpha.data()[i * t + j] * (v.data()[j * dz + d] + av.data()[relative_index(i, j, k) * dz + d]))
                .sum();
            assert!((tape.value(z).data()[i * dz + d] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ffn_examples_and_gradients() {
    let mut tape = Tape::new();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (w1, w2) = (tape.constant(eye.clone()), tape.constant(eye));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::from_rows(&[vec![-1.0, 2.0]]));
    let y = ffn(&mut tape, x, w1, zero, w2, zero).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let mut rng = Rng::new(14);
    let (a, c) = (random_tensor(&[2, 3], &mut rng), random_tensor(&[3, 2], &mut rng));
    let b2 = Tensor::new(vec![2], vec![0.3, -0.8]).unwrap();
    let (a, c) = (tape.constant(a), tape.constant(c));
    let b2v = tape.constant(b2.clone());
    let b1 = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let y = ffn(&mut tape, x, a, b1, c, b2v).unwrap();
    for r in 0..4 {
        assert_eq!(tape.value(y).row(r), b2.data());
    }

    let x = random_tensor(&[3, 2], &mut rng);
    let p = [
        random_tensor(&[2, 4], &mut rng),
        random_tensor(&[4], &mut rng),
        random_tensor(&[4, 2], &mut rng),
        random_tensor(&[2], &mut rng),
    ];
    for which in 0..4 {
        let (x, p) = (x.clone(), p.clone());
        let err = fd_check(&p[which].clone(), 1e-6, move |t, v| {
            let xv = t.constant(x.clone());
            let mut vars: Vec<_> = p.iter().map(|q| t.constant(q.clone())).collect();
            vars[which] = v;
            let y = ffn(t, xv, vars[0], vars[1], vars[2], vars[3])?;
            weighted_sum(t, y, 15)
        });
        assert!(err < 1e-6, "parameter {which}: {err}");
    }
}

#[test]
fn single_head_equals_composed_ops() {
    let cfg = config(4, 1, 1, 2);
    let (enc, mut params) = build(&cfg, 1);
    randomize_rpr(&mut params, 2);
    let x = random_tensor(&[1, 3, 4], &mut Rng::new(3));
    let mask = AttentionMask::from_lengths(&[3], 3).unwrap();
    let a = &enc.layers[0].attn;

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let rpr_t = enc.rpr.as_ref().unwrap();
    let rpr = Rpr {
        key: tape.param(&params, rpr_t.key),
        value: tape.param(&params, rpr_t.value),
        k_clip: 2,
    };
    let mhsa = multi_head_self_attention(&mut tape, &params, a, &cfg, xv, &mask, Some(&rpr), Mode::Eval, &mut Rng::new(0)).unwrap();

    let mut t2 = Tape::new();
    let xv = t2.constant(x.reshaped(&[1, 1, 3, 4]).unwrap());
    let proj = |t: &mut Tape, id| {
        let w = t.param(&params, id);
        t.matmul(xv, w).unwrap()
    };
    let (q, k, v) = (proj(&mut t2, a.wq), proj(&mut t2, a.wk), proj(&mut t2, a.wv));
    let rpr = Rpr {
        key: t2.param(&params, rpr_t.key),
        value: t2.param(&params, rpr_t.value),
        k_clip: 2,
    };
    let s = attention_scores(&mut t2, q, k, Some(&rpr)).unwrap();
    let al = attention_weights(&mut t2, s, &mask, 0.1, Mode::Eval, &mut Rng::new(0)).unwrap();
    let z = attention_values(&mut t2, al, v, Some(&rpr)).unwrap();
    let z = t2.reshape(z, &[1, 3, 4]).unwrap();
    let wo = t2.param(&params, a.wo);
    let bo = t2.param(&params, a.bo);
    let y = t2.matmul(z, wo).unwrap();
    let y = t2.add(y, bo).unwrap();
    assert_eq!(tape.value(mhsa).data(), t2.value(y).data());
}

#[test]
fn attention_without_tables_is_permutation_equivariant() {
    let mut cfg = config(8, 2, 1, 3);
    cfg.position = PositionMode::Sinusoidal;
    let (enc, params) = build(&cfg, 4);
    let x = random_tensor(&[1, 4, 8], &mut Rng::new(5));
    let mut xp = x.clone();
    let (r1, r2) = (1, 3);
    for d in 0..8 {
        xp.data_mut().swap(r1 * 8 + d, r2 * 8 + d);
    }
    let mask = AttentionMask::from_lengths(&[4], 4).unwrap();
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = enc.self_attention(&mut tape, &params, 0, xv, &mask, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 8]);
        tape.value(y).clone()
    };
    let (y, yp) = (run(&x), run(&xp));
    for i in 0..4 {
        let j = if i == r1 { r2 } else if i == r2 { r1 } else { i };
        for d in 0..8 {
            assert!((y.data()[i * 8 + d] - yp.data()[j * 8 + d]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_branches_leave_double_layer_norm() {
    let cfg = config(6, 2, 1, 2);
    let (enc, mut params) = build(&cfg, 6);
    for name in ["enc.layer0.attn.wo", "enc.layer0.attn.bo", "enc.layer0.ffn.w2", "enc.layer0.ffn.b2"] {
        zero_param(&mut params, name);
    }
    let x = random_tensor(&[2, 3, 6], &mut Rng::new(7));
    let y = eval_encode(&enc, &params, &x, &[3, 2]);
    let ln = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
        row.iter().map(|a| (a - m) / (v + 1e-6).sqrt()).collect()
    };
    for r in 0..6 {
        let want = ln(&ln(x.row(r)));
        for (a, b) in y.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_output_finite_for_large_inputs() {
    let cfg = config(8, 2, 2, 3);
    let (enc, params) = build(&cfg, 8);
    let mut rng = Rng::new(9);
    let x = Tensor::new(vec![1, 5, 8], (0..40).map(|_| rng.uniform_in(-1e3, 1e3)).collect()).unwrap();
    assert!(eval_encode(&enc, &params, &x, &[5]).all_finite());
}

#[test]
fn encode_composition_determinism_and_batching() {
    let cfg = config(8, 2, 1, 3);
    let (enc, params) = build(&cfg, 10);
    let x = random_tensor(&[1, 4, 8], &mut Rng::new(11));
    let mask = AttentionMask::from_lengths(&[4], 4).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = enc.layer_forward(&mut tape, &params, 0, xv, &mask, Mode::Eval, &mut Rng::new(0)).unwrap();
    assert_eq!(tape.value(y).data(), eval_encode(&enc, &params, &x, &[4]).data());

    let cfg = config(8, 2, 2, 3);
    let (enc, params) = build(&cfg, 12);
    let mut rng = Rng::new(13);
    let a = random_tensor(&[1, 5, 8], &mut rng);
    let b = random_tensor(&[1, 3, 8], &mut rng);
    assert_eq!(eval_encode(&enc, &params, &a, &[5]), eval_encode(&enc, &params, &a, &[5]));
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    both.extend(std::iter::repeat_n(0.0, 2 * 8));
    let both = Tensor::new(vec![2, 5, 8], both).unwrap();
    let yb = eval_encode(&enc, &params, &both, &[5, 3]);
    let ya = eval_encode(&enc, &params, &a, &[5]);
    let y2 = eval_encode(&enc, &params, &b, &[3]);
    for d in 0..40 {
        assert!((yb.data()[d] - ya.data()[d]).abs() < 1e-10);
    }
    for d in 0..24 {
        assert!((yb.data()[40 + d] - y2.data()[d]).abs() < 1e-10);
    }
}

#[test]
fn trailing_padding_does_not_change_valid_outputs() {
    let cfg = config(8, 2, 2, 3);
    let (enc, mut params) = build(&cfg, 14);
    randomize_rpr(&mut params, 15);
    let mut rng = Rng::new(16);
    for t in 1..=6 {
        let x = random_tensor(&[1, t, 8], &mut rng);
        let base = eval_encode(&enc, &params, &x, &[t]);
        for pad in 1..=4 {
            let mut data = x.data().to_vec();
            data.extend((0..pad * 8).map(|_| rng.normal()));
            let padded = Tensor::new(vec![1, t + pad, 8], data).unwrap();
            let y = eval_encode(&enc, &params, &padded, &[t]);
            for (a, b) in base.data().iter().zip(&y.data()[..t * 8]) {
                assert!((a - b).abs() < 1e-10, "t={t} pad={pad}");
            }
        }
    }
}

#[test]
fn encoder_rejects_wrong_width() {
    let cfg = config(8, 2, 1, 3);
    let (enc, params) = build(&cfg, 17);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 6]));
    let mask = AttentionMask::from_lengths(&[2], 2).unwrap();
    assert!(enc.encode(&mut tape, &params, x, &mask, Mode::Eval, &mut Rng::new(0)).is_err());
}
