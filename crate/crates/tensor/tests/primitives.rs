use approx::assert_abs_diff_eq;
use hlmg_tensor::{grad_check, GradCheckConfig, Tape, Tensor, TensorError, Var, MASK_FILL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 2], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn check<F>(params: &[Tensor<f64>], f: F, tol: f64)
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> hlmg_tensor::Result<Var>,
{
    let cfg = GradCheckConfig {
        eps: 1e-5,
        tol,
        max_coords_per_tensor: 64,
        seed: 3,
    };
    let report = grad_check(params, f, &cfg).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(1, 4, vec![0.7; 4]).unwrap();
    let y = tape.softmax(x);
    for &p in tape.value(y) {
        assert_abs_diff_eq!(p, 0.25, epsilon = 1e-7);
    }
}

#[test]
fn masked_softmax_with_single_open_slot_is_one_hot() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(1, 4, vec![0.3, -2.0, 5.0, 1.0]).unwrap();
    let m = tape
        .masked_fill(x, &[true, false, true, true], MASK_FILL as f32)
        .unwrap();
    let y = tape.softmax(m);
    assert_eq!(tape.value(y), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_of_uniform_two_class_logits_is_ln2() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(1, 2, vec![0.4, 0.4]).unwrap();
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert_abs_diff_eq!(tape.value(l)[0], std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);

    let cfg = GradCheckConfig {
        tol: 1e-8,
        ..Default::default()
    };
    let report = grad_check(
        &[x],
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &cfg,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
    let b = tape.constant(2, 3, vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let c = tape.constant(3, 2, vec![0.0; 6]).unwrap();
    assert!(matches!(
        tape.add(a, c),
        Err(TensorError::ShapeMismatch { op: "add", .. })
    ));
    assert!(matches!(
        tape.mean_over(a, 1, 1),
        Err(TensorError::Empty { op: "mean_over" })
    ));
}

#[test]
fn matmul_transpose_broadcast_gradients() {
    let a = random([3, 4], 1);
    let b = random([4, 2], 2);
    let bias = random([1, 2], 3);
    let s = random([1, 1], 4);
    check(
        &[a, b, bias, s],
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let p = t.add(p, v[2])?;
            let p = t.mul(p, v[3])?;
            let tr = t.transpose(p);
            let q = t.matmul(tr, p)?;
            let q = t.affine(q, 0.5, 0.1);
            Ok(t.sum(q))
        },
        1e-7,
    );
}

#[test]
fn nonlinearity_and_norm_gradients() {
    let x = random([3, 5], 5);
    let g = random([1, 5], 6);
    let b = random([1, 5], 7);
    let w = random([3, 5], 8);
    check(
        &[x, g, b, w],
        |t, v| {
            let h = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let h = t.gelu(h);
            let s = t.sigmoid(h);
            let p = t.softmax(s);
            let p = t.mul(p, v[3])?;
            Ok(t.sum(p))
        },
        1e-7,
    );
}

#[test]
fn indexing_and_loss_gradients() {
    let table = random([6, 4], 9);
    let w = random([8, 3], 10);
    check(
        &[table, w],
        |t, v| {
            let e = t.embedding(v[0], &[2, 5, 2, 0])?;
            let m0 = t.mean_over(e, 0, 2)?;
            let m1 = t.mean_over(e, 1, 4)?;
            let top = t.slice_rows(e, 3, 4)?;
            let left = t.slice_cols(e, 0, 2)?;
            let left = t.mean_over(left, 0, 4)?;
            let right = t.slice_cols(top, 2, 4)?;
            let row = t.concat_cols(&[left, right])?;
            let rows = t.concat_rows(&[m0, m1, row])?;
            let both = t.concat_cols(&[rows, rows])?;
            let logits = t.matmul(both, v[1])?;
            let mask = [false, true, false, false, false, false, false, false, true];
            let logits = t.masked_fill(logits, &mask, -3.0)?;
            t.cross_entropy(logits, &[0, 2, 1])
        },
        1e-7,
    );
}

#[test]
fn dropout_is_identity_at_eval_and_seeded_in_training() {
    let x = random([4, 8], 11).cast::<f32>();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let same = tape.dropout(v, 0.5, false, 1).unwrap();
    assert_eq!(same, v);
    let d1 = tape.dropout(v, 0.5, true, 42).unwrap();
    let d2 = tape.dropout(v, 0.5, true, 42).unwrap();
    assert_eq!(tape.value(d1), tape.value(d2));
    for (o, i) in tape.value(d1).iter().zip(x.data()) {
        assert!(*o == 0.0 || (*o - 2.0 * i).abs() < 1e-6);
    }
}

#[test]
fn backward_is_linear() {
    let x = random([2, 3], 12);
    let a = 1.7;
    let b = -0.6;
    let grad_of = |wf: f64, wg: f64| {
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let f = tape.gelu(v);
        let f = tape.sum(f);
        let g = tape.softmax(v);
        let g = tape.mul(g, v).unwrap();
        let g = tape.sum(g);
        let f = tape.scale(f, wf);
        let g = tape.scale(g, wg);
        let s = tape.add(f, g).unwrap();
        tape.backward(s).unwrap();
        tape.grad(v).unwrap().to_vec()
    };
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    for i in 0..combined.len() {
        assert_abs_diff_eq!(combined[i], a * gf[i] + b * gg[i], epsilon = 1e-12);
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let x = random([5, 16], 13).cast::<f32>();
    let ones = Tensor::full([1, 16], 1.0f32);
    let zeros = Tensor::zeros([1, 16]);
    let mut tape = Tape::new();
    let (v, g, b) = (tape.param(&x), tape.param(&ones), tape.param(&zeros));
    let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
    for row in tape.value(y).chunks(16) {
        let mean: f64 = row.iter().map(|&x| x as f64).sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let x = random([6, 8], 14).cast::<f32>();
    let run = || {
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let t = tape.transpose(v);
        let p = tape.matmul(v, t).unwrap();
        let p = tape.softmax(p);
        let p = tape.dropout(p, 0.2, true, 5).unwrap();
        tape.value(p).to_vec()
    };
    assert_eq!(run(), run());
}

/// Reference attention built from primitives with an explicit −∞ mask.
fn masked_reference(
    t: &mut Tape<'_, f64>,
    q: Var,
    k: Var,
    v: Var,
    segs: &[(usize, usize)],
    heads: usize,
) -> hlmg_tensor::Result<Var> {
    let (n, d) = t.dims(q);
    let hd = d / heads;
    let mut mask = vec![true; n * n];
    for &(s, e) in segs {
        for i in s..e {
            for j in s..e {
                mask[i * n + j] = false;
            }
        }
    }
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = t.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = t.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = t.slice_cols(v, h * hd, (h + 1) * hd)?;
        let kt = t.transpose(kh);
        let s = t.matmul(qh, kt)?;
        let s = t.scale(s, 1.0 / (hd as f64).sqrt());
        let s = t.masked_fill(s, &mask, MASK_FILL)?;
        let p = t.softmax(s);
        outs.push(t.matmul(p, vh)?);
    }
    t.concat_cols(&outs)
}

#[test]
fn segment_attention_matches_masked_full_attention() {
    let segs = [(0, 2), (2, 5), (5, 6)];
    let (q, k, v) = (random([6, 8], 20), random([6, 8], 21), random([6, 8], 22));
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.param(&q), tape.param(&k), tape.param(&v));
    let fused = tape.segment_attention(qv, kv, vv, &segs, 2, 0.0, false, 0).unwrap();
    let reference = masked_reference(&mut tape, qv, kv, vv, &segs, 2).unwrap();
    for (a, b) in tape.value(fused).iter().zip(tape.value(reference)) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    for h in 0..2 {
        let w = tape.segment_attention_weights(fused, h).unwrap();
        for i in 0..6 {
            let row = &w[i * 6..(i + 1) * 6];
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for j in 0..6 {
                let same = segs.iter().any(|&(s, e)| (s..e).contains(&i) && (s..e).contains(&j));
                if !same {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}

#[test]
fn attention_layer_gradient_on_six_tokens() {
    let x = random([6, 8], 30);
    let wq = random([8, 8], 31);
    let wk = random([8, 8], 32);
    let wv = random([8, 8], 33);
    let segs = [(0, 3), (3, 6)];
    let cfg = GradCheckConfig {
        eps: 1e-5,
        tol: 1e-5,
        max_coords_per_tensor: 64,
        seed: 1,
    };
    let report = grad_check(
        &[x, wq, wk, wv],
        |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let k = t.matmul(v[0], v[2])?;
            let val = t.matmul(v[0], v[3])?;
            let o = t.segment_attention(q, k, val, &segs, 2, 0.0, false, 0)?;
            let o = t.gelu(o);
            Ok(t.sum(o))
        },
        &cfg,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");

    let report = grad_check(
        &[random([6, 8], 40), random([6, 8], 41), random([6, 8], 42)],
        |t, v| {
            let o = masked_reference(t, v[0], v[1], v[2], &[(0, 6)], 4)?;
            let o = t.gelu(o);
            Ok(t.sum(o))
        },
        &cfg,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn attention_dropout_gradient_is_consistent() {
    let segs = [(0, 4), (4, 5)];
    check(
        &[random([5, 4], 50), random([5, 4], 51), random([5, 4], 52)],
        |t, v| {
            let o = t.segment_attention(v[0], v[1], v[2], &segs, 1, 0.3, true, 9)?;
            let o = t.gelu(o);
            Ok(t.sum(o))
        },
        1e-6,
    );
}

#[test]
fn grad_check_reports_non_finite_op() {
    let x = Tensor::new([1, 1], vec![-1.0]).unwrap();
    let err = grad_check(
        &[x],
        |t, v| {
            let big = t.affine(v[0], 1e308, 0.0);
            let y = t.affine(big, 10.0, 0.0);
            Ok(t.sum(y))
        },
        &GradCheckConfig::default(),
    )
    .unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "affine" });
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_masked_slots_are_zero(
        vals in prop::collection::vec(-30.0f32..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 4] = false;
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(3, 4, vals).unwrap();
        let m = tape.masked_fill(x, &mask, MASK_FILL as f32).unwrap();
        let y = tape.softmax(m);
        for (r, row) in tape.value(y).chunks(4).enumerate() {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..4 {
                if mask[r * 4 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }
}
