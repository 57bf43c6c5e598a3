use rand::Rng as _;

use super::gradcheck::{finite_diff_check, rel_error};
use super::*;
use super::nn::coord_planes;
use crate::error::{Error, Result};

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, &mut seeded(seed))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    let ho = (h - 1) / stride + 1;
    let wo = (wd - 1) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.at(&[o, ci, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

fn run1(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x, false)?;
    let y = f(&mut tape, v)?;
    Ok(tape.value(y))
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = rand_t(&[4, 4], 1);
    let out = run1(&a, |t, v| {
        let i = t.leaf(&Tensor::eye(4), false)?;
        t.matmul(v, i)
    })
    .unwrap();
    assert_eq!(out, a);
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let out = run1(&a, |t, v| {
        let ones = t.constant(&[2, 1], vec![1.0, 1.0])?;
        t.matmul(v, ones)
    })
    .unwrap();
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_t(&[5, 7], 2);
    let b = rand_t(&[7, 3], 3);
    let out = run1(&a, |t, v| {
        let bv = t.leaf(&b, false)?;
        t.matmul(v, bv)
    })
    .unwrap();
    assert!(out.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_mismatch() {
    let a = rand_t(&[2, 3], 4);
    let r = run1(&a, |t, v| {
        let b = t.constant(&[2, 2], vec![0.0; 4])?;
        t.matmul(v, b)
    });
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn conv_delta_kernel_mixes_channels() {
    let x = rand_t(&[2, 5, 6], 5);
    // out channel 0 = x0 + 2·x1, out channel 1 = −x1
    let mut w = Tensor::zeros(&[2, 2, 3, 3]);
    let mix = [[1.0, 2.0], [0.0, -1.0]];
    for (o, row) in mix.iter().enumerate() {
        for (i, &m) in row.iter().enumerate() {
            w.data_mut()[((o * 2 + i) * 3 + 1) * 3 + 1] = m;
        }
    }
    let out = run1(&x, |t, v| {
        let wv = t.leaf(&w, false)?;
        t.conv2d(v, wv, None, 1)
    })
    .unwrap();
    assert_eq!(out.shape(), &[2, 5, 6]);
    for p in 0..30 {
        let (a, b) = (x.data()[p], x.data()[30 + p]);
        assert!((out.data()[p] - (a + 2.0 * b)).abs() < 1e-15);
        assert!((out.data()[30 + p] + b).abs() < 1e-15);
    }
}

#[test]
fn conv_zero_weights_give_zero() {
    let x = rand_t(&[3, 4, 4], 6);
    let out = run1(&x, |t, v| {
        let w = t.constant(&[4, 3, 3, 3], vec![0.0; 108])?;
        t.conv2d(v, w, None, 1)
    })
    .unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_loops() {
    let x = rand_t(&[3, 8, 8], 7);
    let w = rand_t(&[4, 3, 3, 3], 8);
    for stride in [1, 2] {
        let out = run1(&x, |t, v| {
            let wv = t.leaf(&w, false)?;
            t.conv2d(v, wv, None, stride)
        })
        .unwrap();
        let expect = naive_conv(&x, &w, stride);
        assert_eq!(out.shape(), expect.shape());
        assert!(out.max_abs_diff(&expect) < 1e-12, "stride {stride}");
    }
}

#[test]
fn conv_batched_equals_per_sample() {
    let x = rand_t(&[2, 3, 6, 6], 9);
    let w = rand_t(&[5, 3, 3, 3], 10);
    let out = run1(&x, |t, v| {
        let wv = t.leaf(&w, false)?;
        t.conv2d(v, wv, None, 1)
    })
    .unwrap();
    for n in 0..2 {
        let xn = Tensor::new(&[3, 6, 6], x.data()[n * 108..(n + 1) * 108].to_vec()).unwrap();
        let e = naive_conv(&xn, &w, 1);
        let got = &out.data()[n * 180..(n + 1) * 180];
        let diff = got.iter().zip(e.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn conv_rejects_bad_kernel() {
    let x = rand_t(&[3, 4, 4], 11);
    let r = run1(&x, |t, v| {
        let w = t.constant(&[2, 3, 5, 5], vec![0.0; 150])?;
        t.conv2d(v, w, None, 1)
    });
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn max_pool_cases() {
    let c = Tensor::full(&[2, 4, 4], 0.3);
    assert!(run1(&c, |t, v| t.max_pool_2x2(v)).unwrap().data().iter().all(|&v| v == 0.3));
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(run1(&x, |t, v| t.max_pool_2x2(v)).unwrap().data(), &[4.0]);
    let odd = Tensor::zeros(&[1, 3, 4]);
    assert!(matches!(run1(&odd, |t, v| t.max_pool_2x2(v)), Err(Error::Dimension(_))));
}

#[test]
fn max_pool_matches_loop_oracle() {
    let x = rand_t(&[3, 6, 8], 12);
    let out = run1(&x, |t, v| t.max_pool_2x2(v)).unwrap();
    for c in 0..3 {
        for oy in 0..3 {
            for ox in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(&[c, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                assert_eq!(out.at(&[c, oy, ox]), m);
            }
        }
    }
}

#[test]
fn max_pool_tie_routes_to_first_index() {
    let x = Tensor::full(&[1, 2, 2], 1.0);
    let mut tape = Tape::new();
    let v = tape.leaf(&x, true).unwrap();
    let y = tape.max_pool_2x2(v).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_avg_pool_cases() {
    let c = Tensor::full(&[3, 5, 5], -2.5);
    assert_eq!(run1(&c, |t, v| t.global_avg_pool(v)).unwrap().data(), &[-2.5; 3]);
    let f = rand_t(&[64, 2, 2], 13);
    let out = run1(&f, |t, v| t.global_avg_pool(v)).unwrap();
    assert_eq!(out.shape(), &[64]);
    for c in 0..64 {
        let mean = f.data()[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0;
        assert!((out.data()[c] - mean).abs() < 1e-15);
    }
}

#[test]
fn softmax_cases() {
    let x = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
    assert_eq!(run1(&x, |t, v| t.softmax(v)).unwrap().data(), &[0.5, 0.5]);
    let x = Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap();
    assert_eq!(run1(&x, |t, v| t.softmax(v)).unwrap().data(), &[0.5, 0.5]);
    let x = uniform(&[23], -5.0, 5.0, &mut seeded(14));
    let y = run1(&x, |t, v| t.softmax(v)).unwrap();
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

fn ln(x: &Tensor, d: usize) -> Tensor {
    run1(x, |t, v| {
        let g = t.constant(&[d], vec![1.0; d])?;
        let b = t.constant(&[d], vec![0.0; d])?;
        t.layer_norm(v, g, b)
    })
    .unwrap()
}

#[test]
fn layer_norm_cases() {
    assert!(ln(&Tensor::full(&[1, 6], 3.3), 6).data().iter().all(|&v| v.abs() < 1e-9));
    let y = ln(&Tensor::new(&[2], vec![-1.0, 1.0]).unwrap(), 2);
    assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
    let x = uniform(&[1, 40], -3.0, 7.0, &mut seeded(15));
    let y = ln(&x, 40);
    let mean = y.data().iter().sum::<f64>() / 40.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-4);
}

/// Attention with explicit per-head loops over plain vectors.
fn naive_mha(x: &Tensor, mha: &MultiHeadAttention, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let (t_len, d) = (x.shape()[1], x.shape()[2]);
    let h = mha.heads;
    let dh = d / h;
    let proj = |lin: &Linear| -> Vec<f64> {
        let w = store.get(lin.weight);
        let b = store.get(lin.bias);
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            for j in 0..d {
                let mut acc = b.data()[j];
                for i in 0..d {
                    acc += x.data()[t * d + i] * w.data()[i * d + j];
                }
                out[t * d + j] = acc;
            }
        }
        out
    };
    let (q, k, v) = (proj(&mha.query), proj(&mha.key), proj(&mha.value));
    let mut concat = vec![0.0; t_len * d];
    let mut probs = vec![0.0; h * t_len * t_len];
    for head in 0..h {
        for i in 0..t_len {
            let mut s: Vec<f64> = (0..t_len)
                .map(|j| (0..dh).map(|c| q[i * d + head * dh + c] * k[j * d + head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            s.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
            for j in 0..t_len {
                probs[(head * t_len + i) * t_len + j] = s[j];
                for c in 0..dh {
                    concat[i * d + head * dh + c] += s[j] * v[j * d + head * dh + c];
                }
            }
        }
    }
    let w = store.get(mha.output.weight);
    let b = store.get(mha.output.bias);
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        for j in 0..d {
            out[t * d + j] = b.data()[j] + (0..d).map(|i| concat[t * d + i] * w.data()[i * d + j]).sum::<f64>();
        }
    }
    (out, probs)
}

fn build_mha(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = seeded(seed);
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, &mut rng).unwrap();
    // non-zero biases so the oracle exercises them
    for id in [mha.query.bias, mha.key.bias, mha.value.bias, mha.output.bias] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    (store, mha)
}

fn run_mha(x: &Tensor, mha: &MultiHeadAttention, store: &ParamStore) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let v = tape.leaf(x, false).unwrap();
    let (out, attn) = mha.forward(&mut tape, store, v).unwrap();
    (tape.value(out), tape.attention_probs(attn).unwrap())
}

#[test]
fn mha_matches_naive_oracle() {
    let (store, mha) = build_mha(12, 3, 16);
    let x = rand_t(&[1, 7, 12], 17);
    let (out, probs) = run_mha(&x, &mha, &store);
    let (e_out, e_probs) = naive_mha(&x, &mha, &store);
    let d1 = out.data().iter().zip(&e_out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let d2 = probs.data().iter().zip(&e_probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d1 < 1e-10 && d2 < 1e-10, "{d1} {d2}");
    for row in probs.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mha_zero_query_key_is_uniform() {
    let (mut store, mha) = build_mha(8, 2, 18);
    mha.query.zero(&mut store);
    mha.key.zero(&mut store);
    let (_, probs) = run_mha(&rand_t(&[2, 5, 8], 19), &mha, &store);
    assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn mha_single_token() {
    let (store, mha) = build_mha(8, 4, 20);
    let x = rand_t(&[1, 1, 8], 21);
    let (out, probs) = run_mha(&x, &mha, &store);
    assert!(probs.data().iter().all(|&p| p == 1.0));
    // output = output projection of the value projection
    let mut tape = Tape::new();
    let v = tape.leaf(&x, false).unwrap();
    let val = mha.value.forward(&mut tape, &store, v).unwrap();
    let expect = mha.output.forward(&mut tape, &store, val).unwrap();
    assert!(out.max_abs_diff(&tape.value(expect)) < 1e-14);
}

#[test]
fn mha_rejects_indivisible_width() {
    let mut store = ParamStore::new();
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "m", 10, 3, &mut seeded(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn backward_basic_rules() {
    let x = rand_t(&[5], 22);
    let mut tape = Tape::new();
    let v = tape.leaf(&x, true).unwrap();
    let s = tape.sum_all(v).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(v).unwrap(), &[1.0; 5]);

    let mut tape = Tape::new();
    let v = tape.leaf(&x, true).unwrap();
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let g = tape.backward(s).unwrap();
    for (gi, xi) in g.wrt(v).unwrap().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let v = tape.leaf(&x, true).unwrap();
    let dbl = tape.add(v, v).unwrap();
    let s = tape.sum_all(dbl).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(v).unwrap(), &[2.0; 5]);
    assert!(matches!(tape.backward(dbl), Err(Error::Usage(_))));
}

#[test]
fn unused_parameters_get_zero_grad() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0));
    let b = store.add("b", Tensor::scalar(5.0));
    let mut tape = Tape::new();
    let av = tape.param(&store, a).unwrap();
    let _bv = tape.param(&store, b).unwrap();
    let y = tape.square(av).unwrap();
    let l = tape.sum_all(y).unwrap();
    store.zero_grad();
    tape.backward(l).unwrap().accumulate_into(&mut store);
    assert_eq!(store.get(a).grad().unwrap(), &[4.0]);
    assert_eq!(store.get(b).grad().unwrap(), &[0.0]);
}

#[test]
fn non_finite_forward_is_rejected() {
    let x = Tensor::new(&[1], vec![-1.0]).unwrap();
    assert!(matches!(run1(&x, |t, v| t.log(v)), Err(Error::NonFinite(_))));
}

#[test]
fn quadratic_finite_difference_is_exact() {
    let theta = rand_t(&[6], 23);
    let mut f = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum()) };
    let mut g = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.data().iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect()) };
    assert!(finite_diff_check(&mut f, &mut g, &theta).unwrap() < 1e-9);
}

#[test]
fn rel_error_formula() {
    assert_eq!(rel_error(1.0, 1.0), 0.0);
    assert!((rel_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    assert!((rel_error(0.0, 1e-12) - 1e-4).abs() < 1e-12);
}

#[test]
fn dropout_is_seeded_and_scaled() {
    let x = Tensor::full(&[1000], 1.0);
    let run = |seed| {
        let mut tape = Tape::new();
        let v = tape.leaf(&x, false).unwrap();
        let y = tape.dropout(v, 0.25, &mut seeded(seed)).unwrap();
        tape.value(y)
    };
    let a = run(5);
    assert_eq!(a, run(5));
    let kept = a.data().iter().filter(|&&v| v != 0.0).count();
    assert!((650..850).contains(&kept));
    assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
}

#[test]
fn coord_planes_span_both_axes() {
    let p = coord_planes(3, 5);
    assert_eq!(p.len(), 30);
    assert_eq!(&p[..5], &[-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert!(p[15..20].iter().all(|&v| v == -1.0));
    assert!(p[25..30].iter().all(|&v| v == 1.0));
    assert_eq!(coord_planes(1, 1), vec![0.0, 0.0]);
}

#[test]
fn conv_stack_coord_planes_widen_every_block() {
    let mut store = ParamStore::new();
    let stack = ConvStack::with_coord_planes(&mut store, "c", 3, &[4, 6], &mut seeded(1));
    assert_eq!(stack.num_params(), store.num_params());
    assert_eq!(stack.num_params(), 4 * 5 * 9 + 4 + 6 * 6 * 9 + 6);
    let mut plain = ParamStore::new();
    let base = ConvStack::new(&mut plain, "c", 3, &[4, 6], &mut seeded(1));
    assert_eq!(base.num_params(), 4 * 3 * 9 + 4 + 6 * 4 * 9 + 6);

    let mut tape = Tape::new();
    let x = tape.leaf(&rand_t(&[2, 3, 8, 8], 2), false).unwrap();
    let y = stack.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(y), &[2, 6, 2, 2]);
}
