//! Forward kernels against naive loop implementations.

use std::time::{Duration, Instant};

use kptransfer::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn assert_close(actual: &[f64], expected: &[f64], what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        let rel = (a - e).abs() / e.abs().max(1e-12);
        assert!(
            rel <= REL_TOL || (a - e).abs() <= 1e-12,
            "{what}: index {i}: {a} vs {e}"
        );
    }
}

fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.get(&[ni, ci, iy as usize, ix as usize]) * k.get(&[fi, ci, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

#[test]
fn conv2d_matches_loop_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    while cases < 24 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=4);
        let f = rng.gen_range(1..=4);
        let k = [1, 2, 3, 4][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let h = rng.gen_range(k.max(2)..=9);
        let w = rng.gen_range(k.max(2)..=9);
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            continue;
        }
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let kern = random_tensor(&mut rng, &[f, c, k, k]);
        let bias = random_tensor(&mut rng, &[f]);
        let mut g = Graph::<f64>::new();
        let (xv, kv, bv) = (
            g.constant(&x).unwrap(),
            g.constant(&kern).unwrap(),
            g.constant(&bias).unwrap(),
        );
        let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
        let (shape, want) = conv_oracle(&x, &kern, &bias, stride, pad);
        assert_eq!(g.shape(y), shape.as_slice());
        assert_close(g.value(y), &want, &format!("conv case {cases}"));
        cases += 1;
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn maxpool2_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..24 {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let h = 2 * rng.gen_range(1..=6);
        let w = 2 * rng.gen_range(1..=6);
        let mut x = random_tensor(&mut rng, &[n, c, h, w]);
        // quantise some cases so ties occur
        if case % 3 == 0 {
            x.data_mut().iter_mut().for_each(|v| *v = (*v * 2.0).round());
        }
        let mut want = Vec::new();
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.get(&[ni, ci, 2 * oy + dy, 2 * ox + dx]));
                            }
                        }
                        want.push(m);
                    }
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let xv = g.constant(&x).unwrap();
        let y = g.maxpool2(xv).unwrap();
        assert_eq!(g.shape(y), &[n, c, h / 2, w / 2]);
        assert_close(g.value(y), &want, &format!("maxpool case {case}"));
    }
}

#[test]
fn maxpool2_routes_ties_to_first_index() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 1.0, 1.0, 1.0])
        .unwrap()
        .with_grad();
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(&x).unwrap();
    let y = g.maxpool2(xv).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_nearest2_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..24 {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let mut want = Vec::new();
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        want.push(x.get(&[ni, ci, y / 2, xx / 2]));
                    }
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let xv = g.constant(&x).unwrap();
        let y = g.upsample_nearest2(xv).unwrap();
        assert_eq!(g.shape(y), &[n, c, 2 * h, 2 * w]);
        assert_close(g.value(y), &want, &format!("upsample case {case}"));
    }
}

#[test]
fn conv2d_rejects_inexact_stride() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::zeros(vec![1, 1, 5, 5])).unwrap();
    let k = g.constant(&Tensor::zeros(vec![1, 1, 2, 2])).unwrap();
    let b = g.constant(&Tensor::zeros(vec![1])).unwrap();
    assert!(g.conv2d(x, k, b, 2, 0).is_err());
}
