//! Brute-force oracles for the tensor kernels.

use kpvc::grid::{cell_center, grid_sample_with, SampleGrid};
use kpvc::ops::{self, ElementwiseKind};
use kpvc::{Exec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (k, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ko in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.at(&[ko]) as f64;
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[ko, ci, dy, dx]) as f64
                                * x.at(&[ci, iy as usize, ix as usize]) as f64;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn assert_close(got: &[f32], want: &[f64], rel: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let tol = rel * w.abs().max(1.0);
        assert!((g as f64 - w).abs() <= tol, "index {i}: {g} vs {w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv2d_matches_nested_loops(
        seed in any::<u64>(),
        c in 1usize..4,
        k in 1usize..4,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        h in 5usize..9,
        w in 5usize..9,
        stride in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = kernel / 2;
        prop_assume!((h + 2 * pad - kernel) % stride == 0 && (w + 2 * pad - kernel) % stride == 0);
        let x = random(&mut rng, &[c, h, w]);
        let wt = random(&mut rng, &[k, c, kernel, kernel]);
        let b = random(&mut rng, &[k]);
        let want = conv_oracle(&x, &wt, &b, stride, pad);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = ops::conv2d_with(exec, &x, &wt, &b, stride, pad).unwrap();
            assert_close(got.data(), &want, 1e-6);
        }
    }

    #[test]
    fn linear_matches_dot_products(seed in any::<u64>(), m in 1usize..40, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[n]);
        let wt = random(&mut rng, &[m, n]);
        let b = random(&mut rng, &[m]);
        let want: Vec<f64> = (0..m)
            .map(|i| b.at(&[i]) as f64 + (0..n).map(|j| wt.at(&[i, j]) as f64 * x.at(&[j]) as f64).sum::<f64>())
            .collect();
        assert_close(ops::linear(&x, &wt, &b).unwrap().data(), &want, 1e-6);
    }

    #[test]
    fn softmax_slices_sum_to_one(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-50.0..50.0));
        let y = ops::softmax_axis(&x, axis).unwrap();
        let shape = [3usize, 4, 5];
        let mut sums = std::collections::HashMap::new();
        for a in 0..3 {
            for b in 0..4 {
                for c in 0..5 {
                    let mut key = [a, b, c];
                    key[axis] = 0;
                    let v = y.at(&[a, b, c]);
                    prop_assert!(v >= 0.0);
                    *sums.entry(key).or_insert(0f64) += v as f64;
                }
            }
        }
        prop_assert_eq!(sums.len(), shape.iter().product::<usize>() / shape[axis]);
        for s in sums.values() {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_trivial_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 5, 5]);
    let mut id = Tensor::zeros(&[2, 2, 1, 1]);
    id.data_mut()[0] = 1.0;
    id.data_mut()[3] = 1.0;
    assert_eq!(ops::conv2d(&x, &id, &Tensor::zeros(&[2]), 1, 0).unwrap(), x);
    let y = ops::conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::full(&[3], 0.7), 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.7));
    assert!(ops::conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1]), 2, 0).is_err());
}

#[test]
fn linear_trivial_maps() {
    let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    assert_eq!(ops::linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
    let b = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::linear(&x, &Tensor::zeros(&[4, 3]), &b).unwrap(), b);
    assert!(ops::linear(&x, &Tensor::zeros(&[4, 2]), &b).is_err());
}

#[test]
fn softmax_oracle_and_stability() {
    let x = Tensor::new(&[3], vec![0.3, -1.2, 2.1]).unwrap();
    let e: Vec<f64> = x.data().iter().map(|&v| (v as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    let want: Vec<f64> = e.iter().map(|v| v / s).collect();
    let got = ops::softmax_axis(&x, 0).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-7);
    }
    let flat = ops::softmax_axis(&Tensor::full(&[5], 3.0), 0).unwrap();
    assert!(flat.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    let spike = ops::softmax_axis(&Tensor::new(&[3], vec![0.0, 1000.0, 0.0]).unwrap(), 0).unwrap();
    assert!((spike.data()[1] - 1.0).abs() < 1e-6 && spike.is_finite());
}

#[test]
fn pooling_and_concat() {
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::reduce_pool_adaptive(&x).unwrap().data(), &[2.5]);
    let one = Tensor::new(&[2, 1, 1], vec![7.0, -3.0]).unwrap();
    assert_eq!(ops::reduce_pool_adaptive(&one).unwrap().data(), &[7.0, -3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[3, 3, 4]);
    let cat = ops::elementwise(&a, Some(&b), ElementwiseKind::ConcatChannels).unwrap();
    assert_eq!(cat.shape(), &[5, 3, 4]);
    for c in 0..5 {
        for y in 0..3 {
            for x in 0..4 {
                let want = if c < 2 { a.at(&[c, y, x]) } else { b.at(&[c - 2, y, x]) };
                assert_eq!(cat.at(&[c, y, x]), want);
            }
        }
    }
    let ones = Tensor::full(&[2, 3, 4], 1.0);
    assert_eq!(ops::elementwise(&a, Some(&ones), ElementwiseKind::Hadamard).unwrap(), a);
    let r = ops::elementwise(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), None, ElementwiseKind::Relu).unwrap();
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    assert!(ops::elementwise(&a, Some(&b), ElementwiseKind::Add).is_err());
}

/// Per-cell trilinear interpolation with border clamp, written independently
/// of the library's stencil code.
fn sample_oracle(input: &Tensor, coord: [f64; 3]) -> Vec<f64> {
    let (c, d, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let pos = |v: f64, n: usize| (((v + 1.0) * n as f64 - 1.0) / 2.0).clamp(0.0, (n - 1) as f64);
    let (px, py, pz) = (pos(coord[0], w), pos(coord[1], h), pos(coord[2], d));
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for z in 0..d {
                let wz = (1.0 - (pz - z as f64).abs()).max(0.0);
                for y in 0..h {
                    let wy = (1.0 - (py - y as f64).abs()).max(0.0);
                    for x in 0..w {
                        let wx = (1.0 - (px - x as f64).abs()).max(0.0);
                        acc += wz * wy * wx * input.at(&[ch, z, y, x]) as f64;
                    }
                }
            }
            acc
        })
        .collect()
}

#[test]
fn grid_sample_matches_tent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let (c, d, h, w) = (2, rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6));
        let input = random(&mut rng, &[c, d, h, w]);
        let grid = Tensor::from_fn(&[d, h, w, 3], |_| rng.gen_range(-1.3..1.3));
        let got = grid_sample_with(Exec::Sequential, &input, &SampleGrid::new(grid.clone()).unwrap()).unwrap();
        for cell in 0..d * h * w {
            let g = &grid.data()[cell * 3..cell * 3 + 3];
            let want = sample_oracle(&input, [g[0] as f64, g[1] as f64, g[2] as f64]);
            for ch in 0..c {
                let v = got.data()[ch * d * h * w + cell] as f64;
                assert!((v - want[ch]).abs() < 1e-5, "{v} vs {}", want[ch]);
            }
        }
    }
}

#[test]
fn grid_sample_shift_and_clamp() {
    let input = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let shifted = Tensor::from_fn(&[1, 4, 2], |i| {
        if i % 2 == 0 {
            cell_center(i / 2, 4) + 0.5
        } else {
            0.0
        }
    });
    let out = grid_sample_with(Exec::Sequential, &input, &SampleGrid::new(shifted).unwrap()).unwrap();
    assert_eq!(out.data(), &[2.0, 3.0, 4.0, 4.0]);
    let far = Tensor::from_fn(&[1, 4, 2], |i| if i % 2 == 0 { 1.5 } else { 0.0 });
    let out = grid_sample_with(Exec::Sequential, &input, &SampleGrid::new(far).unwrap()).unwrap();
    assert_eq!(out.data(), &[4.0; 4]);
}

#[test]
fn identity_grid_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (d, h, w) in [(1, 7, 5), (4, 16, 16), (3, 9, 12), (2, 64, 48)] {
        let input = random(&mut rng, &[3, d, h, w]);
        let out = grid_sample_with(Exec::Parallel, &input, &SampleGrid::identity(d, h, w)).unwrap();
        assert_eq!(out, input);
    }
}

#[test]
fn kernels_are_deterministic_across_strategies() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random(&mut rng, &[4, 16, 16]);
    let wt = random(&mut rng, &[8, 4, 3, 3]);
    let b = random(&mut rng, &[8]);
    let a = ops::conv2d_with(Exec::Sequential, &x, &wt, &b, 1, 1).unwrap();
    let p = ops::conv2d_with(Exec::Parallel, &x, &wt, &b, 1, 1).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
