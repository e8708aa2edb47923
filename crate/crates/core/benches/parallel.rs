//! Sequential versus rayon execution for the data-parallel kernels.
//! Build with `--no-default-features` to see the fallback path in both rows.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kpvc::grid::{grid_sample_with, SampleGrid};
use kpvc::ops::conv2d_with;
use kpvc::pipeline::{decode_sequence, encode_sequence, DecodeOptions, EncodeOptions, Models};
use kpvc::{Exec, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[32, 96, 96], -1.0, 1.0);
    let w = random(&mut rng, &[32, 32, 3, 3], -0.1, 0.1);
    let b = Tensor::zeros(&[32]);
    let mut g = c.benchmark_group("conv2d_32x96x96");
    for (name, exec) in MODES {
        g.bench_function(name, |bch| bch.iter(|| conv2d_with(exec, &x, &w, &b, 1, 1).unwrap()));
    }
    g.finish();
}

fn warp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[16, 8, 64, 64], -1.0, 1.0);
    let grid = SampleGrid::new(random(&mut rng, &[8, 64, 64, 3], -1.0, 1.0)).unwrap();
    let mut g = c.benchmark_group("grid_sample_16x8x64x64");
    for (name, exec) in MODES {
        g.bench_function(name, |bch| bch.iter(|| grid_sample_with(exec, &x, &grid).unwrap()));
    }
    g.finish();
}

fn frames(n: usize, side: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..n).map(|_| random(&mut rng, &[3, side, side], 0.0, 1.0)).collect()
}

fn extraction(c: &mut Criterion) {
    let (m, _) = Models::random(&ModelConfig::default(), 0).unwrap();
    let input = frames(8, 64);
    let mut g = c.benchmark_group("extract_8_frames_64");
    for (name, exec) in MODES {
        g.bench_function(name, |bch| {
            bch.iter(|| exec.try_map(input.len(), |i| m.extractor.extract(Exec::Sequential, &input[i])).unwrap())
        });
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let (m, _) = Models::random(&ModelConfig::default(), 0).unwrap();
    let mut g = c.benchmark_group("decode");
    g.sample_size(10);
    for n in [4usize, 8] {
        let bytes = encode_sequence(&m, Exec::default(), &frames(n, 64), &EncodeOptions::default())
            .unwrap()
            .bytes;
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &bytes, |bch, bytes| {
                bch.iter(|| decode_sequence(&m, exec, bytes, &DecodeOptions::default()).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, conv, warp, extraction, synthesis);
criterion_main!(benches);
