//! Extractor and synthesis heads: oracles, invariants and latency.

use std::time::Instant;

use kpvc::config::VERTEX_COUNT;
use kpvc::grid::{cell_center, grid_sample_with, SampleGrid};
use kpvc::keypoints::{downsample_frame, heatmaps_to_keypoints, KeypointExtractor};
use kpvc::synthesis::{refine_feature, FrameGenerator, VertexHead};
use kpvc::{Exec, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn extractor_config() -> ModelConfig {
    ModelConfig {
        keypoints: 15,
        depth: 4,
        extractor_levels: 3,
        extractor_channels: 8,
        ..Default::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn soft_argmax_matches_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..50 {
        let logits = random(&mut rng, &[1, 2, 2, 2]).scale(3.0);
        let kp = heatmaps_to_keypoints(&logits).unwrap();
        let e: Vec<f64> = logits.data().iter().map(|&v| (v as f64).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut want = [0f64; 3];
        for (i, w) in e.iter().enumerate() {
            let (z, y, x) = (i / 4, (i / 2) % 2, i % 2);
            want[0] += w / total * cell_center(x, 2) as f64;
            want[1] += w / total * cell_center(y, 2) as f64;
            want[2] += w / total * cell_center(z, 2) as f64;
        }
        for a in 0..3 {
            assert!((kp.points()[0][a] as f64 - want[a]).abs() < 1e-6);
        }
    }
}

#[test]
fn soft_argmax_saturation_and_symmetry() {
    let uniform = heatmaps_to_keypoints(&Tensor::zeros(&[3, 4, 6, 6])).unwrap();
    assert!(uniform.points().iter().flatten().all(|&v| v.abs() < 1e-7));
    let mut spike = Tensor::zeros(&[1, 4, 8, 8]);
    let cell = [2, 5, 1];
    let off = spike.offset(&[0, cell[0], cell[1], cell[2]]);
    spike.data_mut()[off] = 1e4;
    let kp = heatmaps_to_keypoints(&spike).unwrap().points()[0];
    let want = [cell_center(1, 8), cell_center(5, 8), cell_center(2, 4)];
    for a in 0..3 {
        assert!((kp[a] - want[a]).abs() < 1e-4);
    }
    // moving the spike one cell along x moves the keypoint by one pitch
    let mut moved = Tensor::zeros(&[1, 4, 8, 8]);
    let off = moved.offset(&[0, 2, 5, 2]);
    moved.data_mut()[off] = 1e4;
    let kp2 = heatmaps_to_keypoints(&moved).unwrap().points()[0];
    assert!((kp2[0] - kp[0] - 2.0 / 8.0).abs() < 1e-6);
}

#[test]
fn extraction_is_stepwise_composition() {
    let cfg = extractor_config();
    let ex = KeypointExtractor::load(&KeypointExtractor::weight_spec(&cfg).random(0), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame = Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(0.0..1.0));
    let stepwise = heatmaps_to_keypoints(
        &ex.unet_forward(Exec::Sequential, &downsample_frame(&frame, cfg.downsample).unwrap()).unwrap(),
    )
    .unwrap();
    assert_eq!(ex.extract(Exec::Sequential, &frame).unwrap(), stepwise);
    assert_eq!(ex.extract(Exec::Parallel, &frame).unwrap(), stepwise);
    assert!(stepwise.points().iter().flatten().all(|v| v.abs() <= 1.0));
}

#[test]
fn zero_extractor_on_gray_gives_centroids() {
    let cfg = extractor_config();
    let ex = KeypointExtractor::load(&KeypointExtractor::weight_spec(&cfg).zeros(), &cfg).unwrap();
    let logits = ex.unet_forward(Exec::Sequential, &Tensor::full(&[3, 32, 32], 0.5)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let kps = ex.extract(Exec::Sequential, &Tensor::full(&[3, 64, 64], 0.5)).unwrap();
    assert_eq!(kps.len(), 15);
    assert!(kps.points().iter().flatten().all(|&v| v.abs() < 1e-7));
}

#[test]
fn head_bias_shifts_one_keypoint_uniformly() {
    let cfg = extractor_config();
    let mut store = KeypointExtractor::weight_spec(&cfg).random(0);
    let ex = KeypointExtractor::load(&store, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let small = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let before = ex.unet_forward(Exec::Sequential, &small).unwrap();
    // channel k·D + d of the head feeds keypoint k, depth slice d
    let (k, d) = (6, 2);
    let ch = k * cfg.depth + d;
    let bias = store.get_mut("extractor.head.bias").unwrap();
    let delta = bias.data()[ch].abs() + 0.25;
    bias.data_mut()[ch] += delta;
    let after = KeypointExtractor::load(&store, &cfg).unwrap().unet_forward(Exec::Sequential, &small).unwrap();
    let plane = 32 * 32;
    for (i, (a, b)) in after.data().iter().zip(before.data()).enumerate() {
        if i / plane == ch {
            assert!(((a - b) - delta).abs() < 1e-5);
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn extractor_rejects_bad_sizes_and_weights() {
    let cfg = extractor_config();
    let spec = KeypointExtractor::weight_spec(&cfg);
    let ex = KeypointExtractor::load(&spec.zeros(), &cfg).unwrap();
    assert!(ex.unet_forward(Exec::Sequential, &Tensor::zeros(&[3, 20, 32])).is_err());
    assert!(ex.extract(Exec::Sequential, &Tensor::zeros(&[3, 63, 64])).is_err());
    let mut store = spec.zeros();
    store.insert("extractor.enc1.weight", Tensor::zeros(&[1, 1, 1, 1]));
    let err = KeypointExtractor::load(&store, &cfg).unwrap_err();
    assert!(err.to_string().contains("extractor.enc1.weight"), "{err}");
}

#[test]
fn refine_matches_stepwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (c, d, h, w) = (3, 4, 8, 8);
    let tex = random(&mut rng, &[c, d, h, w]);
    let flow = Tensor::from_fn(&[d, h, w, 3], |_| rng.gen_range(-1.0..1.0));
    let occ = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0));
    let got = refine_feature(&tex, &flow, &occ).unwrap();
    let warped = grid_sample_with(Exec::Sequential, &tex, &SampleGrid::new(flow.clone()).unwrap()).unwrap();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mean: f64 = (0..d).map(|z| warped.at(&[ch, z, y, x]) as f64).sum::<f64>() / d as f64;
                let want = mean * occ.at(&[0, y, x]) as f64;
                assert!((got.at(&[ch, y, x]) as f64 - want).abs() < 1e-6);
            }
        }
    }
    // linear in the occlusion map
    let alpha = 0.37f32;
    let scaled = refine_feature(&tex, &flow, &occ.scale(alpha)).unwrap();
    assert!(scaled.max_abs_diff(&got.scale(alpha)).unwrap() < 1e-6);
}

#[test]
fn generator_output_is_bounded() {
    let cfg = ModelConfig {
        texture_channels: 4,
        generator_channels: 8,
        ..Default::default()
    };
    let g = FrameGenerator::load(&FrameGenerator::weight_spec(&cfg).random(0), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = g.forward(Exec::Sequential, &random(&mut rng, &[4, 8, 8]).scale(20.0)).unwrap();
    assert_eq!(out.shape(), &[3, 32, 32]);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn vertex_config(c: usize) -> ModelConfig {
    ModelConfig {
        texture_channels: c,
        ..Default::default()
    }
}

#[test]
fn vertices_depend_only_on_pooled_descriptor() {
    let cfg = vertex_config(4);
    let mut store = VertexHead::weight_spec(&cfg).random(2);
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        if name.starts_with("vertex.res") {
            let t = store.get_mut(&name).unwrap();
            t.data_mut().fill(0.0);
        }
    }
    let head = VertexHead::load(&store, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // dyadic values keep every spatial sum exact regardless of order
    let a = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-64i32..64) as f32 / 64.0);
    let mut order: Vec<usize> = (0..64).collect();
    for i in (1..64).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let b = Tensor::from_fn(&[4, 8, 8], |i| a.data()[(i / 64) * 64 + order[i % 64]]);
    assert_ne!(a, b);
    let va = head.forward(Exec::Sequential, &a).unwrap();
    assert_eq!(va, head.forward(Exec::Sequential, &b).unwrap());
    assert_eq!(va.coords().shape(), &[VERTEX_COUNT, 2]);
    assert!(va.coords().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn vertex_head_latency_desk_scale() {
    let cfg = vertex_config(64);
    let head = VertexHead::load(&VertexHead::weight_spec(&cfg).random(0), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feat = random(&mut rng, &[64, 64, 64]);
    head.forward(Exec::Sequential, &feat).unwrap();
    let mut times: Vec<f64> = (0..15)
        .map(|_| {
            let t = Instant::now();
            let v = head.forward(Exec::Sequential, &feat).unwrap();
            let dt = t.elapsed().as_secs_f64();
            assert_eq!(v.coords().shape(), &[VERTEX_COUNT, 2]);
            dt
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2] * 1e3;
    eprintln!("vertex head median {median:.2} ms");
    assert!(median < 10.0, "median {median:.2} ms");
}
