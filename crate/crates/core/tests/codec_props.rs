//! Keypoint codec: losslessness, context synchrony and rate behaviour.

use std::collections::HashMap;
use std::time::Instant;

use kpvc::codec::arith::{ArithDecoder, ArithEncoder};
use kpvc::codec::context::CoderState;
use kpvc::codec::{
    decode_frame, encode_frame, measure_bits, quantize, KeypointBitstream, KeypointStreamDecoder,
    KeypointStreamEncoder, QuantStep, ResidualSet,
};
use kpvc::keypoints::KeypointSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut ChaCha8Rng, k: usize) -> KeypointSet {
    KeypointSet::new((0..k).map(|_| [0; 3].map(|_: i32| rng.gen_range(-1.0f32..=1.0))).collect()).unwrap()
}

/// Two-sided geometric sample: `P(r) ∝ θ^|r|`.
fn geometric(rng: &mut ChaCha8Rng, theta: f64) -> i32 {
    let u: f64 = rng.gen();
    let p0 = (1.0 - theta) / (1.0 + theta);
    if u < p0 {
        return 0;
    }
    let mag = 1 + (rng.gen::<f64>().ln() / theta.ln()).floor() as i32;
    if rng.gen::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Empirical order-0 entropy of the symbol sequence, in bits.
fn shannon_bits(values: &[i32]) -> f64 {
    let mut counts: HashMap<i32, usize> = HashMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    let n = values.len() as f64;
    counts
        .values()
        .map(|&c| -(c as f64) * (c as f64 / n).log2())
        .sum()
}

#[test]
fn ten_thousand_frames_round_trip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for q in [4u8, 6, 8] {
        let step = QuantStep::new(q).unwrap();
        let frames: Vec<KeypointSet> = (0..3334).map(|_| random_set(&mut rng, 15)).collect();
        let seed = quantize(&frames[0], step);
        let mut enc = KeypointStreamEncoder::new(step, seed.clone());
        let mut dec = KeypointStreamDecoder::new(step, seed);
        for f in &frames {
            let (q, bits) = enc.encode(f).unwrap();
            let got = dec.decode(&bits).unwrap();
            if got != q {
                mismatches += 1;
            }
            assert_eq!(enc.state(), dec.state(), "contexts diverged");
        }
    }
    assert_eq!(mismatches, 0);
    assert!(start.elapsed().as_secs_f64() < 10.0, "{:?}", start.elapsed());
}

#[test]
fn residual_round_trip_any_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut enc_state = CoderState::new();
    let mut dec_state = CoderState::new();
    for _ in 0..1000 {
        let k = rng.gen_range(1..20);
        let scale = 1i32 << rng.gen_range(0..21);
        let values: Vec<[i32; 3]> = (0..k).map(|_| [0; 3].map(|_: i32| rng.gen_range(-scale..=scale))).collect();
        let r = ResidualSet::new(values);
        let bits = encode_frame(&r, &mut enc_state).unwrap();
        assert_eq!(decode_frame(&bits, &mut dec_state, k).unwrap(), r);
        assert_eq!(enc_state, dec_state);
    }
}

#[test]
fn truncated_payload_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let step = QuantStep::DEFAULT;
    let a = random_set(&mut rng, 15);
    let mut enc = KeypointStreamEncoder::new(step, quantize(&a, step));
    for _ in 0..50 {
        let (_, bits) = enc.encode(&random_set(&mut rng, 15)).unwrap();
        let mut bytes = bits.bytes().to_vec();
        bytes.pop();
        assert!(KeypointBitstream::new(bytes, bits.bit_count()).is_err());
    }
}

#[test]
fn bypass_bins_cost_one_bit_each() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bins: Vec<bool> = (0..100_000).map(|_| rng.gen()).collect();
    let mut enc = ArithEncoder::new();
    for &b in &bins {
        enc.encode_bypass(b);
    }
    let (bytes, bits) = enc.finish();
    let excess = (bits as f64 - bins.len() as f64).abs() / bins.len() as f64;
    assert!(excess < 0.005, "{bits} bits for {} bins", bins.len());
    let mut dec = ArithDecoder::new(&bytes);
    assert!(bins.iter().all(|&b| dec.decode_bypass() == b));
}

#[test]
fn geometric_source_near_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let values: Vec<i32> = (0..100_005).map(|_| geometric(&mut rng, 0.8)).collect();
    let bound = shannon_bits(&values);
    let mut state = CoderState::new();
    let mut coded = 0u64;
    for chunk in values.chunks(45) {
        let r = ResidualSet::new(chunk.chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
        coded += encode_frame(&r, &mut state).unwrap().bit_count() as u64;
    }
    let overhead = coded as f64 / bound - 1.0;
    eprintln!("coded {coded} bits, order-0 bound {bound:.0} bits, overhead {:.2}%", overhead * 100.0);
    assert!(overhead < 0.03);
}

#[test]
fn static_sequence_is_nearly_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let frame = random_set(&mut rng, 15);
    let frames = vec![frame; 150];
    let report = measure_bits(&frames, QuantStep::DEFAULT).unwrap();
    assert_eq!(report.per_frame.len(), 150);
    assert_eq!(report.per_frame[0], 0);
    for w in report.per_frame[10..].windows(2) {
        assert!(w[1] <= w[0], "{:?}", &report.per_frame[..30]);
    }
    assert!(report.per_frame[21..].iter().all(|&b| b < 4));
    assert_eq!(report.total, report.per_frame.iter().sum::<u64>());
}

#[test]
fn single_frame_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = measure_bits(&[random_set(&mut rng, 15)], QuantStep::DEFAULT).unwrap();
    assert_eq!(r.per_frame, vec![0]);
    assert_eq!(r.total, 0);
}

#[test]
fn smooth_motion_beats_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let start = random_set(&mut rng, 15);
    let velocity: Vec<[f32; 3]> = (0..15).map(|_| [0; 3].map(|_: i32| rng.gen_range(-0.004f32..0.004))).collect();
    let linear: Vec<KeypointSet> = (0..100)
        .map(|t| {
            KeypointSet::new(
                start
                    .points()
                    .iter()
                    .zip(&velocity)
                    .map(|(p, v)| [0, 1, 2].map(|a| (p[a] * 0.5 + v[a] * t as f32).clamp(-1.0, 1.0)))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let random: Vec<KeypointSet> = (0..100).map(|_| random_set(&mut rng, 15)).collect();
    let a = measure_bits(&linear, QuantStep::DEFAULT).unwrap().total;
    let b = measure_bits(&random, QuantStep::DEFAULT).unwrap().total;
    assert!(a < b, "linear {a} vs random {b}");

    let zeros = vec![start.clone(); 100];
    assert!(measure_bits(&zeros, QuantStep::DEFAULT).unwrap().total < b);
}

#[test]
fn context_probabilities_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut state = CoderState::new();
    for _ in 0..500 {
        let values = (0..15).map(|_| [0; 3].map(|_: i32| geometric(&mut rng, 0.3))).collect();
        encode_frame(&ResidualSet::new(values), &mut state).unwrap();
        for m in state.models() {
            let p = m.probability_of_zero();
            assert!((1.0 / 64.0..=63.0 / 64.0).contains(&p));
        }
    }
}
