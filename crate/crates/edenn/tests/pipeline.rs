//! Cross-module flows: synthetic scenes through quantization, training,
//! evaluation and streaming.

use edenn::network::{build_network, NetworkConfig, Prediction};
use edenn::stream::StreamSession;
use edenn::synth::{gen_angular, AxisProfile, Scenario, SceneSpec};
use edenn::train::{evaluate_scalar, train, TrainConfig, TrainSample};
use edenn::events::Geometry;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_angular_dataset(n: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let seed = 400 + i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sign = if rng.random_range(0..2u32) == 0 { 1.0 } else { -1.0 };
            let wz = sign * rng.random_range(300.0..900.0);
            let spec = SceneSpec {
                geometry: Geometry {
                    width: 16,
                    height: 16,
                },
                duration_us: 40_000,
                bin_us: 4_000,
                seed,
                scenario: Scenario::Rotating {
                    rates: [
                        AxisProfile::constant(0.0),
                        AxisProfile::constant(0.0),
                        AxisProfile::constant(wz),
                    ],
                },
                pattern_points: 5,
                blob_sigma: 1.2,
                substeps_per_bin: 4,
                pattern_override: None,
            };
            gen_angular(&spec).unwrap().to_train_sample().unwrap()
        })
        .collect()
}

#[test]
fn tiny_angular_task_beats_the_mean_predictor() {
    let data = tiny_angular_dataset(10);
    let config = NetworkConfig::angular_with_channels(16, 16, &[4, 8, 8, 16, 16]);
    let mut net = build_network(&config, 31).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 4,
        learning_rate: 3e-3,
        seed: 1,
        settle_us: Some(20_000),
        threads: 2,
    };
    train(&mut net, &data, &cfg).unwrap();
    let eval = evaluate_scalar(&net, &data, 20_000).unwrap();
    assert!(
        eval.relative_error < 1.0,
        "relative error {:.3} should beat the mean predictor (rmse {:.1} vs {:.1})",
        eval.relative_error,
        eval.rmse,
        eval.baseline_rmse
    );
}

#[test]
fn streaming_a_generated_scene_matches_batch_forward() {
    let data = tiny_angular_dataset(1);
    let sample = &data[0];
    let config = NetworkConfig::angular_with_channels(16, 16, &[4, 8, 8, 16, 16]);
    let net = build_network(&config, 33).unwrap();
    let batch = match net.forward(&sample.volume).unwrap() {
        Prediction::Scalar(p) => p,
        _ => unreachable!(),
    };
    let bins = sample.volume.bins();
    let mut session = StreamSession::open(&net);
    for t in 0..bins {
        let out = session.step(&sample.volume.slice(t), None).unwrap();
        for j in 0..3 {
            assert!((out.data()[j] - batch.data()[j * bins + t]).abs() < 1e-9);
        }
    }
}
