//! End-to-end gradient checks: the analytic gradients produced by the tape
//! through full network unrolls (spatial kernels, raw decay parameters,
//! head weights) must match central finite differences of the same loss.

use edenn::edec::LayerMode;
use edenn::events::{build_event_volume, Event, Geometry, WindowSpec};
use edenn::network::{
    build_network, HeadSpec, LayerSpec, Network, NetworkConfig, Nonlinearity,
};
use edenn::tensor::Tensor;
use edenn::train::{sample_pass, TrainSample};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sparse_volume(seed: u64, geom: Geometry, spec: WindowSpec, n: usize) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Event {
            t_us: rng.random_range(0..spec.window_us),
            x: rng.random_range(0..geom.width),
            y: rng.random_range(0..geom.height),
            polarity: if rng.random_range(0..2u32) == 0 { 1 } else { -1 },
        })
        .collect()
}

fn scalar_sample(seed: u64, geom: Geometry, spec: WindowSpec, dim: usize) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let events = sparse_volume(seed, geom, spec, 60);
    let volume = build_event_volume(&events, geom, spec).unwrap();
    let bins = spec.bins();
    // Offset keeps |pred - gt| away from the L1 kink under perturbation.
    let gt = Tensor::from_vec(
        &[dim, bins],
        (0..dim * bins)
            .map(|_| rng.random_range(0.3..1.3))
            .collect(),
    );
    TrainSample {
        volume,
        gt,
        valid: Tensor::ones(&[bins]),
    }
}

/// Finite-difference check of `sample_pass` gradients on a subset of
/// parameters (all of them when `max_checked` covers the count).
fn check_network_gradients(
    net: &Network,
    sample: &TrainSample,
    settle: usize,
    max_checked: usize,
    tol: f64,
) {
    let (_, analytic) = sample_pass(net, sample, settle).unwrap();
    let params = net.params_flat();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut indices: Vec<usize> = (0..params.len()).collect();
    if params.len() > max_checked {
        for i in 0..max_checked {
            let j = rng.random_range(i..params.len());
            indices.swap(i, j);
        }
        indices.truncate(max_checked);
    }
    let mut worst = 0.0f64;
    for &i in &indices {
        let mut net_p = net.clone();
        let mut p = params.clone();
        p[i] += h;
        net_p.set_params_flat(&p);
        let (fp, _) = sample_pass(&net_p, sample, settle).unwrap();
        p[i] -= 2.0 * h;
        net_p.set_params_flat(&p);
        let (fm, _) = sample_pass(&net_p, sample, settle).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(
            rel < tol,
            "param {i}: analytic {} vs fd {fd} (rel {rel:.2e})",
            analytic[i]
        );
    }
    assert!(worst.is_finite());
}

#[test]
fn two_layer_streaming_unroll_gradients_match_finite_differences() {
    let geom = Geometry {
        width: 8,
        height: 8,
    };
    let spec = WindowSpec::new(0, 4_000, 1_000).unwrap();
    let config = NetworkConfig {
        input_width: 8,
        input_height: 8,
        input_channels: 2,
        layers: vec![
            LayerSpec {
                kernel: 3,
                channels: 3,
                stride: 2,
                mode: LayerMode::Streaming,
                act: Nonlinearity::Identity,
                bias: true,
                upsample: false,
            },
            LayerSpec {
                kernel: 3,
                channels: 2,
                stride: 1,
                mode: LayerMode::Streaming,
                act: Nonlinearity::Relu,
                bias: false,
                upsample: false,
            },
        ],
        head: HeadSpec::ScalarRegression { dim: 3, bias: true },
        skips: Vec::new(),
        aux_head_layers: Vec::new(),
    };
    let net = build_network(&config, 11).unwrap();
    let sample = scalar_sample(3, geom, spec, 3);
    // Every parameter: kernels, decay raws, biases, head weights.
    check_network_gradients(&net, &sample, 1, usize::MAX, 1e-4);
}

#[test]
fn masked_chain_gradients_match_finite_differences() {
    // Count-based scaling: the factor is constant w.r.t. parameters but the
    // masked data path is not.
    let geom = Geometry {
        width: 8,
        height: 8,
    };
    let spec = WindowSpec::new(0, 3_000, 1_000).unwrap();
    let config = NetworkConfig {
        input_width: 8,
        input_height: 8,
        input_channels: 2,
        layers: vec![LayerSpec {
            kernel: 3,
            channels: 2,
            stride: 1,
            mode: LayerMode::PartialOriginal,
            act: Nonlinearity::Identity,
            bias: false,
            upsample: false,
        }],
        head: HeadSpec::ScalarRegression { dim: 2, bias: false },
        skips: Vec::new(),
        aux_head_layers: Vec::new(),
    };
    let net = build_network(&config, 13).unwrap();
    let sample = scalar_sample(5, geom, spec, 2);
    check_network_gradients(&net, &sample, 0, usize::MAX, 1e-4);
}

#[test]
fn weighted_masked_chain_gradients_flow_through_the_scaling_factor() {
    // Kernel-weighted scaling: the compensation factor itself depends on
    // the kernel and decay, and its gradient path must agree with finite
    // differences. Positive kernels keep the denominator clear of the
    // dead zone so the loss stays smooth under perturbation.
    let geom = Geometry {
        width: 8,
        height: 8,
    };
    let spec = WindowSpec::new(0, 3_000, 1_000).unwrap();
    let config = NetworkConfig {
        input_width: 8,
        input_height: 8,
        input_channels: 2,
        layers: vec![LayerSpec {
            kernel: 3,
            channels: 2,
            stride: 1,
            mode: LayerMode::PartialWeighted,
            act: Nonlinearity::Identity,
            bias: false,
            upsample: false,
        }],
        head: HeadSpec::ScalarRegression { dim: 2, bias: false },
        skips: Vec::new(),
        aux_head_layers: Vec::new(),
    };
    let mut net = build_network(&config, 17).unwrap();
    let positive: Vec<f64> = net.params_flat().iter().map(|v| v.abs() + 0.05).collect();
    net.set_params_flat(&positive);
    let sample = scalar_sample(7, geom, spec, 2);
    check_network_gradients(&net, &sample, 0, usize::MAX, 1e-4);
}

#[test]
fn unet_flow_gradients_match_finite_differences_on_sampled_parameters() {
    let geom = Geometry {
        width: 16,
        height: 16,
    };
    let spec = WindowSpec::new(0, 3_000, 1_000).unwrap();
    let config = NetworkConfig::flow_small(16, 16);
    let net = build_network(&config, 19).unwrap();

    let events = sparse_volume(9, geom, spec, 120);
    let volume = build_event_volume(&events, geom, spec).unwrap();
    let bins = spec.bins();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let gt = Tensor::from_vec(
        &[16, 16, 2, bins],
        (0..16 * 16 * 2 * bins)
            .map(|_| rng.random_range(0.2..0.8))
            .collect(),
    );
    let valid = Tensor::from_vec(
        &[16, 16, bins],
        (0..16 * 16 * bins)
            .map(|_| if rng.random_range(0.0..1.0) < 0.4 { 1.0 } else { 0.0 })
            .collect(),
    );
    let sample = TrainSample { volume, gt, valid };
    check_network_gradients(&net, &sample, 1, 60, 1e-4);
}
