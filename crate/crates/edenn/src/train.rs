//! Training: adaptive-moment gradient descent over tape gradients, with the
//! settling-time loss protocol and masked L1 objectives.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::events::EventVolume;
use crate::metrics::{self, settle_bin};
use crate::network::{HeadSpec, Network, NetworkVars, Prediction, TapeSlice};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One training sample: quantized events plus per-bin ground truth.
///
/// Scalar tasks use (D, T) ground truth with a (T) validity mask; dense
/// tasks use (W, H, C, T) ground truth with a (W, H, T) mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub volume: EventVolume,
    pub gt: Tensor,
    pub valid: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Loss is evaluated from this offset onward; None means half the window.
    pub settle_us: Option<u64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            settle_us: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean sample loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, dim: usize) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1c;
            let vh = self.v[i] / b2c;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

fn block_avg(t: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return t.clone();
    }
    let (w, h, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (wo, ho) = (w / f, h / f);
    let mut out = Tensor::zeros(&[wo, ho, c]);
    let norm = 1.0 / (f * f) as f64;
    for x in 0..wo {
        for y in 0..ho {
            for ci in 0..c {
                let mut s = 0.0;
                for dx in 0..f {
                    for dy in 0..f {
                        s += t.at3(x * f + dx, y * f + dy, ci);
                    }
                }
                out.set3(x, y, ci, s * norm);
            }
        }
    }
    out
}

fn block_any(m: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return m.clone();
    }
    let (w, h) = (m.shape()[0], m.shape()[1]);
    let (wo, ho) = (w / f, h / f);
    let mut out = Tensor::zeros(&[wo, ho]);
    for x in 0..wo {
        for y in 0..ho {
            let mut any = 0.0;
            for dx in 0..f {
                for dy in 0..f {
                    if m.data()[(x * f + dx) * h + (y * f + dy)] > 0.0 {
                        any = 1.0;
                    }
                }
            }
            out.data_mut()[x * ho + y] = any;
        }
    }
    out
}

fn slice_2d(t: &Tensor, ti: usize) -> Tensor {
    // (W, H, T) -> (W, H) at bin ti.
    let (w, h, nt) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(&[w, h]);
    for x in 0..w {
        for y in 0..h {
            out.data_mut()[x * h + y] = t.data()[(x * h + y) * nt + ti];
        }
    }
    out
}

fn gt_column(gt: &Tensor, ti: usize) -> Tensor {
    // (D, T) -> (D) at bin ti.
    let (d, t) = (gt.shape()[0], gt.shape()[1]);
    Tensor::from_vec(&[d], (0..d).map(|j| gt.data()[j * t + ti]).collect())
}

/// Build the masked settling-time L1 loss for one sample on the tape.
/// Returns None when no cell qualifies (the sample contributes nothing).
fn sample_loss(
    net: &Network,
    tape: &mut Tape,
    slices: &[TapeSlice],
    sample: &TrainSample,
    settle: usize,
) -> Result<Option<VarId>> {
    match &net.config.head {
        HeadSpec::ScalarRegression { dim, .. } => {
            if sample.valid.shape().len() != 1 {
                return Err(Error::shape(
                    "train",
                    "scalar task needs a per-bin (T) validity mask",
                ));
            }
            let mut total: Option<VarId> = None;
            let mut count = 0usize;
            for (ti, s) in slices.iter().enumerate().skip(settle) {
                if sample.valid.data()[ti] == 0.0 {
                    continue;
                }
                let gt = tape.leaf(gt_column(&sample.gt, ti));
                let diff = tape.sub(s.main, gt)?;
                let a = tape.abs(diff);
                let part = tape.sum(a);
                total = Some(match total {
                    Some(acc) => tape.add(acc, part)?,
                    None => part,
                });
                count += dim;
            }
            Ok(total.map(|t| tape.scale_const(t, 1.0 / count as f64)))
        }
        HeadSpec::DensePerPixel { channels } => {
            // One masked-mean term per head scale, equally weighted.
            let n_heads = slices[0].aux.len() + 1;
            let mut scale_losses: Vec<VarId> = Vec::new();
            for head in 0..n_heads {
                let mut total: Option<VarId> = None;
                let mut count = 0usize;
                for (ti, s) in slices.iter().enumerate().skip(settle) {
                    let node = if head < slices[0].aux.len() {
                        s.aux[head].1
                    } else {
                        s.main
                    };
                    let (w, _h) = (tape.shape(node)[0], tape.shape(node)[1]);
                    let f = net.config.input_width / w;
                    let gt_s = block_avg(&sample.gt.time_slice(ti), f);
                    let valid_s = block_any(&slice_2d(&sample.valid, ti), f);
                    let n_valid = valid_s.data().iter().filter(|&&v| v > 0.0).count();
                    if n_valid == 0 {
                        continue;
                    }
                    let gt_leaf = tape.leaf(gt_s);
                    let diff = tape.sub(node, gt_leaf)?;
                    let a = tape.abs(diff);
                    let mask_leaf = tape.leaf(valid_s);
                    let masked = tape.hadamard(a, mask_leaf)?;
                    let part = tape.sum(masked);
                    total = Some(match total {
                        Some(acc) => tape.add(acc, part)?,
                        None => part,
                    });
                    count += n_valid * channels;
                }
                if let Some(t) = total {
                    scale_losses.push(tape.scale_const(t, 1.0 / count as f64));
                }
            }
            if scale_losses.is_empty() {
                return Ok(None);
            }
            let mut acc = scale_losses[0];
            for s in &scale_losses[1..] {
                acc = tape.add(acc, *s)?;
            }
            Ok(Some(tape.scale_const(acc, 1.0 / n_heads as f64)))
        }
    }
}

/// Forward/backward pass for one sample: loss value and flat gradients.
pub fn sample_pass(net: &Network, sample: &TrainSample, settle: usize) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars: NetworkVars = net.register(&mut tape);
    let slices = net.forward_tape(&mut tape, &vars, &sample.volume)?;
    match sample_loss(net, &mut tape, &slices, sample, settle)? {
        Some(loss) => {
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((value, net.grads_flat(&vars, &grads)))
        }
        None => Ok((0.0, vec![0.0; net.param_count()])),
    }
}

/// Train a network in place. Deterministic for a fixed seed and thread
/// count; thread count only affects scheduling, not results.
pub fn train(net: &mut Network, data: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::arg("train", "dataset is empty"));
    }
    let bin_us = data[0].volume.spec.bin_us;
    let window_us = data[0].volume.spec.window_us;
    let settle_us = cfg.settle_us.unwrap_or(window_us / 2);
    if settle_us >= window_us {
        return Err(Error::arg(
            "train",
            format!("settle {settle_us}us must be shorter than the window {window_us}us"),
        ));
    }
    let settle = settle_bin(settle_us, bin_us);

    let mut params = net.params_flat();
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let results = run_batch(net, data, batch, settle, cfg.threads);
            let mut grad_sum = vec![0.0; params.len()];
            for r in results {
                let (loss, grads) = r.map_err(|e| Error::Training {
                    epoch,
                    batch: batch_idx,
                    msg: e.to_string(),
                })?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch: batch_idx,
                        msg: format!("non-finite loss {loss}"),
                    });
                }
                epoch_loss += loss;
                for (a, g) in grad_sum.iter_mut().zip(&grads) {
                    *a += g;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g *= inv);
            if grad_sum.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    msg: "non-finite gradient".into(),
                });
            }
            adam.step(&mut params, &grad_sum);
            net.set_params_flat(&params);
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainReport {
        loss_history: history,
    })
}

type PassResult = Result<(f64, Vec<f64>)>;

/// Evaluate a batch of samples, optionally across threads. Results come
/// back in batch order regardless of scheduling.
fn run_batch(
    net: &Network,
    data: &[TrainSample],
    batch: &[usize],
    settle: usize,
    threads: usize,
) -> Vec<PassResult> {
    let workers = threads.max(1).min(batch.len());
    if workers <= 1 {
        return batch
            .iter()
            .map(|&i| sample_pass(net, &data[i], settle))
            .collect();
    }
    let mut results: Vec<Option<PassResult>> = (0..batch.len()).map(|_| None).collect();
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let mut slots = results.chunks_mut(chunk);
        let mut handles = Vec::new();
        for (w, slot) in (0..workers).zip(&mut slots) {
            let start = w * chunk;
            handles.push(scope.spawn(move || {
                for (k, out) in slot.iter_mut().enumerate() {
                    let i = batch[start + k];
                    *out = Some(sample_pass(net, &data[i], settle));
                }
            }));
        }
        for h in handles {
            h.join().expect("training worker panicked");
        }
    });
    results.into_iter().map(|r| r.expect("slot filled")).collect()
}

/// Joint scalar-regression evaluation over a dataset.
#[derive(Debug, Clone)]
pub struct ScalarEval {
    pub rmse: f64,
    pub baseline_rmse: f64,
    pub relative_error: f64,
    /// The constant the mean predictor emits.
    pub baseline: Vec<f64>,
}

pub fn evaluate_scalar(
    net: &Network,
    data: &[TrainSample],
    settle_us: u64,
) -> Result<ScalarEval> {
    if data.is_empty() {
        return Err(Error::arg("evaluate_scalar", "dataset is empty"));
    }
    let settle = settle_bin(settle_us, data[0].volume.spec.bin_us);
    let gts: Vec<&Tensor> = data.iter().map(|s| &s.gt).collect();
    let baseline = metrics::mean_ground_truth(&gts, settle)?;

    let (mut se_pred, mut se_base, mut n) = (0.0, 0.0, 0usize);
    for sample in data {
        let pred = match net.forward(&sample.volume)? {
            Prediction::Scalar(p) => p,
            _ => {
                return Err(Error::arg(
                    "evaluate_scalar",
                    "network has a dense head",
                ))
            }
        };
        let (d, t) = (sample.gt.shape()[0], sample.gt.shape()[1]);
        for j in 0..d {
            for ti in settle..t {
                let g = sample.gt.data()[j * t + ti];
                let e = pred.data()[j * t + ti] - g;
                se_pred += e * e;
                let b = baseline[j] - g;
                se_base += b * b;
                n += 1;
            }
        }
    }
    let rmse = (se_pred / n as f64).sqrt();
    let baseline_rmse = (se_base / n as f64).sqrt();
    Ok(ScalarEval {
        rmse,
        baseline_rmse,
        relative_error: metrics::relative_error(rmse, baseline_rmse)?,
        baseline,
    })
}

/// Joint dense-flow evaluation over a dataset, with the zero-flow baseline.
#[derive(Debug, Clone)]
pub struct FlowEval {
    pub aee: f64,
    pub zero_flow_aee: f64,
}

pub fn evaluate_flow(net: &Network, data: &[TrainSample]) -> Result<FlowEval> {
    if data.is_empty() {
        return Err(Error::arg("evaluate_flow", "dataset is empty"));
    }
    let (mut total, mut total_zero, mut count) = (0.0, 0.0, 0usize);
    for sample in data {
        let pred = match net.forward(&sample.volume)? {
            Prediction::Dense(p) => p,
            _ => return Err(Error::arg("evaluate_flow", "network has a scalar head")),
        };
        let (w, h, _, t) = (
            sample.gt.shape()[0],
            sample.gt.shape()[1],
            sample.gt.shape()[2],
            sample.gt.shape()[3],
        );
        for x in 0..w {
            for y in 0..h {
                for ti in 0..t {
                    if sample.valid.data()[(x * h + y) * t + ti] == 0.0 {
                        continue;
                    }
                    let gu = sample.gt.at4(x, y, 0, ti);
                    let gv = sample.gt.at4(x, y, 1, ti);
                    let du = pred.at4(x, y, 0, ti) - gu;
                    let dv = pred.at4(x, y, 1, ti) - gv;
                    total += du.hypot(dv);
                    total_zero += gu.hypot(gv);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Metric {
            msg: "no valid flow pixels".into(),
        });
    }
    Ok(FlowEval {
        aee: total / count as f64,
        zero_flow_aee: total_zero / count as f64,
    })
}
