//! Online streaming inference: a session owns the per-layer recursion state
//! chain, consumes one event slice per step, emits one prediction per step,
//! and logs per-step wall time from a monotonic clock.
//!
//! The harness also measures the cost of recomputing each prediction from
//! scratch over the full history, which is what a non-recursive
//! spatio-temporal network would pay; the comparison is reported as
//! relative numbers since absolute step times are hardware-specific.

use crate::edec::StreamState;
use crate::error::{Error, Result};
use crate::events::Mask;
use crate::network::Network;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::time::Instant;

/// A single-consumer streaming run over one network. Steps are strictly
/// ordered; concurrent streams each own their own session.
pub struct StreamSession<'a> {
    net: &'a Network,
    states: Vec<StreamState>,
    clock: usize,
    latencies_ns: Vec<u64>,
}

impl<'a> StreamSession<'a> {
    /// Open a session with cold-start (all-zero) layer states.
    pub fn open(net: &'a Network) -> StreamSession<'a> {
        StreamSession {
            net,
            states: net.fresh_states(),
            clock: 0,
            latencies_ns: Vec::new(),
        }
    }

    /// Bin index of the next slice to be consumed.
    pub fn clock(&self) -> usize {
        self.clock
    }

    /// Consume one event slice and emit the prediction for it. Exactly one
    /// layer-chain traversal; past slices are never touched. The wall time
    /// of the traversal is recorded.
    pub fn step(&mut self, slice: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
        let started = Instant::now();
        let out = self.net.step(&mut self.states, slice, mask)?;
        self.latencies_ns
            .push(started.elapsed().as_nanos() as u64);
        self.clock += 1;
        Ok(out)
    }

    /// Per-step wall times recorded so far, in nanoseconds.
    pub fn latencies_ns(&self) -> &[u64] {
        &self.latencies_ns
    }
}

/// A recompute-from-scratch timing probe: the cost of producing the
/// prediction at `slice_index` by replaying slices 0..=slice_index through
/// a fresh session.
#[derive(Debug, Clone, Copy)]
pub struct DenseProbe {
    pub slice_index: usize,
    pub ns: u64,
}

/// Latency measurements for a streaming run.
#[derive(Debug, Clone)]
pub struct LatencyReport {
    /// Post-warmup per-step times; entry `i` is slice `warmup + i`.
    pub per_slice_ns: Vec<u64>,
    pub warmup: usize,
    /// Input cells per slice (W * H * C).
    pub cells: usize,
    /// Recompute-from-scratch probes, possibly several per slice index.
    pub dense_probes: Vec<DenseProbe>,
}

impl LatencyReport {
    pub fn mean_ns(&self) -> f64 {
        if self.per_slice_ns.is_empty() {
            return 0.0;
        }
        self.per_slice_ns.iter().sum::<u64>() as f64 / self.per_slice_ns.len() as f64
    }

    pub fn percentile_ns(&self, p: f64) -> u64 {
        if self.per_slice_ns.is_empty() {
            return 0;
        }
        let mut sorted = self.per_slice_ns.clone();
        sorted.sort_unstable();
        let idx = ((sorted.len() as f64 * p).floor() as usize).min(sorted.len() - 1);
        sorted[idx]
    }

    /// Mean step time divided by the number of input cells.
    pub fn per_cell_ns(&self) -> f64 {
        self.mean_ns() / self.cells as f64
    }

    /// Median of the dense probes at one slice index.
    pub fn dense_median_ns(&self, slice_index: usize) -> Option<u64> {
        let mut times: Vec<u64> = self
            .dense_probes
            .iter()
            .filter(|p| p.slice_index == slice_index)
            .map(|p| p.ns)
            .collect();
        if times.is_empty() {
            return None;
        }
        times.sort_unstable();
        Some(times[times.len() / 2])
    }

    /// Median step time near a slice index (window of +/- 2 slices).
    pub fn stream_median_near(&self, slice_index: usize) -> Option<u64> {
        let mut times = Vec::new();
        for (i, &ns) in self.per_slice_ns.iter().enumerate() {
            let abs = self.warmup + i;
            if abs + 2 >= slice_index && abs <= slice_index + 2 {
                times.push(ns);
            }
        }
        if times.is_empty() {
            return None;
        }
        times.sort_unstable();
        Some(times[times.len() / 2])
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let n = self.per_slice_ns.len();
        let _ = writeln!(out, "streaming step latency ({n} slices, {} warmup excluded)", self.warmup);
        let _ = writeln!(out, "  mean      {:>12.1} ns", self.mean_ns());
        let _ = writeln!(out, "  p50       {:>12} ns", self.percentile_ns(0.50));
        let _ = writeln!(out, "  p99       {:>12} ns", self.percentile_ns(0.99));
        let _ = writeln!(
            out,
            "  per cell  {:>12.2} ns ({} cells)",
            self.per_cell_ns(),
            self.cells
        );
        let mut indices: Vec<usize> = self
            .dense_probes
            .iter()
            .map(|p| p.slice_index)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        indices.sort_unstable();
        if !indices.is_empty() {
            let _ = writeln!(out, "dense recompute from scratch:");
            for i in indices {
                if let Some(ns) = self.dense_median_ns(i) {
                    let _ = writeln!(out, "  slice {i:>5}  median {ns:>12} ns");
                }
            }
        }
        out
    }

    /// Machine-readable per-slice records, one line each: `index,ns,cells`.
    /// Dense probes follow as `dense,index,ns,cells`.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (i, ns) in self.per_slice_ns.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.warmup + i, ns, self.cells);
        }
        for p in &self.dense_probes {
            let _ = writeln!(out, "dense,{},{},{}", p.slice_index, p.ns, self.cells);
        }
        out
    }
}

/// Stream `slices` through a fresh session, timing each step. The first
/// `warmup` steps are excluded from the report. Slices are generated ahead
/// of the run so data preparation never lands inside the timed section.
pub fn bench_streaming(
    net: &Network,
    slices: &[(Tensor, Option<Mask>)],
    warmup: usize,
) -> Result<LatencyReport> {
    if slices.len() <= warmup {
        return Err(Error::arg(
            "bench_streaming",
            format!("{} slices do not cover the {warmup}-slice warmup", slices.len()),
        ));
    }
    let cells = slices[0].0.numel();
    let mut session = StreamSession::open(net);
    for (slice, mask) in slices {
        session.step(slice, mask.as_ref())?;
    }
    Ok(LatencyReport {
        per_slice_ns: session.latencies_ns()[warmup..].to_vec(),
        warmup,
        cells,
        dense_probes: Vec::new(),
    })
}

/// Time recompute-from-scratch predictions at the given slice indices:
/// each probe replays slices 0..=index through a fresh session and records
/// the total wall time. `repeats` probes are taken per index.
pub fn bench_dense_recompute(
    net: &Network,
    slices: &[(Tensor, Option<Mask>)],
    probe_indices: &[usize],
    repeats: usize,
) -> Result<Vec<DenseProbe>> {
    let mut probes = Vec::new();
    for &idx in probe_indices {
        if idx >= slices.len() {
            return Err(Error::arg(
                "bench_dense_recompute",
                format!("probe index {idx} beyond {} slices", slices.len()),
            ));
        }
        for _ in 0..repeats.max(1) {
            let started = Instant::now();
            let mut states = net.fresh_states();
            for (slice, mask) in &slices[..=idx] {
                net.step(&mut states, slice, mask.as_ref())?;
            }
            probes.push(DenseProbe {
                slice_index: idx,
                ns: started.elapsed().as_nanos() as u64,
            });
        }
    }
    Ok(probes)
}
