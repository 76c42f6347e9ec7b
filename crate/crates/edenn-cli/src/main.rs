//! Command-line entry point: synthetic data generation, training,
//! evaluation, streaming inference, and the latency benchmark.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use edenn::checkpoint::{load_checkpoint_file, save_checkpoint_file};
use edenn::config::parse_config;
use edenn::events::{write_events_binary, write_events_csv, Geometry, Mask};
use edenn::network::{build_network, HeadSpec, Network, Prediction};
use edenn::stream::{bench_dense_recompute, bench_streaming, StreamSession};
use edenn::synth::{
    gen_angular, gen_flow, load_sample, write_ground_truth, AxisProfile, FlowField,
    LabelledSample, Scenario, SceneSpec,
};
use edenn::tensor::Tensor;
use edenn::train::{evaluate_flow, evaluate_scalar, train, TrainSample};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "edenn",
    version,
    about = "Event-decay convolution networks: generate, train, evaluate, stream, bench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Rotating,
    Translating,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic event samples with ground-truth sidecars.
    Gen {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        /// Output directory for sample files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Window length, e.g. 100ms, 48ms, 100000us.
        #[arg(long, default_value = "100ms")]
        duration: String,
        /// Bin width, e.g. 2ms.
        #[arg(long, default_value = "2ms")]
        bin_width: String,
        /// Sensor geometry WxH.
        #[arg(long, default_value = "32x32")]
        size: String,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        /// Blobs per scene.
        #[arg(long, default_value_t = 8)]
        points: usize,
        /// Use a two-region flow field (translating scenario only).
        #[arg(long, default_value_t = false)]
        split: bool,
    },
    /// Train a network described by a config file on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Loss history file (epoch,loss per line).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Worker threads for batch evaluation (results are identical for
        /// any thread count; 1 forces fully sequential execution).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream a dataset sample slice by slice, printing per-slice output.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Check the streamed outputs against the batch forward pass.
        #[arg(long, default_value_t = false)]
        verify: bool,
    },
    /// Measure per-slice streaming latency against dense recomputation.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        slices: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Slice indices probed with full recomputation from scratch.
        #[arg(long, value_delimiter = ',', default_value = "10,200")]
        dense_probes: Vec<usize>,
        /// Repetitions per dense probe.
        #[arg(long, default_value_t = 3)]
        probe_repeats: usize,
    },
}

fn parse_duration_us(s: &str) -> Result<u64> {
    let s = s.trim();
    let (digits, unit): (String, String) = s.chars().partition(|c| c.is_ascii_digit());
    let value: u64 = digits
        .parse()
        .with_context(|| format!("bad duration {s:?}"))?;
    match unit.trim() {
        "us" | "µs" => Ok(value),
        "ms" => Ok(value * 1_000),
        "s" => Ok(value * 1_000_000),
        "" => Ok(value), // bare number: microseconds
        u => bail!("unknown duration unit {u:?} in {s:?}"),
    }
}

fn parse_size(s: &str) -> Result<Geometry> {
    let (w, h) = s
        .split_once('x')
        .with_context(|| format!("size must be WxH, got {s:?}"))?;
    Ok(Geometry {
        width: w.trim().parse().with_context(|| format!("bad width {w:?}"))?,
        height: h.trim().parse().with_context(|| format!("bad height {h:?}"))?,
    })
}

/// Per-sample scenario with randomized motion drawn from the sample seed.
fn sample_scenario(
    arg: ScenarioArg,
    split: bool,
    geometry: Geometry,
    bins: usize,
    seed: u64,
) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9a510_u64.rotate_left(7));
    match arg {
        ScenarioArg::Rotating => {
            let sign = if rng.random_range(0..2u32) == 0 { 1.0 } else { -1.0 };
            let wz = sign * rng.random_range(180.0..720.0);
            let wobble = |rng: &mut ChaCha8Rng| AxisProfile {
                base: 0.0,
                amplitude: rng.random_range(10.0..40.0),
                freq_hz: rng.random_range(5.0..15.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            Scenario::Rotating {
                rates: [
                    wobble(&mut rng),
                    wobble(&mut rng),
                    AxisProfile::constant(wz),
                ],
            }
        }
        ScenarioArg::Translating => {
            let limit = geometry.width.min(geometry.height) as f64 / 4.0;
            let max_v = (0.9 * limit / bins as f64).min(0.35);
            let draw = |rng: &mut ChaCha8Rng| {
                let mag = rng.random_range(0.3 * max_v..max_v);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                (mag * dir.cos(), mag * dir.sin())
            };
            let flow = if split {
                FlowField::SplitVertical {
                    split_col: geometry.width as usize / 2,
                    left: draw(&mut rng),
                    right: draw(&mut rng),
                }
            } else {
                let (vx, vy) = draw(&mut rng);
                FlowField::Constant { vx, vy }
            };
            Scenario::Translating { flow }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    scenario: ScenarioArg,
    out: &Path,
    samples: usize,
    seed: u64,
    duration: &str,
    bin_width: &str,
    size: &str,
    format: FormatArg,
    points: usize,
    split: bool,
) -> Result<()> {
    let duration_us = parse_duration_us(duration)?;
    let bin_us = parse_duration_us(bin_width)?;
    let geometry = parse_size(size)?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let bins = (duration_us / bin_us) as usize;

    println!("scenario: {}", match scenario {
        ScenarioArg::Rotating => "rotating",
        ScenarioArg::Translating => "translating",
    });
    println!("geometry: {}x{}", geometry.width, geometry.height);
    println!("window: {duration_us}us in {bins} bins of {bin_us}us");
    println!("samples: {samples}");

    for i in 0..samples {
        let sample_seed = seed.wrapping_add(i as u64);
        let spec = SceneSpec {
            geometry,
            duration_us,
            bin_us,
            seed: sample_seed,
            scenario: sample_scenario(scenario, split, geometry, bins, sample_seed),
            pattern_points: points,
            blob_sigma: 1.4,
            substeps_per_bin: 4,
            pattern_override: None,
        };
        let sample = match scenario {
            ScenarioArg::Rotating => gen_angular(&spec)?,
            ScenarioArg::Translating => gen_flow(&spec)?,
        };
        let stem = format!("sample_{i:03}");
        let events_path = match format {
            FormatArg::Csv => out.join(format!("{stem}.csv")),
            FormatArg::Binary => out.join(format!("{stem}.evt")),
        };
        let mut events_file = std::io::BufWriter::new(std::fs::File::create(&events_path)?);
        match format {
            FormatArg::Csv => write_events_csv(&mut events_file, &sample.events)?,
            FormatArg::Binary => {
                write_events_binary(&mut events_file, &sample.events, geometry)?
            }
        }
        drop(events_file);
        let gt_path = out.join(format!("{stem}.gt"));
        let mut gt_file = std::io::BufWriter::new(std::fs::File::create(&gt_path)?);
        write_ground_truth(&sample, &mut gt_file)?;
        println!(
            "wrote {} ({} events) + {}",
            events_path.display(),
            sample.events.len(),
            gt_path.display()
        );
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<TrainSample>> {
    let mut stems: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read data directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("gt"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("no .gt sidecars found in {}", dir.display());
    }
    let mut out = Vec::with_capacity(stems.len());
    for gt_path in stems {
        let csv = gt_path.with_extension("csv");
        let evt = gt_path.with_extension("evt");
        let events_path = if csv.exists() {
            csv
        } else if evt.exists() {
            evt
        } else {
            bail!("no event file next to {}", gt_path.display());
        };
        let labelled: LabelledSample = load_sample(&events_path, &gt_path)?;
        out.push(labelled.to_train_sample()?);
    }
    Ok(out)
}

fn settle_us_of(train_cfg: &edenn::train::TrainConfig, data: &[TrainSample]) -> u64 {
    train_cfg
        .settle_us
        .unwrap_or(data[0].volume.spec.window_us / 2)
}

fn print_metrics(net: &Network, data: &[TrainSample], settle_us: u64) -> Result<String> {
    let mut text = String::new();
    match net.config.head {
        HeadSpec::ScalarRegression { .. } => {
            let eval = evaluate_scalar(net, data, settle_us)?;
            text.push_str(&format!("rmse_deg_per_s: {:.6}\n", eval.rmse));
            text.push_str(&format!("baseline_rmse_deg_per_s: {:.6}\n", eval.baseline_rmse));
            text.push_str(&format!("relative_error: {:.6}\n", eval.relative_error));
        }
        HeadSpec::DensePerPixel { .. } => {
            let eval = evaluate_flow(net, data)?;
            text.push_str(&format!("aee_px: {:.6}\n", eval.aee));
            text.push_str(&format!("zero_flow_aee_px: {:.6}\n", eval.zero_flow_aee));
            text.push_str(&format!(
                "aee_ratio_vs_zero_flow: {:.6}\n",
                eval.aee / eval.zero_flow_aee
            ));
        }
    }
    print!("{text}");
    Ok(text)
}

fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out_checkpoint: &Path,
    history: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    threads: Option<usize>,
) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("cannot read config {}", config_path.display()))?;
    let (net_config, mut train_cfg) = parse_config(&text)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if let Some(t) = threads {
        train_cfg.threads = t;
    }
    let data = load_dataset(data_dir)?;
    let mut net = build_network(&net_config, train_cfg.seed)?;
    println!(
        "network: {} layers, {} parameters (per block: {:?})",
        net.layers.len(),
        net.param_count(),
        net.per_layer_param_counts()
    );
    println!(
        "training: {} samples, {} epochs, batch {}, lr {}, seed {}",
        data.len(),
        train_cfg.epochs,
        train_cfg.batch_size,
        train_cfg.learning_rate,
        train_cfg.seed
    );
    let report = train(&mut net, &data, &train_cfg)?;
    save_checkpoint_file(&net, &train_cfg, out_checkpoint)?;
    println!("checkpoint: {}", out_checkpoint.display());
    if let Some(h) = history {
        let mut text = String::new();
        for (e, l) in report.loss_history.iter().enumerate() {
            text.push_str(&format!("{e},{l:.17e}\n"));
        }
        std::fs::write(h, text)?;
        println!("history: {}", h.display());
    }
    if let Some(last) = report.loss_history.last() {
        println!("final_train_loss: {last:.6}");
    }
    print_metrics(&net, &data, settle_us_of(&train_cfg, &data))?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, out: Option<&Path>) -> Result<()> {
    let (net, train_cfg) = load_checkpoint_file(checkpoint)?;
    let data = load_dataset(data_dir)?;
    let text = print_metrics(&net, &data, settle_us_of(&train_cfg, &data))?;
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_stream(checkpoint: &Path, data_dir: &Path, sample_idx: usize, verify: bool) -> Result<()> {
    let (net, _) = load_checkpoint_file(checkpoint)?;
    let data = load_dataset(data_dir)?;
    let sample = data
        .get(sample_idx)
        .with_context(|| format!("sample {sample_idx} of {} not found", data.len()))?;
    let volume = &sample.volume;
    let masks = if net.has_partial_layers() {
        Some(edenn::events::initial_mask(volume))
    } else {
        None
    };

    let mut session = StreamSession::open(&net);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(volume.bins());
    for t in 0..volume.bins() {
        let mask: Option<Mask> = masks.as_ref().map(|m| m.slice(t));
        let out = session.step(&volume.slice(t), mask.as_ref())?;
        match net.config.head {
            HeadSpec::ScalarRegression { .. } => {
                let vals: Vec<String> = out.data().iter().map(|v| format!("{v:.6}")).collect();
                println!("slice {t}: {}", vals.join(" "));
            }
            HeadSpec::DensePerPixel { .. } => {
                let (w, h) = (out.shape()[0], out.shape()[1]);
                let n = (w * h) as f64;
                let mu: f64 = (0..w)
                    .flat_map(|x| (0..h).map(move |y| (x, y)))
                    .map(|(x, y)| out.at3(x, y, 0))
                    .sum::<f64>()
                    / n;
                let mv: f64 = (0..w)
                    .flat_map(|x| (0..h).map(move |y| (x, y)))
                    .map(|(x, y)| out.at3(x, y, 1))
                    .sum::<f64>()
                    / n;
                println!("slice {t}: mean flow ({mu:.4}, {mv:.4}) px/bin");
            }
        }
        outputs.push(out);
    }

    if verify {
        let batch = net.forward(volume)?;
        let mut worst = 0.0f64;
        for (t, out) in outputs.iter().enumerate() {
            match &batch {
                Prediction::Scalar(p) => {
                    for j in 0..out.numel() {
                        worst = worst.max((out.data()[j] - p.data()[j * volume.bins() + t]).abs());
                    }
                }
                Prediction::Dense(p) => {
                    worst = worst.max(out.max_abs_diff(&p.time_slice(t)));
                }
            }
        }
        println!("verify: max |stream - batch| = {worst:.3e}");
        if worst >= 1e-9 {
            bail!("stream/batch divergence {worst:.3e} exceeds 1e-9");
        }
    }
    Ok(())
}

fn cmd_bench(
    checkpoint: &Path,
    slices: usize,
    warmup: usize,
    seed: u64,
    dense_probes: &[usize],
    probe_repeats: usize,
) -> Result<()> {
    let (net, _) = load_checkpoint_file(checkpoint)?;
    let (w, h, c) = (
        net.config.input_width,
        net.config.input_height,
        net.config.input_channels,
    );
    // Sparse random slices, generated before any timing starts.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slices_data: Vec<(Tensor, Option<Mask>)> = (0..slices)
        .map(|_| {
            let mut t = Tensor::zeros(&[w, h, c]);
            let fires = (w * h / 20).max(4);
            for _ in 0..fires {
                let x = rng.random_range(0..w);
                let y = rng.random_range(0..h);
                let ch = rng.random_range(0..c);
                t.set3(x, y, ch, 1.0);
            }
            (t, None)
        })
        .collect();

    let mut report = bench_streaming(&net, &slices_data, warmup)?;
    let probes: Vec<usize> = dense_probes
        .iter()
        .copied()
        .filter(|&i| i < slices)
        .collect();
    report.dense_probes = bench_dense_recompute(&net, &slices_data, &probes, probe_repeats)?;
    print!("{}", report.table());
    println!("records: index,ns,cells");
    print!("{}", report.records());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Gen {
            scenario,
            out,
            samples,
            seed,
            duration,
            bin_width,
            size,
            format,
            points,
            split,
        } => cmd_gen(
            scenario, &out, samples, seed, &duration, &bin_width, &size, format, points, split,
        ),
        Cmd::Train {
            config,
            data,
            out_checkpoint,
            history,
            seed,
            epochs,
            threads,
        } => cmd_train(
            &config,
            &data,
            &out_checkpoint,
            history.as_deref(),
            seed,
            epochs,
            threads,
        ),
        Cmd::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Cmd::Stream {
            checkpoint,
            data,
            sample,
            verify,
        } => cmd_stream(&checkpoint, &data, sample, verify),
        Cmd::Bench {
            checkpoint,
            slices,
            warmup,
            seed,
            dense_probes,
            probe_repeats,
        } => cmd_bench(
            &checkpoint,
            slices,
            warmup,
            seed,
            &dense_probes,
            probe_repeats,
        ),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
