//! Deterministic synthetic event scenes with exact ground truth.
//!
//! Scenes are analytic intensity fields (Gaussian blobs over a flat
//! background) moved by a known motion model. Events come from the standard
//! contrast model: a pixel fires whenever its log intensity drifts more than
//! a fixed threshold from the last fired level, with polarity from the sign
//! of the change. Everything is seeded, so identical specs produce
//! byte-identical samples.
//!
//! Two scenarios:
//!
//! * rotating pattern — blobs rotate about the image centre with a known
//!   angular rate; small out-of-plane components enter as image-plane
//!   translation. Ground truth is the 3-axis rate in degrees per second.
//! * translating edges — blobs translate with a constant or two-region
//!   flow field. Ground truth is the per-pixel flow in pixels per bin.

use crate::error::{Error, Result};
use crate::events::{
    build_event_volume, initial_mask, Event, Geometry, WindowSpec,
};
use crate::tensor::Tensor;
use crate::train::TrainSample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;

/// Contrast threshold of the event model (log-intensity units).
pub const CONTRAST_THRESHOLD: f64 = 0.2;

/// Sinusoid-plus-offset rate profile for one rotation axis, in deg/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisProfile {
    pub base: f64,
    pub amplitude: f64,
    pub freq_hz: f64,
    pub phase: f64,
}

impl AxisProfile {
    pub fn constant(v: f64) -> AxisProfile {
        AxisProfile {
            base: v,
            amplitude: 0.0,
            freq_hz: 0.0,
            phase: 0.0,
        }
    }

    pub fn at(&self, t_s: f64) -> f64 {
        self.base + self.amplitude * (2.0 * std::f64::consts::PI * self.freq_hz * t_s + self.phase).sin()
    }

    pub fn negated(&self) -> AxisProfile {
        AxisProfile {
            base: -self.base,
            amplitude: -self.amplitude,
            freq_hz: self.freq_hz,
            phase: self.phase,
        }
    }
}

/// Motion field for the translating scenario, in pixels per bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowField {
    Constant { vx: f64, vy: f64 },
    /// Columns left of `split_col` move with `left`, the rest with `right`.
    SplitVertical {
        split_col: usize,
        left: (f64, f64),
        right: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// Rates in deg/s for the (x, y, z) axes; z is in-plane rotation.
    Rotating { rates: [AxisProfile; 3] },
    Translating { flow: FlowField },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geometry: Geometry,
    pub duration_us: u64,
    pub bin_us: u64,
    pub seed: u64,
    pub scenario: Scenario,
    pub pattern_points: usize,
    pub blob_sigma: f64,
    pub substeps_per_bin: usize,
    /// Explicit blob placement for controlled scenes; None scatters
    /// `pattern_points` blobs from the seed.
    pub pattern_override: Option<Vec<(f64, f64)>>,
}

impl SceneSpec {
    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(0, self.duration_us, self.bin_us)
    }

    fn validate(&self) -> Result<()> {
        let w = self.window()?;
        if self.geometry.width < 4 || self.geometry.height < 4 {
            return Err(Error::arg("scene_spec", "geometry too small"));
        }
        if self.pattern_points == 0 || self.substeps_per_bin == 0 {
            return Err(Error::arg("scene_spec", "degenerate pattern or substeps"));
        }
        if self.blob_sigma <= 0.0 {
            return Err(Error::arg("scene_spec", "blob sigma must be positive"));
        }
        if let Scenario::Translating { flow } = &self.scenario {
            let limit = (self.geometry.width.min(self.geometry.height) as f64) / 4.0;
            let bins = w.bins() as f64;
            let check = |vx: f64, vy: f64| -> Result<()> {
                let mag = (vx * vx + vy * vy).sqrt() * bins;
                if mag >= limit {
                    return Err(Error::arg(
                        "scene_spec",
                        format!("window displacement {mag:.1}px exceeds {limit:.1}px"),
                    ));
                }
                Ok(())
            };
            match flow {
                FlowField::Constant { vx, vy } => check(*vx, *vy)?,
                FlowField::SplitVertical { left, right, .. } => {
                    check(left.0, left.1)?;
                    check(right.0, right.1)?;
                }
            }
        }
        if let Scenario::Rotating { rates } = &self.scenario {
            for r in rates {
                if r.base.abs() + r.amplitude.abs() > 20_000.0 {
                    return Err(Error::arg("scene_spec", "rotation rate out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Per-bin ground truth in its compact form.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    /// 3-axis angular rate per bin, deg/s.
    Angular(Vec<[f64; 3]>),
    /// Global flow per bin, px/bin.
    FlowConst(Vec<[f64; 2]>),
    FlowSplit {
        split_col: usize,
        left: Vec<[f64; 2]>,
        right: Vec<[f64; 2]>,
    },
}

/// A generated sample: the event stream plus exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSample {
    pub geometry: Geometry,
    pub window: WindowSpec,
    pub events: Vec<Event>,
    pub gt: GroundTruth,
}

impl LabelledSample {
    /// Quantize into a training sample: dense ground truth plus a validity
    /// mask that is zero wherever the stream produced no local events.
    pub fn to_train_sample(&self) -> Result<TrainSample> {
        let volume = build_event_volume(&self.events, self.geometry, self.window)?;
        let bins = self.window.bins();
        let (w, h) = (self.geometry.width as usize, self.geometry.height as usize);
        match &self.gt {
            GroundTruth::Angular(rates) => {
                let mut gt = Tensor::zeros(&[3, bins]);
                for (t, r) in rates.iter().enumerate() {
                    for j in 0..3 {
                        gt.data_mut()[j * bins + t] = r[j];
                    }
                }
                let mut valid = Tensor::zeros(&[bins]);
                for e in &self.events {
                    if let Some(b) = self.window.bin_of(e.t_us) {
                        valid.data_mut()[b] = 1.0;
                    }
                }
                Ok(TrainSample { volume, gt, valid })
            }
            GroundTruth::FlowConst(..) | GroundTruth::FlowSplit { .. } => {
                let mut gt = Tensor::zeros(&[w, h, 2, bins]);
                for x in 0..w {
                    for y in 0..h {
                        for t in 0..bins {
                            let (vx, vy) = self.flow_at(x, t);
                            gt.set4(x, y, 0, t, vx);
                            gt.set4(x, y, 1, t, vy);
                        }
                    }
                }
                let valid = initial_mask(&volume).tensor;
                Ok(TrainSample { volume, gt, valid })
            }
        }
    }

    fn flow_at(&self, x: usize, t: usize) -> (f64, f64) {
        match &self.gt {
            GroundTruth::FlowConst(v) => (v[t][0], v[t][1]),
            GroundTruth::FlowSplit {
                split_col,
                left,
                right,
            } => {
                if x < *split_col {
                    (left[t][0], left[t][1])
                } else {
                    (right[t][0], right[t][1])
                }
            }
            GroundTruth::Angular(..) => unreachable!("flow_at on angular sample"),
        }
    }
}

struct BlobScene {
    points: Vec<(f64, f64)>,
    sigma: f64,
    amplitude: f64,
    background: f64,
}

impl BlobScene {
    fn log_intensity(&self, positions: &[(f64, f64)], x: f64, y: f64) -> f64 {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut i = self.background;
        for &(px, py) in positions {
            let d2 = (x - px) * (x - px) + (y - py) * (y - py);
            i += self.amplitude * (-d2 * inv).exp();
        }
        i.ln()
    }
}

/// Run the contrast-threshold emitter: sample the field at substep
/// midpoints and fire an event per threshold crossing.
fn simulate(
    spec: &SceneSpec,
    scene: &BlobScene,
    positions_at: &dyn Fn(f64) -> Vec<(f64, f64)>,
) -> Vec<Event> {
    let (w, h) = (
        spec.geometry.width as usize,
        spec.geometry.height as usize,
    );
    let n_steps = spec.window().unwrap().bins() * spec.substeps_per_bin;
    let dt_us = spec.duration_us as f64 / n_steps as f64;

    let mut reference = vec![0.0f64; w * h];
    let p0 = positions_at(0.0);
    for x in 0..w {
        for y in 0..h {
            reference[x * h + y] = scene.log_intensity(&p0, x as f64, y as f64);
        }
    }

    let mut events = Vec::new();
    for step in 1..=n_steps {
        let t_mid_us = (step as f64 - 0.5) * dt_us;
        let t_us = t_mid_us as u64;
        let positions = positions_at(step as f64 * dt_us / 1e6);
        for x in 0..w {
            for y in 0..h {
                let level = scene.log_intensity(&positions, x as f64, y as f64);
                let r = &mut reference[x * h + y];
                let mut fired = 0;
                while level - *r >= CONTRAST_THRESHOLD && fired < 8 {
                    *r += CONTRAST_THRESHOLD;
                    events.push(Event {
                        t_us,
                        x: x as u16,
                        y: y as u16,
                        polarity: 1,
                    });
                    fired += 1;
                }
                while *r - level >= CONTRAST_THRESHOLD && fired < 8 {
                    *r -= CONTRAST_THRESHOLD;
                    events.push(Event {
                        t_us,
                        x: x as u16,
                        y: y as u16,
                        polarity: -1,
                    });
                    fired += 1;
                }
            }
        }
    }
    events
}

fn scatter_points(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (w, h) = (
        spec.geometry.width as f64,
        spec.geometry.height as f64,
    );
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let r_max = 0.42 * w.min(h);
    let r_min = 0.15 * w.min(h);
    (0..spec.pattern_points)
        .map(|_| {
            let r = rng.random_range(r_min..r_max);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

/// Generate a rotating-pattern sample with 3-axis angular-rate ground truth.
pub fn gen_angular(spec: &SceneSpec) -> Result<LabelledSample> {
    spec.validate()?;
    let rates = match &spec.scenario {
        Scenario::Rotating { rates } => *rates,
        _ => {
            return Err(Error::arg(
                "gen_angular",
                "spec scenario is not a rotating pattern",
            ))
        }
    };
    let window = spec.window()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base_points = match &spec.pattern_override {
        Some(p) => p.clone(),
        None => scatter_points(spec, &mut rng),
    };
    let scene = BlobScene {
        points: base_points,
        sigma: spec.blob_sigma,
        amplitude: 1.0,
        background: 0.5,
    };
    let (w, h) = (
        spec.geometry.width as f64,
        spec.geometry.height as f64,
    );
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    // Out-of-plane rotations enter as image translation through an
    // equivalent focal length.
    let focal_px = 0.5 * w.min(h);
    let deg = std::f64::consts::PI / 180.0;

    // Integrate the rate profiles once at substep resolution.
    let n_steps = window.bins() * spec.substeps_per_bin;
    let dt_s = spec.duration_us as f64 / 1e6 / n_steps as f64;
    let mut angle = vec![0.0f64; n_steps + 1]; // rad, about z
    let mut off_x = vec![0.0f64; n_steps + 1]; // px, from y-axis rotation
    let mut off_y = vec![0.0f64; n_steps + 1]; // px, from x-axis rotation
    for s in 0..n_steps {
        let t_mid = (s as f64 + 0.5) * dt_s;
        angle[s + 1] = angle[s] + rates[2].at(t_mid) * deg * dt_s;
        off_x[s + 1] = off_x[s] + focal_px * rates[1].at(t_mid) * deg * dt_s;
        off_y[s + 1] = off_y[s] + focal_px * rates[0].at(t_mid) * deg * dt_s;
    }

    let scene_ref = &scene;
    let positions_at = move |t_s: f64| -> Vec<(f64, f64)> {
        let s = ((t_s / dt_s).round() as usize).min(n_steps);
        let (sin, cos) = angle[s].sin_cos();
        scene_ref
            .points
            .iter()
            .map(|&(px, py)| {
                let (dx, dy) = (px - cx, py - cy);
                (
                    cx + dx * cos - dy * sin + off_x[s],
                    cy + dx * sin + dy * cos + off_y[s],
                )
            })
            .collect()
    };
    let events = simulate(spec, &scene, &positions_at);

    let bins = window.bins();
    let gt = (0..bins)
        .map(|b| {
            let t_center = (b as f64 + 0.5) * spec.bin_us as f64 / 1e6;
            [
                rates[0].at(t_center),
                rates[1].at(t_center),
                rates[2].at(t_center),
            ]
        })
        .collect();
    Ok(LabelledSample {
        geometry: spec.geometry,
        window,
        events,
        gt: GroundTruth::Angular(gt),
    })
}

/// Generate a translating-edges sample with dense flow ground truth.
pub fn gen_flow(spec: &SceneSpec) -> Result<LabelledSample> {
    spec.validate()?;
    let flow = match &spec.scenario {
        Scenario::Translating { flow } => *flow,
        _ => {
            return Err(Error::arg(
                "gen_flow",
                "spec scenario is not a translating field",
            ))
        }
    };
    let window = spec.window()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (
        spec.geometry.width as f64,
        spec.geometry.height as f64,
    );
    // Keep blobs away from borders, and for split fields away from the
    // boundary, so every pixel's events come from its own region's motion.
    let margin = 3.0 * spec.blob_sigma;
    let points: Vec<(f64, f64)> = if let Some(p) = &spec.pattern_override {
        p.clone()
    } else {
        match flow {
        FlowField::Constant { .. } => (0..spec.pattern_points)
            .map(|_| {
                (
                    rng.random_range(margin..w - margin),
                    rng.random_range(margin..h - margin),
                )
            })
            .collect(),
        FlowField::SplitVertical { split_col, .. } => (0..spec.pattern_points)
            .map(|i| {
                let left_side = i % 2 == 0;
                let (lo, hi) = if left_side {
                    (margin, (split_col as f64 - margin).max(margin + 1.0))
                } else {
                    (
                        (split_col as f64 + margin).min(w - margin - 1.0),
                        w - margin,
                    )
                };
                (rng.random_range(lo..hi), rng.random_range(margin..h - margin))
            })
            .collect(),
        }
    };
    let velocity_of = |px: f64| -> (f64, f64) {
        match flow {
            FlowField::Constant { vx, vy } => (vx, vy),
            FlowField::SplitVertical {
                split_col,
                left,
                right,
            } => {
                if px < split_col as f64 {
                    left
                } else {
                    right
                }
            }
        }
    };
    let velocities: Vec<(f64, f64)> = points.iter().map(|&(px, _)| velocity_of(px)).collect();
    let scene = BlobScene {
        points,
        sigma: spec.blob_sigma,
        amplitude: 1.0,
        background: 0.5,
    };
    let bin_s = spec.bin_us as f64 / 1e6;
    let scene_points = scene.points.clone();
    let positions_at = move |t_s: f64| -> Vec<(f64, f64)> {
        let bins_elapsed = t_s / bin_s;
        scene_points
            .iter()
            .zip(&velocities)
            .map(|(&(px, py), &(vx, vy))| (px + vx * bins_elapsed, py + vy * bins_elapsed))
            .collect()
    };
    let events = simulate(spec, &scene, &positions_at);

    let bins = window.bins();
    let gt = match flow {
        FlowField::Constant { vx, vy } => GroundTruth::FlowConst(vec![[vx, vy]; bins]),
        FlowField::SplitVertical {
            split_col,
            left,
            right,
        } => GroundTruth::FlowSplit {
            split_col,
            left: vec![[left.0, left.1]; bins],
            right: vec![[right.0, right.1]; bins],
        },
    };
    Ok(LabelledSample {
        geometry: spec.geometry,
        window,
        events,
        gt,
    })
}

/// Write the ground-truth sidecar: header comments carrying geometry and
/// window, then one record per bin.
pub fn write_ground_truth(sample: &LabelledSample, sink: &mut dyn Write) -> Result<()> {
    writeln!(sink, "# edenn-gt v1")?;
    writeln!(
        sink,
        "# geometry {}x{}",
        sample.geometry.width, sample.geometry.height
    )?;
    writeln!(
        sink,
        "# window t0={} len={} bin={}",
        sample.window.t0_us, sample.window.window_us, sample.window.bin_us
    )?;
    match &sample.gt {
        GroundTruth::Angular(rates) => {
            writeln!(sink, "# kind angular")?;
            for (b, r) in rates.iter().enumerate() {
                writeln!(sink, "{b},{:.17e},{:.17e},{:.17e}", r[0], r[1], r[2])?;
            }
        }
        GroundTruth::FlowConst(v) => {
            writeln!(sink, "# kind flow_const")?;
            for (b, r) in v.iter().enumerate() {
                writeln!(sink, "{b},{:.17e},{:.17e}", r[0], r[1])?;
            }
        }
        GroundTruth::FlowSplit {
            split_col,
            left,
            right,
        } => {
            writeln!(sink, "# kind flow_split {split_col}")?;
            for b in 0..left.len() {
                writeln!(
                    sink,
                    "{b},{:.17e},{:.17e},{:.17e},{:.17e}",
                    left[b][0], left[b][1], right[b][0], right[b][1]
                )?;
            }
        }
    }
    Ok(())
}

/// Parse a ground-truth sidecar back into its compact form.
pub fn read_ground_truth(
    source: &mut dyn BufRead,
) -> Result<(Geometry, WindowSpec, GroundTruth)> {
    let mut geometry: Option<Geometry> = None;
    let mut window: Option<WindowSpec> = None;
    let mut kind: Option<String> = None;
    let mut split_col = 0usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();

    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Parse {
            line: lineno + 1,
            msg,
        };
        if let Some(rest) = line.strip_prefix('#') {
            let words: Vec<&str> = rest.split_whitespace().collect();
            match words.first() {
                Some(&"geometry") => {
                    let dims = words.get(1).ok_or_else(|| fail("missing geometry".into()))?;
                    let (w, h) = dims
                        .split_once('x')
                        .ok_or_else(|| fail(format!("bad geometry {dims:?}")))?;
                    geometry = Some(Geometry {
                        width: w.parse().map_err(|_| fail(format!("bad width {w:?}")))?,
                        height: h.parse().map_err(|_| fail(format!("bad height {h:?}")))?,
                    });
                }
                Some(&"window") => {
                    let mut t0 = 0u64;
                    let mut len = 0u64;
                    let mut bin = 0u64;
                    for kv in &words[1..] {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| fail(format!("bad window field {kv:?}")))?;
                        let v: u64 = v.parse().map_err(|_| fail(format!("bad value {v:?}")))?;
                        match k {
                            "t0" => t0 = v,
                            "len" => len = v,
                            "bin" => bin = v,
                            _ => return Err(fail(format!("unknown window field {k:?}"))),
                        }
                    }
                    window = Some(WindowSpec::new(t0, len, bin).map_err(|e| fail(e.to_string()))?);
                }
                Some(&"kind") => {
                    kind = Some(
                        words
                            .get(1)
                            .ok_or_else(|| fail("missing kind".into()))?
                            .to_string(),
                    );
                    if kind.as_deref() == Some("flow_split") {
                        split_col = words
                            .get(2)
                            .ok_or_else(|| fail("missing split column".into()))?
                            .parse()
                            .map_err(|_| fail("bad split column".into()))?;
                    }
                }
                _ => {} // version or unknown comment
            }
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .skip(1) // bin index
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fail(format!("bad record {line:?}")))?;
        rows.push(fields);
    }

    let geometry = geometry.ok_or(Error::Config {
        msg: "sidecar missing geometry".into(),
    })?;
    let window = window.ok_or(Error::Config {
        msg: "sidecar missing window".into(),
    })?;
    let kind = kind.ok_or(Error::Config {
        msg: "sidecar missing kind".into(),
    })?;
    if rows.len() != window.bins() {
        return Err(Error::Config {
            msg: format!("{} records for {} bins", rows.len(), window.bins()),
        });
    }
    let gt = match kind.as_str() {
        "angular" => GroundTruth::Angular(
            rows.iter()
                .map(|r| {
                    if r.len() == 3 {
                        Ok([r[0], r[1], r[2]])
                    } else {
                        Err(Error::Config {
                            msg: "angular records need 3 values".into(),
                        })
                    }
                })
                .collect::<Result<_>>()?,
        ),
        "flow_const" => GroundTruth::FlowConst(
            rows.iter()
                .map(|r| {
                    if r.len() == 2 {
                        Ok([r[0], r[1]])
                    } else {
                        Err(Error::Config {
                            msg: "flow records need 2 values".into(),
                        })
                    }
                })
                .collect::<Result<_>>()?,
        ),
        "flow_split" => {
            let mut left = Vec::new();
            let mut right = Vec::new();
            for r in &rows {
                if r.len() != 4 {
                    return Err(Error::Config {
                        msg: "split flow records need 4 values".into(),
                    });
                }
                left.push([r[0], r[1]]);
                right.push([r[2], r[3]]);
            }
            GroundTruth::FlowSplit {
                split_col,
                left,
                right,
            }
        }
        other => {
            return Err(Error::Config {
                msg: format!("unknown ground-truth kind {other:?}"),
            })
        }
    };
    Ok((geometry, window, gt))
}

/// Load a sample from an event file plus its ground-truth sidecar.
pub fn load_sample(events_path: &Path, gt_path: &Path) -> Result<LabelledSample> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(gt_path)?);
    let (geometry, window, gt) = read_ground_truth(&mut reader)?;
    let format = if events_path.extension().and_then(|e| e.to_str()) == Some("csv") {
        crate::events::StreamFormat::Csv
    } else {
        crate::events::StreamFormat::Binary
    };
    let mut file = std::fs::File::open(events_path)?;
    let events = crate::events::parse_events(&mut file, format, geometry)?;
    Ok(LabelledSample {
        geometry,
        window,
        events,
        gt,
    })
}
