//! Layer composition: network configuration, presets, heads, and the
//! forward passes (streaming, dense reference, and differentiable).

use crate::autodiff::{Tape, VarId};
use crate::edec::{AlphaMode, EdecLayer, LayerMode, LayerVars, StreamState};
use crate::error::{Error, Result};
use crate::events::{initial_mask, EventVolume, Mask};
use crate::tensor::{conv2d, Padding, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pointwise nonlinearity applied to a layer's emitted output. The recursion
/// state keeps the pre-activation value; the default is identity since the
/// latent value itself is what propagates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Relu,
}

impl Nonlinearity {
    fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Nonlinearity::Identity => t.clone(),
            Nonlinearity::Relu => t.map(|v| v.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub mode: LayerMode,
    pub act: Nonlinearity,
    pub bias: bool,
    /// Nearest-neighbour 2x upsample before the convolution (decoder layers).
    pub upsample: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSpec {
    /// Global average pool, then an affine map, applied per slice.
    ScalarRegression { dim: usize, bias: bool },
    /// 1x1 projection to `channels` per-pixel outputs, applied per slice.
    DensePerPixel { channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
    /// (from, to): concatenate layer `from`'s output onto layer `to`'s input
    /// (after `to`'s upsample). Resolutions must line up.
    pub skips: Vec<(usize, usize)>,
    /// Layers that receive an auxiliary dense head (intermediate estimates
    /// that contribute to the training loss; dense head only).
    pub aux_head_layers: Vec<usize>,
}

impl NetworkConfig {
    /// Five decay-convolution layers (3x3; channels 16, 32, 64, 128, 256;
    /// strides 2, 2, 2, 2, 1) and a bias-free fully connected head of
    /// output dim 3.
    pub fn angular_full(input_width: usize, input_height: usize) -> NetworkConfig {
        Self::angular_with_channels(input_width, input_height, &[16, 32, 64, 128, 256])
    }

    /// Channel-reduced variant of the angular preset for desk-scale runs.
    pub fn angular_small(input_width: usize, input_height: usize) -> NetworkConfig {
        Self::angular_with_channels(input_width, input_height, &[4, 8, 16, 32, 64])
    }

    pub fn angular_with_channels(
        input_width: usize,
        input_height: usize,
        channels: &[usize],
    ) -> NetworkConfig {
        assert_eq!(channels.len(), 5);
        let strides = [2usize, 2, 2, 2, 1];
        NetworkConfig {
            input_width,
            input_height,
            input_channels: 2,
            layers: channels
                .iter()
                .zip(strides)
                .map(|(&c, s)| LayerSpec {
                    kernel: 3,
                    channels: c,
                    stride: s,
                    mode: LayerMode::Streaming,
                    act: Nonlinearity::Identity,
                    bias: true,
                    upsample: false,
                })
                .collect(),
            head: HeadSpec::ScalarRegression { dim: 3, bias: false },
            skips: Vec::new(),
            aux_head_layers: Vec::new(),
        }
    }

    /// Four encoder and four decoder layers arranged as a U-Net with
    /// concatenated skips; each decoder scale carries a flow head whose
    /// estimate contributes to the loss with equal weighting.
    pub fn flow_small(input_width: usize, input_height: usize) -> NetworkConfig {
        let enc = [8usize, 12, 16, 24];
        let dec = [16usize, 12, 8, 8];
        let mut layers = Vec::new();
        for &c in &enc {
            layers.push(LayerSpec {
                kernel: 3,
                channels: c,
                stride: 2,
                mode: LayerMode::Streaming,
                act: Nonlinearity::Relu,
                bias: true,
                upsample: false,
            });
        }
        for &c in &dec {
            layers.push(LayerSpec {
                kernel: 3,
                channels: c,
                stride: 1,
                mode: LayerMode::Streaming,
                act: Nonlinearity::Relu,
                bias: true,
                upsample: true,
            });
        }
        NetworkConfig {
            input_width,
            input_height,
            input_channels: 2,
            layers,
            head: HeadSpec::DensePerPixel { channels: 2 },
            skips: vec![(2, 4), (1, 5), (0, 6)],
            aux_head_layers: vec![4, 5, 6],
        }
    }
}

/// Resolved geometry of one layer inside a network.
#[derive(Debug, Clone, Copy)]
pub struct LayerGeom {
    /// Input resolution before any upsample.
    pub w_in: usize,
    pub h_in: usize,
    /// Resolution entering the convolution (after upsample and concat).
    pub w_conv: usize,
    pub h_conv: usize,
    pub c_in: usize,
    pub w_out: usize,
    pub h_out: usize,
    pub c_out: usize,
}

/// Output head of a network.
#[derive(Debug, Clone)]
pub enum Head {
    Scalar {
        /// (C, dim) weight of the per-slice affine map after pooling.
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Dense {
        /// 1x1 projections; the entry for the final layer is the main head,
        /// entries for earlier layers are auxiliary training heads.
        projections: Vec<DenseHead>,
    },
}

#[derive(Debug, Clone)]
pub struct DenseHead {
    pub layer: usize,
    /// (1, 1, C_layer, channels) projection kernel.
    pub kernel: Tensor,
}

/// Per-slice predictions over a window: (dim, T) for a scalar head,
/// (W, H, channels, T) for a dense head.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Scalar(Tensor),
    Dense(Tensor),
}

impl Prediction {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Prediction::Scalar(t) | Prediction::Dense(t) => t,
        }
    }
}

/// A built network: layers plus head, immutable during inference.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<EdecLayer>,
    pub head: Head,
    geoms: Vec<LayerGeom>,
}

/// Initial raw decay: tanh(DECAY_RAW_INIT) = 0.9, a slow decay.
pub const DECAY_RAW_INIT: f64 = 1.4722194895832204;

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

/// Resolve the geometry chain of a config, validating shapes.
fn resolve_geometry(config: &NetworkConfig) -> Result<Vec<LayerGeom>> {
    if config.layers.is_empty() {
        return Err(Error::Config {
            msg: "network has no layers".into(),
        });
    }
    for &(from, to) in &config.skips {
        if from >= to || to >= config.layers.len() {
            return Err(Error::Config {
                msg: format!("skip ({from} -> {to}) is not a forward edge"),
            });
        }
    }
    if let HeadSpec::ScalarRegression { .. } = config.head {
        if !config.aux_head_layers.is_empty() {
            return Err(Error::Config {
                msg: "auxiliary heads require a dense head".into(),
            });
        }
    }
    let has_partial = config.layers.iter().any(|l| l.mode.is_partial());
    if has_partial && (!config.skips.is_empty() || config.layers.iter().any(|l| l.upsample)) {
        return Err(Error::Config {
            msg: "partial modes are supported in plain chains only (no skips or upsampling)"
                .into(),
        });
    }

    let mut geoms: Vec<LayerGeom> = Vec::with_capacity(config.layers.len());
    let (mut w, mut h, mut c) = (
        config.input_width,
        config.input_height,
        config.input_channels,
    );
    for (i, spec) in config.layers.iter().enumerate() {
        if spec.kernel % 2 == 0 {
            return Err(Error::LayerConfig {
                layer: i,
                msg: format!("kernel size {} must be odd", spec.kernel),
            });
        }
        let (w_in, h_in) = (w, h);
        let (mut wc, mut hc) = (w, h);
        if spec.upsample {
            wc *= 2;
            hc *= 2;
        }
        let mut cc = c;
        for &(from, to) in &config.skips {
            if to == i {
                let src = geoms[from];
                if (src.w_out, src.h_out) != (wc, hc) {
                    return Err(Error::LayerConfig {
                        layer: i,
                        msg: format!(
                            "skip source {} has resolution {}x{}, expected {}x{}",
                            from, src.w_out, src.h_out, wc, hc
                        ),
                    });
                }
                cc += src.c_out;
            }
        }
        let padding = Padding::Same;
        let w_out = padding.out_dim(wc, spec.kernel, spec.stride).map_err(|e| {
            Error::LayerConfig {
                layer: i,
                msg: e.to_string(),
            }
        })?;
        let h_out = padding.out_dim(hc, spec.kernel, spec.stride).map_err(|e| {
            Error::LayerConfig {
                layer: i,
                msg: e.to_string(),
            }
        })?;
        geoms.push(LayerGeom {
            w_in,
            h_in,
            w_conv: wc,
            h_conv: hc,
            c_in: cc,
            w_out,
            h_out,
            c_out: spec.channels,
        });
        w = w_out;
        h = h_out;
        c = spec.channels;
    }
    for &l in &config.aux_head_layers {
        if l >= config.layers.len() {
            return Err(Error::Config {
                msg: format!("auxiliary head layer {l} out of range"),
            });
        }
    }
    Ok(geoms)
}

/// Build a network with seeded fan-in-scaled uniform initialization.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    let geoms = resolve_geometry(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, spec) in config.layers.iter().enumerate() {
        let g = geoms[i];
        let fan_in = (spec.kernel * spec.kernel * g.c_in) as f64;
        let kernel = uniform_tensor(
            &mut rng,
            &[spec.kernel, spec.kernel, g.c_in, spec.channels],
            1.0 / fan_in.sqrt(),
        );
        let bias = if spec.bias {
            Some(Tensor::zeros(&[spec.channels]))
        } else {
            None
        };
        let layer = EdecLayer::new(
            kernel,
            DECAY_RAW_INIT,
            bias,
            spec.stride,
            Padding::Same,
            spec.mode,
        )
        .map_err(|e| Error::LayerConfig {
            layer: i,
            msg: e.to_string(),
        })?;
        layers.push(layer);
    }

    let last = *geoms.last().unwrap();
    let head = match &config.head {
        HeadSpec::ScalarRegression { dim, bias } => {
            let bound = 1.0 / (last.c_out as f64).sqrt();
            Head::Scalar {
                weight: uniform_tensor(&mut rng, &[last.c_out, *dim], bound),
                bias: if *bias {
                    Some(Tensor::zeros(&[*dim]))
                } else {
                    None
                },
            }
        }
        HeadSpec::DensePerPixel { channels } => {
            let mut projections = Vec::new();
            for &l in &config.aux_head_layers {
                let c = geoms[l].c_out;
                let bound = 1.0 / (c as f64).sqrt();
                projections.push(DenseHead {
                    layer: l,
                    kernel: uniform_tensor(&mut rng, &[1, 1, c, *channels], bound),
                });
            }
            let bound = 1.0 / (last.c_out as f64).sqrt();
            projections.push(DenseHead {
                layer: config.layers.len() - 1,
                kernel: uniform_tensor(&mut rng, &[1, 1, last.c_out, *channels], bound),
            });
            Head::Dense { projections }
        }
    };

    Ok(Network {
        config: config.clone(),
        layers,
        head,
        geoms,
    })
}

impl Network {
    pub fn geoms(&self) -> &[LayerGeom] {
        &self.geoms
    }

    pub fn output_geom(&self) -> (usize, usize, usize) {
        let g = *self.geoms.last().unwrap();
        (g.w_out, g.h_out, g.c_out)
    }

    pub fn head_dim(&self) -> usize {
        match &self.config.head {
            HeadSpec::ScalarRegression { dim, .. } => *dim,
            HeadSpec::DensePerPixel { channels } => *channels,
        }
    }

    pub fn has_partial_layers(&self) -> bool {
        self.layers.iter().any(|l| l.mode.is_partial())
    }

    /// Fresh cold-start states, one per layer.
    pub fn fresh_states(&self) -> Vec<StreamState> {
        self.geoms
            .iter()
            .map(|g| StreamState::cold(g.w_out, g.h_out, g.c_out))
            .collect()
    }

    /// Per-layer trainable parameter counts, with the head appended last.
    pub fn per_layer_param_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self
            .layers
            .iter()
            .map(|l| l.kernel.numel() + 1 + l.bias.as_ref().map_or(0, Tensor::numel))
            .collect();
        counts.push(match &self.head {
            Head::Scalar { weight, bias } => {
                weight.numel() + bias.as_ref().map_or(0, Tensor::numel)
            }
            Head::Dense { projections } => projections.iter().map(|p| p.kernel.numel()).sum(),
        });
        counts
    }

    pub fn param_count(&self) -> usize {
        self.per_layer_param_counts().iter().sum()
    }

    /// All parameters flattened in a fixed order (layers then head).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.kernel.data());
            out.push(l.decay_raw);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b.data());
            }
        }
        match &self.head {
            Head::Scalar { weight, bias } => {
                out.extend_from_slice(weight.data());
                if let Some(b) = bias {
                    out.extend_from_slice(b.data());
                }
            }
            Head::Dense { projections } => {
                for p in projections {
                    out.extend_from_slice(p.kernel.data());
                }
            }
        }
        out
    }

    /// Overwrite all parameters from a flat slice laid out as
    /// [`Network::params_flat`] produces.
    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s
        };
        for l in &mut self.layers {
            let n = l.kernel.numel();
            l.kernel.data_mut().copy_from_slice(take(n));
            l.decay_raw = take(1)[0];
            if let Some(b) = &mut l.bias {
                let n = b.numel();
                b.data_mut().copy_from_slice(take(n));
            }
        }
        match &mut self.head {
            Head::Scalar { weight, bias } => {
                let n = weight.numel();
                weight.data_mut().copy_from_slice(take(n));
                if let Some(b) = bias {
                    let n = b.numel();
                    b.data_mut().copy_from_slice(take(n));
                }
            }
            Head::Dense { projections } => {
                for p in projections {
                    let n = p.kernel.numel();
                    p.kernel.data_mut().copy_from_slice(take(n));
                }
            }
        }
    }

    fn alpha_mode(mode: LayerMode) -> AlphaMode {
        match mode {
            LayerMode::PartialWeighted => AlphaMode::Weighted,
            _ => AlphaMode::Original,
        }
    }

    /// Advance every layer by one input slice, returning the head output for
    /// this slice. `states` must come from [`Network::fresh_states`]. The
    /// mask is consumed by partial layers and ignored otherwise.
    pub fn step(
        &self,
        states: &mut [StreamState],
        slice: &Tensor,
        in_mask: Option<&Mask>,
    ) -> Result<Tensor> {
        if states.len() != self.layers.len() {
            return Err(Error::shape(
                "network_step",
                format!("{} states for {} layers", states.len(), self.layers.len()),
            ));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut x = slice.clone();
        let mut mask = match in_mask {
            Some(m) => m.clone(),
            None => Mask::ones(&[slice.shape()[0], slice.shape()[1]]),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let spec = &self.config.layers[i];
            if spec.upsample {
                x = upsample_nearest2(&x);
            }
            for &(from, to) in &self.config.skips {
                if to == i {
                    x = concat_channels(&x, &outputs[from]);
                }
            }
            let out = if layer.mode.is_partial() {
                let (out, out_mask) = layer.step_partial(
                    &x,
                    &mask,
                    &mut states[i],
                    Self::alpha_mode(layer.mode),
                )?;
                mask = out_mask;
                out
            } else {
                let out = layer.step(&x, &mut states[i])?;
                let g = self.geoms[i];
                mask = Mask::ones(&[g.w_out, g.h_out]);
                out
            };
            let emitted = spec.act.apply(&out);
            outputs.push(emitted.clone());
            x = emitted;
        }
        self.apply_head(&outputs)
    }

    fn apply_head(&self, outputs: &[Tensor]) -> Result<Tensor> {
        match &self.head {
            Head::Scalar { weight, bias } => {
                let x = outputs.last().unwrap();
                let (w, h, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut pooled = vec![0.0; c];
                for xi in 0..w {
                    for yi in 0..h {
                        for ci in 0..c {
                            pooled[ci] += x.at3(xi, yi, ci);
                        }
                    }
                }
                let scale = 1.0 / (w * h) as f64;
                let dim = weight.shape()[1];
                let mut out = vec![0.0; dim];
                for (ci, p) in pooled.iter().enumerate() {
                    let p = p * scale;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += p * weight.data()[ci * dim + j];
                    }
                }
                if let Some(b) = bias {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += b.data()[j];
                    }
                }
                Ok(Tensor::from_vec(&[dim], out))
            }
            Head::Dense { projections } => {
                let main = projections.last().unwrap();
                conv2d(&outputs[main.layer], &main.kernel, 1, Padding::Valid)
            }
        }
    }

    /// Batch forward pass: fold [`Network::step`] over the bins of a volume.
    /// Masks for partial layers come from the volume's event support.
    pub fn forward(&self, volume: &EventVolume) -> Result<Prediction> {
        let bins = volume.bins();
        let masks = if self.has_partial_layers() {
            Some(initial_mask(volume))
        } else {
            None
        };
        let mut states = self.fresh_states();
        let mut slices = Vec::with_capacity(bins);
        for t in 0..bins {
            let slice = volume.slice(t);
            let mask = masks.as_ref().map(|m| m.slice(t));
            slices.push(self.step(&mut states, &slice, mask.as_ref())?);
        }
        Ok(self.stack_predictions(&slices))
    }

    fn stack_predictions(&self, slices: &[Tensor]) -> Prediction {
        let bins = slices.len();
        match &self.config.head {
            HeadSpec::ScalarRegression { dim, .. } => {
                let mut out = Tensor::zeros(&[*dim, bins]);
                for (t, s) in slices.iter().enumerate() {
                    for j in 0..*dim {
                        out.data_mut()[j * bins + t] = s.data()[j];
                    }
                }
                Prediction::Scalar(out)
            }
            HeadSpec::DensePerPixel { channels } => {
                let (w, h) = (slices[0].shape()[0], slices[0].shape()[1]);
                let mut out = Tensor::zeros(&[w, h, *channels, bins]);
                for (t, s) in slices.iter().enumerate() {
                    out.set_time_slice(t, s);
                }
                Prediction::Dense(out)
            }
        }
    }

    /// Independent reference forward pass: each layer evaluated over the
    /// whole window with the explicit decay-weighted history sum (quadratic
    /// in T), heads applied per slice. Supports plain chains without
    /// partial layers; used as the oracle for the streaming path.
    pub fn forward_reference(&self, volume: &EventVolume) -> Result<Prediction> {
        if self.has_partial_layers() {
            return Err(Error::arg(
                "forward_reference",
                "reference path covers non-partial layers only",
            ));
        }
        if !self.config.skips.is_empty() || self.config.layers.iter().any(|l| l.upsample) {
            return Err(Error::arg(
                "forward_reference",
                "reference path covers plain chains only",
            ));
        }
        let bins = volume.bins();
        let mut x = volume.tensor.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let dense = layer.forward_dense(&x)?;
            let spec = &self.config.layers[i];
            let mut activated = Tensor::zeros(dense.shape());
            for t in 0..bins {
                activated.set_time_slice(t, &spec.act.apply(&dense.time_slice(t)));
            }
            x = activated;
        }
        let mut slices = Vec::with_capacity(bins);
        for t in 0..bins {
            slices.push(self.apply_head(&[x.time_slice(t)])?);
        }
        Ok(self.stack_predictions(&slices))
    }
}

/// Tape handles for every parameter of a network.
pub struct NetworkVars {
    pub layers: Vec<LayerVars>,
    pub head_weight: Option<VarId>,
    pub head_bias: Option<VarId>,
    pub dense_heads: Vec<VarId>,
}

/// One slice of differentiable head outputs.
pub struct TapeSlice {
    /// Main head output node.
    pub main: VarId,
    /// Auxiliary dense-head outputs, (layer index, node).
    pub aux: Vec<(usize, VarId)>,
}

impl Network {
    /// Register all parameters on a tape.
    pub fn register(&self, tape: &mut Tape) -> NetworkVars {
        let layers = self.layers.iter().map(|l| l.register(tape)).collect();
        let (head_weight, head_bias, dense_heads) = match &self.head {
            Head::Scalar { weight, bias } => (
                Some(tape.leaf(weight.clone())),
                bias.as_ref().map(|b| tape.leaf(b.clone())),
                Vec::new(),
            ),
            Head::Dense { projections } => (
                None,
                None,
                projections
                    .iter()
                    .map(|p| tape.leaf(p.kernel.clone()))
                    .collect(),
            ),
        };
        NetworkVars {
            layers,
            head_weight,
            head_bias,
            dense_heads,
        }
    }

    /// Differentiable forward pass over a whole window. Returns one
    /// [`TapeSlice`] per bin.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &NetworkVars,
        volume: &EventVolume,
    ) -> Result<Vec<TapeSlice>> {
        let bins = volume.bins();
        let masks = if self.has_partial_layers() {
            Some(initial_mask(volume))
        } else {
            None
        };
        // Per-layer recursion state: output node of the previous slice, and
        // for partial layers the observation mask it produced.
        let mut prev: Vec<Option<(VarId, Mask)>> = vec![None; self.layers.len()];
        let mut out = Vec::with_capacity(bins);
        for t in 0..bins {
            let slice = volume.slice(t);
            let mut x = tape.leaf(slice);
            let mut mask = masks.as_ref().map(|m| m.slice(t));
            let mut outputs: Vec<VarId> = Vec::with_capacity(self.layers.len());
            for (i, layer) in self.layers.iter().enumerate() {
                let spec = &self.config.layers[i];
                if spec.upsample {
                    x = tape.upsample_nearest2(x)?;
                }
                for &(from, to) in &self.config.skips {
                    if to == i {
                        x = tape.concat_chan(x, outputs[from])?;
                    }
                }
                let node = if layer.mode.is_partial() {
                    let g = self.geoms[i];
                    let in_mask = mask
                        .clone()
                        .unwrap_or_else(|| Mask::ones(&[g.w_conv, g.h_conv]));
                    let prev_pair = prev[i].as_ref().map(|(id, m)| (*id, m));
                    let (node, out_mask) = layer.step_partial_tape(
                        tape,
                        &vars.layers[i],
                        x,
                        &in_mask,
                        prev_pair,
                        Self::alpha_mode(layer.mode),
                    )?;
                    prev[i] = Some((node, out_mask.clone()));
                    mask = Some(out_mask);
                    node
                } else {
                    let prev_id = prev[i].as_ref().map(|(id, _)| *id);
                    let node = layer.step_tape(tape, &vars.layers[i], x, prev_id)?;
                    let g = self.geoms[i];
                    prev[i] = Some((node, Mask::ones(&[g.w_out, g.h_out])));
                    mask = None;
                    node
                };
                let emitted = match spec.act {
                    Nonlinearity::Identity => node,
                    Nonlinearity::Relu => tape.relu(node),
                };
                outputs.push(emitted);
                x = emitted;
            }
            let main = match &self.head {
                Head::Scalar { .. } => {
                    let pooled = tape.global_avg_pool(*outputs.last().unwrap())?;
                    tape.linear(pooled, vars.head_weight.unwrap(), vars.head_bias)?
                }
                Head::Dense { projections } => {
                    let main = projections.last().unwrap();
                    tape.conv2d(
                        outputs[main.layer],
                        *vars.dense_heads.last().unwrap(),
                        1,
                        Padding::Valid,
                    )?
                }
            };
            let mut aux = Vec::new();
            if let Head::Dense { projections } = &self.head {
                for (pi, p) in projections.iter().enumerate().take(projections.len() - 1) {
                    let node =
                        tape.conv2d(outputs[p.layer], vars.dense_heads[pi], 1, Padding::Valid)?;
                    aux.push((p.layer, node));
                }
            }
            out.push(TapeSlice { main, aux });
        }
        Ok(out)
    }

    /// Collect gradients from a backward pass into the flat parameter order.
    pub fn grads_flat(&self, vars: &NetworkVars, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (l, lv) in self.layers.iter().zip(&vars.layers) {
            out.extend_from_slice(
                grads
                    .get_or_zeros(lv.kernel, l.kernel.shape())
                    .data(),
            );
            out.push(grads.get_or_zeros(lv.decay_raw, &[1]).item());
            if let Some(b) = &l.bias {
                let bid = lv.bias.expect("bias var registered");
                out.extend_from_slice(grads.get_or_zeros(bid, b.shape()).data());
            }
        }
        match &self.head {
            Head::Scalar { weight, bias } => {
                let wid = vars.head_weight.unwrap();
                out.extend_from_slice(grads.get_or_zeros(wid, weight.shape()).data());
                if let Some(b) = bias {
                    let bid = vars.head_bias.unwrap();
                    out.extend_from_slice(grads.get_or_zeros(bid, b.shape()).data());
                }
            }
            Head::Dense { projections } => {
                for (p, id) in projections.iter().zip(&vars.dense_heads) {
                    out.extend_from_slice(grads.get_or_zeros(*id, p.kernel.shape()).data());
                }
            }
        }
        out
    }
}

fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (w, h, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[2 * w, 2 * h, c]);
    for xo in 0..2 * w {
        for yo in 0..2 * h {
            for ci in 0..c {
                out.set3(xo, yo, ci, x.at3(xo / 2, yo / 2, ci));
            }
        }
    }
    out
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (w, h, ca) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[2];
    assert_eq!(&b.shape()[..2], &[w, h], "concat resolution mismatch");
    let mut out = Tensor::zeros(&[w, h, ca + cb]);
    for x in 0..w {
        for y in 0..h {
            for ci in 0..ca {
                out.set3(x, y, ci, a.at3(x, y, ci));
            }
            for ci in 0..cb {
                out.set3(x, y, ca + ci, b.at3(x, y, ci));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{build_event_volume, Event, Geometry, WindowSpec};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, geom: Geometry, spec: WindowSpec, n: usize) -> EventVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events: Vec<Event> = (0..n)
            .map(|_| Event {
                t_us: rng.random_range(0..spec.window_us),
                x: rng.random_range(0..geom.width),
                y: rng.random_range(0..geom.height),
                polarity: if rng.random_range(0..2u32) == 0 { 1 } else { -1 },
            })
            .collect();
        build_event_volume(&events, geom, spec).unwrap()
    }

    #[test]
    fn table_preset_parameter_counts() {
        let config = NetworkConfig::angular_full(240, 180);
        let net = build_network(&config, 0).unwrap();
        let counts = net.per_layer_param_counts();
        let expected = [304.0, 4600.0, 18500.0, 73900.0, 295000.0, 768.0];
        assert_eq!(counts.len(), expected.len());
        for (got, want) in counts.iter().zip(expected) {
            let rel = (*got as f64 - want).abs() / want;
            assert!(rel < 0.01, "count {got} vs {want} off by {rel:.4}");
        }
    }

    #[test]
    fn single_1x1_layer_has_kernel_plus_decay_plus_bias() {
        let config = NetworkConfig {
            input_width: 4,
            input_height: 4,
            input_channels: 1,
            layers: vec![LayerSpec {
                kernel: 1,
                channels: 1,
                stride: 1,
                mode: LayerMode::Streaming,
                act: Nonlinearity::Identity,
                bias: false,
                upsample: false,
            }],
            head: HeadSpec::ScalarRegression { dim: 1, bias: false },
            skips: Vec::new(),
            aux_head_layers: Vec::new(),
        };
        let net = build_network(&config, 0).unwrap();
        // one kernel weight + one raw decay for the layer, one head weight
        assert_eq!(net.per_layer_param_counts(), vec![2, 1]);
    }

    #[test]
    fn empty_config_is_an_error() {
        let config = NetworkConfig {
            input_width: 8,
            input_height: 8,
            input_channels: 2,
            layers: Vec::new(),
            head: HeadSpec::ScalarRegression { dim: 3, bias: false },
            skips: Vec::new(),
            aux_head_layers: Vec::new(),
        };
        assert!(build_network(&config, 0).is_err());
    }

    #[test]
    fn zero_volume_with_zero_bias_head_predicts_zero() {
        let config = NetworkConfig::angular_small(16, 16);
        let net = build_network(&config, 3).unwrap();
        let spec = WindowSpec::new(0, 4_000, 1_000).unwrap();
        let vol = build_event_volume(
            &[],
            Geometry {
                width: 16,
                height: 16,
            },
            spec,
        )
        .unwrap();
        let pred = net.forward(&vol).unwrap();
        assert!(pred.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_head_weights_doubles_scalar_predictions() {
        let config = NetworkConfig::angular_small(16, 16);
        let mut net = build_network(&config, 4).unwrap();
        let spec = WindowSpec::new(0, 6_000, 1_000).unwrap();
        let vol = random_volume(
            9,
            Geometry {
                width: 16,
                height: 16,
            },
            spec,
            120,
        );
        let base = net.forward(&vol).unwrap();
        if let Head::Scalar { weight, .. } = &mut net.head {
            let doubled = weight.map(|v| v * 2.0);
            *weight = doubled;
        }
        let twice = net.forward(&vol).unwrap();
        for (a, b) in base.tensor().data().iter().zip(twice.tensor().data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_forward_matches_dense_reference() {
        let geom = Geometry {
            width: 12,
            height: 10,
        };
        let spec = WindowSpec::new(0, 8_000, 1_000).unwrap();
        for seed in 0..5u64 {
            let config = NetworkConfig {
                input_width: 12,
                input_height: 10,
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
                head: HeadSpec::ScalarRegression { dim: 3, bias: false },
                skips: Vec::new(),
                aux_head_layers: Vec::new(),
            };
            let net = build_network(&config, seed).unwrap();
            let vol = random_volume(seed + 50, geom, spec, 300);
            let fast = net.forward(&vol).unwrap();
            let reference = net.forward_reference(&vol).unwrap();
            assert!(
                fast.tensor().max_abs_diff(reference.tensor()) < 1e-9,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn unet_preset_resolves_and_runs() {
        let config = NetworkConfig::flow_small(16, 16);
        let net = build_network(&config, 5).unwrap();
        let spec = WindowSpec::new(0, 4_000, 1_000).unwrap();
        let vol = random_volume(
            11,
            Geometry {
                width: 16,
                height: 16,
            },
            spec,
            150,
        );
        let pred = net.forward(&vol).unwrap();
        match pred {
            Prediction::Dense(t) => assert_eq!(t.shape(), &[16, 16, 2, 4]),
            _ => panic!("expected dense prediction"),
        }
    }

    #[test]
    fn bad_skip_resolution_names_the_layer() {
        let mut config = NetworkConfig::flow_small(16, 16);
        config.skips = vec![(0, 4)]; // resolutions 8x8 vs 4x4
        let err = build_network(&config, 0).unwrap_err();
        match err {
            Error::LayerConfig { layer, .. } => assert_eq!(layer, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn params_flat_round_trip() {
        let config = NetworkConfig::flow_small(16, 16);
        let mut net = build_network(&config, 6).unwrap();
        let flat = net.params_flat();
        assert_eq!(flat.len(), net.param_count());
        let mut bumped = flat.clone();
        for v in bumped.iter_mut() {
            *v += 0.5;
        }
        net.set_params_flat(&bumped);
        let back = net.params_flat();
        for (a, b) in back.iter().zip(&bumped) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tape_forward_agrees_with_pure_forward() {
        for (name, config) in [
            ("angular", NetworkConfig::angular_small(16, 16)),
            ("flow", NetworkConfig::flow_small(16, 16)),
        ] {
            let net = build_network(&config, 7).unwrap();
            let spec = WindowSpec::new(0, 3_000, 1_000).unwrap();
            let vol = random_volume(
                21,
                Geometry {
                    width: 16,
                    height: 16,
                },
                spec,
                100,
            );
            let pure = net.forward(&vol).unwrap();
            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let slices = net.forward_tape(&mut tape, &vars, &vol).unwrap();
            for (t, s) in slices.iter().enumerate() {
                let node = tape.value(s.main);
                match &pure {
                    Prediction::Scalar(p) => {
                        for j in 0..node.numel() {
                            let want = p.data()[j * vol.bins() + t];
                            assert!((node.data()[j] - want).abs() < 1e-12, "{name} t={t}");
                        }
                    }
                    Prediction::Dense(p) => {
                        assert!(node.max_abs_diff(&p.time_slice(t)) < 1e-12, "{name} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn partial_chain_forward_runs_with_event_masks() {
        let config = NetworkConfig {
            input_width: 12,
            input_height: 12,
            input_channels: 2,
            layers: vec![
                LayerSpec {
                    kernel: 3,
                    channels: 4,
                    stride: 2,
                    mode: LayerMode::PartialWeighted,
                    act: Nonlinearity::Identity,
                    bias: false,
                    upsample: false,
                },
                LayerSpec {
                    kernel: 3,
                    channels: 2,
                    stride: 1,
                    mode: LayerMode::PartialOriginal,
                    act: Nonlinearity::Identity,
                    bias: false,
                    upsample: false,
                },
            ],
            head: HeadSpec::ScalarRegression { dim: 2, bias: false },
            skips: Vec::new(),
            aux_head_layers: Vec::new(),
        };
        let net = build_network(&config, 8).unwrap();
        let spec = WindowSpec::new(0, 4_000, 1_000).unwrap();
        let vol = random_volume(
            31,
            Geometry {
                width: 12,
                height: 12,
            },
            spec,
            40,
        );
        let pred = net.forward(&vol).unwrap();
        assert!(pred.tensor().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn partial_with_skips_is_rejected() {
        let mut config = NetworkConfig::flow_small(16, 16);
        config.layers[0].mode = LayerMode::PartialWeighted;
        config.layers[0].bias = false;
        assert!(build_network(&config, 0).is_err());
    }
}
