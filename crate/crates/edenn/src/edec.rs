//! The event-decay convolution (EDeC) layer.
//!
//! A layer owns a 2-D spatial kernel per output channel and one learnable
//! temporal decay scalar. Constraining the temporal kernel to powers of the
//! decay makes the full spatio-temporal convolution separable:
//!
//! * dense mode evaluates the weighted history sum directly (the reference
//!   implementation),
//! * streaming mode folds it into `out_t = conv(in_t) + decay * out_{t-1}`,
//!   one slice in, one slice out, O(1) work per slice,
//! * the two partial modes additionally mask unobserved cells and rescale by
//!   a per-cell compensation factor (count-based or kernel-weighted).
//!
//! Temporal tap convention: the most recent slice has weight `decay^0 = 1`
//! and older slices decay, which is what makes the recursion exact with no
//! leading coefficient.
//!
//! The scaling-factor footprints count in-bounds taps only, so a fully
//! observed input yields a factor of exactly 1 everywhere, including the
//! padded borders, and a fully masked input yields exactly 0.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::events::Mask;
use crate::tensor::{
    conv2d, dims2, dims3, footprint_count, footprint_sum, Padding, Tensor,
};

/// Denominator dead zone for the kernel-weighted scaling factor; negative
/// kernel weights can cancel the denominator even under partial observation.
pub const ALPHA_EPS: f64 = 1e-12;

/// Forward-pass flavor of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Dense,
    Streaming,
    PartialOriginal,
    PartialWeighted,
}

impl LayerMode {
    pub fn is_partial(self) -> bool {
        matches!(self, LayerMode::PartialOriginal | LayerMode::PartialWeighted)
    }
}

/// Which compensation factor a masked step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Count-based: ratio of footprint size to observed-cell count.
    Original,
    /// Kernel-weighted: ratio of total to observed kernel weight.
    Weighted,
}

/// One event-decay convolution layer.
#[derive(Debug, Clone)]
pub struct EdecLayer {
    /// Spatial kernel, (Kw, Kh, Cin, Cout).
    pub kernel: Tensor,
    /// Raw decay parameter; the effective decay is `tanh(decay_raw)`.
    pub decay_raw: f64,
    /// Optional per-channel bias. Rejected in partial modes: a bias would
    /// leak through masked regions and break the masking invariances.
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: Padding,
    pub mode: LayerMode,
}

/// Per-stream recursion state of one layer: the previous output slice and
/// its observation mask. Zeroed before the first slice (cold start).
#[derive(Debug, Clone)]
pub struct StreamState {
    pub prev_output: Tensor,
    pub prev_mask: Mask,
    pub initialized: bool,
}

impl StreamState {
    /// Cold-start state for an output geometry: zero output, zero mask.
    pub fn cold(w_out: usize, h_out: usize, cout: usize) -> StreamState {
        StreamState {
            prev_output: Tensor::zeros(&[w_out, h_out, cout]),
            prev_mask: Mask::zeros(&[w_out, h_out]),
            initialized: false,
        }
    }
}

/// Per-cell compensation factors: (W, H) channel-shared in original mode,
/// (W, H, Cout) per-channel in weighted mode.
#[derive(Debug, Clone)]
pub struct AlphaMap {
    pub values: Tensor,
}

impl AlphaMap {
    /// Observation mask for the next step: 1 wherever the factor is
    /// positive; for per-channel maps, wherever any channel's factor is.
    pub fn support(&self) -> Mask {
        match self.values.shape() {
            [w, h] => {
                let mut out = Tensor::zeros(&[*w, *h]);
                for (o, v) in out.data_mut().iter_mut().zip(self.values.data()) {
                    *o = if *v > 0.0 { 1.0 } else { 0.0 };
                }
                Mask { tensor: out }
            }
            [w, h, c] => {
                let mut out = Tensor::zeros(&[*w, *h]);
                for x in 0..*w {
                    for y in 0..*h {
                        let any = (0..*c).any(|ci| self.values.at3(x, y, ci) > 0.0);
                        out.data_mut()[x * h + y] = if any { 1.0 } else { 0.0 };
                    }
                }
                Mask { tensor: out }
            }
            s => panic!("alpha map must be 2-D or 3-D, got {s:?}"),
        }
    }
}

/// Variable handles for one layer's parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub kernel: VarId,
    pub decay_raw: VarId,
    /// tanh(decay_raw), recorded so gradients reach the raw parameter.
    pub decay: VarId,
    pub bias: Option<VarId>,
}

impl EdecLayer {
    pub fn new(
        kernel: Tensor,
        decay_raw: f64,
        bias: Option<Tensor>,
        stride: usize,
        padding: Padding,
        mode: LayerMode,
    ) -> Result<EdecLayer> {
        let [kw, kh, _cin, cout] = match kernel.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => {
                return Err(Error::shape(
                    "edec_layer",
                    format!("kernel must be 4-D (Kw, Kh, Cin, Cout), got {s:?}"),
                ))
            }
        };
        if kw % 2 == 0 || kh % 2 == 0 {
            return Err(Error::arg(
                "edec_layer",
                format!("kernel size {kw}x{kh} must be odd"),
            ));
        }
        if stride < 1 {
            return Err(Error::arg("edec_layer", "stride must be >= 1"));
        }
        if let Some(b) = &bias {
            if mode.is_partial() {
                return Err(Error::arg(
                    "edec_layer",
                    "partial modes do not support a bias",
                ));
            }
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "edec_layer",
                    format!("bias shape {:?} does not match {cout} output channels", b.shape()),
                ));
            }
        }
        Ok(EdecLayer {
            kernel,
            decay_raw,
            bias,
            stride,
            padding,
            mode,
        })
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        (self.kernel.shape()[0], self.kernel.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// Effective temporal decay, `tanh(decay_raw)`, kept inside (-1, 1).
    pub fn decay(&self) -> f64 {
        self.decay_raw.tanh()
    }

    /// Output spatial geometry for a given input geometry.
    pub fn out_geom(&self, w: usize, h: usize) -> Result<(usize, usize)> {
        let (kw, kh) = self.kernel_dims();
        Ok((
            self.padding.out_dim(w, kw, self.stride)?,
            self.padding.out_dim(h, kh, self.stride)?,
        ))
    }

    /// Cold-start state for an input geometry.
    pub fn fresh_state(&self, w: usize, h: usize) -> Result<StreamState> {
        let (wo, ho) = self.out_geom(w, h)?;
        Ok(StreamState::cold(wo, ho, self.out_channels()))
    }

    /// The equivalent explicit spatio-temporal kernel over `t_hat` taps,
    /// (Kw, Kh, Cin, Cout, T). The last tap carries weight `decay^0 = 1`;
    /// earlier taps decay by successive powers.
    pub fn materialize_kernel(&self, t_hat: usize) -> Tensor {
        assert!(t_hat >= 1);
        let ks = self.kernel.shape();
        let decay = self.decay();
        let mut out = Tensor::zeros(&[ks[0], ks[1], ks[2], ks[3], t_hat]);
        let n = self.kernel.numel();
        for i in 0..n {
            for t in 0..t_hat {
                // 0^0 == 1, so decay == 0 leaves exactly the newest tap.
                let w = decay.powi((t_hat - 1 - t) as i32);
                out.data_mut()[i * t_hat + t] = self.kernel.data()[i] * w;
            }
        }
        out
    }

    fn conv_with_bias(&self, slice: &Tensor) -> Result<Tensor> {
        let mut out = conv2d(slice, &self.kernel, self.stride, self.padding)?;
        if let Some(b) = &self.bias {
            let (wo, ho, cout) = dims3(&out, "edec_layer")?;
            for x in 0..wo {
                for y in 0..ho {
                    for c in 0..cout {
                        let i = (x * ho + y) * cout + c;
                        out.data_mut()[i] += b.data()[c];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reference forward pass over a whole (W, H, Cin, T) volume: the output
    /// at bin `t` is the decay-weighted sum of the per-slice convolutions of
    /// all bins up to and including `t`. Quadratic in T by construction;
    /// used as the oracle the streaming path is checked against.
    pub fn forward_dense(&self, volume: &Tensor) -> Result<Tensor> {
        let shape = volume.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "forward_dense",
                format!("expected (W, H, Cin, T) volume, got {shape:?}"),
            ));
        }
        let bins = shape[3];
        let decay = self.decay();
        let per_slice: Vec<Tensor> = (0..bins)
            .map(|t| self.conv_with_bias(&volume.time_slice(t)))
            .collect::<Result<_>>()?;
        let (wo, ho, cout) = dims3(&per_slice[0], "forward_dense")?;
        let mut out = Tensor::zeros(&[wo, ho, cout, bins]);
        for t in 0..bins {
            let mut acc = Tensor::zeros(&[wo, ho, cout]);
            for (tau, s) in per_slice.iter().enumerate().take(t + 1) {
                let w = decay.powi((t - tau) as i32);
                for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
                    *a += w * v;
                }
            }
            out.set_time_slice(t, &acc);
        }
        Ok(out)
    }

    fn check_state(&self, state: &StreamState, wo: usize, ho: usize) -> Result<()> {
        let want = [wo, ho, self.out_channels()];
        if state.prev_output.shape() != want {
            return Err(Error::shape(
                "edec_step",
                format!(
                    "state shape {:?} does not match layer output {:?}",
                    state.prev_output.shape(),
                    want
                ),
            ));
        }
        Ok(())
    }

    /// One streaming step: `out = conv(slice) + decay * prev`, updating the
    /// state in place. Folding this over the bins of a volume reproduces
    /// [`EdecLayer::forward_dense`].
    pub fn step(&self, slice: &Tensor, state: &mut StreamState) -> Result<Tensor> {
        let mut out = self.conv_with_bias(slice)?;
        let (wo, ho, _) = dims3(&out, "edec_step")?;
        self.check_state(state, wo, ho)?;
        let decay = self.decay();
        for (o, p) in out.data_mut().iter_mut().zip(state.prev_output.data()) {
            *o += decay * p;
        }
        state.prev_output = out.clone();
        state.initialized = true;
        Ok(out)
    }

    /// One masked streaming step. Unobserved input cells and unobserved
    /// state cells are zeroed before convolution; the result is rescaled by
    /// the compensation factor, and the factor's support becomes the
    /// observation mask handed to the next step.
    pub fn step_partial(
        &self,
        slice: &Tensor,
        in_mask: &Mask,
        state: &mut StreamState,
        alpha_mode: AlphaMode,
    ) -> Result<(Tensor, Mask)> {
        let (w, h, _cin) = dims3(slice, "edec_step_partial")?;
        let (mw, mh) = dims2(&in_mask.tensor, "edec_step_partial")?;
        if (mw, mh) != (w, h) {
            return Err(Error::shape(
                "edec_step_partial",
                format!("mask {mw}x{mh} does not match slice {w}x{h}"),
            ));
        }
        let masked_slice = hadamard_spatial(slice, &in_mask.tensor);
        let mut out = conv2d(&masked_slice, &self.kernel, self.stride, self.padding)?;
        let (wo, ho, cout) = dims3(&out, "edec_step_partial")?;
        self.check_state(state, wo, ho)?;

        let decay = self.decay();
        let masked_prev = hadamard_spatial(&state.prev_output, &state.prev_mask.tensor);
        for (o, p) in out.data_mut().iter_mut().zip(masked_prev.data()) {
            *o += decay * p;
        }

        let alpha = match alpha_mode {
            AlphaMode::Original => self.alpha_original(in_mask, &state.prev_mask)?,
            AlphaMode::Weighted => self.alpha_weighted(in_mask, &state.prev_mask)?,
        };
        match alpha.values.shape().len() {
            2 => {
                for x in 0..wo {
                    for y in 0..ho {
                        let a = alpha.values.data()[x * ho + y];
                        for c in 0..cout {
                            out.data_mut()[(x * ho + y) * cout + c] *= a;
                        }
                    }
                }
            }
            _ => {
                for (o, a) in out.data_mut().iter_mut().zip(alpha.values.data()) {
                    *o *= a;
                }
            }
        }

        let out_mask = alpha.support();
        state.prev_output = out.clone();
        state.prev_mask = out_mask.clone();
        state.initialized = true;
        Ok((out, out_mask))
    }

    /// Count-based compensation factor: per output cell, the number of
    /// in-bounds footprint taps (spatial plus temporal) divided by the
    /// number of observed ones, zero where nothing is observed. On interior
    /// cells the numerator is exactly twice the kernel footprint size.
    pub fn alpha_original(&self, in_mask: &Mask, state_mask: &Mask) -> Result<AlphaMap> {
        let (w, h) = dims2(&in_mask.tensor, "alpha_original")?;
        let (kw, kh) = self.kernel_dims();
        let spatial_sum = footprint_sum(&in_mask.tensor, kw, kh, self.stride, self.padding)?;
        let spatial_cnt = footprint_count(w, h, kw, kh, self.stride, self.padding)?;
        let (wo, ho) = dims2(&spatial_sum, "alpha_original")?;
        let temporal_sum = footprint_sum(&state_mask.tensor, kw, kh, 1, Padding::Same)?;
        let temporal_cnt = footprint_count(wo, ho, kw, kh, 1, Padding::Same)?;

        let mut values = Tensor::zeros(&[wo, ho]);
        for i in 0..wo * ho {
            let den = spatial_sum.data()[i] + temporal_sum.data()[i];
            values.data_mut()[i] = if den == 0.0 {
                0.0
            } else {
                (spatial_cnt.data()[i] + temporal_cnt.data()[i]) / den
            };
        }
        Ok(AlphaMap { values })
    }

    /// Kernel-weighted compensation factor, per output channel: total
    /// in-bounds kernel weight (spatial) plus decay-weighted temporal tap
    /// count, divided by the observed portion of the same quantities. Zero
    /// where the denominator vanishes, including the fully masked case.
    /// Masking a zero-weight kernel element leaves the factor unchanged.
    pub fn alpha_weighted(&self, in_mask: &Mask, state_mask: &Mask) -> Result<AlphaMap> {
        let (w, h) = dims2(&in_mask.tensor, "alpha_weighted")?;
        let (kw, kh) = self.kernel_dims();
        let cin = self.in_channels();
        let cout = self.out_channels();
        let decay = self.decay();

        // Numerator spatial part: sum of in-bounds kernel weights per cell,
        // which is the convolution of an all-ones input with the kernel.
        let ones_in = Tensor::ones(&[w, h, cin]);
        let kernel_total = conv2d(&ones_in, &self.kernel, self.stride, self.padding)?;
        // Denominator spatial part: observed kernel weight, the convolution
        // of the mask (replicated across input channels) with the kernel.
        let mask_rep = replicate_channels(&in_mask.tensor, cin);
        let kernel_observed = conv2d(&mask_rep, &self.kernel, self.stride, self.padding)?;

        let (wo, ho, _) = dims3(&kernel_total, "alpha_weighted")?;
        // Temporal parts live at output resolution; the channel sum over the
        // channel-free mask contributes a factor of Cin.
        let temporal_cnt = footprint_count(wo, ho, kw, kh, 1, Padding::Same)?;
        let temporal_sum = footprint_sum(&state_mask.tensor, kw, kh, 1, Padding::Same)?;
        let cinf = cin as f64;

        let mut values = Tensor::zeros(&[wo, ho, cout]);
        for x in 0..wo {
            for y in 0..ho {
                let t_num = decay * cinf * temporal_cnt.data()[x * ho + y];
                let t_den = decay * cinf * temporal_sum.data()[x * ho + y];
                for c in 0..cout {
                    let num = kernel_total.at3(x, y, c) + t_num;
                    let den = kernel_observed.at3(x, y, c) + t_den;
                    let v = if den.abs() < ALPHA_EPS { 0.0 } else { num / den };
                    values.set3(x, y, c, v);
                }
            }
        }
        Ok(AlphaMap { values })
    }

    /// Register this layer's parameters on a tape for a training pass.
    pub fn register(&self, tape: &mut Tape) -> LayerVars {
        let kernel = tape.leaf(self.kernel.clone());
        let decay_raw = tape.leaf(Tensor::scalar(self.decay_raw));
        let decay = tape.tanh(decay_raw);
        let bias = self.bias.as_ref().map(|b| tape.leaf(b.clone()));
        LayerVars {
            kernel,
            decay_raw,
            decay,
            bias,
        }
    }

    /// Differentiable streaming step. `prev` is the previous output node, or
    /// None before the first slice. Returns the new output node, which also
    /// serves as the next step's state.
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        vars: &LayerVars,
        input: VarId,
        prev: Option<VarId>,
    ) -> Result<VarId> {
        let mut out = tape.conv2d(input, vars.kernel, self.stride, self.padding)?;
        if let Some(b) = vars.bias {
            let (wo, ho) = (tape.shape(out)[0], tape.shape(out)[1]);
            let bb = tape.bcast_chan(b, wo, ho)?;
            out = tape.add(out, bb)?;
        }
        if let Some(prev) = prev {
            let decayed = tape.scale(prev, vars.decay)?;
            out = tape.add(out, decayed)?;
        }
        Ok(out)
    }

    /// Differentiable masked streaming step. Masks are constants on the
    /// tape; in weighted mode the compensation factor itself is recorded as
    /// a function of the kernel and decay, so gradients account for it.
    /// Returns the output node and the observation mask for the next step.
    pub fn step_partial_tape(
        &self,
        tape: &mut Tape,
        vars: &LayerVars,
        input: VarId,
        in_mask: &Mask,
        prev: Option<(VarId, &Mask)>,
        alpha_mode: AlphaMode,
    ) -> Result<(VarId, Mask)> {
        let (w, h, cin) = (
            tape.shape(input)[0],
            tape.shape(input)[1],
            tape.shape(input)[2],
        );
        let in_mask_var = tape.leaf(in_mask.tensor.clone());
        let masked_in = tape.hadamard(input, in_mask_var)?;
        let mut raw = tape.conv2d(masked_in, vars.kernel, self.stride, self.padding)?;
        let (wo, ho) = (tape.shape(raw)[0], tape.shape(raw)[1]);
        let cout = self.out_channels();

        let state_mask = match prev {
            Some((prev_out, prev_mask)) => {
                let pm = tape.leaf(prev_mask.tensor.clone());
                let masked_prev = tape.hadamard(prev_out, pm)?;
                let decayed = tape.scale(masked_prev, vars.decay)?;
                raw = tape.add(raw, decayed)?;
                prev_mask.clone()
            }
            None => Mask::zeros(&[wo, ho]),
        };

        let (kw, kh) = self.kernel_dims();
        let out = match alpha_mode {
            AlphaMode::Original => {
                let alpha = self.alpha_original(in_mask, &state_mask)?;
                let alpha_var = tape.leaf(alpha.values.clone());
                let scaled = tape.hadamard(raw, alpha_var)?;
                let out_mask = alpha.support();
                return Ok((scaled, out_mask));
            }
            AlphaMode::Weighted => {
                let ones_in = tape.leaf(Tensor::ones(&[w, h, cin]));
                let kernel_total = tape.conv2d(ones_in, vars.kernel, self.stride, self.padding)?;
                let mask_rep = tape.leaf(replicate_channels(&in_mask.tensor, cin));
                let kernel_observed =
                    tape.conv2d(mask_rep, vars.kernel, self.stride, self.padding)?;

                let cinf = cin as f64;
                let mut cnt = footprint_count(wo, ho, kw, kh, 1, Padding::Same)?;
                cnt.data_mut().iter_mut().for_each(|v| *v *= cinf);
                let mut msum = footprint_sum(&state_mask.tensor, kw, kh, 1, Padding::Same)?;
                msum.data_mut().iter_mut().for_each(|v| *v *= cinf);

                let cnt_var = tape.leaf(cnt);
                let cnt_b = tape.bcast_spatial(cnt_var, cout)?;
                let cnt_scaled = tape.scale(cnt_b, vars.decay)?;
                let num = tape.add(kernel_total, cnt_scaled)?;

                let msum_var = tape.leaf(msum);
                let msum_b = tape.bcast_spatial(msum_var, cout)?;
                let msum_scaled = tape.scale(msum_b, vars.decay)?;
                let den = tape.add(kernel_observed, msum_scaled)?;

                let alpha = tape.div_guard(num, den, ALPHA_EPS)?;
                let out_mask = AlphaMap {
                    values: tape.value(alpha).clone(),
                }
                .support();
                let scaled = tape.hadamard(alpha, raw)?;
                (scaled, out_mask)
            }
        };
        Ok(out)
    }
}

/// Elementwise product of a (W, H, C) tensor with a (W, H) map.
fn hadamard_spatial(a: &Tensor, m: &Tensor) -> Tensor {
    let (w, h, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    debug_assert_eq!(m.shape(), &[w, h]);
    let mut out = a.clone();
    for x in 0..w {
        for y in 0..h {
            let mv = m.data()[x * h + y];
            for ci in 0..c {
                out.data_mut()[(x * h + y) * c + ci] *= mv;
            }
        }
    }
    out
}

/// Replicate a (W, H) map across `c` channels.
fn replicate_channels(m: &Tensor, c: usize) -> Tensor {
    let (w, h) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[w, h, c]);
    for x in 0..w {
        for y in 0..h {
            let v = m.data()[x * h + y];
            for ci in 0..c {
                out.set3(x, y, ci, v);
            }
        }
    }
    out
}
