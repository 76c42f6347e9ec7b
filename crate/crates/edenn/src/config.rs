//! Text configuration: sectioned key/value files describing a network and
//! its training protocol.
//!
//! ```text
//! [network]
//! preset = angular_small          # or explicit layer lines
//! input = 48x48
//! head = scalar:3
//! layer = kernel=3 channels=16 stride=2 mode=streaming act=identity bias=on upsample=off
//! skip = 2:4
//! aux_heads = 4,5,6
//!
//! [train]
//! epochs = 500
//! batch_size = 4
//! lr = 0.001
//! seed = 0
//! settle_us = 50000
//! threads = 1
//! ```
//!
//! A `preset` line expands to a full layer stack for the given input size;
//! explicit `layer` lines and a preset are mutually exclusive. Rendering a
//! parsed config produces the expanded canonical text, which is what
//! checkpoints embed.

use crate::edec::LayerMode;
use crate::error::{Error, Result};
use crate::network::{HeadSpec, LayerSpec, NetworkConfig, Nonlinearity};
use crate::train::TrainConfig;
use std::fmt::Write as _;

fn fail(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(fail(line, format!("expected on/off, got {v:?}"))),
    }
}

fn mode_name(mode: LayerMode) -> &'static str {
    match mode {
        LayerMode::Dense => "dense",
        LayerMode::Streaming => "streaming",
        LayerMode::PartialOriginal => "partial_original",
        LayerMode::PartialWeighted => "partial_weighted",
    }
}

fn parse_mode(line: usize, v: &str) -> Result<LayerMode> {
    match v {
        "dense" => Ok(LayerMode::Dense),
        "streaming" => Ok(LayerMode::Streaming),
        "partial_original" => Ok(LayerMode::PartialOriginal),
        "partial_weighted" => Ok(LayerMode::PartialWeighted),
        _ => Err(fail(line, format!("unknown mode {v:?}"))),
    }
}

fn parse_layer(line: usize, v: &str) -> Result<LayerSpec> {
    let mut spec = LayerSpec {
        kernel: 3,
        channels: 0,
        stride: 1,
        mode: LayerMode::Streaming,
        act: Nonlinearity::Identity,
        bias: true,
        upsample: false,
    };
    for field in v.split_whitespace() {
        let (k, val) = field
            .split_once('=')
            .ok_or_else(|| fail(line, format!("layer field {field:?} is not key=value")))?;
        match k {
            "kernel" => {
                spec.kernel = val
                    .parse()
                    .map_err(|_| fail(line, format!("bad kernel {val:?}")))?
            }
            "channels" => {
                spec.channels = val
                    .parse()
                    .map_err(|_| fail(line, format!("bad channels {val:?}")))?
            }
            "stride" => {
                spec.stride = val
                    .parse()
                    .map_err(|_| fail(line, format!("bad stride {val:?}")))?
            }
            "mode" => spec.mode = parse_mode(line, val)?,
            "act" => {
                spec.act = match val {
                    "identity" => Nonlinearity::Identity,
                    "relu" => Nonlinearity::Relu,
                    _ => return Err(fail(line, format!("unknown activation {val:?}"))),
                }
            }
            "bias" => spec.bias = parse_bool(line, val)?,
            "upsample" => spec.upsample = parse_bool(line, val)?,
            _ => return Err(fail(line, format!("unknown layer field {k:?}"))),
        }
    }
    if spec.channels == 0 {
        return Err(fail(line, "layer needs channels=N"));
    }
    Ok(spec)
}

/// Parse a config file into network and training configs.
pub fn parse_config(text: &str) -> Result<(NetworkConfig, TrainConfig)> {
    let mut section = String::new();
    let mut preset: Option<(String, usize)> = None;
    let mut input: Option<(usize, usize)> = None;
    let mut head: Option<HeadSpec> = None;
    let mut head_bias = false;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut skips: Vec<(usize, usize)> = Vec::new();
    let mut aux: Vec<usize> = Vec::new();
    let mut train = TrainConfig::default();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| fail(lineno, "unterminated section header"))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(lineno, format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match section.as_str() {
            "network" => match key {
                "preset" => preset = Some((value.to_string(), lineno)),
                "input" => {
                    let (w, h) = value
                        .split_once('x')
                        .ok_or_else(|| fail(lineno, format!("input must be WxH, got {value:?}")))?;
                    input = Some((
                        w.trim()
                            .parse()
                            .map_err(|_| fail(lineno, format!("bad width {w:?}")))?,
                        h.trim()
                            .parse()
                            .map_err(|_| fail(lineno, format!("bad height {h:?}")))?,
                    ));
                }
                "head" => {
                    let (kind, n) = value
                        .split_once(':')
                        .ok_or_else(|| fail(lineno, "head must be scalar:N or dense:N"))?;
                    let n: usize = n
                        .parse()
                        .map_err(|_| fail(lineno, format!("bad head size {n:?}")))?;
                    head = Some(match kind {
                        "scalar" => HeadSpec::ScalarRegression {
                            dim: n,
                            bias: false,
                        },
                        "dense" => HeadSpec::DensePerPixel { channels: n },
                        _ => return Err(fail(lineno, format!("unknown head kind {kind:?}"))),
                    });
                }
                "head_bias" => head_bias = parse_bool(lineno, value)?,
                "layer" => layers.push(parse_layer(lineno, value)?),
                "skip" => {
                    let (f, t) = value
                        .split_once(':')
                        .ok_or_else(|| fail(lineno, "skip must be FROM:TO"))?;
                    skips.push((
                        f.trim()
                            .parse()
                            .map_err(|_| fail(lineno, format!("bad skip source {f:?}")))?,
                        t.trim()
                            .parse()
                            .map_err(|_| fail(lineno, format!("bad skip target {t:?}")))?,
                    ));
                }
                "aux_heads" => {
                    aux = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| fail(lineno, format!("bad aux head list {value:?}")))?;
                }
                _ => return Err(fail(lineno, format!("unknown network key {key:?}"))),
            },
            "train" => match key {
                "epochs" => {
                    train.epochs = value
                        .parse()
                        .map_err(|_| fail(lineno, format!("bad epochs {value:?}")))?
                }
                "batch_size" => {
                    train.batch_size = value
                        .parse()
                        .map_err(|_| fail(lineno, format!("bad batch_size {value:?}")))?
                }
                "lr" => {
                    train.learning_rate = value
                        .parse()
                        .map_err(|_| fail(lineno, format!("bad lr {value:?}")))?
                }
                "seed" => {
                    train.seed = value
                        .parse()
                        .map_err(|_| fail(lineno, format!("bad seed {value:?}")))?
                }
                "settle_us" => {
                    train.settle_us = Some(
                        value
                            .parse()
                            .map_err(|_| fail(lineno, format!("bad settle_us {value:?}")))?,
                    )
                }
                "threads" => {
                    train.threads = value
                        .parse()
                        .map_err(|_| fail(lineno, format!("bad threads {value:?}")))?
                }
                _ => return Err(fail(lineno, format!("unknown train key {key:?}"))),
            },
            "" => return Err(fail(lineno, "key outside any [section]")),
            other => return Err(fail(lineno, format!("unknown section [{other}]"))),
        }
    }

    let (input_width, input_height) = input.ok_or(Error::Config {
        msg: "network section needs input = WxH".into(),
    })?;

    let mut network = if let Some((name, lineno)) = preset {
        if !layers.is_empty() {
            return Err(fail(lineno, "preset and explicit layers are exclusive"));
        }
        match name.as_str() {
            "angular_full" => NetworkConfig::angular_full(input_width, input_height),
            "angular_small" => NetworkConfig::angular_small(input_width, input_height),
            "flow_small" => NetworkConfig::flow_small(input_width, input_height),
            _ => return Err(fail(lineno, format!("unknown preset {name:?}"))),
        }
    } else {
        NetworkConfig {
            input_width,
            input_height,
            input_channels: 2,
            layers,
            head: head.clone().ok_or(Error::Config {
                msg: "network section needs head = scalar:N or dense:N".into(),
            })?,
            skips,
            aux_head_layers: aux,
        }
    };
    if let Some(h) = head {
        network.head = h;
    }
    if head_bias {
        if let HeadSpec::ScalarRegression { bias, .. } = &mut network.head {
            *bias = true;
        }
    }
    Ok((network, train))
}

/// Render the expanded canonical text of a config pair. Parsing the output
/// reproduces the same configs.
pub fn render_config(network: &NetworkConfig, train: &TrainConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[network]");
    let _ = writeln!(out, "input = {}x{}", network.input_width, network.input_height);
    match &network.head {
        HeadSpec::ScalarRegression { dim, bias } => {
            let _ = writeln!(out, "head = scalar:{dim}");
            let _ = writeln!(out, "head_bias = {}", if *bias { "on" } else { "off" });
        }
        HeadSpec::DensePerPixel { channels } => {
            let _ = writeln!(out, "head = dense:{channels}");
        }
    }
    for l in &network.layers {
        let _ = writeln!(
            out,
            "layer = kernel={} channels={} stride={} mode={} act={} bias={} upsample={}",
            l.kernel,
            l.channels,
            l.stride,
            mode_name(l.mode),
            match l.act {
                Nonlinearity::Identity => "identity",
                Nonlinearity::Relu => "relu",
            },
            if l.bias { "on" } else { "off" },
            if l.upsample { "on" } else { "off" },
        );
    }
    for (f, t) in &network.skips {
        let _ = writeln!(out, "skip = {f}:{t}");
    }
    if !network.aux_head_layers.is_empty() {
        let list: Vec<String> = network.aux_head_layers.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "aux_heads = {}", list.join(","));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "[train]");
    let _ = writeln!(out, "epochs = {}", train.epochs);
    let _ = writeln!(out, "batch_size = {}", train.batch_size);
    let _ = writeln!(out, "lr = {}", train.learning_rate);
    let _ = writeln!(out, "seed = {}", train.seed);
    if let Some(s) = train.settle_us {
        let _ = writeln!(out, "settle_us = {s}");
    }
    let _ = writeln!(out, "threads = {}", train.threads);
    out
}
