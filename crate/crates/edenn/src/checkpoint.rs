//! Binary checkpoints.
//!
//! Little-endian layout, version-tagged:
//!
//! ```text
//! magic "EDCK" | u32 version | u64 config_len | config text (canonical)
//! | u32 n_tensors | tensors
//! tensor := u32 ndim | u64 dims[ndim] | f64 data[product(dims)]
//! ```
//!
//! The embedded config text fully describes the architecture and training
//! protocol, so a checkpoint is self-contained: loading rebuilds the network
//! and overwrites its parameters. Tensor shapes are validated against the
//! rebuilt network; a mismatch is a checkpoint error.

use crate::config::{parse_config, render_config};
use crate::error::{Error, Result};
use crate::network::{build_network, Head, Network};
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(sink: &mut dyn Write, t: &Tensor) -> Result<()> {
    sink.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(source: &mut dyn Read, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|_| Error::Checkpoint {
        msg: format!("truncated while reading {what}"),
    })
}

fn read_u32(source: &mut dyn Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(source, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(source: &mut dyn Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(source, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(source: &mut dyn Read, want_shape: &[usize], what: &str) -> Result<Tensor> {
    let ndim = read_u32(source, what)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(source, what)? as usize);
    }
    if shape != want_shape {
        return Err(Error::Checkpoint {
            msg: format!("{what}: stored shape {shape:?} does not match network {want_shape:?}"),
        });
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(source, &mut b, what)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Parameter tensors in serialization order: per layer the kernel, the raw
/// decay as a 1-element tensor, and the bias if present; then the head.
fn tensors_of(net: &Network) -> Vec<Tensor> {
    let mut out = Vec::new();
    for l in &net.layers {
        out.push(l.kernel.clone());
        out.push(Tensor::scalar(l.decay_raw));
        if let Some(b) = &l.bias {
            out.push(b.clone());
        }
    }
    match &net.head {
        Head::Scalar { weight, bias } => {
            out.push(weight.clone());
            if let Some(b) = bias {
                out.push(b.clone());
            }
        }
        Head::Dense { projections } => {
            for p in projections {
                out.push(p.kernel.clone());
            }
        }
    }
    out
}

pub fn save_checkpoint(
    net: &Network,
    train: &TrainConfig,
    sink: &mut dyn Write,
) -> Result<()> {
    let config_text = render_config(&net.config, train);
    sink.write_all(CHECKPOINT_MAGIC)?;
    sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    sink.write_all(&(config_text.len() as u64).to_le_bytes())?;
    sink.write_all(config_text.as_bytes())?;
    let tensors = tensors_of(net);
    sink.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        write_tensor(sink, t)?;
    }
    Ok(())
}

pub fn save_checkpoint_file(net: &Network, train: &TrainConfig, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_checkpoint(net, train, &mut file)?;
    Ok(())
}

pub fn load_checkpoint(source: &mut dyn Read) -> Result<(Network, TrainConfig)> {
    let mut magic = [0u8; 4];
    read_exact(source, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = read_u32(source, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            msg: format!("unsupported version {version}"),
        });
    }
    let config_len = read_u64(source, "config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact(source, &mut config_bytes, "config text")?;
    let config_text = String::from_utf8(config_bytes).map_err(|_| Error::Checkpoint {
        msg: "config text is not valid UTF-8".into(),
    })?;
    let (net_config, train_config) = parse_config(&config_text)?;
    let mut net = build_network(&net_config, train_config.seed)?;

    let n_tensors = read_u32(source, "tensor count")? as usize;
    let want = tensors_of(&net);
    if n_tensors != want.len() {
        return Err(Error::Checkpoint {
            msg: format!("{} tensors stored, network needs {}", n_tensors, want.len()),
        });
    }
    let mut stored = Vec::with_capacity(n_tensors);
    for (i, t) in want.iter().enumerate() {
        stored.push(read_tensor(source, t.shape(), &format!("tensor {i}"))?);
    }
    let flat: Vec<f64> = stored.iter().flat_map(|t| t.data().iter().copied()).collect();
    net.set_params_flat(&flat);
    Ok((net, train_config))
}

pub fn load_checkpoint_file(path: &Path) -> Result<(Network, TrainConfig)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    load_checkpoint(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    #[test]
    fn checkpoint_round_trips_network_and_train_config() {
        for config in [
            NetworkConfig::angular_small(16, 16),
            NetworkConfig::flow_small(16, 16),
        ] {
            let net = build_network(&config, 42).unwrap();
            let train = TrainConfig {
                epochs: 123,
                seed: 9,
                settle_us: Some(4_000),
                ..TrainConfig::default()
            };
            let mut buf = Vec::new();
            save_checkpoint(&net, &train, &mut buf).unwrap();
            let (loaded, train2) = load_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(loaded.config, net.config);
            assert_eq!(loaded.params_flat(), net.params_flat());
            assert_eq!(train2.epochs, 123);
            assert_eq!(train2.seed, 9);
            assert_eq!(train2.settle_us, Some(4_000));
        }
    }

    #[test]
    fn saving_is_deterministic() {
        let net = build_network(&NetworkConfig::angular_small(16, 16), 7).unwrap();
        let train = TrainConfig::default();
        let mut a = Vec::new();
        let mut b = Vec::new();
        save_checkpoint(&net, &train, &mut a).unwrap();
        save_checkpoint(&net, &train, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let net = build_network(&NetworkConfig::angular_small(16, 16), 7).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&net, &TrainConfig::default(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(load_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let net = build_network(&NetworkConfig::angular_small(16, 16), 7).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&net, &TrainConfig::default(), &mut buf).unwrap();
        buf.truncate(buf.len() - 9);
        assert!(load_checkpoint(&mut buf.as_slice()).is_err());
    }
}
