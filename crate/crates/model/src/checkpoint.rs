//! Checkpoint files.
//!
//! Line 1: `TDLM-CKPT v1 step=<n> heads=<h> dtype=<f32|f64>`. Each tensor
//! follows as a `<name> <rank> <dims...>` line and its values as raw
//! little-endian floats. Optimizer moments go to a sibling `<path>.opt` file in
//! the same format with tensors named `m.<name>` and `v.<name>`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::config::DenoiserConfig;
use crate::denoiser::Denoiser;
use crate::error::{ModelError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Layout;
use crate::real::Real;

pub fn opt_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

struct Header {
    step: usize,
    heads: usize,
    dtype: String,
}

fn write_file<T: Real>(
    path: &Path,
    header: &Header,
    tensors: &[(String, Vec<usize>, &[T])],
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(
            w,
            "TDLM-CKPT v1 step={} heads={} dtype={}",
            header.step,
            header.heads,
            T::DTYPE
        )?;
        let mut buf = Vec::new();
        for (name, shape, data) in tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            writeln!(w, "{name} {} {}", shape.len(), dims.join(" "))?;
            buf.clear();
            data.iter().for_each(|v| v.write_le(&mut buf));
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    // a crash mid-write leaves the previous checkpoint intact
    std::fs::rename(&tmp, path)?;
    Ok(())
}

type Tensors = Vec<(String, Vec<usize>, Vec<f64>)>;

fn read_file(path: &Path) -> Result<(Header, Tensors)> {
    let err = |msg: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some("TDLM-CKPT") || parts.next() != Some("v1") {
        return Err(err(format!("bad header {:?}", line.trim_end())));
    }
    let mut header = Header {
        step: 0,
        heads: 0,
        dtype: "f32".into(),
    };
    let mut seen_step = false;
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(format!("bad header field {kv:?}")))?;
        match k {
            "step" => {
                header.step = v.parse().map_err(|_| err(format!("bad step {v:?}")))?;
                seen_step = true;
            }
            "heads" => header.heads = v.parse().map_err(|_| err(format!("bad heads {v:?}")))?,
            "dtype" => header.dtype = v.to_string(),
            _ => return Err(err(format!("unknown header field {k:?}"))),
        }
    }
    if !seen_step {
        return Err(err("header lacks step=".into()));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(err(format!("unsupported dtype {other:?}"))),
    };
    let mut tensors = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            break;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || err(format!("bad tensor line {:?}", line.trim_end()));
        if f.len() < 2 {
            return Err(bad());
        }
        let rank: usize = f[1].parse().map_err(|_| bad())?;
        if f.len() != 2 + rank {
            return Err(bad());
        }
        let shape: Vec<usize> = f[2..]
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * width];
        r.read_exact(&mut bytes)
            .map_err(|_| err(format!("tensor {} truncated", f[0])))?;
        let values = bytes
            .chunks_exact(width)
            .map(|b| {
                if width == 4 {
                    f32::read_le(b) as f64
                } else {
                    f64::read_le(b)
                }
            })
            .collect();
        tensors.push((f[0].to_string(), shape, values));
    }
    Ok((header, tensors))
}

/// Writes the model parameters to `path`.
pub fn save<T: Real>(path: &Path, model: &Denoiser<T>, step: usize) -> Result<()> {
    let tensors: Vec<(String, Vec<usize>, &[T])> = model
        .layout()
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone(), &model.params()[t.range()]))
        .collect();
    let header = Header {
        step,
        heads: model.config().heads,
        dtype: T::DTYPE.into(),
    };
    write_file(path, &header, &tensors)
}

/// Writes parameters to `path` and optimizer moments to `path.opt`.
pub fn save_with_opt<T: Real>(
    path: &Path,
    model: &Denoiser<T>,
    opt: &AdamW<T>,
    step: usize,
) -> Result<()> {
    save(path, model, step)?;
    let mut tensors: Vec<(String, Vec<usize>, &[T])> = Vec::new();
    for (prefix, buf) in [("m", &opt.m), ("v", &opt.v)] {
        for t in &model.layout().tensors {
            tensors.push((
                format!("{prefix}.{}", t.name),
                t.shape.clone(),
                &buf[t.range()],
            ));
        }
    }
    let header = Header {
        step: opt.steps,
        heads: model.config().heads,
        dtype: T::DTYPE.into(),
    };
    write_file(&opt_path(path), &header, &tensors)
}

/// Rebuilds the model configuration from tensor shapes.
fn infer_config(path: &Path, heads: usize, tensors: &Tensors) -> Result<DenoiserConfig> {
    let err = |msg: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let shape = |name: &str| {
        tensors
            .iter()
            .find(|t| t.0 == name)
            .map(|t| t.1.clone())
            .ok_or_else(|| err(format!("missing tensor {name}")))
    };
    let node = shape("node_emb")?;
    let pos = shape("pos_emb")?;
    let head = shape("head")?;
    if node.len() != 2 || pos.len() != 2 || head.len() != 2 {
        return Err(err("embedding and head tensors must have rank 2".into()));
    }
    let d = node[1];
    let layers = tensors.iter().filter(|t| t.0.ends_with(".wqkv")).count();
    let joint = match tensors.iter().find(|t| t.0 == "joint_head") {
        Some(t) if t.1.len() == 2 && d > 0 && t.1[0] % d == 0 => Some(t.1[0] / d),
        Some(_) => return Err(err("joint head shape is not (L·d) × K^L".into())),
        None => None,
    };
    Ok(DenoiserConfig {
        d,
        layers,
        heads,
        seq_len: pos[0],
        node_vocab: node[0],
        branching: head[1],
        joint,
    })
}

fn fill<T: Real>(path: &Path, layout: &Layout, tensors: &Tensors, prefix: &str) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); layout.total];
    for t in &layout.tensors {
        let name = format!("{prefix}{}", t.name);
        let (_, shape, values) =
            tensors
                .iter()
                .find(|x| x.0 == name)
                .ok_or_else(|| ModelError::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("missing tensor {name}"),
                })?;
        if *shape != t.shape {
            return Err(ModelError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape),
            });
        }
        out[t.range()]
            .iter_mut()
            .zip(values)
            .for_each(|(o, &v)| *o = T::of(v));
    }
    if let Some(extra) = tensors.iter().find(|x| {
        x.0.strip_prefix(prefix)
            .and_then(|n| layout.get(n))
            .is_none()
    }) {
        return Err(ModelError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("unexpected tensor {}", extra.0),
        });
    }
    Ok(out)
}

/// Loads a model (converting precision if needed) and its step counter.
pub fn load<T: Real>(path: &Path) -> Result<(Denoiser<T>, usize)> {
    let (header, tensors) = read_file(path)?;
    let cfg = infer_config(path, header.heads, &tensors)?;
    cfg.validate().map_err(|e| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let params = fill(path, &Layout::new(&cfg), &tensors, "")?;
    Ok((Denoiser::from_params(cfg, params)?, header.step))
}

/// Loads optimizer moments saved next to `path` by [`save_with_opt`].
pub fn load_opt<T: Real>(path: &Path, layout: &Layout, cfg: AdamWConfig) -> Result<AdamW<T>> {
    let p = opt_path(path);
    let (header, tensors) = read_file(&p)?;
    let mut opt = AdamW::new(cfg, layout);
    let m: Tensors = tensors
        .iter()
        .filter(|t| t.0.starts_with("m."))
        .cloned()
        .collect();
    let v: Tensors = tensors
        .iter()
        .filter(|t| t.0.starts_with("v."))
        .cloned()
        .collect();
    opt.m = fill(&p, layout, &m, "m.")?;
    opt.v = fill(&p, layout, &v, "v.")?;
    opt.steps = header.step;
    Ok(opt)
}
