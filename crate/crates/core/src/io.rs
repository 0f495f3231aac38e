//! On-disk formats: parameter checkpoints, explanation tables, run manifests.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "SEHMCKPT"
//! version   u32       1
//! header    u64 length + UTF-8 JSON {model, standardizer, activation}
//! model     u32 count, then `count` tensors
//! explainer u32 count, then `count` tensors (0 when absent)
//! tensor    u32 rank, rank × u64 dims, product(dims) × f64
//! ```
//!
//! Model tensors follow [`SehmModel::params`] order; explainer tensors are
//! `weight, bias` per layer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sehm_autodiff::Tensor;

use crate::data::{Sample, Standardizer};
use crate::error::{Result, SehmError};
use crate::explainer::{Activation, DenseLayer, Explanation, ThetaNetwork};
use crate::model::{ModelConfig, SehmModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEHMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reproduce predictions and explanations.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SehmModel,
    pub standardizer: Standardizer,
    pub explainer: Option<ThetaNetwork>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    standardizer: Standardizer,
    activation: Option<Activation>,
}

fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SehmError::Data(msg.into()))
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return data_err(format!("tensor rank {rank} is not plausible"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(n) = n.filter(|&n| n <= 1 << 28) else {
        return data_err(format!("tensor shape {shape:?} is too large"));
    };
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

fn write_tensors<'a>(w: &mut impl Write, ts: impl ExactSizeIterator<Item = &'a Tensor>) -> Result<()> {
    w.write_all(&(ts.len() as u32).to_le_bytes())?;
    for t in ts {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read) -> Result<Vec<Tensor>> {
    let n = read_u32(r)? as usize;
    (0..n).map(|_| read_tensor(r)).collect()
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        model: ckpt.model.config.clone(),
        standardizer: ckpt.standardizer.clone(),
        activation: ckpt.explainer.as_ref().map(|n| n.activation),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let params = ckpt.model.params();
    write_tensors(w, params.into_iter())?;
    let theta: Vec<&Tensor> = ckpt.explainer.as_ref().map(|n| n.params()).unwrap_or_default();
    write_tensors(w, theta.into_iter())?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return data_err("not a checkpoint file (bad magic)");
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return data_err(format!("unsupported checkpoint version {version}"));
    }
    let len = read_u64(r)? as usize;
    if len > 1 << 24 {
        return data_err("checkpoint header too large");
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let header: Header = serde_json::from_slice(&buf)?;
    let mut model = SehmModel::new(header.model)?;
    let params = read_tensors(r)?;
    {
        let mut slots = model.params_mut();
        if slots.len() != params.len() {
            return data_err(format!("expected {} model tensors, found {}", slots.len(), params.len()));
        }
        for (slot, t) in slots.iter_mut().zip(params) {
            if slot.shape() != t.shape() {
                return data_err(format!("tensor shape {:?} does not match {:?}", t.shape(), slot.shape()));
            }
            **slot = t;
        }
    }
    let theta = read_tensors(r)?;
    let explainer = match header.activation {
        None if theta.is_empty() => None,
        Some(act) if theta.len() % 2 == 0 && !theta.is_empty() => {
            let layers = theta
                .chunks_exact(2)
                .map(|p| DenseLayer {
                    weight: p[0].clone(),
                    bias: p[1].clone(),
                })
                .collect();
            Some(ThetaNetwork::from_layers(layers, act)?)
        }
        _ => return data_err("explainer section does not match its header"),
    };
    Ok(Checkpoint {
        model,
        standardizer: header.standardizer,
        explainer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// One row of an explanation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionRow {
    pub t: usize,
    pub variable: usize,
    /// Recorded value, `None` when missing.
    pub raw_value: Option<f64>,
    pub beta: f64,
    pub missing: bool,
    /// Value the model actually saw.
    pub input_value: f64,
}

pub const CONTRIBUTION_HEADER: &str = "t,variable,raw_value,beta,missing,input_value";

/// Pairs an explanation with the sample it was computed from.
pub fn contribution_rows(sample: &Sample, explanation: &Explanation) -> Result<Vec<ContributionRow>> {
    let shape = explanation.beta.shape();
    if shape != [sample.length, sample.vars] || explanation.input.shape() != shape {
        return data_err(format!(
            "explanation shape {shape:?} does not match sample {}x{}",
            sample.length, sample.vars
        ));
    }
    let (beta, input) = (explanation.beta.data(), explanation.input.data());
    let mut out = Vec::with_capacity(beta.len());
    for t in 0..sample.length {
        for d in 0..sample.vars {
            let i = t * sample.vars + d;
            let raw_value = sample.get(t, d);
            out.push(ContributionRow {
                t,
                variable: d,
                raw_value,
                beta: beta[i],
                missing: raw_value.is_none(),
                input_value: input[i],
            });
        }
    }
    Ok(out)
}

pub fn write_contributions(w: &mut impl Write, rows: &[ContributionRow]) -> Result<()> {
    writeln!(w, "{CONTRIBUTION_HEADER}")?;
    for r in rows {
        let raw = r.raw_value.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{:e},{},{:e}",
            r.t,
            r.variable,
            raw,
            r.beta,
            u8::from(r.missing),
            r.input_value
        )?;
    }
    Ok(())
}

pub fn read_contributions(r: impl BufRead) -> Result<Vec<ContributionRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(CONTRIBUTION_HEADER) {
        return data_err("missing contribution header");
    }
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| SehmError::Data(format!("line {line}: bad number {s:?}")))
    };
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return data_err(format!("line {}: expected 6 fields", k + 2));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| SehmError::Data(format!("line {}: bad integer {s:?}", k + 2)))
        };
        out.push(ContributionRow {
            t: int(f[0])?,
            variable: int(f[1])?,
            raw_value: if f[2].is_empty() { None } else { Some(parse(f[2], k + 2)?) },
            beta: parse(f[3], k + 2)?,
            missing: f[4] == "1",
            input_value: parse(f[5], k + 2)?,
        });
    }
    Ok(out)
}

/// What a run did and with which inputs, enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::Activation;

    #[test]
    fn tensor_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 2 * 8 + 6 * 8);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = SehmModel::new(ModelConfig {
            hidden: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let net = ThetaNetwork::new(6, 2, 5, Activation::Tanh, 3).unwrap();
        let ckpt = Checkpoint {
            model,
            standardizer: Standardizer {
                mean: vec![0.5; 8],
                std: vec![2.0; 8],
            },
            explainer: Some(net),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.model.config, ckpt.model.config);
        assert_eq!(back.model.params(), ckpt.model.params());
        assert_eq!(back.standardizer, ckpt.standardizer);
        assert_eq!(back.explainer.unwrap().params(), ckpt.explainer.unwrap().params());
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&mut &b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
