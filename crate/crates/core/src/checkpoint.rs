//! Checkpoint container: `"DBGK"`, a `u32` version, a `u32` header length,
//! a UTF-8 `key=value` header describing schedule and architecture, then the
//! flat parameter vector as an embedded tensor file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::conditioning::{decode_tensor_prefix, encode_tensor};
use crate::denoiser::{ArchDescriptor, DenoiserNet};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DBGK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(net: &DenoiserNet, sched: &NoiseSchedule) -> Vec<u8> {
    let mut header = String::new();
    let _ = writeln!(header, "schedule={}", sched.kind());
    let _ = writeln!(header, "n={}", sched.n());
    let _ = writeln!(header, "beta_start={}", sched.beta_start());
    let _ = writeln!(header, "beta_end={}", sched.beta_end());
    header.push_str(&net.arch().to_text());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let params = Tensor::from_vec(&[net.param_count()], net.params().to_vec()).expect("vector");
    out.extend_from_slice(&encode_tensor(&params));
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::TensorFormat {
        offset,
        message: message.into(),
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(offset, "checkpoint header truncated"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DenoiserNet, NoiseSchedule)> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(format_err(0, "not a checkpoint (bad magic)"));
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let len = u32_at(bytes, 8)? as usize;
    let text = bytes
        .get(12..12 + len)
        .ok_or_else(|| format_err(12, "checkpoint header truncated"))?;
    let text = std::str::from_utf8(text).map_err(|_| format_err(12, "header is not UTF-8"))?;
    let mut pairs = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(12, format!("bad header line {line:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| pairs.get(k).ok_or_else(|| format_err(12, format!("header lacks {k}")));
    let real = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| format_err(12, format!("{k} is not a number")))
    };
    let kind: ScheduleKind = get("schedule")?.parse()?;
    let n: usize = get("n")?.parse().map_err(|_| format_err(12, "n is not an integer"))?;
    let sched = make_schedule(kind, n, real("beta_start")?, real("beta_end")?)?;
    let arch = ArchDescriptor::from_pairs(&pairs)?;
    let (params, used) = decode_tensor_prefix(&bytes[12 + len..]).map_err(|e| match e {
        Error::TensorFormat { offset, message } => format_err(offset + 12 + len, message),
        other => other,
    })?;
    if 12 + len + used != bytes.len() {
        return Err(format_err(12 + len + used, "trailing bytes after parameters"));
    }
    if params.rank() != 1 {
        return Err(format_err(12 + len, "parameters must be a vector"));
    }
    let net = DenoiserNet::from_params(arch, params.into_data())?;
    Ok((net, sched))
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &DenoiserNet, sched: &NoiseSchedule) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net, sched)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DenoiserNet, NoiseSchedule)> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
