//! Condition features: the binary tensor container, corpus manifests,
//! sequence resampling and synthetic feature generators.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes        | field                                   |
//! |--------------|-----------------------------------------|
//! | 4            | magic `DBGM`                            |
//! | 4 (u32)      | format version, currently 1             |
//! | 4 (u32)      | element type, 1 = IEEE-754 binary64     |
//! | 4 (u32)      | rank, 1 to 3                            |
//! | 4 x rank     | dims (u32)                              |
//! | 8 x prod(dims) | row-major payload (f64)               |

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded, standard_normal};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DBGM";
pub const TENSOR_VERSION: u32 = 1;
const ELEM_F64: u32 = 1;

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tensor.rank() + 8 * tensor.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&ELEM_F64.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor from the start of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let fail = |offset: usize, message: &str| Error::TensorFormat {
        offset,
        message: message.to_string(),
    };
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fail(offset, "header is truncated"))
    };
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(fail(0, "bad magic, expected DBGM"));
    }
    let version = word(4)?;
    if version != TENSOR_VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    if word(8)? != ELEM_F64 {
        return Err(fail(8, "unsupported element type"));
    }
    let rank = word(12)? as usize;
    if !(1..=3).contains(&rank) {
        return Err(fail(12, &format!("rank {rank} outside 1..=3")));
    }
    let dims = (0..rank)
        .map(|i| word(16 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 16 + 4 * rank;
    let expected = 8 * dims.iter().product::<usize>();
    let actual = bytes.len() - start;
    if actual < expected {
        return Err(Error::TruncatedPayload { expected, actual });
    }
    let data = bytes[start..start + expected]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((Tensor::from_vec(&dims, data)?, start + expected))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (tensor, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::TensorFormat {
            offset: used,
            message: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(tensor)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if !(1..=3).contains(&tensor.rank()) {
        return Err(Error::Shape(format!("cannot store rank {}", tensor.rank())));
    }
    let path = path.as_ref();
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

/// Per-frame dynamic (video) features and per-segment semantic (caption)
/// features for one clip, both `T x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFeatures {
    pub fv: Tensor,
    pub fl: Tensor,
    pub source_id: String,
}

impl ConditionFeatures {
    pub fn new(fv: Tensor, fl: Tensor, source_id: impl Into<String>) -> Result<Self> {
        let (tv, _) = fv.dims2()?;
        let (tl, _) = fl.dims2()?;
        if tv != tl {
            return Err(Error::FrameMismatch { fv: tv, fl: tl });
        }
        if tv == 0 {
            return Err(Error::Shape("condition features need at least one frame".into()));
        }
        if !fv.all_finite() || !fl.all_finite() {
            return Err(Error::NonFinite("condition features".into()));
        }
        Ok(Self {
            fv,
            fl,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.fv.shape()[0]
    }

    /// Frames covering the fractional range `[from, to)` of the clip,
    /// linearly interpolated to `rows` rows.
    pub fn window(&self, from: f64, to: f64, rows: usize) -> Result<Self> {
        let slice = |f: &Tensor| window_sequence(f, from, to, rows);
        Self::new(slice(&self.fv), slice(&self.fl), self.source_id.clone())
    }
}

/// One corpus item. Relative paths are resolved against the manifest's
/// directory by [`read_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub midi_path: PathBuf,
    pub fv_path: PathBuf,
    pub fl_path: PathBuf,
}

/// Parses a JSON-lines manifest. Blank lines are skipped and unknown fields
/// ignored.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::Manifest {
            line: i + 1,
            message: err.to_string(),
        })?;
        for p in [&mut e.midi_path, &mut e.fv_path, &mut e.fl_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        entries.push(e);
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn load_condition(entry: &ManifestEntry) -> Result<ConditionFeatures> {
    let fv = read_tensor(&entry.fv_path)?;
    let fl = read_tensor(&entry.fl_path)?;
    ConditionFeatures::new(fv, fl, entry.id.clone())
}

fn interpolate_row(f: &Tensor, pos: f64, out: &mut Vec<f64>) {
    let (t, _) = f.dims2().expect("matrix");
    let pos = pos.clamp(0.0, (t - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(t - 1);
    let w = pos - lo as f64;
    if w == 0.0 {
        out.extend_from_slice(f.row(lo));
    } else {
        out.extend(
            f.row(lo)
                .iter()
                .zip(f.row(hi))
                .map(|(&a, &b)| a + w * (b - a)),
        );
    }
}

/// Linear interpolation along the sequence axis, mapping row positions
/// `[0, T-1]` onto `[0, L-1]`. With `L = 1` the single output row sits at the
/// middle of the input.
pub fn resample_sequence(f: &Tensor, len: usize) -> Tensor {
    let (t, d) = f.dims2().expect("resample_sequence needs a matrix");
    assert!(t >= 1 && len >= 1, "resample_sequence needs non-empty sequences");
    if t == len {
        return f.clone();
    }
    let mut data = Vec::with_capacity(len * d);
    for i in 0..len {
        let pos = if len == 1 {
            (t - 1) as f64 / 2.0
        } else {
            i as f64 * (t - 1) as f64 / (len - 1) as f64
        };
        interpolate_row(f, pos, &mut data);
    }
    Tensor::from_vec(&[len, d], data).expect("shape")
}

/// Resamples the fractional span `[from, to)` of a sequence to `rows` rows,
/// sampling at row centers.
fn window_sequence(f: &Tensor, from: f64, to: f64, rows: usize) -> Tensor {
    let (t, d) = f.dims2().expect("matrix");
    let mut data = Vec::with_capacity(rows * d);
    for i in 0..rows {
        let frac = from + (to - from) * (i as f64 + 0.5) / rows as f64;
        interpolate_row(f, frac * t as f64 - 0.5, &mut data);
    }
    Tensor::from_vec(&[rows, d], data).expect("shape")
}

/// Synthetic feature generators standing in for frozen video and text
/// encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthProfile {
    /// Independent standard normal entries.
    Random,
    /// Piecewise constant over blocks of `k` frames; one normal draw per block.
    Blocky { k: usize },
    /// Every row is the one-hot vector of `label` plus 1% Gaussian jitter.
    Planted { label: usize },
}

impl std::str::FromStr for SynthProfile {
    type Err = Error;

    /// Accepts `random`, `blocky:<k>` and `planted:<label>`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Unknown {
            kind: "synthetic profile",
            name: s.to_string(),
        };
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = || arg.parse::<usize>().map_err(|_| unknown());
        match name {
            "random" if arg.is_empty() => Ok(SynthProfile::Random),
            "blocky" => Ok(SynthProfile::Blocky { k: num()?.max(1) }),
            "planted" => Ok(SynthProfile::Planted { label: num()? }),
            _ => Err(unknown()),
        }
    }
}

fn synth_matrix(rows: usize, cols: usize, seed: u64, profile: SynthProfile) -> Tensor {
    let mut rng = seeded(seed);
    match profile {
        SynthProfile::Random => normal_tensor(&mut rng, &[rows, cols]),
        SynthProfile::Blocky { k } => {
            let mut data = Vec::with_capacity(rows * cols);
            let mut block = Vec::new();
            for r in 0..rows {
                if r % k == 0 {
                    block = (0..cols).map(|_| standard_normal(&mut rng)).collect();
                }
                data.extend_from_slice(&block);
            }
            Tensor::from_vec(&[rows, cols], data).expect("shape")
        }
        SynthProfile::Planted { label } => {
            let mut t = normal_tensor(&mut rng, &[rows, cols]).map(|v| 0.01 * v);
            for r in 0..rows {
                t.data_mut()[r * cols + label % cols] += 1.0;
            }
            t
        }
    }
}

pub fn synth_condition(
    frames: usize,
    d_fv: usize,
    d_fl: usize,
    seed: u64,
    profile: SynthProfile,
) -> ConditionFeatures {
    let fv = synth_matrix(frames, d_fv, seed, profile);
    let fl = synth_matrix(frames, d_fl, seed ^ 0x5eed_f00d, profile);
    ConditionFeatures::new(fv, fl, format!("synthetic-{seed}")).expect("consistent frames")
}
