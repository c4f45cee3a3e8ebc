//! On-disk model directory: `manifest.json` describing the chain and
//! `weights.bin` holding every weight as little-endian `f32`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ActivationKind, ActivationSector, Affine, ResidualBlock, ResidualChain};
use crate::error::{LipError, Result};
use crate::linop::{Conv2d, LinOp, Matrix, Vector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    activation: String,
    alpha: f64,
    beta: f64,
    input_shape: Vec<usize>,
    num_classes: usize,
    blocks: Vec<BlockDesc>,
    #[serde(rename = "final")]
    final_map: OpDesc,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockDesc {
    #[serde(rename = "H")]
    skip: OpDesc,
    #[serde(rename = "G")]
    mix: OpDesc,
    #[serde(rename = "W")]
    pre: OpDesc,
}

#[derive(Debug, Serialize, Deserialize)]
struct OpDesc {
    #[serde(flatten)]
    kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_len: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum OpKind {
    Dense {
        rows: usize,
        cols: usize,
        offset: usize,
        len: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
        offset: usize,
        len: usize,
    },
    Identity {
        rows: usize,
        cols: usize,
    },
    Zero {
        rows: usize,
        cols: usize,
    },
}

/// Appends weights to the blob and remembers their offsets.
struct BlobWriter {
    data: Vec<f32>,
}

impl BlobWriter {
    fn push(&mut self, values: impl Iterator<Item = f64>) -> (usize, usize) {
        let offset = self.data.len();
        self.data.extend(values.map(|v| v as f32));
        (offset, self.data.len() - offset)
    }

    fn describe(&mut self, affine: &Affine) -> Result<OpDesc> {
        let kind = match &affine.op {
            LinOp::Dense(m) => {
                let (rows, cols) = m.shape();
                let (offset, len) =
                    self.push((0..rows).flat_map(|r| (0..cols).map(move |c| m[(r, c)])));
                OpKind::Dense { rows, cols, offset, len }
            }
            LinOp::Conv2d(c) => {
                let (offset, len) = self.push(c.kernel.iter().copied());
                OpKind::Conv2d {
                    in_ch: c.in_ch,
                    out_ch: c.out_ch,
                    kh: c.kh,
                    kw: c.kw,
                    stride: c.stride,
                    pad: c.pad,
                    in_h: c.in_h,
                    in_w: c.in_w,
                    offset,
                    len,
                }
            }
            LinOp::Identity(n) => OpKind::Identity { rows: *n, cols: *n },
            LinOp::Zero { rows, cols } => OpKind::Zero { rows: *rows, cols: *cols },
            other => {
                return Err(LipError::Unsupported(format!(
                    "operator {other:?} cannot be stored in a model file"
                )))
            }
        };
        let (bias_offset, bias_len) = match &affine.bias {
            Some(b) => {
                let (o, l) = self.push(b.iter().copied());
                (Some(o), Some(l))
            }
            None => (None, None),
        };
        Ok(OpDesc { kind, bias_offset, bias_len })
    }
}

/// Writes `manifest.json` and `weights.bin` into `dir` (created if missing).
pub fn save_model(chain: &ResidualChain, dir: impl AsRef<Path>) -> Result<()> {
    chain.validate()?;
    let dir = dir.as_ref();
    let mut blob = BlobWriter { data: Vec::new() };
    let mut blocks = Vec::with_capacity(chain.blocks.len());
    for b in &chain.blocks {
        blocks.push(BlockDesc {
            skip: blob.describe(&b.skip)?,
            mix: blob.describe(&b.mix)?,
            pre: blob.describe(&b.pre)?,
        });
    }
    let final_map = blob.describe(&chain.final_map)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        activation: chain.sector.kind.to_string(),
        alpha: chain.sector.alpha,
        beta: chain.sector.beta,
        input_shape: chain.input_shape.clone(),
        num_classes: chain.num_classes,
        blocks,
        final_map,
    };
    fs::create_dir_all(dir).map_err(|e| LipError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(blob.data.len() * 4);
    for v in &blob.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, bytes).map_err(|e| LipError::io(&weights, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| LipError::io(&manifest_path, e))?;
    Ok(())
}

fn op_extent(d: &OpDesc) -> usize {
    let main = match d.kind {
        OpKind::Dense { offset, len, .. } | OpKind::Conv2d { offset, len, .. } => offset + len,
        _ => 0,
    };
    let bias = match (d.bias_offset, d.bias_len) {
        (Some(o), Some(l)) => o + l,
        _ => 0,
    };
    main.max(bias)
}

fn build_affine(d: &OpDesc, blob: &[f32], what: &str) -> Result<Affine> {
    let slice = |offset: usize, len: usize| -> Vec<f64> {
        blob[offset..offset + len].iter().map(|&v| v as f64).collect()
    };
    let op = match d.kind {
        OpKind::Dense { rows, cols, offset, len } => {
            if rows * cols != len {
                return Err(LipError::InvalidModel(format!(
                    "{what}: dense {rows}x{cols} declares len {len}"
                )));
            }
            LinOp::dense(Matrix::from_row_slice(rows, cols, &slice(offset, len)))
        }
        OpKind::Conv2d { in_ch, out_ch, kh, kw, stride, pad, in_h, in_w, offset, len } => {
            let conv = Conv2d::new(in_ch, out_ch, (kh, kw), stride, pad, (in_h, in_w), slice(offset, len))
                .map_err(|e| LipError::InvalidModel(format!("{what}: {e}")))?;
            LinOp::Conv2d(Arc::new(conv))
        }
        OpKind::Identity { rows, cols } => {
            if rows != cols {
                return Err(LipError::InvalidModel(format!(
                    "{what}: identity must be square, got {rows}x{cols}"
                )));
            }
            LinOp::Identity(rows)
        }
        OpKind::Zero { rows, cols } => LinOp::zero(rows, cols),
    };
    let bias = match (d.bias_offset, d.bias_len) {
        (Some(o), Some(l)) => Some(Vector::from_vec(slice(o, l))),
        (None, None) => None,
        _ => {
            return Err(LipError::InvalidModel(format!(
                "{what}: bias_offset and bias_len must appear together"
            )))
        }
    };
    Ok(Affine { op, bias })
}

/// Reads and validates a model directory written by [`save_model`].
pub fn parse_model(dir: impl AsRef<Path>) -> Result<ResidualChain> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| LipError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(LipError::InvalidModel(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let kind: ActivationKind = manifest.activation.parse()?;
    let sector = ActivationSector::new(kind, manifest.alpha, manifest.beta)?;

    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| LipError::io(&weights_path, e))?;
    let expected = manifest
        .blocks
        .iter()
        .flat_map(|b| [&b.skip, &b.mix, &b.pre])
        .chain(std::iter::once(&manifest.final_map))
        .map(op_extent)
        .max()
        .unwrap_or(0);
    if bytes.len() != expected * 4 {
        return Err(LipError::BinaryLengthMismatch { expected, actual: bytes.len() });
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for (k, b) in manifest.blocks.iter().enumerate() {
        blocks.push(ResidualBlock {
            skip: build_affine(&b.skip, &blob, &format!("block {k} H"))?,
            mix: build_affine(&b.mix, &blob, &format!("block {k} G"))?,
            pre: build_affine(&b.pre, &blob, &format!("block {k} W"))?,
        });
    }
    let final_map = build_affine(&manifest.final_map, &blob, "final")?;
    ResidualChain::new(blocks, final_map, sector, manifest.input_shape, manifest.num_classes)
}
