//! Weight checkpoint format "SQPW", little-endian:
//!   magic "SQPW", u32 version = 1, u32 record count, then per record
//!   (u32 name length, name bytes, u32 ndim, u32 dims..., f32 data).
//!
//! The first record is `meta/variant` (shape [1], value 0/1/2 for
//! baseline / bam / bam-binary-weights); the rest are the parameter
//! tensors in [`WeightSetT::tensors`] order. An optional trailing "QNT1"
//! section carries post-training quantization parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SqpError};
use crate::model::{ModelGraph, Variant, WeightSet, WeightSetT};
use crate::quant::ModelQuantParams;
use crate::tensor::TensorF32;

pub const MAGIC: &[u8; 4] = b"SQPW";
pub const VERSION: u32 = 1;

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    variant: Variant,
    weights: &WeightSet,
    qparams: Option<&ModelQuantParams>,
) -> Result<()> {
    let tensors = weights.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    let tag = match variant {
        Variant::Baseline => 0.0f32,
        Variant::Bam => 1.0,
        Variant::BamBinaryWeights => 2.0,
    };
    push_record(&mut out, "meta/variant", &[1], &[tag]);
    for (name, t) in tensors {
        push_record(&mut out, &name, t.shape(), t.data());
    }
    if let Some(qp) = qparams {
        out.extend_from_slice(&qp.to_qnt1_bytes());
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SqpError::Format("truncated SQPW file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Variant, ModelGraph, WeightSet, Option<ModelQuantParams>)> {
    let bytes = fs::read(path.as_ref())?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes(
    bytes: &[u8],
) -> Result<(Variant, ModelGraph, WeightSet, Option<ModelQuantParams>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(SqpError::Format("bad magic, not an SQPW file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SqpError::Format(format!(
            "unsupported SQPW version {version}, want {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut records: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| SqpError::Format("non-UTF8 tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        records.push((name, shape, data));
    }

    let (first_name, _, first_data) = records
        .first()
        .ok_or_else(|| SqpError::Format("checkpoint holds no records".into()))?;
    if first_name != "meta/variant" || first_data.len() != 1 {
        return Err(SqpError::Format(
            "first record must be meta/variant".into(),
        ));
    }
    let variant = match first_data[0] as i32 {
        0 => Variant::Baseline,
        1 => Variant::Bam,
        2 => Variant::BamBinaryWeights,
        other => {
            return Err(SqpError::Format(format!("unknown variant tag {other}")))
        }
    };
    let graph = ModelGraph::for_variant(variant);
    let mut weights = WeightSetT::<f32>::zeros_like_graph(&graph);
    {
        let expected = weights.tensors().len();
        if records.len() != expected + 1 {
            return Err(SqpError::Format(format!(
                "checkpoint holds {} tensors, model wants {expected}",
                records.len() - 1
            )));
        }
    }
    for ((name, shape, data), (want_name, tensor)) in
        records.into_iter().skip(1).zip(weights.tensors_mut())
    {
        if name != want_name {
            return Err(SqpError::Format(format!(
                "tensor {name:?} where {want_name:?} expected"
            )));
        }
        if shape != tensor.shape() {
            return Err(SqpError::Format(format!(
                "{name}: shape {shape:?} does not match {:?}",
                tensor.shape()
            )));
        }
        *tensor = TensorF32::from_vec(&shape, data)?;
    }

    let qparams = if r.pos < bytes.len() {
        Some(ModelQuantParams::from_qnt1_bytes(&bytes[r.pos..])?)
    } else {
        None
    };
    Ok((variant, graph, weights, qparams))
}
