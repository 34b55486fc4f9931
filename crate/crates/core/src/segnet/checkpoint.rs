//! Checkpoint layout (little-endian):
//!
//! ```text
//! "DUDE" | version u32
//! classes u32 | kernel u32 | decoder_width u32 | input_size u32
//! n_enc u32 | n_enc x width u32 | dual_head u8
//! n_tensors u32
//! per tensor: name_len u32 | name bytes | group u8 | 4 x extent u32 | f32 payload
//! ```

use std::path::Path;

use super::{param_specs, ModelConfig, ModelParams, ParamGroup};
use crate::binio::{read_file, write_file_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DUDE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized checkpoint bytes, as written by [`save_checkpoint`].
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = params.config();
    w.u32(c.classes as u32);
    w.u32(c.kernel as u32);
    w.u32(c.decoder_width as u32);
    w.u32(c.input_size as u32);
    w.u32(c.encoder_widths.len() as u32);
    for &width in &c.encoder_widths {
        w.u32(width as u32);
    }
    w.u8(params.dual_head() as u8);
    w.u32(params.tensors().len() as u32);
    for (spec, t) in params.specs().iter().zip(params.tensors()) {
        w.u32(spec.name.len() as u32);
        w.bytes(spec.name.as_bytes());
        w.u8(spec.group.tag());
        for &d in t.shape().dims() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f32(v);
        }
    }
    w.into_inner()
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_file_atomic(path, &checkpoint_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = read_file(path)?;
    decode(&bytes, path)
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, path);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(r.fault(0, "bad magic (expected \"DUDE\")"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            file: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_offset = r.offset();
    let classes = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let decoder_width = r.u32()? as usize;
    let input_size = r.u32()? as usize;
    let n_enc = r.u32()? as usize;
    if n_enc > 64 {
        return Err(r.fault(r.offset() - 4, format!("implausible encoder depth {n_enc}")));
    }
    let mut encoder_widths = Vec::with_capacity(n_enc);
    for _ in 0..n_enc {
        encoder_widths.push(r.u32()? as usize);
    }
    let dual_flag_offset = r.offset();
    let dual_head = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.fault(dual_flag_offset, format!("bad dual-head flag {other}"))),
    };
    let config = ModelConfig {
        classes,
        encoder_widths,
        decoder_width,
        kernel,
        input_size,
    };
    config
        .validate()
        .map_err(|e| r.fault(config_offset, format!("bad config block: {e}")))?;

    let specs = param_specs(&config, dual_head);
    let count_offset = r.offset();
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(r.fault(
            count_offset,
            format!("tensor count {count}, config implies {}", specs.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in &specs {
        let record = r.offset();
        let name_len = r.u32()? as usize;
        let name = r.bytes(name_len)?;
        if name != spec.name.as_bytes() {
            return Err(r.fault(
                record,
                format!("tensor name {:?}, expected {:?}", String::from_utf8_lossy(name), spec.name),
            ));
        }
        let tag_offset = r.offset();
        let group = ParamGroup::from_tag(r.u8()?);
        if group != Some(spec.group) {
            return Err(r.fault(tag_offset, format!("bad group tag for {}", spec.name)));
        }
        let shape_offset = r.offset();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        if Shape(dims) != spec.shape {
            return Err(r.fault(
                shape_offset,
                format!("shape {:?} for {}, expected {:?}", dims, spec.name, spec.shape.dims()),
            ));
        }
        let mut data = Vec::with_capacity(spec.shape.numel());
        for _ in 0..spec.shape.numel() {
            data.push(r.f32()?);
        }
        tensors.push(Tensor::from_vec(spec.shape, data)?);
    }
    r.finish()?;
    ModelParams::from_parts(config, dual_head, tensors)
}
