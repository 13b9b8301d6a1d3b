//! Binary checkpoint format: magic "DACW", a JSON header carrying the
//! architecture spec and training provenance, then a flat tensor table.
//! All integers little-endian; tensor data is raw f64. Writes are atomic
//! (temp file + rename) and loads fully validate structure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grad::Tensor;

use super::{Checkpoint, ModelError, ModelSpec, TrainMeta};

const MAGIC: &[u8; 4] = b"DACW";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderDoc {
    spec: ModelSpec,
    meta: TrainMeta,
}

fn is_state_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var") || name.ends_with(".batches_tracked")
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    write_str(buf, name);
    buf.push(t.shape().len() as u8);
    for &e in t.shape() {
        write_u32(buf, e as u32);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let header = serde_json::to_string(&HeaderDoc { spec: ckpt.spec.clone(), meta: ckpt.meta.clone() })
        .map_err(|e| ModelError::Format(format!("header encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, VERSION);
    write_str(&mut buf, &header);
    write_u32(&mut buf, (ckpt.params.len() + ckpt.state.len()) as u32);
    for (name, t) in ckpt.params.iter().chain(ckpt.state.iter()) {
        write_tensor(&mut buf, name, t);
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn str(&mut self) -> Result<String, ModelError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| ModelError::Format("non-UTF-8 string".into()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(ModelError::Format("bad magic (not a checkpoint file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Format(format!("unsupported checkpoint version {version}")));
    }
    let header: HeaderDoc =
        serde_json::from_str(&r.str()?).map_err(|e| ModelError::Format(format!("header decode: {e}")))?;

    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    let mut state = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data);
        if is_state_name(&name) {
            state.insert(name, t);
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != buf.len() {
        return Err(ModelError::Format("trailing bytes after tensor table".into()));
    }

    let ckpt = Checkpoint { spec: header.spec, params, state, meta: header.meta };
    validate(&ckpt)?;
    Ok(ckpt)
}

/// Every tensor the spec implies must exist with the right shape.
fn validate(ckpt: &Checkpoint) -> Result<(), ModelError> {
    let fresh = super::init_model(&ckpt.spec, 0);
    for (name, t) in fresh.params.iter() {
        let got = ckpt
            .params
            .get(name)
            .ok_or_else(|| ModelError::Format(format!("missing parameter '{name}'")))?;
        if got.shape() != t.shape() {
            return Err(ModelError::Format(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    for (name, t) in fresh.state.iter() {
        let got = ckpt
            .state
            .get(name)
            .ok_or_else(|| ModelError::Format(format!("missing state tensor '{name}'")))?;
        if got.shape() != t.shape() {
            return Err(ModelError::Format(format!(
                "state tensor '{name}' has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if ckpt.params.len() != fresh.params.len() || ckpt.state.len() != fresh.state.len() {
        return Err(ModelError::Format("checkpoint carries tensors the architecture does not declare".into()));
    }
    Ok(())
}
