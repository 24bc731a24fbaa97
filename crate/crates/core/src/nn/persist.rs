//! Model file format.
//!
//! Layout (all integers little-endian u32, all floats little-endian f32,
//! documented in `docs/FORMATS.md`):
//!
//! ```text
//! "SRUN"  version  label_len  label_bytes
//! depth  base_channels  kernel_size  input_height  input_width
//! param_count
//! per parameter: name_len  name_bytes  rank  extents…  values…
//! ```
//!
//! Loading re-derives the expected parameter layout from the config block
//! and rejects any mismatch, so a structurally corrupt file cannot produce
//! a silently wrong model.

use std::fs;
use std::path::Path;

use crate::nn::{Model, UNetConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SRUN";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut bytes, MODEL_VERSION);
    push_str(&mut bytes, &model.label);
    let c = &model.config;
    for v in [
        c.depth,
        c.base_channels,
        c.kernel_size,
        c.input_height,
        c.input_width,
    ] {
        push_u32(&mut bytes, v as u32);
    }
    push_u32(&mut bytes, model.params().len() as u32);
    for (name, tensor) in model.params() {
        push_str(&mut bytes, name);
        push_u32(&mut bytes, tensor.rank() as u32);
        for &e in tensor.shape() {
            push_u32(&mut bytes, e as u32);
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(r.err(format!("bad magic {magic:?}, expected {MODEL_MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(r.err(format!(
            "unsupported format version {version}, this build reads {MODEL_VERSION}"
        )));
    }
    let label = r.string("label")?;
    let config = UNetConfig {
        depth: r.u32("depth")? as usize,
        base_channels: r.u32("base_channels")? as usize,
        kernel_size: r.u32("kernel_size")? as usize,
        input_height: r.u32("input_height")? as usize,
        input_width: r.u32("input_width")? as usize,
    };
    let count = r.u32("parameter count")? as usize;
    if count > 4096 {
        return Err(r.err(format!("implausible parameter count {count}")));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(r.err(format!("parameter {name}: rank {rank} exceeds maximum")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(r.err(format!("parameter {name}: implausible size {numel}")));
        }
        let data_bytes = r.take(numel * 4, "parameter values")?;
        let data: Vec<f32> = data_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(config, label, params)
        .map_err(|e| Error::format(path.to_path_buf(), e.to_string()))
}

fn push_u32(bytes: &mut Vec<u8>, v: u32) {
    bytes.extend_from_slice(&v.to_le_bytes());
}

fn push_str(bytes: &mut Vec<u8>, s: &str) {
    push_u32(bytes, s.len() as u32);
    bytes.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: String) -> Error {
        Error::format(self.path.to_path_buf(), reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated: needed {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 4096 {
            return Err(self.err(format!("implausible {what} length {len}")));
        }
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|e| self.err(format!("{what}: invalid UTF-8: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_unet;

    fn tiny_model(label: &str) -> Model {
        let config = UNetConfig {
            depth: 1,
            base_channels: 2,
            kernel_size: 3,
            input_height: 8,
            input_width: 8,
        };
        let mut m = build_unet(&config, 77).unwrap();
        m.label = label.to_string();
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srun");
        let model = tiny_model("Dice");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.label, "Dice");
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srun");
        save_model(&tiny_model("x"), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_model(&path), Err(Error::Format { .. })),
                "cut at {cut} did not fail cleanly"
            );
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srun");
        save_model(&tiny_model("x"), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(load_model(&path).unwrap_err().to_string().contains("magic"));

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'S';
        bytes[4] = 99;
        fs::write(&path, &bytes).unwrap();
        assert!(load_model(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srun");
        save_model(&tiny_model("x"), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }
}
