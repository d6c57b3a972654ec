//! Versioned checkpoint files.
//!
//! ```text
//! taghead-checkpoint
//! version 1
//! dtype f64
//! config {"clip_shape":[...],...}
//! tensor backbone.patch.w 16,64 0 1024
//! ...
//! end
//! <little-endian payload>
//! ```
//!
//! Each `tensor` line gives the name, shape, element offset and element count
//! into the payload. A checkpoint may be loaded at either precision; values
//! pass through `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TagHead};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const MAGIC: &str = "taghead-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes<S: Scalar>(model: &TagHead<S>) -> Vec<u8> {
    let mut head = format!(
        "{MAGIC}\nversion {CHECKPOINT_VERSION}\ndtype {}\nconfig {}\n",
        S::DTYPE,
        serde_json::to_string(&model.config).expect("model config serializes")
    );
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("tensor {name} {} {offset} {}\n", shape.join(","), t.numel()));
        offset += t.numel();
    }
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    bytes.reserve(offset * S::BYTES);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    bytes
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<TagHead<S>> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = next_line()?;
    if version != format!("version {CHECKPOINT_VERSION}") {
        return Err(bad(format!("unsupported {version:?}")));
    }
    let dtype = next_line()?
        .strip_prefix("dtype ")
        .ok_or_else(|| bad("missing dtype"))?
        .to_string();
    let width = match dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let config_line = next_line()?.strip_prefix("config ").ok_or_else(|| bad("missing config"))?.to_string();
    let config: ModelConfig = serde_json::from_str(&config_line)?;
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let f: Vec<&str> = line.split(' ').collect();
        let [tag, name, shape, offset, len] = f[..] else {
            return Err(bad(format!("malformed line {line:?}")));
        };
        if tag != "tensor" {
            return Err(bad(format!("unexpected line {line:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
        entries.push(Entry {
            name: name.to_string(),
            shape: shape.split(',').map(num).collect::<Result<_>>()?,
            offset: num(offset)?,
            len: num(len)?,
        });
    }
    let payload = &bytes[pos..];
    let total: usize = entries.iter().map(|e| e.len).sum();
    if payload.len() != total * width {
        return Err(bad(format!("payload holds {} bytes, header promises {}", payload.len(), total * width)));
    }
    let mut params = ParamStore::new();
    for e in entries {
        if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > total {
            return Err(bad(format!("inconsistent extent for {}", e.name)));
        }
        let raw = &payload[e.offset * width..(e.offset + e.len) * width];
        let data: Vec<S> = if width == S::BYTES {
            raw.chunks_exact(width).map(S::read_le).collect()
        } else if width == 8 {
            raw.chunks_exact(8)
                .map(|b| lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|b| lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect()
        };
        params.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    TagHead::from_params(config, params).map_err(|e| bad(format!("checkpoint does not match its config: {e}")))
}

pub fn save<S: Scalar>(model: &TagHead<S>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<TagHead<S>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn model() -> TagHead<f64> {
        let cfg = RunConfig::tiny(0).resolve_model(3, [2, 2, 2, 1]).unwrap();
        TagHead::init(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back: TagHead<f64> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        let m32: TagHead<f32> = m.cast();
        let back32: TagHead<f32> = from_bytes(&to_bytes(&m32)).unwrap();
        assert_eq!(back32.params, m32.params);
    }

    #[test]
    fn precision_conversion_on_load() {
        let m = model();
        let m32: TagHead<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(m32.params, m.cast::<f32>().params);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = to_bytes(&model());
        let text_end = bytes.windows(4).position(|w| w == b"end\n").unwrap();
        let mut v2 = bytes.clone();
        let at = bytes.windows(9).position(|w| w == b"version 1").unwrap();
        v2[at + 8] = b'2';
        assert!(matches!(from_bytes::<f64>(&v2), Err(Error::Checkpoint(_))));
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes::<f64>(&bytes[..text_end]).is_err());
        assert!(from_bytes::<f64>(b"hello\n").is_err());
    }
}
