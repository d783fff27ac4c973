//! Tensor archive: a UTF-8 text header followed by a packed little-endian
//! `f32` payload.
//!
//! ```text
//! supcon-archive 1
//! meta <key> <value to end of line>
//! tensor <name> f32 <d0>x<d1>x... <byte offset> <byte length>
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

const MAGIC: &str = "supcon-archive 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl TensorArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("meta entry `{k}` is not single-line")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) || name.is_empty() {
                return Err(bad(format!("tensor name `{name}` contains whitespace")));
            }
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let bytes = t.len() * 4;
            header.push_str(&format!(
                "tensor {name} f32 {} {offset} {bytes}\n",
                shape.join("x")
            ));
            offset += bytes;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("unrecognized archive magic/version"));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 || f[1] != "f32" {
                    return Err(bad(format!("malformed tensor line `{line}`")));
                }
                let shape: Vec<usize> = f[2]
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                    .collect::<Result<_>>()?;
                let offset: usize = f[3].parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
                let len: usize = f[4].parse().map_err(|_| bad(format!("bad length in `{line}`")))?;
                entries.push((f[0].to_string(), shape, offset, len));
            } else {
                return Err(bad(format!("unexpected header line `{line}`")));
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = BTreeMap::new();
        for (name, shape, offset, len) in entries {
            let n: usize = shape.iter().product();
            if len != n * 4 || offset.checked_add(len).is_none_or(|e| e > payload.len()) {
                return Err(bad(format!("tensor `{name}` lies outside the payload")));
            }
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(TensorArchive { meta, tensors })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
