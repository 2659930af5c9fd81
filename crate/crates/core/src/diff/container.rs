//! Named-array container used for parameter stores and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BIDP"
//! 4       2     version (u16) = 1
//! 6       2     reserved (u16) = 0
//! 8       4     manifest length in bytes (u32)
//! 12      m     manifest, UTF-8 text, one record per line:
//!                 meta <key> <value to end of line>
//!                 array <name> <ndim> <dim0> <dim1> ...
//! 12+m    4*P   payload: every array in manifest order, f32 little-endian
//! ```
//!
//! Keys and array names contain no whitespace; metadata values contain no
//! newline. The file size is exactly `12 + m + 4 * (total elements)`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"BIDP";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if !valid_token(&name) {
            return Err(Error::InvalidArgument(format!(
                "array name `{name}` must be a non-empty token"
            )));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "array `{name}` has shape {shape:?} but {} values",
                data.len()
            )));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate array `{name}`")));
        }
        self.arrays.push(ArrayEntry { name, shape, data });
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn array(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn take_array(&mut self, name: &str) -> Option<ArrayEntry> {
        let idx = self.arrays.iter().position(|a| a.name == name)?;
        Some(self.arrays.remove(idx))
    }

    fn manifest(&self) -> Result<String> {
        let mut m = String::new();
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "metadata entry `{k}` is not serializable"
                )));
            }
            m.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            m.push_str(&format!("array {} {} {}\n", a.name, a.shape.len(), dims.join(" ")));
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest()?;
        let total: usize = self.arrays.iter().map(|a| a.data.len()).sum();
        let mut out = Vec::with_capacity(12 + manifest.len() + 4 * total);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < 12 {
            return Err(bad("truncated header".into()));
        }
        if &bytes[0..4] != CONTAINER_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let manifest = bytes
            .get(12..12 + mlen)
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let mut c = Container::new();
        let mut shapes = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(key)) => {
                    c.meta.insert(key.to_string(), parts.next().unwrap_or("").to_string());
                }
                (Some("array"), Some(name)) => {
                    let rest = parts.next().unwrap_or("");
                    let nums: std::result::Result<Vec<usize>, _> =
                        rest.split_whitespace().map(str::parse::<usize>).collect();
                    let nums = nums.map_err(|_| bad(format!("manifest line {}: bad dims", lineno + 1)))?;
                    let (&ndim, dims) = nums
                        .split_first()
                        .ok_or_else(|| bad(format!("manifest line {}: missing ndim", lineno + 1)))?;
                    if dims.len() != ndim {
                        return Err(bad(format!("manifest line {}: ndim mismatch", lineno + 1)));
                    }
                    shapes.push((name.to_string(), dims.to_vec()));
                }
                _ => return Err(bad(format!("manifest line {}: unrecognized record", lineno + 1))),
            }
        }
        let mut offset = 12 + mlen;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            let chunk = bytes
                .get(offset..end)
                .ok_or_else(|| bad(format!("payload truncated in array `{name}`")))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            c.push_array(name, shape, data)?;
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_and_size() {
        let mut c = Container::new();
        c.set_meta("epoch", 3);
        c.push_array("w", vec![2, 3], vec![1.0; 6]).unwrap();
        c.push_array("b", vec![2], vec![-0.5, f32::MIN_POSITIVE]).unwrap();
        let bytes = c.to_bytes().unwrap();
        let manifest = "meta epoch 3\narray w 2 2 3\narray b 1 2\n";
        assert_eq!(bytes.len(), 12 + manifest.len() + 4 * 8);
        assert_eq!(&bytes[0..4], b"BIDP");
        assert_eq!(&bytes[12..12 + manifest.len()], manifest.as_bytes());
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.push_array("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = c.to_bytes().unwrap();
        bytes.pop();
        assert!(Container::from_bytes(&bytes, Path::new("mem")).is_err());
        let mut bytes = c.to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }
}
