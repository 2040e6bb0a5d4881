//! Embedding export files (`FCEM`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FCEM" | u16 version (=1) | u32 d | u32 h_p | u32 w_p
//! repeated until EOF:
//!     u32 key_len | key (UTF-8) | u32 count | count × f32
//! ```
//!
//! Keys are `text/<class name>`, `img/<sample key>/g` (d values) and
//! `img/<sample key>/H` (h_p·w_p·d values, row-major patches).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const EXPORT_MAGIC: &[u8; 4] = b"FCEM";
pub const EXPORT_VERSION: u16 = 1;
const HEADER_LEN: usize = 18;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingExport {
    pub d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub text: BTreeMap<String, Vec<f32>>,
    pub global: BTreeMap<String, Vec<f32>>,
    pub patches: BTreeMap<String, Vec<f32>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl EmbeddingExport {
    pub fn new(d: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            d,
            grid_h,
            grid_w,
            ..Default::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn insert_text(&mut self, name: &str, values: Vec<f32>) -> Result<()> {
        if values.len() != self.d {
            return Err(Error::Dimension(format!(
                "text embedding `{name}` has {} values, expected d={}",
                values.len(),
                self.d
            )));
        }
        self.text.insert(name.to_string(), values);
        Ok(())
    }

    pub fn insert_image(&mut self, key: &str, g: Vec<f32>, h: Vec<f32>) -> Result<()> {
        if g.len() != self.d || h.len() != self.tokens() * self.d {
            return Err(Error::Dimension(format!(
                "image `{key}` embeddings have {}/{} values, expected {}/{}",
                g.len(),
                h.len(),
                self.d,
                self.tokens() * self.d
            )));
        }
        self.global.insert(key.to_string(), g);
        self.patches.insert(key.to_string(), h);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EXPORT_MAGIC);
        out.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
        for v in [self.d, self.grid_h, self.grid_w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut put = |key: &str, values: &[f32]| {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, v) in &self.text {
            put(&format!("text/{name}"), v);
        }
        for (key, g) in &self.global {
            put(&format!("img/{key}/g"), g);
            put(&format!("img/{key}/H"), &self.patches[key]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != EXPORT_MAGIC {
            return Err(Error::format(0, "bad magic, expected FCEM"));
        }
        let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
        if version != EXPORT_VERSION {
            return Err(Error::UnsupportedVersion(version as u32));
        }
        let d = cur.u32("header")? as usize;
        let grid_h = cur.u32("header")? as usize;
        let grid_w = cur.u32("header")? as usize;
        debug_assert_eq!(cur.pos, HEADER_LEN);
        let mut out = Self::new(d, grid_h, grid_w);

        while cur.pos < bytes.len() {
            let entry_at = cur.pos as u64;
            let key_len = cur.u32("key length")? as usize;
            let key = std::str::from_utf8(cur.take(key_len, "key")?)
                .map_err(|_| Error::format(entry_at + 4, "key is not UTF-8"))?
                .to_string();
            let count = cur.u32("tensor length")? as usize;
            let raw = cur.take(count * 4, "tensor")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(name) = key.strip_prefix("text/") {
                out.insert_text(name, values)?;
            } else if let Some(rest) = key.strip_prefix("img/") {
                if let Some(sample) = rest.strip_suffix("/g") {
                    if count != d {
                        return Err(Error::Dimension(format!(
                            "`{key}` has {count} values but d={d}"
                        )));
                    }
                    out.global.insert(sample.to_string(), values);
                } else if let Some(sample) = rest.strip_suffix("/H") {
                    if count != grid_h * grid_w * d {
                        return Err(Error::Dimension(format!(
                            "`{key}` has {count} values but the grid needs {}",
                            grid_h * grid_w * d
                        )));
                    }
                    out.patches.insert(sample.to_string(), values);
                } else {
                    return Err(Error::format(entry_at, format!("unknown image key `{key}`")));
                }
            } else {
                return Err(Error::format(entry_at, format!("unknown key `{key}`")));
            }
        }
        if let Some(k) = out
            .global
            .keys()
            .find(|k| !out.patches.contains_key(*k))
            .or_else(|| out.patches.keys().find(|k| !out.global.contains_key(*k)))
        {
            return Err(Error::format(
                bytes.len() as u64,
                format!("sample `{k}` lacks its g or H tensor"),
            ));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads an export file into provider state.
pub fn load_embedding_export(path: &Path) -> Result<EmbeddingExport> {
    let bytes = std::fs::read(path)?;
    EmbeddingExport::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingExport {
        let mut e = EmbeddingExport::new(2, 1, 2);
        e.insert_text("cat", vec![0.5, -0.25]).unwrap();
        e.insert_text("dog", vec![1.0, 2.0]).unwrap();
        e.insert_image("s0", vec![0.1, 0.2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        e
    }

    #[test]
    fn round_trip_is_identical() {
        let e = sample();
        let back = EmbeddingExport::from_bytes(&e.to_bytes()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn version_99_is_unsupported() {
        let mut bytes = sample().to_bytes();
        bytes[4..6].copy_from_slice(&99u16.to_le_bytes());
        assert!(matches!(
            EmbeddingExport::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingExport::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_tensor_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match EmbeddingExport::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > HEADER_LEN as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn text_width_differing_from_image_width_is_rejected() {
        let mut bytes = EmbeddingExport::new(2, 1, 2).to_bytes();
        let key = b"text/sofa";
        bytes.extend_from_slice(&(key.len() as u32).to_le_bytes());
        bytes.extend_from_slice(key);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            EmbeddingExport::from_bytes(&bytes),
            Err(Error::Dimension(_))
        ));
    }
}
