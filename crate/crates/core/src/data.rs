//! Images, label maps and segmentation samples, with their file formats.
//!
//! Raw images are little-endian `f32` arrays in HWC order behind a 16-byte
//! header: magic `FCIM`, then `h`, `w`, `channels` as `u32`. Label maps are
//! 8-bit palette PNGs whose palette index is the class id; 255 marks ignored
//! pixels.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::IGNORE;

pub const IMAGE_MAGIC: &[u8; 4] = b"FCIM";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// HWC order.
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        Self {
            h,
            w,
            channels,
            data: vec![0.0; h * w * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * self.channels + c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let start = (y * self.w + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(IMAGE_MAGIC);
        for v in [self.h, self.w, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len() as u64, "truncated image header"));
        }
        if &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::format(0, "bad image magic"));
        }
        let read = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w, channels) = (read(4), read(8), read(12));
        let n = h * w * channels;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::format(
                bytes.len() as u64,
                format!("expected {} bytes of pixel data", 4 * n),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            h,
            w,
            channels,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Class colours for the indexed PNG palette (PASCAL VOC bit-interleaving).
pub fn palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        if i == IGNORE as u32 {
            (r, g, b) = (224, 224, 192);
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Distinct non-ignore labels, background included.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8)
            .filter(|&v| v != IGNORE && seen[v as usize])
            .collect()
    }

    pub fn write_png<W: Write>(&self, out: W) -> Result<()> {
        let mut enc = png::Encoder::new(out, self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette());
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        self.write_png(f)
    }

    pub fn read_png<R: Read>(input: R) -> Result<Self> {
        let mut dec = png::Decoder::new(input);
        dec.set_transformations(png::Transformations::IDENTITY);
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight
            || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
        {
            return Err(Error::Png(format!(
                "label maps must be 8-bit indexed, got {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h);
        for row in buf[..info.buffer_size()].chunks(info.line_size) {
            data.extend_from_slice(&row[..w]);
        }
        Ok(Self { h, w, data })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::read_png(File::open(path)?)
    }
}

/// Where the image side of a sample comes from.
#[derive(Clone, Debug)]
pub enum SampleSource {
    Pixels(Arc<Image>),
    /// Embeddings are looked up by sample key in an export file.
    External,
}

#[derive(Clone, Debug)]
pub struct SegSample {
    pub key: String,
    pub source: SampleSource,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn image(&self) -> Option<&Image> {
        match &self.source {
            SampleSource::Pixels(img) => Some(img),
            SampleSource::External => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_preserves_indices() {
        let mut lm = LabelMap::filled(5, 7, 0);
        lm.data[3] = 4;
        lm.data[10] = IGNORE;
        lm.data[34] = 17;
        let mut bytes = Vec::new();
        lm.write_png(&mut bytes).unwrap();
        let back = LabelMap::read_png(bytes.as_slice()).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.classes(), vec![0, 4, 17]);
    }

    #[test]
    fn image_header_is_sixteen_bytes() {
        let mut img = Image::zeros(2, 3, 3);
        img.data[5] = 1.5;
        let bytes = img.to_bytes();
        assert_eq!(bytes.len(), 16 + 2 * 3 * 3 * 4);
        assert_eq!(&bytes[..4], b"FCIM");
        assert_eq!(Image::from_bytes(&bytes).unwrap(), img);
        assert!(Image::from_bytes(&bytes[..20]).is_err());
    }
}
