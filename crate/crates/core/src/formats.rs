//! Image container and the on-disk map formats: 8-bit PNG, PFM and the
//! raw two-channel flow format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with the top row first and interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let k = (y * self.width + x) * self.channels;
        &self.data[k..k + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let k = (y * self.width + x) * self.channels;
        &mut self.data[k..k + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn channel(&self, c: usize) -> Self {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Values rounded to the nearest 8-bit level after clamping to `[0, 1]`.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

/// Writes a gray (1 channel) or RGB (3 channel) image as 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Format(format!("cannot write {c}-channel PNG"))),
    };
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(format_err)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(format_err)?;
    writer.finish().map_err(format_err)?;
    Ok(())
}

/// Reads an 8-bit gray or RGB PNG into values in `[0, 1]`. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(format_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(format_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("only 8-bit PNGs are supported".into()));
    }
    let (stored, kept) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Format("indexed PNGs are not supported".into())),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * kept);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..kept {
                data.push(f64::from(row[x * stored + c]) / 255.0);
            }
        }
    }
    Image::new(w, h, kept, data)
}

/// Writes a 1- or 3-channel PFM: little-endian (negative scale), rows
/// stored bottom to top.
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Format(format!("cannot write {c}-channel PFM"))),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    let row_len = img.width * img.channels;
    for y in (0..img.height).rev() {
        for &v in &img.data[y * row_len..(y + 1) * row_len] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    String::from_utf8(token).map_err(format_err)
}

/// Reads a PFM of either byte order.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let channels = match header_token(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Format(format!("not a PFM file (tag {t:?})"))),
    };
    let w: usize = header_token(&mut r)?.parse().map_err(format_err)?;
    let h: usize = header_token(&mut r)?.parse().map_err(format_err)?;
    let scale: f64 = header_token(&mut r)?.parse().map_err(format_err)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be non-zero".into()));
    }
    let little = scale < 0.0;
    let row_len = w * channels;
    let mut bytes = vec![0u8; row_len * h * 4];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; row_len * h];
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (stored_row, col) = (k / row_len, k % row_len);
        data[(h - 1 - stored_row) * row_len + col] = f64::from(v);
    }
    Image::new(w, h, channels, data)
}

const FLOW_MAGIC: &[u8; 4] = b"NSF1";

/// Writes a 2-channel flow map: magic, u32 width, height, channels, then
/// little-endian f32 values, top row first.
pub fn write_flow(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 2 {
        return Err(Error::Format("flow maps have two channels".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FLOW_MAGIC)?;
    for v in [img.width, img.height, img.channels] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in &img.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::Format(format!("{} is not a flow file", path.display())));
    }
    let word = |k: usize| {
        u32::from_le_bytes([bytes[4 * k], bytes[4 * k + 1], bytes[4 * k + 2], bytes[4 * k + 3]]) as usize
    };
    let (w, h, c) = (word(1), word(2), word(3));
    if c != 2 || bytes.len() != 16 + 4 * w * h * c {
        return Err(Error::Format("flow file size does not match its header".into()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Image::new(w, h, c, data)
}
