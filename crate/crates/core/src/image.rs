//! RGB float images and their on-disk forms (binary PPM, PNG, raw f64 dumps).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height × width × 3` image with linear values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidShape(format!("image data has {} values, expected {}", data.len(), width * height * 3)));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    /// 8-bit quantisation used by every writer: `round(255 · clamp(c, 0, 1))`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&c| quantize(c)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_data(width, height, data)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_ppm(&fs::read(path)?)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidParameter(format!("malformed PPM: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("only binary P6 is supported"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Self::from_rgb8(w, h, &bytes[pos..pos + need])
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::InvalidState(format!("png header: {e}")))?;
        writer.write_image_data(&self.to_rgb8()).map_err(|e| Error::InvalidState(format!("png data: {e}")))?;
        Ok(())
    }

    /// Reads 8-bit RGB or RGBA PNG; alpha is dropped.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let bad = |m: String| Error::InvalidParameter(format!("unsupported PNG: {m}"));
        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
        let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(bad(format!("bit depth {:?}", info.bit_depth)));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            other => return Err(bad(format!("colour type {other:?}"))),
        };
        Self::from_rgb8(w, h, &rgb)
    }

    /// Reads PNG by extension, PPM otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Self::read_png(path),
            _ => Self::read_ppm(path),
        }
    }

    /// Writes PPM, or PNG when the extension says so.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            _ => self.write_ppm(path),
        }
    }
}

#[inline]
pub fn quantize(c: f64) -> u8 {
    (255.0 * c.clamp(0.0, 1.0)).round() as u8
}

/// Writes `values` as little-endian f64 plus a `<path>.json` sidecar holding the shape.
pub fn write_raw_f64(path: impl AsRef<Path>, shape: &[usize], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(Error::InvalidShape(format!("shape {shape:?} holds {expected} values, got {}", values.len())));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = path.with_extension("json");
    fs::write(sidecar, serde_json::to_vec(&serde_json::json!({ "shape": shape, "dtype": "f64le" }))?)?;
    Ok(())
}

pub fn read_raw_f64(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
    let shape: Vec<usize> = serde_json::from_value(meta["shape"].clone())?;
    let bytes = fs::read(path)?;
    let values = decode_f64_le(&bytes)?;
    if values.len() != shape.iter().product::<usize>() {
        return Err(Error::InvalidShape(format!("raw dump does not match shape {shape:?}")));
    }
    Ok((shape, values))
}

pub(crate) fn decode_f64_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidShape("byte length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub(crate) fn encode_f64_le(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
