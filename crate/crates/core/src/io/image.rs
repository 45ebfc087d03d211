//! Linear-light raster images and their file formats.
//!
//! Scene images are binary PPM (`P6`) and masks binary PGM (`P5`), 8 or 16
//! bits per sample, mapped to `[0, 1]` without any gamma curve. PNG is read
//! as well and written for previews.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
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

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[f64]) {
        let o = (y * self.width + x) * self.channels;
        self.data[o..o + self.channels].copy_from_slice(value);
    }

    /// RGB at a continuous position; pixel centres sit at `i + 0.5`, edges
    /// clamp. Single-channel images are broadcast.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let ch = c.min(self.channels - 1);
            let g = |x: usize, y: usize| self.pixel(x, y)[ch];
            *o = (1.0 - ay) * ((1.0 - ax) * g(x0, y0) + ax * g(x1, y0))
                + ay * ((1.0 - ax) * g(x0, y1) + ax * g(x1, y1));
        }
        out
    }

    /// Nearest-pixel lookup of channel 0 at a continuous position.
    pub fn sample_nearest(&self, u: f64, v: f64) -> f64 {
        let x = (u.floor().max(0.0) as usize).min(self.width - 1);
        let y = (v.floor().max(0.0) as usize).min(self.height - 1);
        self.pixel(x, y)[0]
    }

    /// Channel 0 thresholded at one half.
    pub fn to_mask(&self) -> Vec<bool> {
        self.data
            .chunks(self.channels)
            .map(|p| p[0] >= 0.5)
            .collect()
    }

    pub fn from_mask(mask: &[bool], width: usize, height: usize) -> Result<Self> {
        Self::from_data(
            width,
            height,
            1,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Reads PPM/PGM (by magic number) or PNG (by extension).
    pub fn read(path: &Path) -> Result<Self> {
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            return read_png(path);
        }
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        parse_pnm(&bytes).map_err(|m| Error::parse(path, m))
    }

    /// Writes binary PPM (3 channels) or PGM (1 channel) with 8 or 16 bits.
    pub fn write_pnm(&self, path: &Path, bits: u8) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PNM supports 1 or 3 channels, not {c}"
                )))
            }
        };
        let maxval: u32 = match bits {
            8 => 255,
            16 => 65535,
            b => return Err(Error::InvalidArgument(format!("unsupported bit depth {b}"))),
        };
        let mut out = format!("{magic}\n{} {}\n{maxval}\n", self.width, self.height).into_bytes();
        for &x in &self.data {
            let q = quantize(x, maxval);
            if bits == 8 {
                out.push(q as u8);
            } else {
                out.extend_from_slice(&(q as u16).to_be_bytes());
            }
        }
        write_bytes(path, &out)
    }

    /// 8-bit PNG preview.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PNG export supports 1, 3 or 4 channels, not {c}"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|&x| quantize(x, 255) as u8).collect();
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::parse(path, format!("png header: {e}")))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::parse(path, format!("png data: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::parse(path, format!("png finish: {e}")))
    }
}

fn quantize(x: f64, maxval: u32) -> u32 {
    (x.clamp(0.0, 1.0) * maxval as f64).round() as u32
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic {m:?}; expected binary P5 or P6")),
    };
    let num = |s: String, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let width = num(token()?, "width")?;
    let height = num(token()?, "height")?;
    let maxval = num(token()?, "maxval")?;
    if width == 0 || height == 0 {
        return Err("image has zero size".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let raster = bytes.get(start..start + n * bps).ok_or_else(|| {
        format!(
            "raster truncated: expected {} bytes, found {}",
            n * bps,
            bytes.len().saturating_sub(start)
        )
    })?;
    let scale = 1.0 / maxval as f64;
    let data = if bps == 1 {
        raster.iter().map(|&b| b as f64 * scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::parse(path, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path, "png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(path, format!("png: {e}")))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
        d => {
            return Err(Error::parse(
                path,
                format!("unsupported png bit depth {d:?}"),
            ))
        }
    };
    // drop alpha; keep gray or RGB
    let keep = if channels >= 3 { 3 } else { 1 };
    let data = samples
        .chunks_exact(channels)
        .flat_map(|p| p[..keep].to_vec())
        .collect();
    Image::from_data(w, h, keep, data)
}
