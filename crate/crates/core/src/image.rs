//! Float images with PNG and PFM I/O.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major float image, top-left origin, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Keeps the first `n` channels.
    pub fn take_channels(&self, n: usize) -> Result<ImageF> {
        if n > self.channels {
            return Err(Error::Shape(format!("cannot take {n} of {} channels", self.channels)));
        }
        let data = self.data.chunks_exact(self.channels).flat_map(|p| p[..n].iter().copied()).collect();
        ImageF::new(self.width, self.height, n, data)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<ImageF> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let mut out = ImageF::zeros(w, h, c);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(x, y);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.pixel(x * factor + dx, y * factor + dy);
                        for k in 0..c {
                            dst[k] += src[k] * norm;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// 8-bit RGBA PNG; one- and three-channel images get an opaque alpha.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut buf = Vec::with_capacity(self.width * self.height * 4);
        for p in self.data.chunks_exact(self.channels) {
            let rgba = match self.channels {
                1 => [p[0], p[0], p[0], 1.0],
                3 => [p[0], p[1], p[2], 1.0],
                4 => [p[0], p[1], p[2], p[3]],
                c => return Err(Error::Format(format!("cannot write {c}-channel PNG"))),
            };
            buf.extend(rgba.map(q));
        }
        image::save_buffer(path, &buf, self.width as u32, self.height as u32, image::ColorType::Rgba8)?;
        Ok(())
    }

    /// Loads any PNG as RGBA in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<ImageF> {
        let img = image::open(path)?.to_rgba8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        ImageF::new(w as usize, h as usize, 4, data)
    }

    /// Color PFM (`PF`, little-endian, rows bottom-to-top). Alpha is dropped.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        if self.channels < 3 && self.channels != 1 {
            return Err(Error::Format(format!("cannot write {}-channel PFM", self.channels)));
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let header = format!("PF\n{} {}\n-1.0\n", self.width, self.height);
        let mut bytes = header.into_bytes();
        bytes.reserve(self.width * self.height * 12);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                let rgb = if self.channels == 1 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
                for v in rgb {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<ImageF> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        // Header: three whitespace-separated tokens lines, then one whitespace byte.
        let mut tokens = Vec::new();
        let mut pos = 0;
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match tokens[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("not a PFM file")),
        };
        let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
        let n = width * height * channels;
        if bytes.len() < pos + n * 4 {
            return Err(bad("truncated pixel data"));
        }
        let mut data = vec![0.0; n];
        for (k, chunk) in bytes[pos..pos + n * 4].chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let row = k / (width * channels);
            let rest = k % (width * channels);
            data[(height - 1 - row) * width * channels + rest] = v as f64;
        }
        ImageF::new(width, height, channels, data)
    }

    /// Picks the loader from the file extension.
    pub fn load(path: &Path) -> Result<ImageF> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => Self::load_pfm(path),
            Some("png") => Self::load_png(path),
            _ => Err(Error::Format(format!("unknown image type: {}", path.display()))),
        }
    }

    /// Picks the writer from the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => self.save_pfm(path),
            Some("png") => self.save_png(path),
            _ => Err(Error::Format(format!("unknown image type: {}", path.display()))),
        }
    }
}
