//! Raw and normalized image buffers plus PNG/PPM input and PPM output.
//!
//! Two buffer types keep the pre/post-normalization distinction in the type
//! system: [`ImageBuffer`] holds row-major u8 samples straight from decode,
//! [`Patch`] holds row-major f64 samples after `[0,1]` scaling and channel
//! normalization.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MontageError, Result};

/// ImageNet channel normalization constants.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// 3-channel 8-bit image, row-major interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "buffer size mismatch");
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Extract the axis-aligned subimage `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> ImageBuffer {
        assert!(x0 < x1 && x1 <= self.width && y0 < y1 && y1 <= self.height);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y1 {
            let row = (y * self.width + x0) * 3..(y * self.width + x1) * 3;
            data.extend_from_slice(&self.data[row]);
        }
        ImageBuffer::new(w, h, data)
    }
}

/// 3-channel real-valued patch, row-major interleaved, normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "patch size mismatch");
        Patch {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Patch {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set_sample(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Patch {
        assert!(x0 < x1 && x1 <= self.width && y0 < y1 && y1 <= self.height);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y1 {
            let row = (y * self.width + x0) * 3..(y * self.width + x1) * 3;
            data.extend_from_slice(&self.data[row]);
        }
        Patch::new(w, h, data)
    }
}

/// Convert to `[0,1]` reals then normalize per channel.
pub fn normalize(img: &ImageBuffer) -> Patch {
    let mut data = Vec::with_capacity(img.data.len());
    for (i, &v) in img.data.iter().enumerate() {
        let c = i % 3;
        data.push((v as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c]);
    }
    Patch::new(img.width, img.height, data)
}

/// Undo channel normalization and quantize back to u8 for inspection output.
pub fn denormalize(patch: &Patch) -> ImageBuffer {
    let data = patch
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % 3;
            ((v * CHANNEL_STD[c] + CHANNEL_MEAN[c]) * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    ImageBuffer::new(patch.width, patch.height, data)
}

/// Load a PNG or PPM image as a 3-channel buffer; grayscale sources are
/// replicated across channels.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|source| MontageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        return read_pnm(&bytes, path);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| MontageError::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(ImageBuffer::new(
        rgb.width() as usize,
        rgb.height() as usize,
        rgb.into_raw(),
    ))
}

fn read_pnm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let err = |m: &str| MontageError::ImageDecode {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let gray = bytes[1] == b'5';
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PNM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err("bad PNM header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err("only maxval 255 PNM supported"));
    }
    pos += 1; // single whitespace after maxval
    let samples = width * height * if gray { 1 } else { 3 };
    if bytes.len() < pos + samples {
        return Err(err("truncated PNM payload"));
    }
    let raw = &bytes[pos..pos + samples];
    let data = if gray {
        raw.iter().flat_map(|&v| [v, v, v]).collect()
    } else {
        raw.to_vec()
    };
    Ok(ImageBuffer::new(width, height, data))
}

/// Write a binary PPM (P6).
pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height).unwrap();
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|source| MontageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a max-normalized grayscale heatmap as PPM (equal channels).
pub fn write_heatmap_ppm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut data = Vec::with_capacity(values.len() * 3);
    for &v in values {
        let g = (v * scale).round().clamp(0.0, 255.0) as u8;
        data.extend_from_slice(&[g, g, g]);
    }
    write_ppm(path, &ImageBuffer::new(width, height, data))
}
