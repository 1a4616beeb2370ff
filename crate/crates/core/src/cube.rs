//! Hyperspectral cubes and the `HSC1` file format.
//!
//! A file is one UTF-8 JSON header line followed by `width * height * bands`
//! little-endian `f32` values in band-sequential order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const HSC_MAGIC: &str = "HSC1";

/// Reflectance cube stored band-sequential: `data[b * H * W + y * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub wavelengths_nm: Vec<f64>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    layout: String,
    wavelengths_nm: Vec<f64>,
}

/// `bands` centers evenly spaced over 400..2500 nm.
pub fn default_wavelengths(bands: usize) -> Vec<f64> {
    match bands {
        0 => Vec::new(),
        1 => vec![400.0],
        _ => (0..bands).map(|b| 400.0 + 2100.0 * b as f64 / (bands - 1) as f64).collect(),
    }
}

impl HsiCube {
    pub fn new(width: usize, height: usize, wavelengths_nm: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        let bands = wavelengths_nm.len();
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::invalid("cube", format!("empty cube {width}x{height}x{bands}")));
        }
        if data.len() != width * height * bands {
            return Err(Error::invalid(
                "cube",
                format!("{width}x{height}x{bands} cube needs {} values, got {}", width * height * bands, data.len()),
            ));
        }
        if wavelengths_nm.windows(2).any(|w| w[0] >= w[1]) || wavelengths_nm.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("cube", "wavelengths must be finite and strictly ascending"));
        }
        Ok(Self {
            width,
            height,
            bands,
            wavelengths_nm,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, wavelengths_nm: Vec<f64>) -> Result<Self> {
        let n = width * height * wavelengths_nm.len();
        Self::new(width, height, wavelengths_nm, vec![0.0; n])
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data[band * self.plane_len() + y * self.width + x]
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn same_shape(&self, other: &HsiCube) -> bool {
        (self.width, self.height, self.bands) == (other.width, other.height, other.bands)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<HsiCube> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(
                "cube_crop",
                format!("{h}x{w} at ({y0}, {x0}) outside {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(h * w * self.bands);
        for b in 0..self.bands {
            let plane = self.band(b);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        HsiCube::new(w, h, self.wavelengths_nm.clone(), data)
    }

    /// `[1, H, W, B]` channel-last tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (h, w, bands) = (self.height, self.width, self.bands);
        let mut out = vec![T::zero(); h * w * bands];
        for b in 0..bands {
            for (p, &v) in self.band(b).iter().enumerate() {
                out[p * bands + b] = T::from_f64(v as f64);
            }
        }
        Tensor::from_vec(&[1, h, w, bands], out).expect("shape matches data")
    }

    /// Inverse of [`HsiCube::to_tensor`]; accepts `[1, H, W, B]` or `[H, W, B]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, wavelengths_nm: Vec<f64>) -> Result<HsiCube> {
        let (h, w, bands) = match t.shape() {
            &[1, h, w, b] | &[h, w, b] => (h, w, b),
            other => return Err(Error::invalid("cube", format!("expected [1, H, W, B], got {other:?}"))),
        };
        if bands != wavelengths_nm.len() {
            return Err(Error::shape("cube", t.shape(), &[1, h, w, wavelengths_nm.len()]));
        }
        let src = t.data();
        let mut data = vec![0f32; h * w * bands];
        for b in 0..bands {
            for p in 0..h * w {
                data[b * h * w + p] = src[p * bands + b].as_f64() as f32;
            }
        }
        HsiCube::new(w, h, wavelengths_nm, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            magic: HSC_MAGIC.into(),
            width: self.width,
            height: self.height,
            bands: self.bands,
            dtype: "f32".into(),
            layout: "BSQ".into(),
            wavelengths_nm: self.wavelengths_nm.clone(),
        };
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.reserve(self.data.len() * 4);
        self.data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        out.write_all(&bytes).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<HsiCube> {
        let path = path.as_ref();
        let mut input = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut line = Vec::new();
        input.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if line.pop() != Some(b'\n') {
            return Err(Error::format(path, "missing header line"));
        }
        let header: Header = serde_json::from_slice(&line).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.magic != HSC_MAGIC || header.dtype != "f32" || header.layout != "BSQ" {
            return Err(Error::format(
                path,
                format!("unsupported cube {}/{}/{}", header.magic, header.dtype, header.layout),
            ));
        }
        if header.bands != header.wavelengths_nm.len() {
            return Err(Error::format(path, "band count disagrees with wavelength list"));
        }
        let n = header.width * header.height * header.bands;
        let mut payload = Vec::with_capacity(n * 4);
        input.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        if payload.len() != n * 4 {
            return Err(Error::format(path, format!("expected {} payload bytes, found {}", n * 4, payload.len())));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        HsiCube::new(header.width, header.height, header.wavelengths_nm, data).map_err(|e| Error::format(path, e.to_string()))
    }
}
