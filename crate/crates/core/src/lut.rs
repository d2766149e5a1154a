//! Learnable 3D color lookup table.
//!
//! The lattice is stored as a `[M, M, M, 3]` tensor indexed `[r, g, b, channel]`.
//! Node `(i, j, k)` sits at color `(i, j, k) * C_max / (M - 1)`.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, Backend};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SIZE: usize = 33;
pub const DEFAULT_CONTRAST: f64 = 1.2;
pub const DEFAULT_SATURATION: f64 = 1.2;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Lut3D<T> {
    size: usize,
    c_max: T,
    pub grid: Tensor<T>,
}

impl<T: Scalar> Lut3D<T> {
    /// Builds a lattice by evaluating `f` at every node color.
    pub fn from_node_fn(size: usize, c_max: T, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<Self> {
        check_size(size)?;
        let step = c_max.as_f64() / (size - 1) as f64;
        let mut data = Vec::with_capacity(size * size * size * 3);
        for i in 0..size {
            for j in 0..size {
                for k in 0..size {
                    let out = f([i as f64 * step, j as f64 * step, k as f64 * step]);
                    data.extend(out.iter().map(|&v| T::lit(v)));
                }
            }
        }
        Ok(Self {
            size,
            c_max,
            grid: Tensor::from_vec([size, size, size, 3], data)?,
        })
    }

    pub fn identity(size: usize, c_max: T) -> Result<Self> {
        Self::from_node_fn(size, c_max, |c| c)
    }

    pub fn constant(size: usize, c_max: T, value: [f64; 3]) -> Result<Self> {
        Self::from_node_fn(size, c_max, |_| value)
    }

    /// Contrast stretch about mid-gray followed by saturation about luma,
    /// each clamped to `[0, C_max]`.
    pub fn fixed_contrast_saturation(size: usize, c_max: T, contrast: f64, saturation: f64) -> Result<Self> {
        if !(contrast > 0.0 && saturation > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "contrast and saturation must be positive, got {contrast} and {saturation}"
            )));
        }
        let top = c_max.as_f64();
        Self::from_node_fn(size, c_max, |c| saturate(contrast_step(c, contrast, top), saturation, top))
    }

    pub fn from_grid(grid: Tensor<T>, c_max: T) -> Result<Self> {
        let size = kernels::check_lut_shapes([1, 3, 1, 1], grid.shape())?;
        if !grid.all_finite() {
            return Err(Error::InvalidArgument("LUT grid contains non-finite values".into()));
        }
        Ok(Self { size, c_max, grid })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn c_max(&self) -> T {
        self.c_max
    }

    /// Output triple stored at node `(i, j, k)`.
    pub fn node(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        let o = ((i * self.size + j) * self.size + k) * 3;
        let d = self.grid.data();
        [d[o], d[o + 1], d[o + 2]]
    }

    pub fn set_node(&mut self, i: usize, j: usize, k: usize, value: [T; 3]) {
        let o = ((i * self.size + j) * self.size + k) * 3;
        self.grid.data_mut()[o..o + 3].copy_from_slice(&value);
    }

    /// Continuous lattice coordinates `rgb / s` with `s = C_max / M`,
    /// clamped into `[0, M - 1]`.
    pub fn lattice_coords(&self, rgb: [T; 3]) -> Result<[T; 3]> {
        let s = self.c_max / T::lit(self.size as f64);
        let top = T::lit((self.size - 1) as f64);
        let mut out = [T::zero(); 3];
        for (o, &v) in out.iter_mut().zip(&rgb) {
            if !(v >= T::zero() && v <= self.c_max) {
                return Err(Error::OutOfRange {
                    value: v.as_f64(),
                    c_max: self.c_max.as_f64(),
                });
            }
            *o = (v / s).min(top);
        }
        Ok(out)
    }

    /// Interpolates every pixel of a clamped `[N, 3, H, W]` image.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::lut_trilinear(x, &self.grid, self.c_max)
    }

    /// Interpolates a single color.
    pub fn apply_rgb(&self, rgb: [T; 3]) -> Result<[T; 3]> {
        let x = Tensor::from_vec([1, 3, 1, 1], rgb.to_vec())?;
        let y = self.apply(&x)?;
        let d = y.data();
        Ok([d[0], d[1], d[2]])
    }

    /// Hex SHA-256 of the grid values (as little-endian `f64`) and `M`.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size as u64).to_le_bytes());
        for v in self.grid.data() {
            h.update(v.as_f64().to_le_bytes());
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Text table: header lines, then one `r g b` triple per node with the
    /// blue index varying fastest.
    pub fn to_cube_string(&self) -> String {
        let c = self.c_max.as_f64();
        let mut s = String::new();
        let _ = writeln!(s, "TITLE \"dehazeflow\"");
        let _ = writeln!(s, "LUT_3D_SIZE {}", self.size);
        let _ = writeln!(s, "DOMAIN_MIN 0 0 0");
        let _ = writeln!(s, "DOMAIN_MAX {c} {c} {c}");
        for i in 0..self.size {
            for j in 0..self.size {
                for k in 0..self.size {
                    let [r, g, b] = self.node(i, j, k);
                    let _ = writeln!(s, "{} {} {}", r, g, b);
                }
            }
        }
        s
    }

    pub fn parse_cube(text: &str) -> Result<Self> {
        let bad = |m: String| Error::UnsupportedFormat(format!("cube: {m}"));
        let mut size = None;
        let mut c_max = 1.0;
        let mut values = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or_default();
            match head {
                "TITLE" | "DOMAIN_MIN" => {}
                "LUT_3D_SIZE" => {
                    let m = parts.next().and_then(|v| v.parse::<usize>().ok());
                    size = Some(m.ok_or_else(|| bad(format!("bad size line {line:?}")))?);
                }
                "DOMAIN_MAX" => {
                    c_max = parts
                        .next()
                        .and_then(|v| v.parse::<f64>().ok())
                        .ok_or_else(|| bad(format!("bad domain line {line:?}")))?;
                }
                _ => {
                    for tok in line.split_whitespace() {
                        values.push(tok.parse::<f64>().map_err(|_| bad(format!("bad value {tok:?}")))?);
                    }
                }
            }
        }
        let size = size.ok_or_else(|| bad("missing LUT_3D_SIZE".into()))?;
        check_size(size)?;
        if values.len() != size * size * size * 3 {
            return Err(bad(format!(
                "expected {} triples, found {} values",
                size * size * size,
                values.len()
            )));
        }
        let grid = Tensor::from_vec([size, size, size, 3], values.into_iter().map(T::lit).collect())?;
        Self::from_grid(grid, T::lit(c_max))
    }

    pub fn write_cube(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_cube_string())?)
    }

    pub fn read_cube(path: &Path) -> Result<Self> {
        Self::parse_cube(&std::fs::read_to_string(path)?)
    }
}

/// `lut(clamp(x))` on any backend; `grid` must be the LUT lattice value.
pub fn apply_lut<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, grid: &B::Value, c_max: T) -> Result<B::Value> {
    let clamped = b.clamp(x, T::zero(), c_max)?;
    b.lut_trilinear(&clamped, grid, c_max)
}

fn check_size(size: usize) -> Result<()> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!("LUT size must be at least 2, got {size}")));
    }
    Ok(())
}

fn contrast_step(c: [f64; 3], alpha: f64, top: f64) -> [f64; 3] {
    let mid = 0.5 * top;
    c.map(|v| ((v - mid) * alpha + mid).clamp(0.0, top))
}

fn saturate(c: [f64; 3], beta: f64, top: f64) -> [f64; 3] {
    let l = LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2];
    c.map(|v| (l + beta * (v - l)).clamp(0.0, top))
}
