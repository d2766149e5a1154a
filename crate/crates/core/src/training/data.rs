//! Procedural clean images and synthetic haze.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    SmoothField,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Gradient, Pattern::Checkerboard, Pattern::SmoothField];
}

/// A `[1, 3, h, w]` clean image in `[0, 1]`.
pub fn clean_image<T: Scalar>(pattern: Pattern, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<T> {
    match pattern {
        Pattern::Gradient => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.5));
            let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
            let span = (h.max(2) - 1) as f64 * dy.abs() + (w.max(2) - 1) as f64 * dx.abs();
            let origin =
                if dy < 0.0 { (h.max(1) - 1) as f64 * -dy } else { 0.0 } + if dx < 0.0 { (w.max(1) - 1) as f64 * -dx } else { 0.0 };
            Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
                let s = ((y as f64 * dy + x as f64 * dx + origin) / span).clamp(0.0, 1.0);
                T::lit(lo[c] + (hi[c] - lo[c]) * s)
            })
        }
        Pattern::Checkerboard => {
            let cell = rng.random_range(3..9usize);
            let (rows, cols) = (h.div_ceil(cell), w.div_ceil(cell));
            let colors: Vec<f64> = (0..rows * cols * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| T::lit(colors[((y / cell) * cols + x / cell) * 3 + c]))
        }
        Pattern::SmoothField => smooth_field(3, h, w, 0.0, 1.0, rng),
    }
}

/// Bilinearly interpolated random control lattice, per channel, with
/// values in `[lo, hi]`.
pub fn smooth_field<T: Scalar>(channels: usize, h: usize, w: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    const G: usize = 4;
    let ctrl: Vec<f64> = (0..channels * G * G).map(|_| rng.random_range(lo..=hi)).collect();
    let coord = |i: usize, n: usize| if n <= 1 { 0.0 } else { i as f64 * (G - 1) as f64 / (n - 1) as f64 };
    Tensor::from_fn([1, channels, h, w], |[_, c, y, x]| {
        let (u, v) = (coord(y, h), coord(x, w));
        let (i0, j0) = ((u.floor() as usize).min(G - 2), (v.floor() as usize).min(G - 2));
        let (fu, fv) = (u - i0 as f64, v - j0 as f64);
        let at = |i: usize, j: usize| ctrl[(c * G + i) * G + j];
        let top = at(i0, j0) * (1.0 - fv) + at(i0, j0 + 1) * fv;
        let bot = at(i0 + 1, j0) * (1.0 - fv) + at(i0 + 1, j0 + 1) * fv;
        T::lit(top * (1.0 - fu) + bot * fu)
    })
}

/// `I = J t + A (1 - t)`. `t` is `[1, 1, 1, 1]` (constant) or
/// `[N, 1, H, W]` (per pixel, shared across channels).
pub fn synth_haze<T: Scalar>(clean: &Tensor<T>, a: T, t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = clean.shape();
    let ts = t.shape();
    let per_pixel = ts == [n, 1, h, w];
    if !(per_pixel || ts == [1, 1, 1, 1]) {
        return Err(Error::shape(
            "synth_haze",
            format!("transmission {ts:?} does not fit image {:?}", clean.shape()),
        ));
    }
    Ok(Tensor::from_fn([n, c, h, w], |[ni, ci, y, x]| {
        let tv = if per_pixel { t.at([ni, 0, y, x]) } else { t.item() };
        clean.at([ni, ci, y, x]) * tv + a * (T::one() - tv)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub hazy: Tensor<T>,
    pub clean: Tensor<T>,
}

/// Settings of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeSpec {
    pub airlight: (f64, f64),
    pub transmission: (f64, f64),
    /// Probability of a spatially varying transmission map.
    pub smooth_probability: f64,
}

impl Default for HazeSpec {
    fn default() -> Self {
        Self {
            airlight: (0.7, 1.0),
            transmission: (0.3, 0.8),
            smooth_probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<T> {
    pub pairs: Vec<Pair<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// `count` pairs of `h x w` images cycling through the clean patterns.
    pub fn synthetic(count: usize, h: usize, w: usize, spec: HazeSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let clean = clean_image::<T>(Pattern::ALL[i % Pattern::ALL.len()], h, w, &mut rng);
            let a = T::lit(rng.random_range(spec.airlight.0..=spec.airlight.1));
            let t = if rng.random_bool(spec.smooth_probability) {
                smooth_field(1, h, w, spec.transmission.0, spec.transmission.1, &mut rng)
            } else {
                Tensor::scalar(T::lit(rng.random_range(spec.transmission.0..=spec.transmission.1)))
            };
            let hazy = synth_haze(&clean, a, &t)?;
            pairs.push(Pair { hazy, clean });
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stacks the selected pairs into `[B, 3, H, W]` tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let hazy: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.pairs[i].hazy).collect();
        let clean: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.pairs[i].clean).collect();
        Ok((stack(&hazy)?, stack(&clean)?))
    }
}

/// Concatenates tensors along the batch axis.
pub fn stack<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::EmptyDataset)?.shape();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    let mut n = 0;
    for p in parts {
        let s = p.shape();
        if s[1..] != first[1..] {
            return Err(Error::shape("stack", format!("{s:?} vs {first:?}")));
        }
        n += s[0];
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec([n, first[1], first[2], first[3]], data)
}
