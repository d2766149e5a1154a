//! Overlapping tiles with raised-cosine blending for large images.

use rayon::prelude::*;

use crate::autodiff::Eager;
use crate::error::{Error, Result};
use crate::flow::finish;
use crate::model::DehazeModel;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TILE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 32;

/// One tile span along an axis with its normalized blend weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TilePlan {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl TilePlan {
    pub fn new(tile: usize, overlap: usize) -> Result<Self> {
        if tile == 0 || overlap >= tile {
            return Err(Error::InvalidArgument(format!(
                "tile {tile} must be positive and exceed overlap {overlap}"
            )));
        }
        Ok(Self { tile, overlap })
    }

    /// Tile spans covering `[0, len)`. Interior edges ramp with a raised
    /// cosine over the actual overlap; weights are then divided by their
    /// per-position sum.
    pub fn spans(&self, len: usize) -> Vec<Span> {
        if len <= self.tile {
            return vec![Span {
                start: 0,
                len,
                weights: vec![1.0; len],
            }];
        }
        let stride = self.tile - self.overlap;
        let mut starts = Vec::new();
        let mut s = 0;
        while s + self.tile < len {
            starts.push(s);
            s += stride;
        }
        starts.push(len - self.tile);
        let raw: Vec<Vec<f64>> = starts
            .iter()
            .enumerate()
            .map(|(i, &st)| {
                let lead = if i > 0 { starts[i - 1] + self.tile - st } else { 0 };
                let trail = if i + 1 < starts.len() { st + self.tile - starts[i + 1] } else { 0 };
                (0..self.tile).map(|d| ramp(d, lead) * ramp(self.tile - 1 - d, trail)).collect()
            })
            .collect();
        let mut total = vec![0.0; len];
        for (st, w) in starts.iter().zip(&raw) {
            for (d, v) in w.iter().enumerate() {
                total[st + d] += v;
            }
        }
        starts
            .iter()
            .zip(raw)
            .map(|(&st, w)| Span {
                start: st,
                len: self.tile,
                weights: w.iter().enumerate().map(|(d, v)| v / total[st + d]).collect(),
            })
            .collect()
    }

    pub fn tile_count(&self, h: usize, w: usize) -> usize {
        self.spans(h).len() * self.spans(w).len()
    }
}

/// Raised cosine rising over the first `width` positions, strictly positive.
fn ramp(d: usize, width: usize) -> f64 {
    if d >= width {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * (d as f64 + 0.5) / width as f64).cos()
    }
}

/// Estimated peak bytes of one eager integration of an `h x w` tile:
/// input, solver stages and the widest full-resolution activations, plus a
/// third for the lower-resolution stages.
pub fn tile_bytes<T: Scalar>(width: usize, h: usize, w: usize) -> u64 {
    let per_pixel = 3 * 10 + 5 * width + 3 + 4 * width;
    (h * w * per_pixel * 4 / 3 * std::mem::size_of::<T>()) as u64
}

/// Bytes held outside the tiles: an accumulator and its clamped copy for the
/// output and for each of `extra_frames` recorded trajectory states.
pub fn frame_bytes<T: Scalar>(h: usize, w: usize, extra_frames: usize) -> u64 {
    (2 * (1 + extra_frames) * 3 * h * w * std::mem::size_of::<T>()) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TiledRun {
    pub tiles: usize,
    pub concurrent: usize,
    pub estimated_peak: u64,
}

/// How many tiles fit side by side in `budget` bytes, or an error if not
/// even one does.
pub fn schedule<T: Scalar>(width: usize, img: [usize; 2], plan: &TilePlan, budget: u64, frames: usize) -> Result<TiledRun> {
    let [h, w] = img;
    let (th, tw) = (h.min(plan.tile), w.min(plan.tile));
    let per_tile = tile_bytes::<T>(width, th, tw) + frame_bytes::<T>(th, tw, frames);
    let fixed = frame_bytes::<T>(h, w, frames);
    let tiles = plan.tile_count(h, w);
    if fixed + per_tile > budget {
        return Err(Error::InvalidArgument(format!(
            "memory budget {budget} B is below the {} B needed for one {th}x{tw} tile",
            fixed + per_tile
        )));
    }
    let concurrent = (((budget - fixed) / per_tile) as usize)
        .min(rayon::current_num_threads())
        .min(tiles)
        .max(1);
    Ok(TiledRun {
        tiles,
        concurrent,
        estimated_peak: fixed + per_tile * concurrent as u64,
    })
}

/// Runs `f` on every tile and blends each returned frame. `f` must return
/// the same number of `[1, 3, th, tw]` frames for every tile.
pub fn map_tiles<T: Scalar>(
    x: &Tensor<T>,
    plan: &TilePlan,
    concurrent: usize,
    f: impl Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>> + Sync,
) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = x.shape();
    if n != 1 {
        return Err(Error::shape("dehaze_tiled", format!("expected a single image, got batch {n}")));
    }
    let (ys, xs) = (plan.spans(h), plan.spans(w));
    if ys.len() == 1 && xs.len() == 1 {
        return f(x);
    }
    let jobs: Vec<(&Span, &Span)> = ys.iter().flat_map(|sy| xs.iter().map(move |sx| (sy, sx))).collect();
    let mut acc: Vec<Tensor<T>> = Vec::new();
    for chunk in jobs.chunks(concurrent.max(1)) {
        let results: Vec<Result<Vec<Tensor<T>>>> = chunk
            .par_iter()
            .map(|(sy, sx)| f(&x.window(sy.start, sx.start, sy.len, sx.len)))
            .collect();
        for ((sy, sx), frames) in chunk.iter().zip(results) {
            let frames = frames?;
            if acc.is_empty() {
                acc = (0..frames.len()).map(|_| Tensor::zeros([1, c, h, w])).collect();
            }
            if frames.len() != acc.len() {
                return Err(Error::InvalidArgument("tiles returned differing frame counts".into()));
            }
            for (a, fr) in acc.iter_mut().zip(&frames) {
                blend_into(a, fr, sy, sx, w);
            }
        }
    }
    Ok(acc)
}

fn blend_into<T: Scalar>(acc: &mut Tensor<T>, tile: &Tensor<T>, sy: &Span, sx: &Span, w: usize) {
    let [_, c, th, tw] = tile.shape();
    let h = acc.shape()[2];
    let (ad, td) = (acc.data_mut(), tile.data());
    for ci in 0..c {
        for y in 0..th {
            let wy = sy.weights[y];
            let row = (ci * h + sy.start + y) * w + sx.start;
            let trow = (ci * th + y) * tw;
            for x in 0..tw {
                let v = td[trow + x].as_f64() * wy * sx.weights[x];
                ad[row + x] = T::lit(ad[row + x].as_f64() + v);
            }
        }
    }
}

/// Tile-wise dehazing within a memory budget. Identical to
/// [`DehazeModel::dehaze`] when the image fits in one tile.
pub fn dehaze_tiled<T: Scalar>(model: &DehazeModel<T>, x: &Tensor<T>, plan: &TilePlan, budget: u64) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape();
    let run = schedule::<T>(model.config.width, [h, w], plan, budget, 0)?;
    let mut frames = map_tiles(x, plan, run.concurrent, |t| Ok(vec![model.dehaze(t)?]))?;
    // blend weights sum to 1 only up to rounding
    finish(&mut Eager, &frames.remove(0))
}

/// Tiled variant of [`DehazeModel::dehaze_trajectory`].
pub fn dehaze_tiled_trajectory<T: Scalar>(
    model: &DehazeModel<T>,
    x: &Tensor<T>,
    plan: &TilePlan,
    budget: u64,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let [_, _, h, w] = x.shape();
    let steps = model.config.flow.steps;
    let run = schedule::<T>(model.config.width, [h, w], plan, budget, steps)?;
    let mut frames = map_tiles(x, plan, run.concurrent, |t| {
        let (out, mut states) = model.dehaze_trajectory(t)?;
        states.insert(0, out);
        Ok(states)
    })?;
    let out = finish(&mut Eager, &frames.remove(0))?;
    let states = frames.iter().map(|f| finish(&mut Eager, f)).collect::<Result<_>>()?;
    Ok((out, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LutMode, ModelConfig};
    use crate::purifier::PurifierNet;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn weights_sum_to_one(len in 1usize..700, tile in 8usize..300, overlap_frac in 0.0f64..0.9) {
            let overlap = ((tile as f64) * overlap_frac) as usize;
            let plan = TilePlan::new(tile, overlap.min(tile - 1)).unwrap();
            let spans = plan.spans(len);
            let mut sum = vec![0.0; len];
            for s in &spans {
                prop_assert!(s.start + s.len <= len);
                for (d, w) in s.weights.iter().enumerate() {
                    prop_assert!(*w > 0.0);
                    sum[s.start + d] += w;
                }
            }
            for v in sum {
                prop_assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    fn pointwise_model() -> DehazeModel<f64> {
        let cfg = ModelConfig {
            width: 4,
            lut_size: 5,
            lut_mode: LutMode::Fixed,
            ..ModelConfig::default()
        };
        DehazeModel::with_net(cfg, PurifierNet::zeroed(4).unwrap()).unwrap()
    }

    #[test]
    fn pointwise_field_is_tiling_invariant() {
        let m = pointwise_model();
        let x = Tensor::<f64>::from_fn([1, 3, 37, 53], |[_, c, y, xx]| 0.2 + 0.1 * c as f64 + 0.004 * (y + xx) as f64);
        let whole = m.dehaze(&x).unwrap();
        let tiled = dehaze_tiled(&m, &x, &TilePlan::new(16, 6).unwrap(), 1 << 30).unwrap();
        assert!(whole.max_abs_diff(&tiled) < 1e-12);
    }

    #[test]
    fn single_tile_is_bit_identical() {
        let cfg = ModelConfig {
            width: 4,
            lut_size: 5,
            ..ModelConfig::default()
        };
        let m = DehazeModel::<f32>::new(cfg, 2).unwrap();
        let x = Tensor::<f32>::from_fn([1, 3, 20, 30], |[_, c, y, xx]| ((c + y * xx) % 7) as f32 / 7.0);
        let whole = m.dehaze(&x).unwrap();
        assert_eq!(dehaze_tiled(&m, &x, &TilePlan::default(), 1 << 30).unwrap(), whole);
        let (out, states) = dehaze_tiled_trajectory(&m, &x, &TilePlan::default(), 1 << 30).unwrap();
        assert_eq!(out, whole);
        assert_eq!(states.len(), m.config.flow.steps);
    }

    #[test]
    fn zero_field_returns_input() {
        // zero network and b = 0 give f(x) = x^2 - x, which vanishes on {0, 1}
        let cfg = ModelConfig {
            width: 4,
            lut_size: 5,
            lut_mode: LutMode::Removed,
            ..ModelConfig::default()
        };
        let mut net = PurifierNet::<f64>::zeroed(4).unwrap();
        net.weights.scatter_bias = Tensor::scalar(0.0);
        let m = DehazeModel::with_net(cfg, net).unwrap();
        let x = Tensor::<f64>::from_fn([1, 3, 40, 41], |[_, c, y, xx]| ((c * 5 + y * 3 + xx) % 2) as f64);
        let out = dehaze_tiled(&m, &x, &TilePlan::new(16, 5).unwrap(), 1 << 30).unwrap();
        // blend weights sum to 1 up to rounding
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn budget_is_enforced() {
        let plan = TilePlan::default();
        assert!(schedule::<f32>(16, [2160, 3840], &plan, 1 << 20, 0).is_err());
        let run = schedule::<f32>(16, [2160, 3840], &plan, 1 << 30, 0).unwrap();
        assert_eq!(run.tiles, 5 * 8);
        assert!(run.estimated_peak <= 1 << 30);
        assert!(TilePlan::new(32, 32).is_err());
    }
}
