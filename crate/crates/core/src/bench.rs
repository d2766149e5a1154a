//! Timing, MAC and memory report for one configured integration.

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Eager;
use crate::error::{Error, Result};
use crate::flow;
use crate::model::{vector_field, DehazeModel};
use crate::purifier::purifier_macs;
use crate::tensor::{Scalar, Tensor};
use crate::tiling::tile_bytes;

/// MACs of one trilinear lookup per pixel: 8 corners times 3 channels.
pub const LUT_MACS_PER_PIXEL: u64 = 24;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub solver: String,
    pub steps: usize,
    pub threads: usize,
    pub field_evals: usize,
    pub macs_per_eval: u64,
    pub total_macs: u64,
    /// Seconds per solver step, median over repeats.
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub estimated_peak_bytes: u64,
    pub measured_peak_bytes: Option<u64>,
}

/// MACs of one field evaluation on an `h x w` image.
pub fn field_macs<T: Scalar>(model: &DehazeModel<T>, h: usize, w: usize) -> u64 {
    let lut = if model.lut_active() {
        LUT_MACS_PER_PIXEL * (h * w) as u64
    } else {
        0
    };
    purifier_macs(model.config.width, h, w) + lut
}

/// Peak resident set size of this process (`VmHWM`), where available.
pub fn peak_rss_bytes() -> Option<u64> {
    proc_status_kib("VmHWM").map(|k| k * 1024)
}

/// Current resident set size (`VmRSS`), where available.
pub fn rss_bytes() -> Option<u64> {
    proc_status_kib("VmRSS").map(|k| k * 1024)
}

fn proc_status_kib(key: &str) -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    s.lines().find(|l| l.starts_with(key))?.split_whitespace().nth(1)?.parse().ok()
}

/// Integrates `x` `repeats` times on a dedicated pool of `threads` threads
/// and reports per-step medians. Field evaluations are counted, not derived.
pub fn bench<T: Scalar>(model: &DehazeModel<T>, x: &Tensor<T>, repeats: usize, threads: usize) -> Result<BenchReport> {
    let [_, _, h, w] = x.shape();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let cfg = model.config.flow;
    let grid = model.lut_active().then_some(&model.lut.grid);
    let lambda = T::lit(cfg.lambda);
    let c_max = model.lut.c_max();
    let weights = &model.net.weights;

    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); cfg.steps];
    let mut totals = Vec::new();
    let mut evals = 0;
    pool.install(|| -> Result<()> {
        for _ in 0..repeats.max(1) {
            let mut count = 0usize;
            let field = |b: &mut Eager, v: &Tensor<T>, _t: T| {
                count += 1;
                vector_field(b, weights, grid, lambda, c_max, v)
            };
            let start = Instant::now();
            let mut last = start;
            let mut stamps = Vec::with_capacity(cfg.steps);
            flow::integrate(&mut Eager, field, x, &cfg, |_, _| {
                let now = Instant::now();
                stamps.push((now - last).as_secs_f64());
                last = now;
            })?;
            totals.push(start.elapsed().as_secs_f64());
            for (i, s) in stamps.into_iter().enumerate() {
                per_step[i].push(s);
            }
            evals = count;
        }
        Ok(())
    })?;
    let macs_per_eval = field_macs(model, h, w);
    Ok(BenchReport {
        height: h,
        width: w,
        solver: cfg.solver.name().to_string(),
        steps: cfg.steps,
        threads: threads.max(1),
        field_evals: evals,
        macs_per_eval,
        total_macs: macs_per_eval * evals as u64,
        step_seconds: per_step.iter_mut().map(|v| median(v)).collect(),
        total_seconds: median(&mut totals),
        estimated_peak_bytes: tile_bytes::<T>(model.config.width, h, w),
        measured_peak_bytes: peak_rss_bytes(),
    })
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

impl BenchReport {
    pub fn key_values(&self) -> String {
        let mut s = format!(
            "size={}x{}\nsolver={}\nsteps={}\nthreads={}\nfield_evals={}\nmacs_per_eval={}\ntotal_macs={}\ntotal_seconds={:.6}\nestimated_peak_bytes={}\n",
            self.width,
            self.height,
            self.solver,
            self.steps,
            self.threads,
            self.field_evals,
            self.macs_per_eval,
            self.total_macs,
            self.total_seconds,
            self.estimated_peak_bytes
        );
        for (i, t) in self.step_seconds.iter().enumerate() {
            s += &format!("step_{}_seconds={t:.6}\n", i + 1);
        }
        if let Some(p) = self.measured_peak_bytes {
            s += &format!("measured_peak_bytes={p}\n");
        }
        s
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "image            {}x{}", self.width, self.height)?;
        writeln!(
            f,
            "solver           {} x {} steps ({} field evals)",
            self.solver, self.steps, self.field_evals
        )?;
        writeln!(f, "threads          {}", self.threads)?;
        writeln!(
            f,
            "MACs             {:.3} G per eval, {:.3} G total",
            self.macs_per_eval as f64 / 1e9,
            self.total_macs as f64 / 1e9
        )?;
        for (i, t) in self.step_seconds.iter().enumerate() {
            writeln!(f, "step {:<3}         {:.4} s", i + 1, t)?;
        }
        writeln!(f, "total            {:.4} s", self.total_seconds)?;
        write!(f, "memory estimate  {:.1} MiB", self.estimated_peak_bytes as f64 / (1 << 20) as f64)?;
        if let Some(p) = self.measured_peak_bytes {
            write!(f, "\npeak RSS         {:.1} MiB", p as f64 / (1 << 20) as f64)?;
        }
        Ok(())
    }
}
