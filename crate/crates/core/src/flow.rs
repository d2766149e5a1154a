//! Fixed-step ODE integrators over a [`Backend`].
//!
//! A field is any closure `f(backend, x, t) -> dx/dt`. Steps are written
//! against the backend so the same code drives inference (eager) and
//! training (recorded, differentiated through the unrolled steps).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_STEPS: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    Midpoint,
    Rk4,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Euler, SolverKind::Midpoint, SolverKind::Rk4];

    pub fn evals_per_step(self) -> usize {
        match self {
            SolverKind::Euler => 1,
            SolverKind::Midpoint => 2,
            SolverKind::Rk4 => 4,
        }
    }

    /// Global convergence order.
    pub fn order(self) -> u32 {
        match self {
            SolverKind::Euler => 1,
            SolverKind::Midpoint => 2,
            SolverKind::Rk4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Midpoint => "midpoint",
            SolverKind::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverKind::Euler),
            "midpoint" => Ok(SolverKind::Midpoint),
            "rk4" => Ok(SolverKind::Rk4),
            other => Err(Error::InvalidArgument(format!(
                "unknown solver {other:?} (expected euler, midpoint or rk4)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub solver: SolverKind,
    pub steps: usize,
    /// Weight of the LUT branch in the vector field.
    pub lambda: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Rk4,
            steps: DEFAULT_STEPS,
            lambda: DEFAULT_LAMBDA,
            t0: 0.0,
            t1: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn new(solver: SolverKind, steps: usize, lambda: f64) -> Result<Self> {
        let cfg = Self {
            solver,
            steps,
            lambda,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("flow needs at least one step".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.t1 > self.t0 && self.t0.is_finite() && self.t1.is_finite()) {
            return Err(Error::InvalidArgument(format!("empty time range [{}, {}]", self.t0, self.t1)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// Time at the start of step `i` (0-based).
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt()
    }

    pub fn field_evals(&self) -> usize {
        self.steps * self.solver.evals_per_step()
    }
}

/// `x + v * s`.
fn axpy<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, v: &B::Value, s: T) -> Result<B::Value> {
    let sv = b.scale(v, s)?;
    b.add(x, &sv)
}

pub fn euler_step<T, B, F>(b: &mut B, f: &mut F, x: &B::Value, t: T, dt: T) -> Result<B::Value>
where
    T: Scalar,
    B: Backend<T>,
    F: FnMut(&mut B, &B::Value, T) -> Result<B::Value>,
{
    let k1 = f(b, x, t)?;
    axpy(b, x, &k1, dt)
}

pub fn midpoint_step<T, B, F>(b: &mut B, f: &mut F, x: &B::Value, t: T, dt: T) -> Result<B::Value>
where
    T: Scalar,
    B: Backend<T>,
    F: FnMut(&mut B, &B::Value, T) -> Result<B::Value>,
{
    let half = dt * T::lit(0.5);
    let k1 = f(b, x, t)?;
    let mid = axpy(b, x, &k1, half)?;
    drop(k1);
    let k2 = f(b, &mid, t + half)?;
    axpy(b, x, &k2, dt)
}

pub fn rk4_step<T, B, F>(b: &mut B, f: &mut F, x: &B::Value, t: T, dt: T) -> Result<B::Value>
where
    T: Scalar,
    B: Backend<T>,
    F: FnMut(&mut B, &B::Value, T) -> Result<B::Value>,
{
    let half = dt * T::lit(0.5);
    let two = T::lit(2.0);
    let k1 = f(b, x, t)?;
    let x2 = axpy(b, x, &k1, half)?;
    let k2 = f(b, &x2, t + half)?;
    drop(x2);
    let x3 = axpy(b, x, &k2, half)?;
    let mut sum = axpy(b, &k1, &k2, two)?;
    drop((k1, k2));
    let k3 = f(b, &x3, t + half)?;
    drop(x3);
    let x4 = axpy(b, x, &k3, dt)?;
    sum = axpy(b, &sum, &k3, two)?;
    drop(k3);
    let k4 = f(b, &x4, t + dt)?;
    drop(x4);
    sum = b.add(&sum, &k4)?;
    axpy(b, x, &sum, dt / T::lit(6.0))
}

pub fn step<T, B, F>(kind: SolverKind, b: &mut B, f: &mut F, x: &B::Value, t: T, dt: T) -> Result<B::Value>
where
    T: Scalar,
    B: Backend<T>,
    F: FnMut(&mut B, &B::Value, T) -> Result<B::Value>,
{
    match kind {
        SolverKind::Euler => euler_step(b, f, x, t, dt),
        SolverKind::Midpoint => midpoint_step(b, f, x, t, dt),
        SolverKind::Rk4 => rk4_step(b, f, x, t, dt),
    }
}

/// Runs `cfg.steps` solver steps from `x0` and returns the unclamped final
/// state. `observe(i, x_i)` sees every state `X_1 ..= X_n`. A non-finite
/// state aborts with [`Error::Divergence`] naming the 1-based step.
pub fn integrate<T, B, F>(
    b: &mut B,
    mut field: F,
    x0: &B::Value,
    cfg: &FlowConfig,
    mut observe: impl FnMut(usize, &B::Value),
) -> Result<B::Value>
where
    T: Scalar,
    B: Backend<T>,
    F: FnMut(&mut B, &B::Value, T) -> Result<B::Value>,
{
    cfg.validate()?;
    let dt = T::lit(cfg.dt());
    let mut x = x0.clone();
    for i in 0..cfg.steps {
        let t = T::lit(cfg.time(i));
        x = step(cfg.solver, b, &mut field, &x, t, dt)?;
        if !b.tensor(&x).all_finite() {
            return Err(Error::Divergence {
                context: "integrate",
                step: i + 1,
            });
        }
        observe(i + 1, &x);
    }
    Ok(x)
}

/// Clamps a final state into the image range `[0, 1]`.
pub fn finish<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value) -> Result<B::Value> {
    b.clamp(x, T::zero(), T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use crate::tensor::Tensor;

    fn decay(b: &mut Eager, x: &Tensor<f64>, _t: f64) -> Result<Tensor<f64>> {
        b.scale(x, -1.0)
    }

    fn solve_decay(kind: SolverKind, steps: usize) -> f64 {
        let cfg = FlowConfig::new(kind, steps, 0.0).unwrap();
        integrate(&mut Eager, decay, &Tensor::scalar(1.0), &cfg, |_, _| {}).unwrap().item()
    }

    #[test]
    fn single_steps_on_decay() {
        let x = Tensor::scalar(1.0);
        let e = euler_step(&mut Eager, &mut decay, &x, 0.0, 0.1).unwrap().item();
        let m = midpoint_step(&mut Eager, &mut decay, &x, 0.0, 0.1).unwrap().item();
        let r = rk4_step(&mut Eager, &mut decay, &x, 0.0, 0.1).unwrap().item();
        assert!((e - 0.9).abs() < 1e-15);
        assert!((m - 0.905).abs() < 1e-15);
        // 1 - h + h^2/2 - h^3/6 + h^4/24 at h = 0.1
        assert!((r - 0.904_837_5).abs() < 1e-15);
    }

    #[test]
    fn rk4_ten_steps_matches_stability_polynomial() {
        // R(0.1)^10 with R(h) = 1 - h + h^2/2 - h^3/6 + h^4/24, in exact rationals
        let x = solve_decay(SolverKind::Rk4, 10);
        assert!((x - 0.367_879_774_412_498_4).abs() < 1e-15, "{x}");
        assert!((x - (-1f64).exp()).abs() < 4e-7);
        let fine = solve_decay(SolverKind::Rk4, 24);
        assert!((fine - (-1f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn convergence_orders() {
        for kind in SolverKind::ALL {
            let err = |n| (solve_decay(kind, n) - (-1f64).exp()).abs();
            let observed = (err(16) / err(32)).log2();
            assert!((observed - kind.order() as f64).abs() < 0.3, "{kind}: observed order {observed}");
        }
    }

    #[test]
    fn zero_field_returns_initial_state() {
        let x0 = Tensor::<f32>::from_fn([1, 3, 4, 5], |[_, c, h, w]| (c + h * w) as f32 / 20.0 + 1e-3);
        for kind in SolverKind::ALL {
            for n in [1, 4, 16] {
                let cfg = FlowConfig::new(kind, n, 0.5).unwrap();
                let zero = |b: &mut Eager, x: &Tensor<f32>, _| b.scale(x, 0.0);
                let out = integrate(&mut Eager, zero, &x0, &cfg, |_, _| {}).unwrap();
                assert_eq!(out, x0);
            }
        }
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let x0 = Tensor::<f64>::from_fn([1, 3, 2, 2], |[_, c, h, w]| (c + h + w) as f64 * 0.15);
        let c = Tensor::full([1, 3, 2, 2], 0.3);
        for kind in SolverKind::ALL {
            for n in [1, 3, 8] {
                let cfg = FlowConfig::new(kind, n, 0.0).unwrap();
                let field = |_: &mut Eager, _: &Tensor<f64>, _| Ok(c.clone());
                let raw = integrate(&mut Eager, field, &x0, &cfg, |_, _| {}).unwrap();
                let out = finish(&mut Eager, &raw).unwrap();
                let want = x0.map(|v| (v + 0.3).clamp(0.0, 1.0));
                assert!(out.max_abs_diff(&want) < 1e-12, "{kind} n={n}");
            }
        }
    }

    #[test]
    fn integrate_equals_manual_steps() {
        let x0 = Tensor::<f32>::from_fn([1, 3, 3, 3], |[_, c, h, w]| ((c * 7 + h * 3 + w) % 5) as f32 * 0.2);
        let mut field = |b: &mut Eager, x: &Tensor<f32>, t: f32| {
            let sq = b.mul(x, x)?;
            let y = b.sub(x, &sq)?;
            b.add_scalar(&y, t * 0.1)
        };
        for kind in SolverKind::ALL {
            let cfg = FlowConfig::new(kind, 5, 0.0).unwrap();
            let mut seen = Vec::new();
            let out = integrate(&mut Eager, &mut field, &x0, &cfg, |i, x| seen.push((i, x.clone()))).unwrap();
            let mut x = x0.clone();
            for i in 0..5 {
                x = step(kind, &mut Eager, &mut field, &x, cfg.time(i) as f32, cfg.dt() as f32).unwrap();
                assert_eq!(seen[i], (i + 1, x.clone()));
            }
            assert_eq!(out, x);
        }
    }

    #[test]
    fn divergence_names_the_step() {
        let cfg = FlowConfig::new(SolverKind::Euler, 50, 0.0).unwrap();
        let blowup = |b: &mut Eager, x: &Tensor<f64>, _| {
            let sq = b.mul(x, x)?;
            b.scale(&sq, 1e30)
        };
        let err = integrate(&mut Eager, blowup, &Tensor::scalar(10.0), &cfg, |_, _| {}).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert!((1..=50).contains(&step)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(FlowConfig::new(SolverKind::Rk4, 0, 0.5).is_err());
        assert!(FlowConfig::new(SolverKind::Rk4, 4, -0.1).is_err());
        let d = FlowConfig::default();
        assert_eq!((d.solver, d.steps, d.lambda), (SolverKind::Rk4, 4, 0.5));
        for n in 1..=64 {
            let cfg = FlowConfig::new(SolverKind::Euler, n, 0.5).unwrap();
            assert!((cfg.dt() * n as f64 - 1.0).abs() <= f64::EPSILON, "n={n}");
        }
        assert_eq!("RK4".parse::<SolverKind>().unwrap(), SolverKind::Rk4);
        assert!("heun".parse::<SolverKind>().is_err());
        assert_eq!(FlowConfig::new(SolverKind::Rk4, 8, 0.5).unwrap().field_evals(), 32);
    }
}
