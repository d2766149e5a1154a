#![allow(dead_code)]

use dehazeflow::flow::{FlowConfig, SolverKind};
use dehazeflow::model::{DehazeModel, LutMode, ModelConfig, Trainable};
use dehazeflow::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image<T: Scalar>(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn([1, 3, h, w], |_| T::lit(rng.random_range(0.05..0.95)))
}

/// 4x4 images, width-4 network, M = 5 lattice, two RK4 steps.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        width: 4,
        lut_size: 5,
        lut_mode: LutMode::Learnable,
        c_max: 1.0,
        flow: FlowConfig::new(SolverKind::Rk4, 2, 0.5).unwrap(),
    }
}

/// Random network plus a lightly perturbed lattice so no gradient is
/// trivially structured.
pub fn tiny_model<T: Scalar>(seed: u64) -> DehazeModel<T> {
    let mut m = DehazeModel::<T>::new(tiny_config(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for v in m.lut.grid.data_mut() {
        *v += T::lit(r.random_range(-0.05..0.05));
    }
    m
}

/// Target kept at least 0.1 away from the terminal state in every element
/// so the L1 kink is never crossed by a perturbation.
pub fn target_for<T: Scalar>(m: &DehazeModel<T>, hazy: &Tensor<T>, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let mut raw = hazy.clone();
    let cfg = m.config.flow;
    // unclamped terminal state
    let grid = Some(&m.lut.grid);
    let field = |b: &mut dehazeflow::Eager, x: &Tensor<T>, _t: T| {
        dehazeflow::model::vector_field(b, &m.net.weights, grid, T::lit(cfg.lambda), m.lut.c_max(), x)
    };
    raw = dehazeflow::flow::integrate(&mut dehazeflow::Eager, field, &raw, &cfg, |_, _| {}).unwrap();
    raw.map(|v| {
        let off = T::lit(r.random_range(0.1..0.3));
        if r.random_bool(0.5) {
            v + off
        } else {
            v - off
        }
    })
}

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub len: usize,
    pub rel: f64,
    pub analytic_norm: f64,
}

fn with_param<T: Scalar>(m: &mut DehazeModel<T>, name: &str, f: &mut dyn FnMut(&mut Tensor<T>)) {
    if name == "lut.grid" {
        f(&mut m.lut.grid);
        return;
    }
    m.net.weights.for_each_mut(|n, t| {
        if n == name {
            f(t)
        }
    });
}

/// Central differences of the loss with respect to every parameter, in
/// the model's own precision.
pub fn finite_differences<T: Scalar>(m: &DehazeModel<T>, hazy: &Tensor<T>, target: &Tensor<T>, h: f64) -> Vec<(String, Vec<f64>)> {
    let mut names: Vec<(String, usize)> = Vec::new();
    m.net.weights.for_each(|n, t| names.push((n.to_string(), t.len())));
    names.push(("lut.grid".into(), m.lut.grid.len()));
    names
        .into_iter()
        .map(|(name, len)| {
            let fd = (0..len)
                .map(|i| {
                    let eval = |delta: f64| {
                        let mut p = m.clone();
                        with_param(&mut p, &name, &mut |t| {
                            let v = t.data()[i];
                            t.data_mut()[i] = v + T::lit(delta);
                        });
                        p.loss(hazy, target).unwrap()
                    };
                    (eval(h) - eval(-h)) / (2.0 * h)
                })
                .collect();
            (name, fd)
        })
        .collect()
}

pub fn analytic<T: Scalar>(m: &DehazeModel<T>, hazy: &Tensor<T>, target: &Tensor<T>) -> Vec<(String, Vec<f64>)> {
    let (_, grads) = m.loss_and_grads(hazy, target, Trainable::ALL).unwrap();
    let mut out = Vec::new();
    let flat = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    grads
        .net
        .for_each(|n, g| out.push((n.to_string(), flat(g.as_ref().expect("all groups trained")))));
    out.push(("lut.grid".into(), flat(grads.grid.as_ref().unwrap())));
    out
}

/// Norm-relative error per group, `|g_a - g_fd| / max(|g_fd|, floor)`,
/// where `floor = 1e-4 * |G_fd|` over all groups. The floor only matters
/// for groups whose exact gradient is zero (biases feeding a norm).
pub fn group_errors(an: &[(String, Vec<f64>)], fd: &[(String, Vec<f64>)]) -> Vec<GroupError> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let global = fd.iter().map(|(_, v)| norm(v).powi(2)).sum::<f64>().sqrt();
    let floor = 1e-4 * global;
    an.iter()
        .zip(fd)
        .map(|((name, a), (_, f))| {
            let diff: Vec<f64> = a.iter().zip(f).map(|(x, y)| x - y).collect();
            GroupError {
                name: name.clone(),
                len: a.len(),
                rel: norm(&diff) / norm(f).max(floor),
                analytic_norm: norm(a),
            }
        })
        .collect()
}

/// Central differences at `per_group` random indices of every group.
pub fn sampled_finite_differences<T: Scalar>(
    m: &DehazeModel<T>,
    hazy: &Tensor<T>,
    target: &Tensor<T>,
    h: f64,
    per_group: usize,
    seed: u64,
) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut r = rng(seed);
    let mut names: Vec<(String, usize)> = Vec::new();
    m.net.weights.for_each(|n, t| names.push((n.to_string(), t.len())));
    names.push(("lut.grid".into(), m.lut.grid.len()));
    names
        .into_iter()
        .map(|(name, len)| {
            let idx: Vec<usize> = if len <= per_group {
                (0..len).collect()
            } else {
                rand::seq::index::sample(&mut r, len, per_group).into_vec()
            };
            let fd = idx
                .iter()
                .map(|&i| {
                    let eval = |delta: f64| {
                        let mut p = m.clone();
                        with_param(&mut p, &name, &mut |t| {
                            let v = t.data()[i];
                            t.data_mut()[i] = v + T::lit(delta);
                        });
                        p.loss(hazy, target).unwrap()
                    };
                    (eval(h) - eval(-h)) / (2.0 * h)
                })
                .collect();
            (name, idx, fd)
        })
        .collect()
}

/// Direct 2-D windowed SSIM with an explicitly built 11x11 kernel.
pub fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let r = 5i64;
    let mut k = [[0.0; 11]; 11];
    let mut ks = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as i64 - r, j as i64 - r);
            *v = (-((di * di + dj * dj) as f64) / (2.0 * 1.5 * 1.5)).exp();
            ks += *v;
        }
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut total = 0.0;
    let mut count = 0;
    for cy in 5..h - 5 {
        for cx in 5..w - 5 {
            let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = k[i][j] / ks;
                    let p = (cy + i - 5) * w + (cx + j - 5);
                    ux += wgt * x[p];
                    uy += wgt * y[p];
                }
            }
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = k[i][j] / ks;
                    let p = (cy + i - 5) * w + (cx + j - 5);
                    sxx += wgt * (x[p] - ux) * (x[p] - ux);
                    syy += wgt * (y[p] - uy) * (y[p] - uy);
                    sxy += wgt * (x[p] - ux) * (y[p] - uy);
                }
            }
            total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
            count += 1;
        }
    }
    total / count as f64
}
