//! Purifier + LUT vector field and the full dehazing model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig};
use crate::lut::{self, Lut3D};
use crate::purifier::{self, PurifierNet, PurifierWeights};
use crate::tensor::{Scalar, Tensor};

/// How the LUT branch takes part in the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LutMode {
    /// No LUT branch: `f = O_m`.
    Removed,
    /// Frozen contrast/saturation lattice.
    Fixed,
    Learnable,
}

impl LutMode {
    pub const ALL: [LutMode; 3] = [LutMode::Removed, LutMode::Fixed, LutMode::Learnable];

    pub fn name(self) -> &'static str {
        match self {
            LutMode::Removed => "removed",
            LutMode::Fixed => "fixed",
            LutMode::Learnable => "learnable",
        }
    }
}

impl fmt::Display for LutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "removed" | "none" => Ok(LutMode::Removed),
            "fixed" => Ok(LutMode::Fixed),
            "learnable" => Ok(LutMode::Learnable),
            other => Err(Error::InvalidArgument(format!("unknown LUT mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub lut_size: usize,
    pub lut_mode: LutMode,
    pub c_max: f64,
    pub flow: FlowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: purifier::DEFAULT_WIDTH,
            lut_size: lut::DEFAULT_SIZE,
            lut_mode: LutMode::Learnable,
            c_max: 1.0,
            flow: FlowConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if self.width == 0 || self.lut_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "width must be positive and LUT size at least 2 (got {} and {})",
                self.width, self.lut_size
            )));
        }
        if !(self.c_max > 0.0 && self.c_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("c_max must be positive, got {}", self.c_max)));
        }
        Ok(())
    }
}

/// The field `f(x) = purify(x) + lambda * lut(clamp(x))`, with the LUT term
/// omitted when `grid` is `None`.
pub fn vector_field<T: Scalar, B: Backend<T>>(
    b: &mut B,
    weights: &PurifierWeights<B::Value>,
    grid: Option<&B::Value>,
    lambda: T,
    c_max: T,
    x: &B::Value,
) -> Result<B::Value> {
    let om = purifier::purify(b, weights, x)?;
    match grid {
        None => Ok(om),
        Some(grid) => {
            let ol = lut::apply_lut(b, x, grid, c_max)?;
            let scaled = b.scale(&ol, lambda)?;
            b.add(&om, &scaled)
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub cnn: bool,
    pub scatter_bias: bool,
    pub lut: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        cnn: true,
        scatter_bias: true,
        lut: true,
    };
}

/// Gradients per parameter group; `None` for groups that were not trained.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub net: PurifierWeights<Option<Tensor<T>>>,
    pub grid: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DehazeModel<T> {
    pub net: PurifierNet<T>,
    pub lut: Lut3D<T>,
    pub config: ModelConfig,
}

impl<T: Scalar> DehazeModel<T> {
    /// Fresh model: random purifier and an identity (learnable) or
    /// contrast/saturation (fixed) lattice.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = PurifierNet::new(config.width, seed)?;
        Self::with_net(config, net)
    }

    pub fn with_net(config: ModelConfig, net: PurifierNet<T>) -> Result<Self> {
        config.validate()?;
        if net.width() != config.width {
            return Err(Error::InvalidArgument(format!(
                "network width {} does not match config width {}",
                net.width(),
                config.width
            )));
        }
        let c_max = T::lit(config.c_max);
        let lut = match config.lut_mode {
            LutMode::Fixed => Lut3D::fixed_contrast_saturation(config.lut_size, c_max, lut::DEFAULT_CONTRAST, lut::DEFAULT_SATURATION)?,
            _ => Lut3D::identity(config.lut_size, c_max)?,
        };
        Ok(Self { net, lut, config })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> DehazeModel<U> {
        let net = self.net.cast::<U>();
        let lut = Lut3D::from_grid(self.lut.grid.cast::<U>(), U::lit(self.lut.c_max().as_f64())).expect("valid grid");
        DehazeModel {
            net,
            lut,
            config: self.config,
        }
    }

    pub fn flow(&self) -> &FlowConfig {
        &self.config.flow
    }

    pub fn lut_active(&self) -> bool {
        self.config.lut_mode != LutMode::Removed
    }

    /// Groups that training may update under the configured LUT mode.
    pub fn trainable(&self) -> Trainable {
        Trainable {
            cnn: true,
            scatter_bias: true,
            lut: self.config.lut_mode == LutMode::Learnable,
        }
    }

    /// One field evaluation without recording.
    pub fn field(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let grid = self.lut_active().then_some(&self.lut.grid);
        vector_field(
            &mut Eager,
            &self.net.weights,
            grid,
            T::lit(self.config.flow.lambda),
            self.lut.c_max(),
            x,
        )
    }

    /// Integrates from `x0` and clamps the result. `observe` sees each
    /// unclamped intermediate state.
    pub fn dehaze_with(&self, x0: &Tensor<T>, observe: impl FnMut(usize, &Tensor<T>)) -> Result<Tensor<T>> {
        let grid = self.lut_active().then_some(&self.lut.grid);
        let lambda = T::lit(self.config.flow.lambda);
        let c_max = self.lut.c_max();
        let weights = &self.net.weights;
        let field = |b: &mut Eager, x: &Tensor<T>, _t: T| vector_field(b, weights, grid, lambda, c_max, x);
        let raw = flow::integrate(&mut Eager, field, x0, &self.config.flow, observe)?;
        flow::finish(&mut Eager, &raw)
    }

    pub fn dehaze(&self, x0: &Tensor<T>) -> Result<Tensor<T>> {
        self.dehaze_with(x0, |_, _| {})
    }

    /// Final image plus the clamped states `X_1 ..= X_n`.
    pub fn dehaze_trajectory(&self, x0: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut states = Vec::with_capacity(self.config.flow.steps);
        let out = self.dehaze_with(x0, |_, x| states.push(x.map(|v| v.max(T::zero()).min(T::one()))))?;
        Ok((out, states))
    }

    /// Records the unrolled flow on `g` and returns the unclamped final state.
    pub fn record(&self, g: &mut Graph<T>, x0: Var, bound: &Bound) -> Result<Var> {
        let lambda = T::lit(self.config.flow.lambda);
        let c_max = self.lut.c_max();
        let field = |g: &mut Graph<T>, x: &Var, _t: T| vector_field(g, &bound.weights, bound.grid.as_ref(), lambda, c_max, x);
        flow::integrate(g, field, &x0, &self.config.flow, |_, _| {})
    }

    /// Places all parameters on `g`, as leaves where `trainable` says so.
    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable) -> Bound {
        let weights = self.net.bind(g, trainable.cnn, trainable.scatter_bias);
        let grid = self.lut_active().then(|| {
            let t = self.lut.grid.clone();
            if trainable.lut {
                g.leaf(t)
            } else {
                g.constant(t)
            }
        });
        Bound { weights, grid }
    }

    /// Mean L1 between the unclamped terminal state and `target`, and the
    /// gradients of every trainable group.
    pub fn loss_and_grads(&self, hazy: &Tensor<T>, target: &Tensor<T>, trainable: Trainable) -> Result<(f64, ModelGrads<T>)> {
        let mut g = Graph::new();
        let x0 = g.constant(hazy.clone());
        let y = g.constant(target.clone());
        let bound = self.bind(&mut g, trainable);
        let out = self.record(&mut g, x0, &bound)?;
        let loss = g.l1_loss(out, y)?;
        let value = g.value(loss)?.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { context: "loss", step: 0 });
        }
        let mut grads = g.backward(loss)?;
        let net = bound.weights.map(|_, v| grads.take(*v));
        let grid = bound.grid.and_then(|v| grads.take(v));
        Ok((value, ModelGrads { net, grid }))
    }

    /// Loss of the unclamped terminal state without recording a graph.
    pub fn loss(&self, hazy: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let grid = self.lut_active().then_some(&self.lut.grid);
        let lambda = T::lit(self.config.flow.lambda);
        let c_max = self.lut.c_max();
        let weights = &self.net.weights;
        let field = |b: &mut Eager, x: &Tensor<T>, _t: T| vector_field(b, weights, grid, lambda, c_max, x);
        let raw = flow::integrate(&mut Eager, field, hazy, &self.config.flow, |_, _| {})?;
        Ok(crate::autodiff::kernels::l1_mean(&raw, target)?.as_f64())
    }
}

/// Parameter handles of a model bound to one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub weights: PurifierWeights<Var>,
    pub grid: Option<Var>,
}
