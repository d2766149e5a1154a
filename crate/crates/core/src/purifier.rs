//! Atmospheric scattering purifier.
//!
//! A three-level encoder / spatial-attention / decoder CNN estimates the
//! per-pixel coefficient `K(x)`; the dehazed estimate is then
//! `O = K * x - K + b` with a single learnable scalar `b` (initialised to 1).
//!
//! The CNN adds its input back at the end, `K(x) = D(Attn(E(x))) + x`, so a
//! network whose head outputs zero yields `K = x`.
//!
//! Encoder stage `i` consumes the feature map `s_i` (with `s_1 = x`),
//! max-pools it and applies conv/norm/GELU. Decoder stage `j` upsamples,
//! crops to the size of `s_{4-j}`, concatenates it and applies
//! conv/norm/GELU, so encoder stage `i` is paired with decoder stage `4 - i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backend, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{pool_half, spatial_attention, ConvLayer, ConvNormAct};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_WIDTH: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;

/// Channel widths of every stage for a base width `w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub encoder_out: [usize; 3],
    pub decoder_in: [usize; 3],
    pub decoder_out: [usize; 3],
}

impl ChannelPlan {
    pub fn new(width: usize) -> Self {
        let enc = [width, 2 * width, 4 * width];
        // skip feeding decoder j is the input of encoder 3-j
        let skip = [enc[1], enc[0], IMAGE_CHANNELS];
        let dec_out = [2 * width, width, width];
        Self {
            encoder_out: enc,
            decoder_in: [enc[2] + skip[0], dec_out[0] + skip[1], dec_out[1] + skip[2]],
            decoder_out: dec_out,
        }
    }

    fn encoder_in(&self) -> [usize; 3] {
        [IMAGE_CHANNELS, self.encoder_out[0], self.encoder_out[1]]
    }
}

/// Weights of the purifier, generic over how each tensor is held (owned
/// tensors, or handles on a graph).
#[derive(Clone, Debug, PartialEq)]
pub struct PurifierWeights<V> {
    pub encoder: [ConvNormAct<V>; 3],
    pub attention: ConvLayer<V>,
    pub decoder: [ConvNormAct<V>; 3],
    pub head: ConvLayer<V>,
    /// The scalar `b` of `K * x - K + b`.
    pub scatter_bias: V,
}

impl<V> PurifierWeights<V> {
    /// Visits every parameter with a stable dotted name, in a fixed order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a V)) {
        for (i, s) in self.encoder.iter().enumerate() {
            f(&format!("encoder.{i}.weight"), &s.conv.weight);
            f(&format!("encoder.{i}.bias"), &s.conv.bias);
            f(&format!("encoder.{i}.norm_gain"), &s.gain);
            f(&format!("encoder.{i}.norm_shift"), &s.shift);
        }
        f("attention.weight", &self.attention.weight);
        f("attention.bias", &self.attention.bias);
        for (i, s) in self.decoder.iter().enumerate() {
            f(&format!("decoder.{i}.weight"), &s.conv.weight);
            f(&format!("decoder.{i}.bias"), &s.conv.bias);
            f(&format!("decoder.{i}.norm_gain"), &s.gain);
            f(&format!("decoder.{i}.norm_shift"), &s.shift);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
        f("scatter_bias", &self.scatter_bias);
    }

    /// Same order as [`Self::for_each`].
    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut V)) {
        for (i, s) in self.encoder.iter_mut().enumerate() {
            f(&format!("encoder.{i}.weight"), &mut s.conv.weight);
            f(&format!("encoder.{i}.bias"), &mut s.conv.bias);
            f(&format!("encoder.{i}.norm_gain"), &mut s.gain);
            f(&format!("encoder.{i}.norm_shift"), &mut s.shift);
        }
        f("attention.weight", &mut self.attention.weight);
        f("attention.bias", &mut self.attention.bias);
        for (i, s) in self.decoder.iter_mut().enumerate() {
            f(&format!("decoder.{i}.weight"), &mut s.conv.weight);
            f(&format!("decoder.{i}.bias"), &mut s.conv.bias);
            f(&format!("decoder.{i}.norm_gain"), &mut s.gain);
            f(&format!("decoder.{i}.norm_shift"), &mut s.shift);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
        f("scatter_bias", &mut self.scatter_bias);
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &V) -> U) -> PurifierWeights<U> {
        let mut out = Vec::new();
        self.for_each(|name, v| out.push(f(name, v)));
        let mut it = out.into_iter();
        let mut next = move || it.next().expect("parameter count is fixed");
        fn stage<U>(next: &mut impl FnMut() -> U) -> ConvNormAct<U> {
            ConvNormAct {
                conv: ConvLayer {
                    weight: next(),
                    bias: next(),
                },
                gain: next(),
                shift: next(),
            }
        }
        let encoder = [stage(&mut next), stage(&mut next), stage(&mut next)];
        let attention = ConvLayer {
            weight: next(),
            bias: next(),
        };
        let decoder = [stage(&mut next), stage(&mut next), stage(&mut next)];
        let head = ConvLayer {
            weight: next(),
            bias: next(),
        };
        PurifierWeights {
            encoder,
            attention,
            decoder,
            head,
            scatter_bias: next(),
        }
    }
}

/// Owned purifier parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PurifierNet<T> {
    width: usize,
    pub weights: PurifierWeights<Tensor<T>>,
}

impl<T: Scalar> PurifierNet<T> {
    /// Randomly initialised network. The head starts small so the initial
    /// `K` stays close to the residual `x`.
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        check_width(width)?;
        let plan = ChannelPlan::new(width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ein = plan.encoder_in();
        let encoder = std::array::from_fn(|i| ConvNormAct::init(ein[i], plan.encoder_out[i], &mut rng));
        let attention = ConvLayer::init(plan.encoder_out[2], 1, 3, 0.5, &mut rng);
        let decoder = std::array::from_fn(|i| ConvNormAct::init(plan.decoder_in[i], plan.decoder_out[i], &mut rng));
        let head = ConvLayer::init(plan.decoder_out[2], IMAGE_CHANNELS, 1, 0.1, &mut rng);
        Ok(Self {
            width,
            weights: PurifierWeights {
                encoder,
                attention,
                decoder,
                head,
                scatter_bias: Tensor::scalar(T::one()),
            },
        })
    }

    /// All weights, biases and norm gains zero; `b = 1`.
    pub fn zeroed(width: usize) -> Result<Self> {
        check_width(width)?;
        let plan = ChannelPlan::new(width);
        let ein = plan.encoder_in();
        Ok(Self {
            width,
            weights: PurifierWeights {
                encoder: std::array::from_fn(|i| ConvNormAct::zeros(ein[i], plan.encoder_out[i])),
                attention: ConvLayer::zeros(plan.encoder_out[2], 1, 3),
                decoder: std::array::from_fn(|i| ConvNormAct::zeros(plan.decoder_in[i], plan.decoder_out[i])),
                head: ConvLayer::zeros(plan.decoder_out[2], IMAGE_CHANNELS, 1),
                scatter_bias: Tensor::scalar(T::one()),
            },
        })
    }

    /// Rebuilds a network from named tensors, checking every shape.
    pub fn from_named(width: usize, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let template = Self::zeroed(width)?;
        let mut missing = None;
        let weights = template.weights.map(|name, t| match lookup(name) {
            Some(v) if v.shape() == t.shape() => v,
            Some(v) => {
                missing.get_or_insert_with(|| format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
                t.clone()
            }
            None => {
                missing.get_or_insert_with(|| format!("{name}: missing"));
                t.clone()
            }
        });
        match missing {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok(Self { width, weights }),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PurifierNet<U> {
        PurifierNet {
            width: self.width,
            weights: self.weights.map(|_, t| t.cast::<U>()),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.weights.for_each(|_, t| n += t.len());
        n
    }

    pub fn scatter_bias(&self) -> T {
        self.weights.scatter_bias.item()
    }

    /// Records every parameter on `g`; with `trainable == false` they are
    /// recorded as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, bias_trainable: bool) -> PurifierWeights<Var> {
        let mut out = self.weights.map(|name, t| {
            if name == "scatter_bias" {
                return None;
            }
            Some(if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        });
        let bias = self.weights.scatter_bias.clone();
        let bias_var = if bias_trainable { g.leaf(bias) } else { g.constant(bias) };
        out.scatter_bias = Some(bias_var);
        out.map(|_, v| v.expect("bound"))
    }
}

fn check_width(width: usize) -> Result<()> {
    if width == 0 {
        return Err(Error::InvalidArgument("purifier width must be positive".into()));
    }
    Ok(())
}

/// Number of parameters at base width `w`, from the channel plan alone.
pub fn param_count_for_width(width: usize) -> usize {
    let plan = ChannelPlan::new(width);
    let ein = plan.encoder_in();
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let mut n = 0;
    for i in 0..3 {
        n += conv(ein[i], plan.encoder_out[i], 3) + 2 * plan.encoder_out[i];
        n += conv(plan.decoder_in[i], plan.decoder_out[i], 3) + 2 * plan.decoder_out[i];
    }
    n + conv(plan.encoder_out[2], 1, 3) + conv(plan.decoder_out[2], IMAGE_CHANNELS, 1) + 1
}

/// `K(x) = D(Attn(E(x))) + x` for a 3-channel `x`; output has the shape of `x`.
pub fn cnn_forward<T: Scalar, B: Backend<T>>(b: &mut B, w: &PurifierWeights<B::Value>, x: &B::Value) -> Result<B::Value> {
    let shape = b.shape(x);
    if shape[1] != IMAGE_CHANNELS {
        return Err(Error::shape(
            "purifier",
            format!("expected {IMAGE_CHANNELS} input channels, got {}", shape[1]),
        ));
    }
    let mut skips = Vec::with_capacity(3);
    let mut h = x.clone();
    for stage in &w.encoder {
        let pooled = pool_half(b, &h)?;
        skips.push(h);
        h = stage.forward(b, &pooled)?;
    }
    h = spatial_attention(b, &h, &w.attention)?;
    for stage in &w.decoder {
        let skip = skips.pop().expect("one skip per stage");
        let [_, _, sh, sw] = b.shape(&skip);
        let up = b.upsample2(&h)?;
        let up = b.crop(&up, sh, sw)?;
        let cat = b.concat(&[up, skip])?;
        h = stage.forward(b, &cat)?;
    }
    let delta = w.head.forward(b, &h, 1)?;
    b.add(&delta, x)
}

/// Dehazed estimate `K * x - K + b` with `K = cnn_forward(x)`. Not clamped.
pub fn purify<T: Scalar, B: Backend<T>>(b: &mut B, w: &PurifierWeights<B::Value>, x: &B::Value) -> Result<B::Value> {
    let k = cnn_forward(b, w, x)?;
    apply_scattering(b, &k, x, &w.scatter_bias)
}

/// `k * x - k + bias` with a broadcast scalar `bias`.
pub fn apply_scattering<T: Scalar, B: Backend<T>>(b: &mut B, k: &B::Value, x: &B::Value, bias: &B::Value) -> Result<B::Value> {
    let kx = b.mul(k, x)?;
    let diff = b.sub(&kx, k)?;
    b.add(&diff, bias)
}

/// Multiply-accumulate count of one `cnn_forward` on an `h x w` image.
pub fn purifier_macs(width: usize, h: usize, w: usize) -> u64 {
    let plan = ChannelPlan::new(width);
    let ein = plan.encoder_in();
    let conv = |cin: usize, cout: usize, k: usize, hh: usize, ww: usize| conv_macs(cin, cout, k, hh, ww);
    let mut sizes = vec![(h, w)];
    let mut total = 0;
    let (mut ch, mut cw) = (h, w);
    for i in 0..3 {
        ch = ch.div_ceil(2);
        cw = cw.div_ceil(2);
        total += conv(ein[i], plan.encoder_out[i], 3, ch, cw);
        sizes.push((ch, cw));
    }
    total += conv(plan.encoder_out[2], 1, 3, ch, cw);
    for i in 0..3 {
        let (sh, sw) = sizes[2 - i];
        total += conv(plan.decoder_in[i], plan.decoder_out[i], 3, sh, sw);
    }
    total + conv(plan.decoder_out[2], IMAGE_CHANNELS, 1, h, w)
}

/// `C_in * C_out * k^2 * H_out * W_out`.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, h_out: usize, w_out: usize) -> u64 {
    (cin * cout * kernel * kernel) as u64 * (h_out * w_out) as u64
}
