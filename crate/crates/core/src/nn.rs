//! Small composite layers built on [`Backend`] primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Backend, ConvSpec};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Convolution weights plus per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<V> {
    pub weight: V,
    pub bias: V,
}

impl<T: Scalar> ConvLayer<Tensor<T>> {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init(cin: usize, cout: usize, kernel: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
        Self {
            weight: Tensor::from_fn([cout, cin, kernel, kernel], |_| T::lit(normal.sample(rng))),
            bias: Tensor::zeros([1, cout, 1, 1]),
        }
    }

    pub fn zeros(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros([cout, cin, kernel, kernel]),
            bias: Tensor::zeros([1, cout, 1, 1]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl<V> ConvLayer<V> {
    pub fn forward<T: Scalar, B: Backend<T, Value = V>>(&self, b: &mut B, x: &V, kernel: usize) -> Result<V> {
        b.conv2d(x, &self.weight, &self.bias, ConvSpec::same(kernel))
    }
}

/// Conv -> instance norm (learnable affine) -> GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormAct<V> {
    pub conv: ConvLayer<V>,
    pub gain: V,
    pub shift: V,
}

impl<T: Scalar> ConvNormAct<Tensor<T>> {
    pub fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: ConvLayer::init(cin, cout, 3, 1.0, rng),
            gain: Tensor::ones([1, cout, 1, 1]),
            shift: Tensor::zeros([1, cout, 1, 1]),
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            conv: ConvLayer::zeros(cin, cout, 3),
            gain: Tensor::zeros([1, cout, 1, 1]),
            shift: Tensor::zeros([1, cout, 1, 1]),
        }
    }
}

impl<V> ConvNormAct<V> {
    pub fn forward<T: Scalar, B: Backend<T, Value = V>>(&self, b: &mut B, x: &V) -> Result<V> {
        let h = self.conv.forward(b, x, 3)?;
        let h = b.instance_norm(&h, &self.gain, &self.shift)?;
        b.gelu(&h)
    }
}

/// Gates `features` with a single-channel map `sigmoid(conv3x3(features))`.
pub fn spatial_attention<T: Scalar, B: Backend<T>>(b: &mut B, features: &B::Value, layer: &ConvLayer<B::Value>) -> Result<B::Value> {
    let logits = layer.forward(b, features, 3)?;
    let map = b.sigmoid(&logits)?;
    b.mul(features, &map)
}

/// Max-pools by 2, replicating the last row/column first when a side is odd.
pub fn pool_half<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value) -> Result<B::Value> {
    let [_, _, h, w] = b.shape(x);
    let (he, we) = (h + h % 2, w + w % 2);
    if (he, we) == (h, w) {
        b.maxpool2(x)
    } else {
        let padded = b.pad_replicate(x, he, we)?;
        b.maxpool2(&padded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;

    #[test]
    fn attention_with_zero_conv_halves_features() {
        let f = Tensor::<f32>::from_fn([1, 4, 3, 3], |[_, c, h, w]| (c * 9 + h * 3 + w) as f32 - 10.0);
        let layer = ConvLayer::zeros(4, 1, 3);
        let out = spatial_attention(&mut Eager, &f, &layer).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn attention_map_is_strictly_inside_unit_interval() {
        let mut rng = rand::rng();
        let f = Tensor::<f64>::from_fn([1, 2, 5, 5], |[_, c, h, w]| (c as f64 - 0.5) * (h * 5 + w) as f64);
        let layer = ConvLayer::<Tensor<f64>>::init(2, 1, 3, 1.0, &mut rng);
        let logits = layer.forward(&mut Eager, &f, 3).unwrap();
        let map = Eager.sigmoid(&logits).unwrap();
        assert!(map.data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn attention_of_zero_features_is_zero() {
        let mut rng = rand::rng();
        let f = Tensor::<f32>::zeros([2, 3, 4, 4]);
        let layer = ConvLayer::<Tensor<f32>>::init(3, 1, 3, 1.0, &mut rng);
        let out = spatial_attention(&mut Eager, &f, &layer).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_half_handles_odd_sizes() {
        let x = Tensor::<f32>::from_fn([1, 1, 3, 5], |[_, _, h, w]| (h * 5 + w) as f32);
        let y = pool_half(&mut Eager, &x).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 3]);
        // bottom-right window covers the replicated corner only
        assert_eq!(y.at([0, 0, 1, 2]), 14.0);
        let one = Tensor::<f32>::full([1, 2, 1, 1], 3.0);
        assert_eq!(pool_half(&mut Eager, &one).unwrap().shape(), [1, 2, 1, 1]);
    }
}
