//! Small building blocks shared by the backbone, the enrichment module and
//! the network head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::math;
use crate::tensor::{Parameter, Shape, Tensor};

/// A convolution layer: weight + bias parameters and fixed geometry.
/// 3×3 kernels use padding 1 so spatial size is preserved; 1×1 use none.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    padding: usize,
}

impl ConvLayer {
    /// Weights drawn from a zero-mean uniform distribution scaled by
    /// `1/√fan_in`; biases start at zero and are weight-decay exempt.
    pub fn init(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = 1.0 / math::sqrt(fan_in);
        let weight_values: Vec<f64> = (0..cout * cin * kernel * kernel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ConvLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                Shape::new(&[cout, cin, kernel, kernel]).expect("rank 4"),
                weight_values,
                false,
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Shape::new(&[cout]).expect("rank 1"),
                vec![0.0; cout],
                true,
            ),
            padding: kernel / 2,
        }
    }

    pub fn apply(&self, input: &Tensor, track: bool) -> Result<Tensor> {
        input.conv2d(
            &self.weight.as_input(track),
            &self.bias.as_input(track),
            1,
            self.padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().dims()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Sets weight and bias to zero (used by the residual-identity checks).
    pub fn zero(&mut self) {
        let n = self.weight.len();
        self.weight.set_values(vec![0.0; n]).expect("same length");
        let n = self.bias.len();
        self.bias.set_values(vec![0.0; n]).expect("same length");
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Classification head: 3×3 conv + ReLU, then a 1×1 conv to the two
/// foreground/background logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub conv3: ConvLayer,
    pub conv1: ConvLayer,
}

impl ClassifierHead {
    pub fn init(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            conv3: ConvLayer::init(&format!("{name}.conv3"), channels, channels, 3, rng),
            conv1: ConvLayer::init(&format!("{name}.conv1"), channels, 2, 1, rng),
        }
    }

    pub fn apply(&self, input: &Tensor, track: bool) -> Result<Tensor> {
        let x = self.conv3.apply(input, track)?.relu();
        self.conv1.apply(&x, track)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        out.extend(self.conv3.params());
        out.extend(self.conv1.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        out.extend(self.conv3.params_mut());
        out.extend(self.conv1.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.conv3.param_count() + self.conv1.param_count()
    }
}
