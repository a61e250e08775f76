use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::tensor::Tensor;

/// Default network input side; tiles are resampled to this before entry.
pub const DEFAULT_INPUT_SIDE: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FiveLayer,
    EightLayer,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "five_layer" | "five" | "5" => Ok(Variant::FiveLayer),
            "eight_layer" | "eight" | "8" => Ok(Variant::EightLayer),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: u32,
    pub out_channels: u32,
    pub pool: bool,
}

const fn conv(kernel: u32, out_channels: u32, pool: bool) -> ConvLayerSpec {
    ConvLayerSpec {
        kernel,
        out_channels,
        pool,
    }
}

/// Convolutional stack on a single luminance channel, followed by global
/// average pooling, one dense unit and a sigmoid. All convolutions are
/// valid-padded with stride 1 and followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub input_side: u32,
    pub layers: Vec<ConvLayerSpec>,
}

/// Spatial sides through the stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub in_side: usize,
    pub conv_side: usize,
    pub out_side: usize,
}

impl ArchitectureSpec {
    pub fn new(variant: Variant, input_side: u32) -> Result<Self> {
        let layers = match variant {
            Variant::FiveLayer => vec![
                conv(3, 16, true),
                conv(3, 32, true),
                conv(3, 64, true),
                conv(3, 128, true),
                conv(3, 128, false),
            ],
            // Larger kernels up front; pools after layers 1, 2 and 4.
            Variant::EightLayer => vec![
                conv(7, 16, true),
                conv(5, 32, true),
                conv(3, 64, false),
                conv(3, 64, true),
                conv(3, 128, false),
                conv(3, 128, false),
                conv(3, 256, false),
                conv(3, 256, false),
            ],
        };
        let spec = Self {
            variant,
            input_side,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn five_layer(input_side: u32) -> Result<Self> {
        Self::new(Variant::FiveLayer, input_side)
    }

    pub fn eight_layer(input_side: u32) -> Result<Self> {
        Self::new(Variant::EightLayer, input_side)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.variant {
            Variant::FiveLayer => 5,
            Variant::EightLayer => 8,
        };
        if self.layers.len() != expected {
            return Err(Error::Config(format!(
                "{:?} needs {expected} conv layers, spec has {}",
                self.variant,
                self.layers.len()
            )));
        }
        if self.variant == Variant::EightLayer {
            let early = self.layers[0].kernel.min(self.layers[1].kernel);
            let late = self.layers[2..].iter().map(|l| l.kernel).max().unwrap_or(0);
            if early <= late {
                return Err(Error::Config("eight-layer early kernels must exceed later ones".into()));
            }
        }
        self.layer_shapes().map(|_| ())
    }

    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut side = self.input_side as usize;
        let mut channels = 1usize;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let k = l.kernel as usize;
            if side < k {
                return Err(Error::Config(format!(
                    "input side {} too small: layer {} sees {side}px for a {k}px kernel",
                    self.input_side,
                    i + 1
                )));
            }
            let conv_side = side - k + 1;
            let out_side = if l.pool { conv_side / 2 } else { conv_side };
            if out_side == 0 {
                return Err(Error::Config(format!(
                    "input side {} too small: layer {} pools a {conv_side}px map",
                    self.input_side,
                    i + 1
                )));
            }
            shapes.push(LayerShape {
                in_channels: channels,
                in_side: side,
                conv_side,
                out_side,
            });
            side = out_side;
            channels = l.out_channels as usize;
        }
        Ok(shapes)
    }

    /// Smallest input side the stack accepts.
    pub fn min_input_side(variant: Variant) -> u32 {
        (1..4096)
            .find(|&s| Self::new(variant, s).is_ok())
            .expect("some input side fits")
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_channels as usize)
    }

    /// Tensor names and shapes in parameter order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = 1usize;
        for (i, l) in self.layers.iter().enumerate() {
            let (o, k) = (l.out_channels as usize, l.kernel as usize);
            out.push((format!("conv{i}.weight"), vec![o, in_ch, k, k]));
            out.push((format!("conv{i}.bias"), vec![o]));
            in_ch = o;
        }
        out.push(("dense.weight".into(), vec![1, in_ch]));
        out.push(("dense.bias".into(), vec![1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Learned tensors in [`ArchitectureSpec::parameter_layout`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub tensors: Vec<NamedTensor>,
}

impl Parameters {
    /// He-uniform weights, zero biases.
    pub fn init(spec: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let tensors = spec
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt() as f32;
                    let n = shape.iter().product();
                    let v = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    Tensor::new(shape, v).expect("layout shape")
                } else {
                    Tensor::zeros(shape)
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Self { tensors }
    }

    pub fn check(&self, spec: &ArchitectureSpec) -> Result<()> {
        let layout = spec.parameter_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for a spec expecting {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if name != &t.name || shape.as_slice() != t.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match `{name}` {shape:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    /// Zeroes the dense head, making every prediction exactly 0.5.
    pub fn zero_head(&mut self) {
        for name in ["dense.weight", "dense.bias"] {
            if let Some(t) = self.get_mut(name) {
                t.values_mut().fill(0.0);
            }
        }
    }
}
