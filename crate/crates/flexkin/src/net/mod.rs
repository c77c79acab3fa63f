//! The fusion network: per-view expansion, multi-view convolution,
//! cross-view attention, the two encoders, and per-joint discriminators,
//! all built on the tape in `crate::tape`.

mod fk;
mod layers;
mod model;

pub use fk::{fk_view, FkView};
pub use layers::{multiview_conv, view_attention, AttentionParams, MultiViewConvParams};
pub use model::{EncodedMotion, FlexModel, ForwardOutput};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::tape::{Tape, Tensor, TensorId};

/// Where the per-view streams merge into shared features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Fuse right after the expansion layer (default; works best).
    Early,
    /// One per-view convolution stage before fusing.
    Middle,
    /// A full per-view stack; views meet only at attention + collapse.
    Late,
}

impl Default for FusionMode {
    fn default() -> Self {
        FusionMode::Early
    }
}

fn default_input_scale() -> f64 {
    1e-3
}

/// Architecture hyperparameters of the fusion layers and encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Channel width after the expansion layer.
    pub channels: usize,
    /// Attention heads; `channels` must divide evenly.
    pub heads: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    /// Kernel sizes of the three parallel convolutions in the rotation encoder.
    pub eq_kernels: [usize; 3],
    #[serde(default)]
    pub dropout: f64,
    /// View count the root head is sized for.
    pub views: usize,
    /// Kernel size of the expansion convolution.
    pub expansion_kernel: usize,
    /// Discriminator width and kernel size.
    pub disc_channels: usize,
    pub disc_kernel: usize,
    /// Input pixel coordinates are multiplied by this before the network.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            fusion: FusionMode::Early,
            eq_kernels: [3, 5, 7],
            dropout: 0.0,
            views: 4,
            expansion_kernel: 3,
            disc_channels: 16,
            disc_kernel: 5,
            input_scale: 1e-3,
        }
    }
}

impl FusionConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(FlexError::InvalidConfig(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        for k in self
            .eq_kernels
            .iter()
            .chain([&self.expansion_kernel, &self.disc_kernel])
        {
            if k % 2 == 0 {
                return Err(FlexError::InvalidConfig(format!("kernel size {k} must be odd")));
            }
        }
        if self.views == 0 {
            return Err(FlexError::InvalidConfig("views must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FlexError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if self.disc_channels == 0 || self.input_scale <= 0.0 {
            return Err(FlexError::InvalidConfig("bad discriminator width or input scale".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered parameter storage; registration order defines the checkpoint
/// layout and the optimizer state indexing.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.params[idx].values
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    fn register(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            shape,
            values,
        });
        self.params.len() - 1
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Tape leaves for every parameter of one forward/backward pass.
pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    pub fn id(&self, idx: usize) -> TensorId {
        self.ids[idx]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl ParamStore {
    /// Insert every parameter as a tape leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding {
            ids: self
                .params
                .iter()
                .map(|p| tape.leaf(Tensor::new(p.shape.clone(), p.values.clone())))
                .collect(),
        }
    }
}
