use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

/// Architecture variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTbranch,
    NoUnet,
    OneStep,
    OneStepNoTbranch,
    DeeponetOnestep,
    DeeponetMultistep,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoTbranch,
        Variant::NoUnet,
        Variant::OneStep,
        Variant::OneStepNoTbranch,
        Variant::DeeponetOnestep,
        Variant::DeeponetMultistep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTbranch => "no_tbranch",
            Variant::NoUnet => "no_unet",
            Variant::OneStep => "one_step",
            Variant::OneStepNoTbranch => "one_step_no_tbranch",
            Variant::DeeponetOnestep => "deeponet_onestep",
            Variant::DeeponetMultistep => "deeponet_multistep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Variants that predict a single step per forward pass.
    pub fn is_one_step(self) -> bool {
        matches!(
            self,
            Variant::OneStep | Variant::OneStepNoTbranch | Variant::DeeponetOnestep
        )
    }

    pub fn has_tbranch(self) -> bool {
        matches!(self, Variant::Full | Variant::NoUnet | Variant::OneStep)
    }

    pub fn is_deeponet(self) -> bool {
        matches!(self, Variant::DeeponetOnestep | Variant::DeeponetMultistep)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters.
/// Time coordinate fed to the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkTime {
    /// Zero at every forecast origin, so rollouts beyond the training window
    /// never query the trunk at unseen times.
    #[default]
    Relative,
    /// Origin index scaled to `[-1, 1]` over the trajectory length.
    Absolute,
}

impl TrunkTime {
    pub fn coordinate(self, origin: usize, horizon: usize) -> f64 {
        match self {
            TrunkTime::Relative => 0.0,
            TrunkTime::Absolute => crate::data::normalized_time(origin, horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TnoConfig {
    /// History length `L`.
    pub history: usize,
    /// Bundle length `K`.
    pub bundle: usize,
    /// Latent dimension `p`.
    pub latent: usize,
    /// Adaptive pooling resolution `S`. Running the U-Net needs `S % 8 == 0`.
    pub pool_size: usize,
    /// Channels of the input function fed to the branch.
    pub input_channels: usize,
    pub branch_activation: Activation,
    pub tbranch_activation: Activation,
    pub trunk_activation: Activation,
    pub decoder_activation: Activation,
    pub branch_output_activation: Option<Activation>,
    pub tbranch_output_activation: Option<Activation>,
    pub unet_base_channels: usize,
    pub trunk_hidden: Vec<usize>,
    /// Decoder hidden widths; empty means `[2p, 2p]`.
    pub decoder_hidden: Vec<usize>,
    /// Hidden widths of the DeepONet branch MLP.
    pub deeponet_hidden: Vec<usize>,
    pub variant: Variant,
    #[serde(default)]
    pub trunk_time: TrunkTime,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for TnoConfig {
    fn default() -> Self {
        Self {
            history: 1,
            bundle: 4,
            latent: 20,
            pool_size: 32,
            input_channels: 1,
            branch_activation: Activation::Silu,
            tbranch_activation: Activation::Silu,
            trunk_activation: Activation::Tanh,
            decoder_activation: Activation::Silu,
            branch_output_activation: None,
            tbranch_output_activation: None,
            unet_base_channels: 8,
            trunk_hidden: vec![32, 32],
            decoder_hidden: Vec::new(),
            deeponet_hidden: vec![64, 64],
            variant: Variant::Full,
            trunk_time: TrunkTime::Relative,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
            seed: 0,
        }
    }
}

impl TnoConfig {
    /// Copy of `self` adjusted for `variant` (one-step variants get `K = 1`).
    pub fn for_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        if variant.is_one_step() {
            c.bundle = 1;
        }
        c
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        if self.decoder_hidden.is_empty() {
            vec![2 * self.latent, 2 * self.latent]
        } else {
            self.decoder_hidden.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("history", self.history),
            ("bundle", self.bundle),
            ("latent", self.latent),
            ("pool_size", self.pool_size),
            ("input_channels", self.input_channels),
            ("unet_base_channels", self.unet_base_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.variant.is_one_step() && self.bundle != 1 {
            return Err(Error::Config(format!(
                "variant {} requires bundle = 1, got {}",
                self.variant, self.bundle
            )));
        }
        if self.trunk_hidden.contains(&0)
            || self.decoder_hidden.contains(&0)
            || self.deeponet_hidden.contains(&0)
        {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("bn_momentum in [0, 1] and bn_eps > 0 required".into()));
        }
        Ok(())
    }
}
