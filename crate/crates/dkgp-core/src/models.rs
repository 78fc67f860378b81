//! Named model presets: the four architectures the benchmark compares, with
//! their feature specs and total trainable-parameter counts.
//!
//! DKL-MLP and DKL-KAN1 share the d -> 1000 -> 500 -> 50 -> 2 layer plan (same
//! neurons and layers, different edge parameterization); DKL-KAN2 is the
//! smaller d -> 256 -> 128 -> 64 -> 2 variant. The plain GP has no feature map
//! at all. Every deep model projects into a 2-D latent space, so the base
//! kernel always contributes `latent + 3` scalars (ARD lengthscales, signal
//! and noise variances, constant mean).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_param_count, init_feature, FeatureParams, FeatureSpec};
use crate::kernels::{DeepKernelParams, KernelHyperparams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gp,
    DklMlp,
    DklKan1,
    DklKan2,
}

/// All four presets in report order.
pub const ALL_MODELS: [ModelKind; 4] =
    [ModelKind::Gp, ModelKind::DklMlp, ModelKind::DklKan1, ModelKind::DklKan2];

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gp => "gp",
            ModelKind::DklMlp => "dkl-mlp",
            ModelKind::DklKan1 => "dkl-kan1",
            ModelKind::DklKan2 => "dkl-kan2",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "gp" => Ok(ModelKind::Gp),
            "dkl-mlp" => Ok(ModelKind::DklMlp),
            "dkl-kan1" => Ok(ModelKind::DklKan1),
            "dkl-kan2" => Ok(ModelKind::DklKan2),
            _ => Err(Error::UnknownModel { name: name.to_string() }),
        }
    }

    /// Feature architecture for input dimension `d`; `None` for the plain GP.
    pub fn feature_spec(self, d: usize) -> Option<FeatureSpec> {
        match self {
            ModelKind::Gp => None,
            ModelKind::DklMlp => Some(FeatureSpec::mlp(vec![d, 1000, 500, 50, 2])),
            ModelKind::DklKan1 => Some(FeatureSpec::kan(vec![d, 1000, 500, 50, 2])),
            ModelKind::DklKan2 => Some(FeatureSpec::kan(vec![d, 256, 128, 64, 2])),
        }
    }

    /// Width of the space the base kernel sees.
    pub fn latent_dim(self, d: usize) -> usize {
        match self {
            ModelKind::Gp => d,
            _ => 2,
        }
    }

    /// Total trainable scalars: feature parameters plus `latent + 3` kernel
    /// hyperparameters (lengthscales, two log-variances, constant mean).
    pub fn total_param_count(self, d: usize) -> usize {
        let feat = self.feature_spec(d).map(|s| feature_param_count(&s)).unwrap_or(0);
        feat + self.latent_dim(d) + 3
    }
}

/// Construct an untrained model: seeded feature initialization plus the
/// default kernel hyperparameters centered on the target mean.
pub fn build_model(kind: ModelKind, d: usize, y_mean: f64, seed: u64) -> Result<DeepKernelParams> {
    let feature = match kind.feature_spec(d) {
        None => FeatureParams::Identity,
        Some(spec) => init_feature(&spec, seed)?,
    };
    Ok(DeepKernelParams { feature, base: KernelHyperparams::init(kind.latent_dim(d), y_mean) })
}
