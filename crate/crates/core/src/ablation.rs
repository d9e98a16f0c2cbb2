//! Named ablations of the standard fusion recipe.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::init_bridge::AdapterInit;
use crate::train::{FeatureSource, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Loss over the whole prompt, not just the response.
    NoMasking,
    /// Standard-normal noise in place of encoder output.
    RandomFeatures,
    /// Gaussian adapters and an all-zero padding template.
    NoInit,
    /// No acoustic branch at all.
    NoSaW,
    /// Four times the prefix length.
    BigAdapter,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown ablation {name:?}; valid names: {}", Ablation::NAMES.join(", "))]
pub struct UnknownAblation {
    pub name: String,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::NoMasking, Ablation::RandomFeatures, Ablation::NoInit, Ablation::NoSaW, Ablation::BigAdapter];
    pub const NAMES: [&'static str; 5] = ["no-masking", "random-features", "no-init", "no-sa-w", "big-adapter"];

    pub fn parse(name: &str) -> Result<Self, UnknownAblation> {
        Self::NAMES.iter().position(|&n| n == name).map(|i| Self::ALL[i]).ok_or_else(|| UnknownAblation { name: name.into() })
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[Self::ALL.iter().position(|&a| a == self).expect("listed")]
    }

    /// Rewrites the configs for this ablation and returns the adapter init.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) -> AdapterInit {
        match self {
            Ablation::NoMasking => train.masked = false,
            Ablation::RandomFeatures => train.features = FeatureSource::Random,
            Ablation::NoInit => return AdapterInit::NO_INIT,
            Ablation::NoSaW => model.acoustic_branch = false,
            Ablation::BigAdapter => model.prefix_len *= 4,
        }
        AdapterInit::Bridge
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Ok(a));
        }
        let err = Ablation::parse("no-lm").unwrap_err().to_string();
        assert!(Ablation::NAMES.iter().all(|n| err.contains(n)), "{err}");
    }

    #[test]
    fn each_ablation_changes_one_thing() {
        let base_model = ModelConfig::default();
        let base_train = TrainConfig::default();
        let run = |a: Ablation| {
            let (mut m, mut t) = (base_model.clone(), base_train.clone());
            let init = a.apply(&mut m, &mut t);
            (m, t, init)
        };
        assert!(!run(Ablation::NoMasking).1.masked);
        assert_eq!(run(Ablation::RandomFeatures).1.features, FeatureSource::Random);
        assert_eq!(run(Ablation::NoInit).2, AdapterInit::NO_INIT);
        let (m, _, _) = run(Ablation::NoSaW);
        assert!(!m.acoustic_branch);
        assert_eq!(m.trainable_param_count(), 2568);
        let (m, t, init) = run(Ablation::BigAdapter);
        assert_eq!(m.prefix_len, 40);
        assert_eq!((t, init), (base_train, AdapterInit::Bridge));
    }
}
