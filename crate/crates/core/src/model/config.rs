use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::disentangle::{Backend, Renormalize, ScorerKind, SoftmaxInput};
use crate::error::{Error, Result};
use crate::graph::LabelSource;
use crate::ssl::ConformityNegatives;

/// Every knob of a training run. Field names double as the flat
/// `--key value` override names on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of edge recovery.
    pub lambda1: f64,
    /// Weight of label conformity.
    pub lambda2: f64,
    /// Weight of channel difference.
    pub lambda3: f64,
    pub p_e: f64,
    /// Node-only updates between consecutive full-objective updates.
    pub n_step: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Outer iterations without a validation improvement before stopping.
    pub patience: usize,
    pub channels: usize,
    pub d_channel: usize,
    /// Width of the first layer's fused output.
    pub hidden: usize,
    /// Width of the second layer's fused output.
    pub layer2_out: usize,
    pub scorer_hidden: usize,
    pub classifier_hidden: usize,
    pub disc_hidden: usize,
    pub scorer: ScorerKind,
    pub backend: Backend,
    pub softmax_input: SoftmaxInput,
    pub renormalize: Renormalize,
    pub slope: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Nodes per step fed to the channel discriminator.
    pub channel_node_cap: usize,
    pub conformity_negatives: ConformityNegatives,
    pub label_source: LabelSource,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 100.0,
            lambda3: 1.0,
            p_e: 1.0,
            n_step: 5,
            lr: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 1000,
            patience: 100,
            channels: 8,
            d_channel: 16,
            hidden: 64,
            layer2_out: 64,
            scorer_hidden: 16,
            classifier_hidden: 64,
            disc_hidden: 32,
            scorer: ScorerKind::Mlp,
            backend: Backend::Attn,
            softmax_input: SoftmaxInput::Probability,
            renormalize: Renormalize::None,
            slope: 0.2,
            clip_norm: 5.0,
            channel_node_cap: 512,
            conformity_negatives: ConformityNegatives::AllPairs,
            label_source: LabelSource::Train,
            split: [0.2, 0.3, 0.5],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The same configuration with every self-supervised weight set to zero.
    pub fn base(&self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..self.clone()
        }
    }

    pub fn uses_ssl(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0 || self.lambda3 > 0.0
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.n_step == 0 {
            return bad("n_step must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.p_e > 0.0 && self.p_e <= 1.0) {
            return bad(format!("p_e must lie in (0,1], got {}", self.p_e));
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return bad(format!(
                "channel count must be even and at least 2, got {}",
                self.channels
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad(format!("slope must lie in (0,1), got {}", self.slope));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        let dims = [
            self.d_channel,
            self.hidden,
            self.layer2_out,
            self.scorer_hidden,
            self.classifier_hidden,
            self.disc_hidden,
            self.channel_node_cap,
        ];
        if dims.contains(&0) {
            return bad("all widths and caps must be positive".into());
        }
        let [a, b, c] = self.split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios must be positive and sum to 1, got {:?}", self.split));
        }
        Ok(())
    }
}
