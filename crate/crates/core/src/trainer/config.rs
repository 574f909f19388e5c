//! Training configuration and the published presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchKind, Sgd, SubnetSpec};
use crate::objectives::{ContrastiveParams, LambdaC, LossWeights, LrSchedule, ThresholdSchedule};
use crate::volume::Shape3;

/// Which subnet's probabilities become the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictWith {
    A,
    B,
    Mean,
}

/// Sliding-window evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub patch: Shape3,
    pub stride: Shape3,
    pub which: PredictWith,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub spec_a: SubnetSpec,
    pub spec_b: SubnetSpec,
    /// `t_max`.
    pub iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub patch: Shape3,
    pub sgd: Sgd,
    pub lr: LrSchedule,
    pub weights: LossWeights,
    pub threshold: ThresholdSchedule,
    /// Entropy percentile for keeping pseudo-labelled voxels.
    pub gamma: f64,
    pub contrastive: ContrastiveParams,
    pub use_reg: bool,
    pub use_contrastive: bool,
    pub seed: u64,
    /// Checkpoint cadence in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: K = 2, D = 8, base 8, depth 3, 32³ patches, and
    /// the published optimizer, schedules and batch sizes.
    pub fn desk() -> Self {
        let patch = Shape3::cube(32);
        Self {
            spec_a: SubnetSpec::desk(ArchKind::Plain),
            spec_b: SubnetSpec::desk(ArchKind::Residual),
            iterations: 6000,
            batch_labeled: 2,
            batch_unlabeled: 2,
            patch,
            sgd: Sgd::default(),
            lr: LrSchedule::default(),
            weights: LossWeights::default(),
            threshold: ThresholdSchedule::default(),
            gamma: 80.0,
            contrastive: ContrastiveParams::default(),
            use_reg: true,
            use_contrastive: true,
            seed: 0,
            checkpoint_every: 500,
            eval: EvalConfig {
                patch,
                stride: Shape3::cube(16),
                which: PredictWith::Mean,
            },
        }
    }

    /// Left-atrium recipe: 112×112×80 patches, inference stride 18×18×4.
    pub fn la() -> Self {
        let patch = Shape3::new(112, 112, 80);
        Self {
            patch,
            eval: EvalConfig {
                patch,
                stride: Shape3::new(18, 18, 4),
                which: PredictWith::Mean,
            },
            ..Self::desk()
        }
    }

    /// Pancreas CT recipe: 96³ patches, inference stride 16³.
    pub fn pancreas() -> Self {
        let patch = Shape3::cube(96);
        Self {
            patch,
            eval: EvalConfig {
                patch,
                stride: Shape3::cube(16),
                which: PredictWith::Mean,
            },
            ..Self::desk()
        }
    }

    pub fn classes(&self) -> usize {
        self.spec_a.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.spec_a.validate()?;
        self.spec_b.validate()?;
        if self.spec_a.arch == self.spec_b.arch {
            return bad("spec_a and spec_b must use different architectures".into());
        }
        if self.spec_a.classes != self.spec_b.classes || self.spec_a.embed_dim != self.spec_b.embed_dim {
            return bad("spec_a and spec_b must share classes and embed_dim".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1".into());
        }
        if self.needs_unlabeled() && self.batch_unlabeled == 0 {
            return bad("batch_unlabeled must be >= 1 when the unlabeled losses are active".into());
        }
        self.patch.check_positive("patch")?;
        self.eval.patch.check_positive("eval.patch")?;
        self.eval.stride.check_positive("eval.stride")?;
        if !(0.0..=100.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 100], got {}", self.gamma));
        }
        if !(self.sgd.momentum >= 0.0 && self.sgd.momentum < 1.0) || !(self.sgd.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {:?}", self.sgd));
        }
        if !(self.contrastive.margin >= 0.0) || !(self.contrastive.beta >= 0.0) {
            return bad("contrastive margin and beta must be >= 0".into());
        }
        self.lr.validate()?;
        self.weights.validate()?;
        self.threshold.validate(self.classes())?;
        Ok(())
    }

    /// Whether any loss term reads the unlabeled batch.
    pub fn needs_unlabeled(&self) -> bool {
        self.weights.lambda_u > 0.0 || (self.use_contrastive && self.weights.lambda_c.w_c > 0.0)
    }
}

/// The four trained variants compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoReg,
    NoContrastive,
    LabeledOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoReg, Variant::NoContrastive, Variant::LabeledOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReg => "no_reg",
            Variant::NoContrastive => "no_contrastive",
            Variant::LabeledOnly => "labeled_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoReg => c.use_reg = false,
            Variant::NoContrastive => c.use_contrastive = false,
            Variant::LabeledOnly => {
                c.weights.lambda_u = 0.0;
                c.weights.lambda_c = LambdaC { w_c: 0.0, ..c.weights.lambda_c };
            }
        }
        c
    }
}
