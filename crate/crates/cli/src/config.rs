//! The run configuration file.
//!
//! TOML with five sections. Every key is optional; omitted keys take the
//! value of the chosen `preset` (`desk`, `la` or `pancreas`). Unknown keys
//! are rejected. [`RunConfigFile::resolved`] fills every key, and that form
//! is what gets echoed into the run directory.
//!
//! ```toml
//! preset = "desk"
//!
//! [data]
//! manifest = "data/manifest.toml"   # relative to this file
//!
//! [model]
//! arch_a = "plain"
//! arch_b = "residual"
//! base_channels = 8
//!
//! [objectives]
//! lambda_u = 1.0
//! gamma = 80.0
//!
//! [trainer]
//! iterations = 6000
//! patch = [32, 32, 32]
//!
//! [metrics]
//! sentinel = -1.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use dualseg::metrics::MetricsConfig;
use dualseg::nn::{ArchKind, Sgd, SubnetSpec};
use dualseg::objectives::{ContrastiveParams, Distance, LambdaC, LossWeights, LrSchedule, ThresholdSchedule};
use dualseg::trainer::{EvalConfig, PredictWith, TrainConfig};
use dualseg::volume::Shape3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    La,
    Pancreas,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::La => TrainConfig::la(),
            Preset::Pancreas => TrainConfig::pancreas(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch_a: Option<ArchKind>,
    pub arch_b: Option<ArchKind>,
    pub base_channels: Option<usize>,
    pub depth: Option<usize>,
    pub classes: Option<usize>,
    pub embed_dim: Option<usize>,
    pub init_seed_a: Option<u64>,
    pub init_seed_b: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectivesSection {
    pub lambda_u: Option<f64>,
    pub lambda_c_w: Option<f64>,
    pub lambda_c_a: Option<f64>,
    pub lambda_c_sign: Option<f64>,
    pub threshold_t0: Option<f64>,
    pub threshold_t1: Option<f64>,
    pub gamma: Option<f64>,
    pub distance: Option<Distance>,
    pub margin: Option<f64>,
    pub beta: Option<f64>,
    pub use_reg: Option<bool>,
    pub use_contrastive: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub iterations: Option<usize>,
    pub batch_labeled: Option<usize>,
    pub batch_unlabeled: Option<usize>,
    pub patch: Option<[usize; 3]>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_base: Option<f64>,
    pub lr_step: Option<usize>,
    pub lr_factor: Option<f64>,
    pub seed: Option<u64>,
    /// Seeds used by `train --ablate all`.
    pub seeds: Option<Vec<u64>>,
    pub checkpoint_every: Option<usize>,
    pub eval_patch: Option<[usize; 3]>,
    pub eval_stride: Option<[usize; 3]>,
    pub which: Option<PredictWith>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub sentinel: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub preset: Option<Preset>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub objectives: ObjectivesSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

/// Everything a run needs, with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub metrics: MetricsConfig,
}

fn shape(a: [usize; 3]) -> Shape3 {
    Shape3::from_array(a)
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), crate::CliError> {
        let text = fs::read_to_string(path).map_err(|e| crate::CliError::from_io(path, e, 2))?;
        let cfg = Self::parse(&text).map_err(|m| crate::CliError::usage(format!("{}: {m}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Applies the preset defaults and checks the result.
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let mut c = self.preset.unwrap_or_default().config();
        let m = &self.model;
        let spec = |arch: ArchKind, seed: u64, base: &SubnetSpec| SubnetSpec {
            arch,
            base_channels: m.base_channels.unwrap_or(base.base_channels),
            depth: m.depth.unwrap_or(base.depth),
            classes: m.classes.unwrap_or(base.classes),
            embed_dim: m.embed_dim.unwrap_or(base.embed_dim),
            init_seed: seed,
        };
        c.spec_a = spec(m.arch_a.unwrap_or(c.spec_a.arch), m.init_seed_a.unwrap_or(c.spec_a.init_seed), &c.spec_a);
        c.spec_b = spec(m.arch_b.unwrap_or(c.spec_b.arch), m.init_seed_b.unwrap_or(c.spec_b.init_seed), &c.spec_b);

        let o = &self.objectives;
        c.weights = LossWeights {
            lambda_u: o.lambda_u.unwrap_or(c.weights.lambda_u),
            lambda_c: LambdaC {
                w_c: o.lambda_c_w.unwrap_or(c.weights.lambda_c.w_c),
                a: o.lambda_c_a.unwrap_or(c.weights.lambda_c.a),
                sign: o.lambda_c_sign.unwrap_or(c.weights.lambda_c.sign),
            },
        };
        c.threshold = ThresholdSchedule {
            t0: o.threshold_t0.unwrap_or(c.threshold.t0),
            t1: o.threshold_t1.unwrap_or(c.threshold.t1),
        };
        c.gamma = o.gamma.unwrap_or(c.gamma);
        c.contrastive = ContrastiveParams {
            distance: o.distance.unwrap_or(c.contrastive.distance),
            margin: o.margin.unwrap_or(c.contrastive.margin),
            beta: o.beta.unwrap_or(c.contrastive.beta),
        };
        c.use_reg = o.use_reg.unwrap_or(c.use_reg);
        c.use_contrastive = o.use_contrastive.unwrap_or(c.use_contrastive);

        let t = &self.trainer;
        c.iterations = t.iterations.unwrap_or(c.iterations);
        c.batch_labeled = t.batch_labeled.unwrap_or(c.batch_labeled);
        c.batch_unlabeled = t.batch_unlabeled.unwrap_or(c.batch_unlabeled);
        c.patch = t.patch.map(shape).unwrap_or(c.patch);
        c.sgd = Sgd {
            momentum: t.momentum.unwrap_or(c.sgd.momentum),
            weight_decay: t.weight_decay.unwrap_or(c.sgd.weight_decay),
        };
        c.lr = LrSchedule {
            base: t.lr_base.unwrap_or(c.lr.base),
            step: t.lr_step.unwrap_or(c.lr.step),
            factor: t.lr_factor.unwrap_or(c.lr.factor),
        };
        c.seed = t.seed.unwrap_or(c.seed);
        c.checkpoint_every = t.checkpoint_every.unwrap_or(c.checkpoint_every);
        c.eval = EvalConfig {
            patch: t.eval_patch.map(shape).unwrap_or(c.eval.patch),
            stride: t.eval_stride.map(shape).unwrap_or(c.eval.stride),
            which: t.which.unwrap_or(c.eval.which),
        };
        c.validate().map_err(|e| e.to_string())?;
        let seeds = t.seeds.clone().unwrap_or_else(|| vec![c.seed]);
        if seeds.is_empty() {
            return Err("trainer.seeds must not be empty".into());
        }
        Ok(RunConfig {
            manifest: self.data.manifest.clone(),
            train: c,
            seeds,
            metrics: MetricsConfig {
                sentinel: self.metrics.sentinel.unwrap_or(MetricsConfig::default().sentinel),
            },
        })
    }

    /// The fully populated file for a resolved config.
    pub fn resolved(r: &RunConfig) -> Self {
        let c = &r.train;
        let a = |s: Shape3| Some(s.as_array());
        Self {
            preset: Some(Preset::Desk),
            data: DataSection {
                manifest: r.manifest.clone(),
            },
            model: ModelSection {
                arch_a: Some(c.spec_a.arch),
                arch_b: Some(c.spec_b.arch),
                base_channels: Some(c.spec_a.base_channels),
                depth: Some(c.spec_a.depth),
                classes: Some(c.spec_a.classes),
                embed_dim: Some(c.spec_a.embed_dim),
                init_seed_a: Some(c.spec_a.init_seed),
                init_seed_b: Some(c.spec_b.init_seed),
            },
            objectives: ObjectivesSection {
                lambda_u: Some(c.weights.lambda_u),
                lambda_c_w: Some(c.weights.lambda_c.w_c),
                lambda_c_a: Some(c.weights.lambda_c.a),
                lambda_c_sign: Some(c.weights.lambda_c.sign),
                threshold_t0: Some(c.threshold.t0),
                threshold_t1: Some(c.threshold.t1),
                gamma: Some(c.gamma),
                distance: Some(c.contrastive.distance),
                margin: Some(c.contrastive.margin),
                beta: Some(c.contrastive.beta),
                use_reg: Some(c.use_reg),
                use_contrastive: Some(c.use_contrastive),
            },
            trainer: TrainerSection {
                iterations: Some(c.iterations),
                batch_labeled: Some(c.batch_labeled),
                batch_unlabeled: Some(c.batch_unlabeled),
                patch: a(c.patch),
                momentum: Some(c.sgd.momentum),
                weight_decay: Some(c.sgd.weight_decay),
                lr_base: Some(c.lr.base),
                lr_step: Some(c.lr.step),
                lr_factor: Some(c.lr.factor),
                seed: Some(c.seed),
                seeds: Some(r.seeds.clone()),
                checkpoint_every: Some(c.checkpoint_every),
                eval_patch: a(c.eval.patch),
                eval_stride: a(c.eval.stride),
                which: Some(c.eval.which),
            },
            metrics: MetricsSection {
                sentinel: Some(r.metrics.sentinel),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
