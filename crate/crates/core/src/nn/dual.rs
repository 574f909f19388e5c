//! The two-stream model, its optimizer and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::subnet::{BatchOutput, Subnet, SubnetSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{EmbeddingMap, ProbMap, Volume};

/// Subnet selector for forward passes and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    A,
    B,
    Both,
}

/// Per-voxel outputs of one subnet on one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut<T> {
    pub probs: ProbMap<T>,
    pub embeddings: EmbeddingMap<T>,
}

impl<T: Scalar> BatchOutput<T> {
    /// Splits out sample `i` of the batch.
    pub fn item(&self, i: usize) -> ForwardOut<T> {
        let dims = self.probs.dims;
        ForwardOut {
            probs: ProbMap::from_raw(dims, self.probs.c, self.probs.sample(i).to_vec()).expect("softmax output"),
            embeddings: EmbeddingMap::new(dims, self.embeddings.c, self.embeddings.sample(i).to_vec())
                .expect("embedding output"),
        }
    }
}

/// Stacks equally shaped volumes into a single-channel batch.
pub fn batch_tensor<T: Scalar>(volumes: &[&Volume<T>]) -> Result<Tensor<T>> {
    let first = volumes.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let dims = first.shape();
    let mut data = Vec::with_capacity(volumes.len() * dims.len());
    for v in volumes {
        if v.shape() != dims {
            return Err(Error::shape(format!("batch mixes {} and {}", dims, v.shape())));
        }
        data.extend_from_slice(v.values());
    }
    Ok(Tensor::from_vec(volumes.len(), 1, dims, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualModel<T> {
    pub a: Subnet<T>,
    pub b: Subnet<T>,
    /// Number of optimizer steps applied so far.
    pub iteration: usize,
}

fn subnet_seed(seed: u64, spec: &SubnetSpec) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ spec.init_seed
}

pub fn init_dual<T: Scalar>(spec_a: SubnetSpec, spec_b: SubnetSpec, seed: u64) -> Result<DualModel<T>> {
    if spec_a.arch == spec_b.arch {
        return Err(Error::invalid(format!(
            "the two subnets must differ in architecture, both are {:?}",
            spec_a.arch
        )));
    }
    if spec_a.classes != spec_b.classes || spec_a.embed_dim != spec_b.embed_dim {
        return Err(Error::invalid(format!(
            "subnets must share (K, D): A has ({}, {}), B has ({}, {})",
            spec_a.classes, spec_a.embed_dim, spec_b.classes, spec_b.embed_dim
        )));
    }
    Ok(DualModel {
        a: Subnet::new(spec_a, subnet_seed(seed, &spec_a))?,
        b: Subnet::new(spec_b, subnet_seed(seed, &spec_b))?,
        iteration: 0,
    })
}

impl<T: Scalar> DualModel<T> {
    pub fn subnet(&self, which: Which) -> &Subnet<T> {
        match which {
            Which::B => &self.b,
            _ => &self.a,
        }
    }

    /// Forwards one patch through the requested subnets, in order A then B.
    pub fn forward(&self, patch: &Volume<T>, which: Which) -> Result<Vec<ForwardOut<T>>> {
        let x = batch_tensor(&[patch])?;
        let nets: &[&Subnet<T>] = match which {
            Which::A => &[&self.a],
            Which::B => &[&self.b],
            Which::Both => &[&self.a, &self.b],
        };
        nets.iter().map(|n| Ok(n.forward(&x)?.item(0))).collect()
    }

    pub fn count_parameters(&self) -> (usize, usize) {
        (self.a.parameter_count(), self.b.parameter_count())
    }

    pub fn zero_grad(&mut self) {
        self.a.zero_grad();
        self.b.zero_grad();
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on
/// parameters flagged for decay: `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Sgd {
    pub fn step<T: Scalar>(&self, net: &mut Subnet<T>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        net.visit_params_mut(&mut |p| {
            let decay = if p.decay { wd } else { T::zero() };
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(p.velocity.iter_mut()) {
                *v = mu * *v + *g + decay * *w;
                *w -= lr * *v;
            }
        });
    }
}

pub const CHECKPOINT_FORMAT: &str = "dualseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint (JSON). Values are stored as f64, which is exact for
/// both f32 and f64 models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub iteration: usize,
    pub spec_a: SubnetSpec,
    pub spec_b: SubnetSpec,
    pub params_a: Vec<f64>,
    pub params_b: Vec<f64>,
    pub velocity_a: Vec<f64>,
    pub velocity_b: Vec<f64>,
}

fn flat_velocity<T: Scalar>(net: &Subnet<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.parameter_count());
    net.visit_params(&mut |p| out.extend(p.velocity.iter().map(|v| v.as_f64())));
    out
}

fn restore<T: Scalar>(spec: SubnetSpec, params: &[f64], velocity: &[f64]) -> Result<Subnet<T>> {
    let mut net = Subnet::new(spec, 0)?;
    let flat: Vec<T> = params.iter().map(|&v| T::lit(v)).collect();
    net.load_flat_params(&flat)?;
    if velocity.len() != params.len() {
        return Err(Error::Checkpoint("velocity and parameter lengths differ".into()));
    }
    let mut off = 0;
    net.visit_params_mut(&mut |p| {
        for v in p.velocity.iter_mut() {
            *v = T::lit(velocity[off]);
            off += 1;
        }
    });
    Ok(net)
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &DualModel<T>) -> Self {
        let to64 = |v: Vec<T>| v.into_iter().map(|x| x.as_f64()).collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            iteration: model.iteration,
            spec_a: *model.a.spec(),
            spec_b: *model.b.spec(),
            params_a: to64(model.a.flat_params()),
            params_b: to64(model.b.flat_params()),
            velocity_a: flat_velocity(&model.a),
            velocity_b: flat_velocity(&model.b),
        }
    }

    pub fn into_model<T: Scalar>(&self) -> Result<DualModel<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut model = init_dual::<T>(self.spec_a, self.spec_b, 0)?;
        model.a = restore(self.spec_a, &self.params_a, &self.velocity_a)?;
        model.b = restore(self.spec_b, &self.params_b, &self.velocity_b)?;
        model.iteration = self.iteration;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_checkpoint<T: Scalar>(model: &DualModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::capture(model).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<DualModel<T>> {
    Checkpoint::load(path)?.into_model()
}
