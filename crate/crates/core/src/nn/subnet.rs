//! Encoder-decoder subnetworks: a plain conv stack and a residual variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu_backward, relu_inplace, Conv3d, ConvGeom, InstanceNorm, NormTape, Param, UpConv3d};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// One conv-norm-relu block per stage, additive skips (V-Net style).
    Plain,
    /// Residual stages (ResNet style): two-conv blocks in the encoder,
    /// one-conv residual units in the decoder.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetSpec {
    pub arch: ArchKind,
    pub base_channels: usize,
    /// Number of encoder resolution levels.
    pub depth: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub init_seed: u64,
}

impl SubnetSpec {
    pub fn desk(arch: ArchKind) -> Self {
        Self {
            arch,
            base_channels: 8,
            depth: 3,
            classes: 2,
            embed_dim: 8,
            init_seed: match arch {
                ArchKind::Plain => 1,
                ArchKind::Residual => 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::invalid(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.depth < 2 {
            return Err(Error::invalid(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::invalid(format!("classes must be in [2, 256], got {}", self.classes)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial granularity required by the down/up path.
    pub fn granularity(&self) -> usize {
        1 << (self.depth - 1)
    }
}

const SAME3: ConvGeom = ConvGeom { k: 3, stride: 1, pad: 1 };
const DOWN2: ConvGeom = ConvGeom { k: 2, stride: 2, pad: 0 };
const POINT: ConvGeom = ConvGeom { k: 1, stride: 1, pad: 0 };

#[derive(Debug, Clone, PartialEq)]
enum Op<T> {
    Conv(Conv3d<T>),
    Up(UpConv3d<T>),
}

/// Convolution followed by instance norm and an optional ReLU.
#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    op: Op<T>,
    norm: InstanceNorm<T>,
    relu: bool,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    input: Tensor<T>,
    norm: NormTape<T>,
    out: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn conv(cin: usize, cout: usize, geom: ConvGeom, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            op: Op::Conv(Conv3d::new(cin, cout, geom, 2.0, rng)),
            norm: InstanceNorm::new(cout),
            relu,
        }
    }

    fn up(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            op: Op::Up(UpConv3d::new(cin, cout, 2.0, rng)),
            norm: InstanceNorm::new(cout),
            relu: true,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormTape<T>) {
        let y = match &self.op {
            Op::Conv(c) => c.forward(x),
            Op::Up(u) => u.forward(x),
        };
        let (mut out, tape) = self.norm.forward(y);
        if self.relu {
            relu_inplace(&mut out);
        }
        (out, tape)
    }

    fn forward_taped(&self, x: &Tensor<T>) -> (Tensor<T>, BlockTape<T>) {
        let (out, norm) = self.forward(x);
        let tape = BlockTape {
            input: x.clone(),
            norm,
            out: out.clone(),
        };
        (out, tape)
    }

    fn backward(&mut self, tape: &BlockTape<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        if self.relu {
            relu_backward(&tape.out, &mut dy);
        }
        let dconv = self.norm.backward(&tape.norm, dy);
        match &mut self.op {
            Op::Conv(c) => c.backward(&tape.input, &dconv, need_dx),
            Op::Up(u) => u.backward(&tape.input, &dconv, need_dx),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match &self.op {
            Op::Conv(c) => c.params().into_iter().for_each(&mut *f),
            Op::Up(u) => u.params().into_iter().for_each(&mut *f),
        }
        self.norm.params().into_iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.op {
            Op::Conv(c) => c.params_mut().into_iter().for_each(&mut *f),
            Op::Up(u) => u.params_mut().into_iter().for_each(&mut *f),
        }
        self.norm.params_mut().into_iter().for_each(f);
    }
}

/// Same-resolution processing unit of one level.
#[derive(Debug, Clone, PartialEq)]
enum Stage<T> {
    Plain(Block<T>),
    /// `relu(x + norm(conv(relu(norm(conv(x))))))`
    Residual(Block<T>, Block<T>),
    /// `relu(x + norm(conv(x)))`
    Unit(Block<T>),
}

#[derive(Debug, Clone)]
enum StageTape<T> {
    Plain(BlockTape<T>),
    Residual(BlockTape<T>, BlockTape<T>, Tensor<T>),
    Unit(BlockTape<T>, Tensor<T>),
}

impl<T: Scalar> Stage<T> {
    fn encoder(arch: ArchKind, c: usize, rng: &mut ChaCha8Rng) -> Self {
        match arch {
            ArchKind::Plain => Stage::Plain(Block::conv(c, c, SAME3, true, rng)),
            ArchKind::Residual => Stage::Residual(
                Block::conv(c, c, SAME3, true, rng),
                Block::conv(c, c, SAME3, false, rng),
            ),
        }
    }

    fn decoder(arch: ArchKind, c: usize, rng: &mut ChaCha8Rng) -> Self {
        match arch {
            ArchKind::Plain => Stage::Plain(Block::conv(c, c, SAME3, true, rng)),
            ArchKind::Residual => Stage::Unit(Block::conv(c, c, SAME3, false, rng)),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Stage::Plain(b) => b.forward(x).0,
            Stage::Residual(a, b) => {
                let h = a.forward(x).0;
                let mut y = b.forward(&h).0;
                y.add_assign(x);
                relu_inplace(&mut y);
                y
            }
            Stage::Unit(a) => {
                let mut y = a.forward(x).0;
                y.add_assign(x);
                relu_inplace(&mut y);
                y
            }
        }
    }

    fn forward_taped(&self, x: &Tensor<T>) -> (Tensor<T>, StageTape<T>) {
        match self {
            Stage::Plain(b) => {
                let (y, t) = b.forward_taped(x);
                (y, StageTape::Plain(t))
            }
            Stage::Residual(a, b) => {
                let (h, ta) = a.forward_taped(x);
                let (mut y, tb) = b.forward_taped(&h);
                y.add_assign(x);
                relu_inplace(&mut y);
                (y.clone(), StageTape::Residual(ta, tb, y))
            }
            Stage::Unit(a) => {
                let (mut y, ta) = a.forward_taped(x);
                y.add_assign(x);
                relu_inplace(&mut y);
                (y.clone(), StageTape::Unit(ta, y))
            }
        }
    }

    fn backward(&mut self, tape: &StageTape<T>, mut dy: Tensor<T>) -> Tensor<T> {
        match (self, tape) {
            (Stage::Plain(b), StageTape::Plain(t)) => b.backward(t, dy, true).expect("input gradient"),
            (Stage::Residual(a, b), StageTape::Residual(ta, tb, out)) => {
                relu_backward(out, &mut dy);
                let dh = b.backward(tb, dy.clone(), true).expect("input gradient");
                let mut dx = a.backward(ta, dh, true).expect("input gradient");
                dx.add_assign(&dy);
                dx
            }
            (Stage::Unit(a), StageTape::Unit(ta, out)) => {
                relu_backward(out, &mut dy);
                let mut dx = a.backward(ta, dy.clone(), true).expect("input gradient");
                dx.add_assign(&dy);
                dx
            }
            _ => unreachable!("stage tape does not match stage kind"),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Stage::Plain(b) => b.visit(f),
            Stage::Residual(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Stage::Unit(a) => a.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Stage::Plain(b) => b.visit_mut(f),
            Stage::Residual(a, b) => {
                a.visit_mut(f);
                b.visit_mut(f);
            }
            Stage::Unit(a) => a.visit_mut(f),
        }
    }
}

/// Raw outputs for a batch: class probabilities `[n][K][voxel]` and embeddings `[n][D][voxel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<T> {
    pub probs: Tensor<T>,
    pub embeddings: Tensor<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    input_dims: Shape3,
    padded_dims: Shape3,
    stem: BlockTape<T>,
    enc: Vec<StageTape<T>>,
    down: Vec<BlockTape<T>>,
    up: Vec<BlockTape<T>>,
    dec: Vec<StageTape<T>>,
    features: Tensor<T>,
    probs: Tensor<T>,
}

/// One stream of the dual model.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet<T> {
    spec: SubnetSpec,
    stem: Block<T>,
    enc: Vec<Stage<T>>,
    down: Vec<Block<T>>,
    up: Vec<Block<T>>,
    dec: Vec<Stage<T>>,
    seg_head: Conv3d<T>,
    emb_head: Conv3d<T>,
}

impl<T: Scalar> Subnet<T> {
    pub fn new(spec: SubnetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = spec.arch;
        let stem = Block::conv(1, spec.channels(0), SAME3, true, &mut rng);
        let mut enc = Vec::with_capacity(spec.depth);
        let mut down = Vec::with_capacity(spec.depth - 1);
        for l in 0..spec.depth {
            if l > 0 {
                down.push(Block::conv(spec.channels(l - 1), spec.channels(l), DOWN2, true, &mut rng));
            }
            enc.push(Stage::encoder(arch, spec.channels(l), &mut rng));
        }
        let mut up = Vec::with_capacity(spec.depth - 1);
        let mut dec = Vec::with_capacity(spec.depth - 1);
        for l in 0..spec.depth - 1 {
            up.push(Block::up(spec.channels(l + 1), spec.channels(l), &mut rng));
            dec.push(Stage::decoder(arch, spec.channels(l), &mut rng));
        }
        let c0 = spec.channels(0);
        let seg_head = Conv3d::new(c0, spec.classes, POINT, 1.0, &mut rng);
        let emb_head = Conv3d::new(c0, spec.embed_dim, POINT, 1.0, &mut rng);
        Ok(Self {
            spec,
            stem,
            enc,
            down,
            up,
            dec,
            seg_head,
            emb_head,
        })
    }

    pub fn spec(&self) -> &SubnetSpec {
        &self.spec
    }

    pub fn padded_dims(&self, d: Shape3) -> Shape3 {
        let g = self.spec.granularity();
        let up = |n: usize| n.div_ceil(g) * g;
        Shape3::new(up(d.w), up(d.h), up(d.z))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 1 {
            return Err(Error::shape(format!("subnet expects 1 input channel, got {}", x.c)));
        }
        if !x.is_finite() {
            return Err(Error::invalid("non-finite input values"));
        }
        Ok(())
    }

    /// Inference pass without recording a tape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<BatchOutput<T>> {
        self.check_input(x)?;
        let padded = self.padded_dims(x.dims);
        let xp = x.pad_to(padded);
        let mut h = self.stem.forward(&xp).0;
        let mut skips = Vec::with_capacity(self.spec.depth);
        for l in 0..self.spec.depth {
            if l > 0 {
                h = self.down[l - 1].forward(&h).0;
            }
            h = self.enc[l].forward(&h);
            skips.push(h.clone());
        }
        let mut u = skips.pop().expect("depth >= 2");
        for l in (0..self.spec.depth - 1).rev() {
            let mut s = self.up[l].forward(&u).0;
            s.add_assign(&skips[l]);
            u = self.dec[l].forward(&s);
        }
        let (probs, embeddings) = self.heads(&u);
        Ok(BatchOutput {
            probs: probs.crop_to(x.dims),
            embeddings: embeddings.crop_to(x.dims),
        })
    }

    fn heads(&self, features: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut probs = self.seg_head.forward(features);
        softmax_channels(&mut probs);
        let emb = self.emb_head.forward(features);
        (probs, emb)
    }

    /// Training pass that records a tape for [`Subnet::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(BatchOutput<T>, Tape<T>)> {
        self.check_input(x)?;
        let padded = self.padded_dims(x.dims);
        let xp = x.pad_to(padded);
        let (mut h, stem) = self.stem.forward_taped(&xp);
        let mut enc = Vec::with_capacity(self.spec.depth);
        let mut down = Vec::with_capacity(self.spec.depth - 1);
        let mut skips = Vec::with_capacity(self.spec.depth);
        for l in 0..self.spec.depth {
            if l > 0 {
                let (d, t) = self.down[l - 1].forward_taped(&h);
                down.push(t);
                h = d;
            }
            let (e, t) = self.enc[l].forward_taped(&h);
            enc.push(t);
            skips.push(e.clone());
            h = e;
        }
        let mut u = skips.pop().expect("depth >= 2");
        let mut up = vec![None; self.spec.depth - 1];
        let mut dec = vec![None; self.spec.depth - 1];
        for l in (0..self.spec.depth - 1).rev() {
            let (mut s, tu) = self.up[l].forward_taped(&u);
            s.add_assign(&skips[l]);
            let (d, td) = self.dec[l].forward_taped(&s);
            up[l] = Some(tu);
            dec[l] = Some(td);
            u = d;
        }
        let (probs, embeddings) = self.heads(&u);
        let out = BatchOutput {
            probs: probs.crop_to(x.dims),
            embeddings: embeddings.crop_to(x.dims),
        };
        let tape = Tape {
            input_dims: x.dims,
            padded_dims: padded,
            stem,
            enc,
            down,
            up: up.into_iter().map(|t| t.expect("filled")).collect(),
            dec: dec.into_iter().map(|t| t.expect("filled")).collect(),
            features: u,
            probs,
        };
        Ok((out, tape))
    }

    /// Accumulates parameter gradients given loss gradients w.r.t. the
    /// probabilities and embeddings of the taped forward pass.
    pub fn backward(&mut self, tape: &Tape<T>, d_probs: &Tensor<T>, d_emb: &Tensor<T>) {
        let d_probs = d_probs.pad_to(tape.padded_dims);
        let d_emb = d_emb.pad_to(tape.padded_dims);
        debug_assert_eq!(d_probs.dims, tape.probs.dims);
        let _ = tape.input_dims;
        let d_logits = softmax_backward(&tape.probs, &d_probs);
        let mut du = self.seg_head.backward(&tape.features, &d_logits, true).expect("dx");
        du.add_assign(&self.emb_head.backward(&tape.features, &d_emb, true).expect("dx"));

        let depth = self.spec.depth;
        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; depth];
        for l in 0..depth - 1 {
            let ds = self.dec[l].backward(&tape.dec[l], du);
            d_skip[l] = Some(ds.clone());
            du = self.up[l].backward(&tape.up[l], ds, true).expect("dx");
        }
        // `du` now holds the gradient w.r.t. the deepest encoder output.
        let mut de = du;
        for l in (0..depth).rev() {
            if let Some(s) = d_skip[l].take() {
                de.add_assign(&s);
            }
            let dh = self.enc[l].backward(&tape.enc[l], de);
            if l > 0 {
                de = self.down[l - 1].backward(&tape.down[l - 1], dh, true).expect("dx");
            } else {
                self.stem.backward(&tape.stem, dh, false);
                break;
            }
        }
    }

    /// Visits every parameter buffer in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.stem.visit(f);
        for l in 0..self.spec.depth {
            if l > 0 {
                self.down[l - 1].visit(f);
            }
            self.enc[l].visit(f);
        }
        for l in 0..self.spec.depth - 1 {
            self.up[l].visit(f);
            self.dec[l].visit(f);
        }
        self.seg_head.params().into_iter().for_each(&mut *f);
        self.emb_head.params().into_iter().for_each(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        for l in 0..self.spec.depth {
            if l > 0 {
                self.down[l - 1].visit_mut(f);
            }
            self.enc[l].visit_mut(f);
        }
        for l in 0..self.spec.depth - 1 {
            self.up[l].visit_mut(f);
            self.dec[l].visit_mut(f);
        }
        self.seg_head.params_mut().into_iter().for_each(&mut *f);
        self.emb_head.params_mut().into_iter().for_each(f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Flat copy of all parameter values in visit order.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    pub fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    /// Overwrites all parameter values from a flat buffer.
    pub fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }
}

fn softmax_channels<T: Scalar>(t: &mut Tensor<T>) {
    let nv = t.voxels();
    let k = t.c;
    for i in 0..t.n {
        let s = t.sample_mut(i);
        for v in 0..nv {
            let mut m = s[v];
            for c in 1..k {
                m = m.max(s[c * nv + v]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (s[c * nv + v] - m).exp();
                s[c * nv + v] = e;
                z += e;
            }
            for c in 0..k {
                s[c * nv + v] /= z;
            }
        }
    }
}

/// `dz_j = p_j (dp_j - sum_i p_i dp_i)` per voxel.
fn softmax_backward<T: Scalar>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let nv = p.voxels();
    let k = p.c;
    let mut out = Tensor::zeros(p.n, p.c, p.dims);
    for i in 0..p.n {
        let ps = p.sample(i);
        let ds = dp.sample(i);
        let o = out.sample_mut(i);
        for v in 0..nv {
            let mut dot = T::zero();
            for c in 0..k {
                dot += ps[c * nv + v] * ds[c * nv + v];
            }
            for c in 0..k {
                o[c * nv + v] = ps[c * nv + v] * (ds[c * nv + v] - dot);
            }
        }
    }
    out
}
