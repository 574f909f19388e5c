//! Data streams, the training loop, sliding-window prediction and the ablation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, PredictWith, TrainConfig, Variant};
use super::step::{train_step, LabeledPatch, StepReport};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_cases, MeanStd, MetricsConfig, MetricsReport};
use crate::nn::{batch_tensor, init_dual, save_checkpoint, DualModel};
use crate::scalar::Scalar;
use crate::stats::mean_std;
use crate::volume::preprocess::{extract, pad_symmetric};
use crate::volume::sliding::crop_probs;
use crate::volume::{
    load_labels, load_volume, random_crop, synth_case, SynthSpec, sliding_window_plan, stitch, DatasetManifest, LabelMap, ProbMap, Shape3,
    Volume,
};

/// A case with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Case<T> {
    pub id: String,
    pub image: Volume<T>,
    pub label: LabelMap,
}

/// Volumes of a manifest, resident in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub labeled: Vec<Case<T>>,
    pub unlabeled: Vec<(String, Volume<T>)>,
    pub test: Vec<Case<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Draws `labeled + unlabeled + test` cases from one seeded stream, in
    /// that order.
    pub fn synthetic(spec: &SynthSpec, labeled: usize, unlabeled: usize, test: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |prefix: &str, i: usize| -> Result<Case<T>> {
            let (image, label) = synth_case(&mut rng, spec)?;
            Ok(Case {
                id: format!("{prefix}{i:03}"),
                image,
                label,
            })
        };
        let labeled = (0..labeled).map(|i| draw("lab", i)).collect::<Result<_>>()?;
        let unlabeled = (0..unlabeled)
            .map(|i| draw("unl", i).map(|c| (c.id, c.image)))
            .collect::<Result<_>>()?;
        let test = (0..test).map(|i| draw("test", i)).collect::<Result<_>>()?;
        Ok(Self { labeled, unlabeled, test })
    }

    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let case = |id: &String| -> Result<Case<T>> {
            Ok(Case {
                id: id.clone(),
                image: load_volume(manifest.volume_path(id)?)?,
                label: load_labels(manifest.label_path(id)?)?,
            })
        };
        Ok(Self {
            labeled: manifest.labeled.iter().map(case).collect::<Result<_>>()?,
            unlabeled: manifest
                .unlabeled
                .iter()
                .map(|id| Ok((id.clone(), load_volume(manifest.volume_path(id)?)?)))
                .collect::<Result<_>>()?,
            test: manifest.test.iter().map(case).collect::<Result<_>>()?,
        })
    }
}

/// Cycles through `0..len`, reshuffling with its own rng at every epoch.
#[derive(Debug, Clone)]
pub struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, b: usize) -> Vec<usize> {
        (0..b)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Seeds of the four independent rng streams derived from the run seed.
fn stream_seeds(seed: u64) -> [u64; 4] {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_DA7A);
    std::array::from_fn(|_| rand::Rng::gen(&mut r))
}

/// Seed-determined batch sampler: labeled and unlabeled ids with crops.
pub struct Sampler {
    labeled: Stream,
    unlabeled: Stream,
    crop_labeled: ChaCha8Rng,
    crop_unlabeled: ChaCha8Rng,
}

impl Sampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, seed: u64) -> Self {
        let s = stream_seeds(seed);
        Self {
            labeled: Stream::new(n_labeled, s[0]),
            unlabeled: Stream::new(n_unlabeled, s[1]),
            crop_labeled: ChaCha8Rng::seed_from_u64(s[2]),
            crop_unlabeled: ChaCha8Rng::seed_from_u64(s[3]),
        }
    }

    pub fn labeled_batch<T: Scalar>(&mut self, data: &Dataset<T>, b: usize, patch: Shape3) -> Result<(Vec<usize>, Vec<LabeledPatch<T>>)> {
        let ids = self.labeled.next_batch(b);
        let patches = ids
            .iter()
            .map(|&i| {
                let c = &data.labeled[i];
                let p = random_crop(&c.image, Some(&c.label), patch, &mut self.crop_labeled)?;
                Ok(LabeledPatch {
                    image: p.image,
                    label: p.label.expect("label cropped with image"),
                })
            })
            .collect::<Result<_>>()?;
        Ok((ids, patches))
    }

    pub fn unlabeled_batch<T: Scalar>(&mut self, data: &Dataset<T>, b: usize, patch: Shape3) -> Result<(Vec<usize>, Vec<Volume<T>>)> {
        let ids = self.unlabeled.next_batch(b);
        let patches = ids
            .iter()
            .map(|&i| Ok(random_crop(&data.unlabeled[i].1, None, patch, &mut self.crop_unlabeled)?.image))
            .collect::<Result<_>>()?;
        Ok((ids, patches))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub model: DualModel<T>,
    pub reports: Vec<StepReport>,
}

/// Files written by [`fit`] inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub const LOG: &'static str = "steps.jsonl";
    pub const CHECKPOINTS: &'static str = "checkpoints";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(Self::LOG)
    }

    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join(Self::CHECKPOINTS).join(format!("iter_{iteration:06}.json"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(Self::CHECKPOINTS).join("final.json")
    }
}

/// Trains a fresh model for `cfg.iterations` steps. With a run directory,
/// writes one JSON line per step plus periodic and final checkpoints.
pub fn fit<T: Scalar>(cfg: &TrainConfig, data: &Dataset<T>, run_dir: Option<&Path>) -> Result<FitResult<T>> {
    cfg.validate()?;
    if data.labeled.len() < cfg.batch_labeled {
        return Err(Error::Manifest(format!(
            "{} labeled cases, batch needs {}",
            data.labeled.len(),
            cfg.batch_labeled
        )));
    }
    let unlabeled = cfg.needs_unlabeled();
    if unlabeled && data.unlabeled.len() < cfg.batch_unlabeled {
        return Err(Error::Manifest(format!(
            "{} unlabeled cases, batch needs {}",
            data.unlabeled.len(),
            cfg.batch_unlabeled
        )));
    }
    let layout = run_dir.map(RunLayout::new);
    let mut log = match &layout {
        Some(l) => {
            fs::create_dir_all(l.root.join(RunLayout::CHECKPOINTS)).map_err(|e| Error::io(&l.root, e))?;
            let path = l.log();
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut model = init_dual::<T>(cfg.spec_a, cfg.spec_b, cfg.seed)?;
    let mut sampler = Sampler::new(data.labeled.len(), data.unlabeled.len(), cfg.seed);
    let mut reports = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (_, lab) = sampler.labeled_batch(data, cfg.batch_labeled, cfg.patch)?;
        let unl = if unlabeled {
            sampler.unlabeled_batch(data, cfg.batch_unlabeled, cfg.patch)?.1
        } else {
            Vec::new()
        };
        let report = train_step(&mut model, &lab, &unl, t, cfg)?;
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        reports.push(report);
        if let Some(l) = &layout {
            let done = t + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
                save_checkpoint(&model, l.checkpoint(done))?;
            }
        }
    }
    if let (Some(l), Some((mut w, path))) = (&layout, log) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        save_checkpoint(&model, l.checkpoint(cfg.iterations))?;
        save_checkpoint(&model, l.final_checkpoint())?;
    }
    Ok(FitResult { model, reports })
}

/// Sliding-window inference with overlap averaging.
pub fn predict_volume<T: Scalar>(
    model: &DualModel<T>,
    v: &Volume<T>,
    patch: Shape3,
    stride: Shape3,
    which: PredictWith,
) -> Result<(LabelMap, ProbMap<T>)> {
    let plan = sliding_window_plan(v.shape(), patch, stride)?;
    let (padded, offset) = pad_symmetric(v, patch);
    debug_assert_eq!((padded.shape(), offset), (plan.padded, plan.offset));
    let mut windows = Vec::with_capacity(plan.origins.len());
    for &o in &plan.origins {
        let x = batch_tensor(&[&extract(&padded, o, patch)])?;
        let probs = match which {
            PredictWith::A => model.a.forward(&x)?.item(0).probs,
            PredictWith::B => model.b.forward(&x)?.item(0).probs,
            PredictWith::Mean => {
                let a = model.a.forward(&x)?.item(0).probs;
                let b = model.b.forward(&x)?.item(0).probs;
                let half = T::lit(0.5);
                let data = a.data().iter().zip(b.data()).map(|(&p, &q)| half * (p + q)).collect();
                ProbMap::new(patch, a.classes(), data)?
            }
        };
        windows.push((o, probs));
    }
    let stitched = stitch(&windows, plan.padded)?;
    let probs = crop_probs(&stitched, plan.offset, v.shape());
    Ok((probs.argmax(), probs))
}

/// Scores a model on labeled cases with sliding-window prediction.
pub fn evaluate_model<T: Scalar>(
    model: &DualModel<T>,
    cases: &[Case<T>],
    eval: &EvalConfig,
    metrics: &MetricsConfig,
) -> Result<MetricsReport> {
    let preds: Vec<LabelMap> = cases
        .iter()
        .map(|c| Ok(predict_volume(model, &c.image, eval.patch, eval.stride, eval.which)?.0))
        .collect::<Result<_>>()?;
    let truths: Vec<LabelMap> = cases.iter().map(|c| c.label.clone()).collect();
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    evaluate_cases(&ids, &preds, &truths, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    pub hd95: MeanStd,
    pub asd: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn summary_of(&self, v: Variant) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }

    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        writeln!(s, "# mean ± population std over seeds; distances in voxels").unwrap();
        writeln!(s, "{:<16} {:>6}  {:>9} {:>9} {:>9} {:>9}", "variant", "seed", "Dice↑", "Jaccard↑", "95HD↓", "ASD↓").unwrap();
        for r in &self.runs {
            writeln!(
                s,
                "{:<16} {:>6}  {:>9.4} {:>9.4} {:>9.3} {:>9.3}",
                r.variant.name(),
                r.seed,
                r.dice,
                r.jaccard,
                r.hd95,
                r.asd
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "{:<16} {:>17} {:>17} {:>15} {:>15}", "variant", "Dice↑", "Jaccard↑", "95HD↓", "ASD↓").unwrap();
        for m in &self.summary {
            writeln!(
                s,
                "{:<16} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>6.3} ± {:<6.3} {:>6.3} ± {:<6.3}",
                m.variant.name(),
                m.dice.mean,
                m.dice.std,
                m.jaccard.mean,
                m.jaccard.std,
                m.hd95.mean,
                m.hd95.std,
                m.asd.mean,
                m.asd.std
            )
            .unwrap();
        }
        s
    }
}

/// Trains and scores `variants` x `seeds` under identical data; runs execute
/// in parallel and are reported in (variant, seed) order.
pub fn run_ablation<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset<T>,
    seeds: &[u64],
    variants: &[Variant],
    metrics: &MetricsConfig,
) -> Result<AblationTable> {
    use rayon::prelude::*;
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    if data.test.is_empty() {
        return Err(Error::Manifest("ablation needs held-out test cases".into()));
    }
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let mut c = variant.apply(cfg);
            c.seed = seed;
            let model = fit(&c, data, None)?.model;
            let r = evaluate_model(&model, &data.test, &c.eval, metrics)?;
            Ok(AblationRun {
                variant,
                seed,
                dice: r.dice.mean,
                jaccard: r.jaccard.mean,
                hd95: r.hd95.mean,
                asd: r.asd.mean,
                degenerate: r.degenerate,
            })
        })
        .collect::<Result<_>>()?;
    let summary = variants
        .iter()
        .map(|&v| {
            let of = |f: fn(&AblationRun) -> f64| {
                let vals: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(f).collect();
                let (mean, std) = mean_std(&vals);
                MeanStd { mean, std }
            };
            AblationSummary {
                variant: v,
                dice: of(|r| r.dice),
                jaccard: of(|r| r.jaccard),
                hd95: of(|r| r.hd95),
                asd: of(|r| r.asd),
            }
        })
        .collect();
    Ok(AblationTable { runs, summary })
}
