//! One optimisation step on a labeled and an unlabeled batch.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{batch_tensor, DualModel, ForwardOut, Subnet, Tape, Tensor};
use crate::objectives::{
    ce_dice_grad, contrastive_loss_grad, diff_mask, entropy_filter, reg_loss_grad, reliability_partition,
    total_loss, ContrastiveItem, ReliabilityPartition,
};
use crate::scalar::Scalar;
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    A,
    B,
}

/// The subnet with strictly lower supervised loss; ties go to A.
pub fn select_pseudo_source(ls_a: f64, ls_b: f64) -> Result<Source> {
    for (name, v) in [("L_s_A", ls_a), ("L_s_B", ls_b)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                iteration: None,
            });
        }
    }
    Ok(if ls_b < ls_a { Source::B } else { Source::A })
}

/// Everything observable about one step, in log field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub ls_a: f64,
    pub ls_b: f64,
    pub lu: f64,
    pub l_reg: f64,
    pub l_c: f64,
    pub total: f64,
    pub lambda_c: f64,
    pub threshold: f64,
    pub lr: f64,
    /// `|M_diff|` summed over the unlabeled batch.
    pub diff_voxels: usize,
    /// Reliable share of the unlabeled voxels under the pseudo-label source.
    pub reliable_fraction: f64,
    pub pseudo_source: Source,
    /// Why the contrastive term was 0 this step, if it was skipped.
    pub contrastive_skip: Option<String>,
}

/// A cropped labeled training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch<T> {
    pub image: Volume<T>,
    pub label: LabelMap,
}

struct Pass<T> {
    tape: Tape<T>,
    items: Vec<ForwardOut<T>>,
}

fn run<T: Scalar>(net: &Subnet<T>, x: &Tensor<T>) -> Result<Pass<T>> {
    let (out, tape) = net.forward_train(x)?;
    let items = (0..x.n).map(|i| out.item(i)).collect();
    Ok(Pass { tape, items })
}

fn finite(name: &str, v: f64, t: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: name.into(),
            iteration: Some(t),
        })
    }
}

/// Per-net gradient buffers for one batch, laid out like the tape outputs.
struct Grads<T> {
    probs: Tensor<T>,
    emb: Tensor<T>,
}

impl<T: Scalar> Grads<T> {
    fn like(p: &Pass<T>) -> Self {
        let o = &p.items[0];
        let n = p.items.len();
        let dims = o.probs.shape();
        Self {
            probs: Tensor::zeros(n, o.probs.classes(), dims),
            emb: Tensor::zeros(n, o.embeddings.dim(), dims),
        }
    }

    fn add_probs(&mut self, i: usize, g: &[T], scale: T) {
        for (a, &b) in self.probs.sample_mut(i).iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    fn add_emb(&mut self, i: usize, g: &[T], scale: T) {
        for (a, &b) in self.emb.sample_mut(i).iter_mut().zip(g) {
            *a += scale * b;
        }
    }
}

/// Forward both subnets, assemble the total loss, back-propagate and apply
/// one SGD step to each subnet.
pub fn train_step<T: Scalar>(
    model: &mut DualModel<T>,
    labeled: &[LabeledPatch<T>],
    unlabeled: &[Volume<T>],
    t: usize,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if labeled.is_empty() {
        return Err(Error::invalid("labeled batch is empty"));
    }
    if t >= cfg.iterations {
        return Err(Error::invalid(format!("iteration {t} is past t_max = {}", cfg.iterations)));
    }
    let use_unlabeled = cfg.needs_unlabeled();
    if use_unlabeled && unlabeled.is_empty() {
        return Err(Error::invalid("unlabeled batch is empty"));
    }
    let lr = cfg.lr.at(t);
    let lambda_c = cfg.weights.lambda_c.at(t, cfg.iterations)?;
    let threshold = cfg.threshold.at(t, cfg.iterations, cfg.classes())?;

    // Supervised part.
    let xl = batch_tensor(&labeled.iter().map(|p| &p.image).collect::<Vec<_>>())?;
    let la = run(&model.a, &xl)?;
    let lb = run(&model.b, &xl)?;
    let inv_l = T::lit(1.0 / labeled.len() as f64);
    let mut gla = Grads::like(&la);
    let mut glb = Grads::like(&lb);
    let mut ls = [0.0f64; 2];
    for (i, p) in labeled.iter().enumerate() {
        for (n, (pass, g)) in [(&la, &mut gla), (&lb, &mut glb)].into_iter().enumerate() {
            let (ce, dice, grad) = ce_dice_grad(&pass.items[i].probs, &p.label, None)?;
            ls[n] += (ce + dice).as_f64();
            g.add_probs(i, &grad, inv_l);
        }
    }
    let ls_a = finite("L_s_A", ls[0] / labeled.len() as f64, t)?;
    let ls_b = finite("L_s_B", ls[1] / labeled.len() as f64, t)?;
    let source = select_pseudo_source(ls_a, ls_b)?;

    let mut report = StepReport {
        iteration: t,
        ls_a,
        ls_b,
        lu: 0.0,
        l_reg: 0.0,
        l_c: 0.0,
        total: 0.0,
        lambda_c,
        threshold,
        lr,
        diff_voxels: 0,
        reliable_fraction: 0.0,
        pseudo_source: source,
        contrastive_skip: None,
    };

    let mut unlabeled_grads = None;
    if use_unlabeled {
        let xu = batch_tensor(&unlabeled.iter().collect::<Vec<_>>())?;
        let ua = run(&model.a, &xu)?;
        let ub = run(&model.b, &xu)?;
        let mut gua = Grads::like(&ua);
        let mut gub = Grads::like(&ub);
        let nu = unlabeled.len();
        let wu = T::lit(cfg.weights.lambda_u / nu as f64);
        let src = match source {
            Source::A => &ua,
            Source::B => &ub,
        };
        let mut pseudo = Vec::with_capacity(nu);
        let mut parts: Vec<ReliabilityPartition<T>> = Vec::with_capacity(nu);
        let (mut lu, mut reg, mut reliable) = (0.0, 0.0, 0usize);
        for i in 0..nu {
            let ps = &src.items[i].probs;
            let y = ps.argmax();
            let keep = entropy_filter(ps, cfg.gamma)?;
            for (pass, g) in [(&ua, &mut gua), (&ub, &mut gub)] {
                let (ce, dice, grad) = ce_dice_grad(&pass.items[i].probs, &y, Some(&keep))?;
                lu += (ce + dice).as_f64();
                g.add_probs(i, &grad, wu);
            }
            if cfg.use_reg {
                let (pa, pb) = (&ua.items[i].probs, &ub.items[i].probs);
                let m = diff_mask(pa, pb, threshold)?;
                report.diff_voxels += m.count();
                let (r, ga, gb) = reg_loss_grad(pa, pb, &m)?;
                reg += r.as_f64();
                gua.add_probs(i, &ga, wu);
                gub.add_probs(i, &gb, wu);
            }
            let part = reliability_partition(ps, threshold);
            reliable += part.reliable.count();
            parts.push(part);
            pseudo.push(y);
        }
        report.l_reg = finite("L_reg", reg / nu as f64, t)?;
        report.lu = finite("L_u", (lu + reg) / nu as f64, t)?;
        report.reliable_fraction = reliable as f64 / (nu * xu.voxels()) as f64;

        if cfg.use_contrastive {
            let wc = T::lit(lambda_c);
            let mut lc = 0.0;
            for (pass, g) in [(&ua, &mut gua), (&ub, &mut gub)] {
                let items: Vec<_> = (0..nu)
                    .map(|i| ContrastiveItem {
                        emb: &pass.items[i].embeddings,
                        part: &parts[i],
                        pseudo: &pseudo[i],
                    })
                    .collect();
                match contrastive_loss_grad(&items, &cfg.contrastive) {
                    Ok((out, _)) => {
                        lc += out.loss.as_f64();
                        for (i, gi) in out.grads.iter().enumerate() {
                            g.add_emb(i, gi, wc);
                        }
                    }
                    Err(Error::NoReliableVoxels) => {
                        report.contrastive_skip = Some("no reliable voxels".into());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if report.contrastive_skip.is_some() {
                // Keep the term all-or-nothing across the two subnets.
                gua.emb.data.iter_mut().for_each(|x| *x = T::zero());
                gub.emb.data.iter_mut().for_each(|x| *x = T::zero());
                lc = 0.0;
            }
            report.l_c = finite("L_c", lc, t)?;
        }
        unlabeled_grads = Some((ua.tape, gua, ub.tape, gub));
    }
    report.total = total_loss(ls_a + ls_b, report.lu, report.l_c, &cfg.weights, t, cfg.iterations)?;

    model.zero_grad();
    model.a.backward(&la.tape, &gla.probs, &gla.emb);
    model.b.backward(&lb.tape, &glb.probs, &glb.emb);
    if let Some((ta, ga, tb, gb)) = unlabeled_grads {
        model.a.backward(&ta, &ga.probs, &ga.emb);
        model.b.backward(&tb, &gb.probs, &gb.emb);
    }
    for (name, net) in [("gradient of subnet A", &model.a), ("gradient of subnet B", &model.b)] {
        if net.flat_grads().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: name.into(),
                iteration: Some(t),
            });
        }
    }
    cfg.sgd.step(&mut model.a, lr);
    cfg.sgd.step(&mut model.b, lr);
    model.iteration = t + 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_rule() {
        assert_eq!(select_pseudo_source(0.3, 0.5).unwrap(), Source::A);
        assert_eq!(select_pseudo_source(0.4, 0.4).unwrap(), Source::A);
        assert_eq!(select_pseudo_source(0.9, 0.2).unwrap(), Source::B);
        assert!(select_pseudo_source(f64::NAN, 0.2).is_err());
        assert!(select_pseudo_source(0.1, f64::INFINITY).is_err());
    }
}
