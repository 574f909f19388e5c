//! The unsupervised loss and the weighted total.

use serde::{Deserialize, Serialize};

use super::pseudo::{diff_mask, reg_loss};
use super::schedule::LambdaC;
use super::supervised::{ce_loss, dice_loss_grad};
use crate::error::{Error, Result};
use crate::nn::ForwardOut;
use crate::scalar::Scalar;
use crate::volume::{LabelMap, ProbMap, VoxelMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_c: LambdaC,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_c: LambdaC::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::invalid(format!("lambda_u must be finite and >= 0, got {}", self.lambda_u)));
        }
        self.lambda_c.validate()
    }
}

/// Masked CE + masked Dice against the pseudo-labels, plus the disagreement
/// regularizer between `pa` and `pb` at threshold `t`.
pub fn unsupervised_loss<T: Scalar>(
    out: &ForwardOut<T>,
    pseudo: &LabelMap,
    keep: &VoxelMask,
    pa: &ProbMap<T>,
    pb: &ProbMap<T>,
    t: f64,
) -> Result<T> {
    let ce = ce_loss(&out.probs, pseudo, Some(keep))?;
    let dice = dice_loss_grad(&out.probs, pseudo, Some(keep))?.0;
    let reg = reg_loss(pa, pb, &diff_mask(pa, pb, t)?)?;
    Ok(ce + dice + reg)
}

fn finite<T: Scalar>(name: &str, v: T, iteration: Option<usize>) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: name.to_string(),
            iteration,
        })
    }
}

/// `L_s + lambda_u L_u + lambda_c(t) L_c`.
pub fn total_loss<T: Scalar>(ls: T, lu: T, lc: T, weights: &LossWeights, t: usize, t_max: usize) -> Result<T> {
    finite("L_s", ls, Some(t))?;
    finite("L_u", lu, Some(t))?;
    finite("L_c", lc, Some(t))?;
    let lc_w = weights.lambda_c.at(t, t_max)?;
    Ok(ls + T::lit(weights.lambda_u) * lu + T::lit(lc_w) * lc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::supervised::dice_loss;
    use crate::volume::{EmbeddingMap, Shape3};

    #[test]
    fn total_arithmetic() {
        let w = LossWeights {
            lambda_u: 1.0,
            lambda_c: LambdaC {
                w_c: 0.1,
                a: 0.0,
                sign: 1.0,
            },
        };
        assert!((total_loss::<f64>(1.0, 2.0, 3.0, &w, 0, 10).unwrap() - 3.3).abs() < 1e-12);
        let zero = LossWeights {
            lambda_u: 0.0,
            lambda_c: LambdaC { w_c: 0.0, ..LambdaC::default() },
        };
        assert_eq!(total_loss(0.7, 2.0, 3.0, &zero, 4, 10).unwrap(), 0.7);
        assert_eq!(LossWeights::default().lambda_u, 1.0);
        match total_loss(1.0, f64::NAN, 0.0, &w, 3, 10) {
            Err(Error::NonFinite { term, iteration }) => {
                assert_eq!(term, "L_u");
                assert_eq!(iteration, Some(3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupervised_fixtures() {
        let s = Shape3::new(3, 1, 1);
        let pseudo = LabelMap::new(s, 2, vec![0, 1, 1]).unwrap();
        let hot = ProbMap::<f64>::one_hot(&pseudo);
        let out = ForwardOut {
            probs: hot.clone(),
            embeddings: EmbeddingMap::new(s, 2, vec![0.0; 6]).unwrap(),
        };
        let keep = VoxelMask::full(s, true);
        assert!(unsupervised_loss(&out, &pseudo, &keep, &hot, &hot, 0.8).unwrap() <= 1e-4);

        let pa = ProbMap::<f64>::from_rows(s, &[vec![0.95, 0.05], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let pb = ProbMap::<f64>::from_rows(s, &[vec![0.08, 0.92], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let out = ForwardOut { probs: pa.clone(), ..out };
        let none = VoxelMask::full(s, false);
        let lu = unsupervised_loss(&out, &pseudo, &none, &pa, &pb, 0.9).unwrap();
        assert!((lu - 1.74).abs() < 1e-12);
        let lu = unsupervised_loss(&out, &pseudo, &keep, &pa, &pb, 0.9).unwrap();
        let parts = ce_loss(&pa, &pseudo, Some(&keep)).unwrap() + dice_loss(&pa, &pseudo).unwrap() + 1.74;
        assert!((lu - parts).abs() < 1e-9);
    }
}
