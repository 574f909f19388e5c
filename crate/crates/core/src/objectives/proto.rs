//! Class prototypes from reliable voxels, the prototypical distribution over
//! classes, and the contrastive loss on unreliable voxels.

use serde::{Deserialize, Serialize};

use super::pseudo::ReliabilityPartition;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{EmbeddingMap, LabelMap, VoxelMask};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `|a - b|^2`
    SqEuclidean,
    /// `1 - cos(a, b)`
    Cosine,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl Distance {
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        match self {
            Distance::SqEuclidean => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum(),
            Distance::Cosine => {
                let eps = T::lit(NORM_EPS);
                let na = dot(a, a).sqrt().max(eps);
                let nb = dot(b, b).sqrt().max(eps);
                T::one() - dot(a, b) / (na * nb)
            }
        }
    }

    /// Adds `coeff * dd/da` to `ga` and `coeff * dd/db` to `gb`.
    fn accumulate<T: Scalar>(self, a: &[T], b: &[T], coeff: T, ga: &mut [T], gb: &mut [T]) {
        match self {
            Distance::SqEuclidean => {
                let two = T::lit(2.0) * coeff;
                for i in 0..a.len() {
                    let g = two * (a[i] - b[i]);
                    ga[i] += g;
                    gb[i] -= g;
                }
            }
            Distance::Cosine => {
                let eps = T::lit(NORM_EPS);
                let na = dot(a, a).sqrt().max(eps);
                let nb = dot(b, b).sqrt().max(eps);
                let ab = dot(a, b);
                let inv = T::one() / (na * nb);
                for i in 0..a.len() {
                    ga[i] -= coeff * (b[i] * inv - ab * a[i] * inv / (na * na));
                    gb[i] -= coeff * (a[i] * inv - ab * b[i] * inv / (nb * nb));
                }
            }
        }
    }
}

/// Mean embedding per class over reliable voxels; `None` marks an absent class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes<T> {
    pub dim: usize,
    pub centers: Vec<Option<Vec<T>>>,
    /// Reliable voxels per class, `|S_k|`.
    pub counts: Vec<usize>,
}

impl<T: Scalar> Prototypes<T> {
    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.centers[k].is_some()
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&k| self.is_present(k)).collect()
    }
}

fn gather<T: Scalar>(emb: &EmbeddingMap<T>, v: usize, out: &mut [T]) {
    let n = emb.voxels();
    for (d, o) in out.iter_mut().enumerate() {
        *o = emb.data()[d * n + v];
    }
}

/// Prototypes over several maps at once (e.g. a batch). Each item is
/// `(embeddings, reliable mask, class labels)`.
pub fn prototypes_over<T: Scalar>(items: &[(&EmbeddingMap<T>, &VoxelMask, &LabelMap)]) -> Result<Prototypes<T>> {
    let (first, _, l0) = items.first().ok_or_else(|| Error::invalid("no maps given"))?;
    let dim = first.dim();
    let classes = l0.classes();
    let mut sums = vec![vec![T::zero(); dim]; classes];
    let mut counts = vec![0usize; classes];
    let mut f = vec![T::zero(); dim];
    for (emb, reliable, labels) in items {
        if emb.shape() != reliable.shape() || emb.shape() != labels.shape() {
            return Err(Error::shape(format!(
                "embeddings {}, reliable mask {}, labels {}",
                emb.shape(),
                reliable.shape(),
                labels.shape()
            )));
        }
        if emb.dim() != dim || labels.classes() != classes {
            return Err(Error::shape("maps disagree on embedding width or class count".to_string()));
        }
        for v in (0..emb.voxels()).filter(|&v| reliable.get(v)) {
            let k = labels.values()[v] as usize;
            gather(emb, v, &mut f);
            sums[k].iter_mut().zip(&f).for_each(|(s, &x)| *s += x);
            counts[k] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::NoReliableVoxels);
    }
    let centers = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|x| x / T::lit(c as f64)).collect()))
        .collect();
    Ok(Prototypes { dim, centers, counts })
}

pub fn compute_prototypes<T: Scalar>(
    emb: &EmbeddingMap<T>,
    part: &ReliabilityPartition<T>,
    labels: &LabelMap,
) -> Result<Prototypes<T>> {
    prototypes_over(&[(emb, &part.reliable, labels)])
}

/// Softmax over negative distances to the present prototypes; absent classes
/// get probability 0.
pub fn proto_distribution<T: Scalar>(f: &[T], protos: &Prototypes<T>, d: Distance) -> Result<Vec<T>> {
    if f.len() != protos.dim {
        return Err(Error::shape(format!("embedding of width {} vs prototypes of width {}", f.len(), protos.dim)));
    }
    let dist: Vec<Option<T>> = protos.centers.iter().map(|c| c.as_ref().map(|c| d.eval(f, c))).collect();
    softmax_neg(&dist).ok_or(Error::NoPrototypes)
}

fn softmax_neg<T: Scalar>(dist: &[Option<T>]) -> Option<Vec<T>> {
    let min = dist.iter().flatten().copied().reduce(T::min)?;
    let mut p: Vec<T> = dist.iter().map(|d| d.map_or(T::zero(), |d| (min - d).exp())).collect();
    let z: T = p.iter().copied().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Some(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveParams {
    pub distance: Distance,
    /// Hinge margin on prototype separation.
    pub margin: f64,
    /// Weight of the separation term.
    pub beta: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            distance: Distance::SqEuclidean,
            margin: 1.0,
            beta: 0.1,
        }
    }
}

/// One map's inputs to the contrastive loss. `pseudo` gives the class of
/// every voxel: the target for unreliable voxels and the prototype class for
/// reliable ones.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveItem<'a, T> {
    pub emb: &'a EmbeddingMap<T>,
    pub part: &'a ReliabilityPartition<T>,
    pub pseudo: &'a LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOut<T> {
    pub loss: T,
    pub attraction: T,
    pub separation: T,
    /// Unreliable voxels that entered the attraction term.
    pub attracted: usize,
    /// Gradient w.r.t. each item's embeddings, dim-major.
    pub grads: Vec<Vec<T>>,
}

/// Attraction over unreliable voxels whose pseudo-class has a prototype,
/// plus the hinge separation; optionally accumulates gradients w.r.t. the
/// embeddings and the prototypes.
fn evaluate<T: Scalar>(
    items: &[ContrastiveItem<'_, T>],
    protos: &Prototypes<T>,
    params: &ContrastiveParams,
    mut grads: Option<(&mut [Vec<T>], &mut [Vec<T>])>,
) -> Result<ContrastiveOut<T>> {
    let dim = protos.dim;
    let k = protos.classes();
    let present = protos.present();
    let centers: Vec<&[T]> = protos
        .centers
        .iter()
        .map(|c| c.as_deref().unwrap_or(&[]))
        .collect();
    let attracted: usize = items
        .iter()
        .map(|it| {
            (0..it.emb.voxels())
                .filter(|&v| it.part.unreliable.get(v) && protos.is_present(it.pseudo.values()[v] as usize))
                .count()
        })
        .sum();
    let mut attraction = T::zero();
    let mut f = vec![T::zero(); dim];
    let mut gf = vec![T::zero(); dim];
    let mut dist = vec![None; k];
    if attracted > 0 {
        let inv = T::lit(1.0 / attracted as f64);
        for (i, it) in items.iter().enumerate() {
            if it.emb.dim() != dim || it.pseudo.classes() != k {
                return Err(Error::shape("item disagrees with prototypes on width or class count".to_string()));
            }
            if it.emb.shape() != it.pseudo.shape() || it.emb.shape() != it.part.unreliable.shape() {
                return Err(Error::shape(format!("embeddings {} vs pseudo-labels {}", it.emb.shape(), it.pseudo.shape())));
            }
            let n = it.emb.voxels();
            for v in 0..n {
                let y = it.pseudo.values()[v] as usize;
                if !it.part.unreliable.get(v) || !protos.is_present(y) {
                    continue;
                }
                gather(it.emb, v, &mut f);
                for &c in &present {
                    dist[c] = Some(params.distance.eval(&f, centers[c]));
                }
                let p = softmax_neg(&dist).expect("present prototype");
                attraction -= p[y].max(T::min_positive_value()).ln();
                if let Some((ge, gc)) = grads.as_mut() {
                    gf.iter_mut().for_each(|g| *g = T::zero());
                    for &c in &present {
                        let delta = if c == y { T::one() } else { T::zero() };
                        let coeff = (delta - p[c]) * inv;
                        params.distance.accumulate(&f, centers[c], coeff, &mut gf, &mut gc[c]);
                    }
                    let g = &mut ge[i];
                    for d in 0..dim {
                        g[d * n + v] += gf[d];
                    }
                }
            }
        }
        attraction = attraction * inv;
    }

    let mut separation = T::zero();
    let pairs = present.len() * present.len().saturating_sub(1) / 2;
    if pairs > 0 {
        let w = T::lit(1.0 / pairs as f64);
        let m = T::lit(params.margin);
        let coeff = -T::lit(params.beta) * w;
        for (ia, &a) in present.iter().enumerate() {
            for &b in &present[ia + 1..] {
                let h = m - params.distance.eval(centers[a], centers[b]);
                if h > T::zero() {
                    separation += h * w;
                    if let Some((_, gc)) = grads.as_mut() {
                        let (lo, hi) = gc.split_at_mut(b);
                        params.distance.accumulate(centers[a], centers[b], coeff, &mut lo[a], &mut hi[0]);
                    }
                }
            }
        }
    }
    Ok(ContrastiveOut {
        loss: attraction + T::lit(params.beta) * separation,
        attraction,
        separation,
        attracted,
        grads: Vec::new(),
    })
}

/// Loss value with fixed prototypes.
pub fn contrastive_loss<T: Scalar>(
    emb: &EmbeddingMap<T>,
    part: &ReliabilityPartition<T>,
    pseudo: &LabelMap,
    protos: &Prototypes<T>,
    params: &ContrastiveParams,
) -> Result<T> {
    Ok(evaluate(&[ContrastiveItem { emb, part, pseudo }], protos, params, None)?.loss)
}

/// Builds prototypes from the reliable voxels of all items, evaluates the
/// loss and back-propagates through both the unreliable embeddings and the
/// prototype means into the reliable embeddings.
pub fn contrastive_loss_grad<T: Scalar>(
    items: &[ContrastiveItem<'_, T>],
    params: &ContrastiveParams,
) -> Result<(ContrastiveOut<T>, Prototypes<T>)> {
    let sets: Vec<_> = items.iter().map(|it| (it.emb, &it.part.reliable, it.pseudo)).collect();
    let protos = prototypes_over(&sets)?;
    let mut ge: Vec<Vec<T>> = items.iter().map(|it| vec![T::zero(); it.emb.data().len()]).collect();
    let mut gc = vec![vec![T::zero(); protos.dim]; protos.classes()];
    let mut out = evaluate(items, &protos, params, Some((&mut ge, &mut gc)))?;
    for (i, it) in items.iter().enumerate() {
        let n = it.emb.voxels();
        for v in (0..n).filter(|&v| it.part.reliable.get(v)) {
            let c = it.pseudo.values()[v] as usize;
            let scale = T::lit(1.0 / protos.counts[c] as f64);
            for d in 0..protos.dim {
                ge[i][d * n + v] += gc[c][d] * scale;
            }
        }
    }
    out.grads = ge;
    Ok((out, protos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::pseudo::reliability_partition;
    use crate::volume::{ProbMap, Shape3};

    fn protos(c: Vec<Option<Vec<f64>>>) -> Prototypes<f64> {
        Prototypes {
            dim: c.iter().flatten().next().map_or(0, Vec::len),
            counts: c.iter().map(|x| usize::from(x.is_some())).collect(),
            centers: c,
        }
    }

    #[test]
    fn distribution_fixtures() {
        let p = protos(vec![Some(vec![0.0, 0.0]), Some(vec![9f64.ln().sqrt(), 0.0])]);
        let q = proto_distribution(&[0.0, 0.0], &p, Distance::SqEuclidean).unwrap();
        assert!((q[0] - 0.9).abs() < 1e-12 && (q[1] - 0.1).abs() < 1e-12);
        let mid = proto_distribution(&[9f64.ln().sqrt() / 2.0, 0.0], &p, Distance::SqEuclidean).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-12);
        let single = protos(vec![None, Some(vec![1.0, 2.0])]);
        assert_eq!(proto_distribution(&[5.0, 5.0], &single, Distance::Cosine).unwrap(), vec![0.0, 1.0]);
        let none = Prototypes::<f64> {
            dim: 2,
            centers: vec![None, None],
            counts: vec![0, 0],
        };
        assert!(matches!(proto_distribution(&[0.0, 0.0], &none, Distance::SqEuclidean), Err(Error::NoPrototypes)));
    }

    #[test]
    fn prototype_means_and_absence() {
        let s = Shape3::new(3, 1, 1);
        let emb = EmbeddingMap::from_rows(s, &[vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, 0.0]]).unwrap();
        let probs = ProbMap::<f64>::from_rows(s, &[vec![0.05, 0.95], vec![0.02, 0.98], vec![0.5, 0.5]]).unwrap();
        let part = reliability_partition(&probs, 0.9);
        let labels = LabelMap::new(s, 3, vec![1, 1, 0]).unwrap();
        let pr = compute_prototypes(&emb, &part, &labels).unwrap();
        assert_eq!(pr.centers[1], Some(vec![2.0, 4.0]));
        assert_eq!(pr.centers[0], None);
        assert_eq!(pr.centers[2], None);
        let none = reliability_partition(&probs, 0.999);
        assert!(matches!(compute_prototypes(&emb, &none, &labels), Err(Error::NoReliableVoxels)));
    }

    #[test]
    fn contrastive_fixtures() {
        // Voxels 0, 1 reliable (classes 0, 1); voxels 2, 3 unreliable.
        let s = Shape3::new(4, 1, 1);
        let probs =
            ProbMap::<f64>::from_rows(s, &[vec![0.99, 0.01], vec![0.01, 0.99], vec![0.6, 0.4], vec![0.45, 0.55]]).unwrap();
        let part = reliability_partition(&probs, 0.9);
        let pseudo = LabelMap::new(s, 2, vec![0, 1, 0, 1]).unwrap();
        let far = 2.0;
        let emb = EmbeddingMap::from_rows(s, &[vec![0.0, 0.0], vec![far, 0.0], vec![0.0, 0.0], vec![far, 0.0]]).unwrap();
        let pr = compute_prototypes(&emb, &part, &pseudo).unwrap();
        let params = ContrastiveParams::default();
        let l = contrastive_loss(&emb, &part, &pseudo, &pr, &params).unwrap();
        let expected = (1.0 + (-far * far as f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12 && l > 0.0);

        let mid = EmbeddingMap::from_rows(s, &[vec![0.0, 0.0], vec![far, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let beta0 = ContrastiveParams { beta: 0.0, ..params };
        let l = contrastive_loss(&mid, &part, &pseudo, &pr, &beta0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let same = EmbeddingMap::from_rows(s, &[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ps = compute_prototypes(&same, &part, &pseudo).unwrap();
        let one = ContrastiveParams { beta: 1.0, ..params };
        let l = contrastive_loss(&same, &part, &pseudo, &ps, &one).unwrap();
        assert!((l - (2f64.ln() + 1.0)).abs() < 1e-12);

        let all = reliability_partition(&probs, 0.0);
        let l = contrastive_loss(&same, &all, &pseudo, &ps, &one).unwrap();
        assert!((l - 1.0).abs() < 1e-12);

        let (out, _) = contrastive_loss_grad(&[ContrastiveItem { emb: &emb, part: &part, pseudo: &pseudo }], &params).unwrap();
        assert_eq!(out.attracted, 2);
        assert!((out.loss - expected).abs() < 1e-12);
    }
}
