//! Fixtures and independent reference implementations shared by the
//! integration tests. The oracles are deliberately naive loops.
#![allow(dead_code)]

use dualseg::volume::{EmbeddingMap, LabelMap, ProbMap, Shape3, VoxelMask};
use rand::Rng;

pub fn rand_shape<R: Rng>(rng: &mut R, max: usize) -> Shape3 {
    Shape3::new(rng.gen_range(1..=max), rng.gen_range(1..=max), rng.gen_range(1..=max))
}

/// Softmax of N(0, scale) logits per voxel.
pub fn rand_probs<R: Rng>(rng: &mut R, s: Shape3, k: usize, scale: f64) -> ProbMap<f64> {
    let rows: Vec<Vec<f64>> = (0..s.len())
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
            let t: f64 = e.iter().sum();
            e.iter().map(|x| x / t).collect()
        })
        .collect();
    ProbMap::from_rows(s, &rows).unwrap()
}

pub fn rand_labels<R: Rng>(rng: &mut R, s: Shape3, k: usize) -> LabelMap {
    LabelMap::new(s, k, (0..s.len()).map(|_| rng.gen_range(0..k) as u8).collect()).unwrap()
}

pub fn rand_mask<R: Rng>(rng: &mut R, s: Shape3, p: f64) -> VoxelMask {
    VoxelMask::new(s, (0..s.len()).map(|_| rng.gen_bool(p)).collect())
}

pub fn rand_emb<R: Rng>(rng: &mut R, s: Shape3, d: usize) -> EmbeddingMap<f64> {
    EmbeddingMap::new(s, d, (0..s.len() * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// entries that are zero up to rounding from dominating.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn central_diff(x: &[f64], coords: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let dn = f(&y);
            y[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

// ---- metric oracles ------------------------------------------------------

fn coords(s: Shape3, i: usize) -> [usize; 3] {
    [i % s.w, (i / s.w) % s.h, i / (s.w * s.h)]
}

/// Voxels of `m` with a 6-neighbour outside `m` or outside the grid.
pub fn surface_oracle(m: &VoxelMask) -> Vec<[usize; 3]> {
    let s = m.shape();
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < s.w
            && (y as usize) < s.h
            && (z as usize) < s.z
            && m.at(x as usize, y as usize, z as usize)
    };
    let mut out = Vec::new();
    for i in 0..s.len() {
        if !m.get(i) {
            continue;
        }
        let [x, y, z] = coords(s, i).map(|c| c as isize);
        let nb = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if nb.iter().any(|&(dx, dy, dz)| !inside(x + dx, y + dy, z + dz)) {
            out.push(coords(s, i));
        }
    }
    out
}

fn dist(a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum::<f64>().sqrt()
}

/// All-pairs pooled directed surface distances.
pub fn pooled_oracle(a: &VoxelMask, b: &VoxelMask) -> Vec<f64> {
    let (sa, sb) = (surface_oracle(a), surface_oracle(b));
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut d = directed(&sa, &sb);
    d.extend(directed(&sb, &sa));
    d
}

pub fn percentile_oracle(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
}

pub fn hd95_oracle(a: &VoxelMask, b: &VoxelMask) -> f64 {
    percentile_oracle(&pooled_oracle(a, b), 95.0)
}

pub fn asd_oracle(a: &VoxelMask, b: &VoxelMask) -> f64 {
    let d = pooled_oracle(a, b);
    d.iter().sum::<f64>() / d.len() as f64
}

// ---- objective oracles -----------------------------------------------------

fn row(p: &ProbMap<f64>, v: usize) -> Vec<f64> {
    (0..p.classes()).map(|k| p.data()[k * p.voxels() + v]).collect()
}

/// First index of the maximum, like `argmax` on ties.
fn argmax(r: &[f64]) -> (usize, f64) {
    let mut best = (0, r[0]);
    for (k, &x) in r.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (k, x);
        }
    }
    best
}

pub fn diff_mask_oracle(pa: &ProbMap<f64>, pb: &ProbMap<f64>, t: f64) -> Vec<bool> {
    (0..pa.voxels())
        .map(|v| {
            let (ka, ma) = argmax(&row(pa, v));
            let (kb, mb) = argmax(&row(pb, v));
            ma > t && mb > t && ka != kb
        })
        .collect()
}

pub fn entropy_oracle(p: &ProbMap<f64>) -> Vec<f64> {
    (0..p.voxels())
        .map(|v| -row(p, v).iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
        .collect()
}

pub fn entropy_filter_oracle(p: &ProbMap<f64>, gamma: f64) -> Vec<bool> {
    let h = entropy_oracle(p);
    let thr = percentile_oracle(&h, gamma);
    h.iter().map(|&x| x <= thr).collect()
}

pub fn reliable_oracle(p: &ProbMap<f64>, t: f64) -> Vec<bool> {
    (0..p.voxels()).map(|v| argmax(&row(p, v)).1 >= t).collect()
}

/// Per-class mean of reliable embeddings; `None` where a class has none.
pub fn prototypes_oracle(emb: &EmbeddingMap<f64>, reliable: &[bool], labels: &LabelMap) -> Vec<Option<Vec<f64>>> {
    let (n, d) = (emb.voxels(), emb.dim());
    (0..labels.classes())
        .map(|k| {
            let members: Vec<usize> = (0..n).filter(|&v| reliable[v] && labels.values()[v] as usize == k).collect();
            if members.is_empty() {
                return None;
            }
            Some(
                (0..d)
                    .map(|j| members.iter().map(|&v| emb.data()[j * n + v]).sum::<f64>() / members.len() as f64)
                    .collect(),
            )
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn proto_distribution_oracle(f: &[f64], centers: &[Option<Vec<f64>>]) -> Vec<f64> {
    let d: Vec<Option<f64>> = centers.iter().map(|c| c.as_ref().map(|c| sq_dist(f, c))).collect();
    let m = d.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|x| x.map_or(0.0, |x| (m - x).exp())).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

// ---- gradient-check fixtures ---------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const FD_ABS_FLOOR: f64 = 1e-6;

use dualseg::objectives::{
    ce_loss_grad, contrastive_loss_grad, dice_loss_grad, reg_loss_grad, ContrastiveItem, ContrastiveParams, Distance,
    ReliabilityPartition,
};

fn probs_from(s: Shape3, k: usize, x: &[f64]) -> ProbMap<f64> {
    ProbMap::from_raw(s, k, x.to_vec()).unwrap()
}

fn all_coords(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Relative error of the Dice gradient on one random fixture, with or
/// without a mask.
pub fn dice_fixture<R: Rng>(rng: &mut R) -> f64 {
    let s = rand_shape(rng, 4);
    let k = rng.gen_range(2..=4);
    let p = rand_probs(rng, s, k, 2.0);
    let y = rand_labels(rng, s, k);
    let mask = rng.gen_bool(0.5).then(|| rand_mask(rng, s, 0.7));
    let (_, g) = dice_loss_grad(&p, &y, mask.as_ref()).unwrap();
    let num = central_diff(p.data(), &all_coords(g.len()), FD_STEP, |x| {
        dice_loss_grad(&probs_from(s, k, x), &y, mask.as_ref()).unwrap().0
    });
    max_rel_err(&g, &num, FD_ABS_FLOOR)
}

pub fn ce_fixture<R: Rng>(rng: &mut R) -> f64 {
    let s = rand_shape(rng, 4);
    let k = rng.gen_range(2..=4);
    let p = rand_probs(rng, s, k, 2.0);
    let y = rand_labels(rng, s, k);
    let mask = rng.gen_bool(0.5).then(|| rand_mask(rng, s, 0.7));
    let (_, g) = ce_loss_grad(&p, &y, mask.as_ref()).unwrap();
    let num = central_diff(p.data(), &all_coords(g.len()), FD_STEP, |x| {
        ce_loss_grad(&probs_from(s, k, x), &y, mask.as_ref()).unwrap().0
    });
    max_rel_err(&g, &num, FD_ABS_FLOOR)
}

/// The L1 term is non-smooth where `pa == pb`; fixtures keep every masked
/// difference at least `10 h` away from the kink.
pub fn reg_fixture<R: Rng>(rng: &mut R) -> f64 {
    let s = rand_shape(rng, 4);
    let k = rng.gen_range(2..=4);
    let (pa, pb) = loop {
        let pa = rand_probs(rng, s, k, 3.0);
        let pb = rand_probs(rng, s, k, 3.0);
        if pa.data().iter().zip(pb.data()).all(|(a, b)| (a - b).abs() > 10.0 * FD_STEP) {
            break (pa, pb);
        }
    };
    let m = rand_mask(rng, s, 0.6);
    let (_, ga, gb) = reg_loss_grad(&pa, &pb, &m).unwrap();
    let na = central_diff(pa.data(), &all_coords(ga.len()), FD_STEP, |x| {
        reg_loss_grad(&probs_from(s, k, x), &pb, &m).unwrap().0
    });
    let nb = central_diff(pb.data(), &all_coords(gb.len()), FD_STEP, |x| {
        reg_loss_grad(&pa, &probs_from(s, k, x), &m).unwrap().0
    });
    max_rel_err(&ga, &na, FD_ABS_FLOOR).max(max_rel_err(&gb, &nb, FD_ABS_FLOOR))
}

pub fn partition_from(reliable: Vec<bool>, s: Shape3) -> ReliabilityPartition<f64> {
    let reliable = VoxelMask::new(s, reliable);
    ReliabilityPartition {
        unreliable: reliable.not(),
        reliable,
        confidence: vec![0.0; s.len()],
        entropy: vec![0.0; s.len()],
    }
}

/// Gradient of the full contrastive term (prototypes rebuilt from the
/// perturbed embeddings) w.r.t. every embedding entry of a 1-2 item batch.
pub fn contrastive_fixture<R: Rng>(rng: &mut R, distance: Distance) -> f64 {
    let s = rand_shape(rng, 4);
    let (k, d) = (rng.gen_range(2..=3), rng.gen_range(2..=5));
    let items = rng.gen_range(1..=2);
    let params = ContrastiveParams {
        distance,
        // Large margin keeps the hinge active, small margin inactive.
        margin: if rng.gen_bool(0.5) { 50.0 } else { 1e-3 },
        beta: rng.gen_range(0.05..1.0),
    };
    let mut embs = Vec::new();
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..items {
        embs.push(rand_emb(rng, s, d));
        let mut rel: Vec<bool> = (0..s.len()).map(|_| rng.gen_bool(0.5)).collect();
        rel[0] = true;
        parts.push(partition_from(rel, s));
        labels.push(rand_labels(rng, s, k));
    }
    let eval = |embs: &[EmbeddingMap<f64>]| {
        let it: Vec<_> = (0..items)
            .map(|i| ContrastiveItem {
                emb: &embs[i],
                part: &parts[i],
                pseudo: &labels[i],
            })
            .collect();
        contrastive_loss_grad(&it, &params).unwrap().0
    };
    let out = eval(&embs);
    let mut worst: f64 = 0.0;
    for i in 0..items {
        let x = embs[i].data().to_vec();
        let num = central_diff(&x, &all_coords(x.len()), FD_STEP, |y| {
            let mut e = embs.clone();
            e[i] = EmbeddingMap::new(s, d, y.to_vec()).unwrap();
            eval(&e).loss
        });
        worst = worst.max(max_rel_err(&out.grads[i], &num, FD_ABS_FLOOR));
    }
    worst
}
