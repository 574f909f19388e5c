//! Deterministic synthetic volumes: axis-aligned ellipsoid blobs per class on
//! a background, class intensity levels plus Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{LabelMap, Shape3, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub shape: Shape3,
    pub classes: usize,
    /// Inclusive range of blobs drawn per foreground class.
    pub blobs: (usize, usize),
    /// Inclusive range of ellipsoid semi-axes in voxels.
    pub radius: (f64, f64),
    pub noise_sigma: f64,
    /// Intensity of each class; `None` spaces them evenly on `[0, 1]`.
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    /// Accepted range of the non-background fraction.
    pub foreground_fraction: (f64, f64),
}

impl SynthSpec {
    /// The desk benchmark case: K = 2 on 32³.
    pub fn desk() -> Self {
        Self {
            shape: Shape3::cube(32),
            classes: 2,
            blobs: (1, 3),
            radius: (3.0, 8.0),
            noise_sigma: 0.6,
            levels: None,
            foreground_fraction: (0.02, 0.30),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.check_positive("synth shape")?;
        if !(2..=256).contains(&self.classes) {
            return Err(Error::invalid(format!("classes must be in 2..=256, got {}", self.classes)));
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return Err(Error::invalid(format!("blob count range {:?} must satisfy 1 <= min <= max", self.blobs)));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::invalid(format!("radius range {:?} must satisfy 0 < min <= max", self.radius)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        let (lo, hi) = self.foreground_fraction;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::invalid(format!("foreground fraction range ({lo}, {hi}) must lie in [0, 1]")));
        }
        if let Some(levels) = &self.levels {
            if levels.len() != self.classes || levels.iter().any(|l| !l.is_finite()) {
                return Err(Error::invalid("levels must give one finite intensity per class"));
            }
            let mut sorted = levels.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid("levels must be distinct"));
            }
        }
        Ok(())
    }

    pub fn level(&self, class: usize) -> f64 {
        match &self.levels {
            Some(l) => l[class],
            None => class as f64 / (self.classes - 1) as f64,
        }
    }
}

fn draw_labels<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<u8> {
    let s = spec.shape;
    let mut values = vec![0u8; s.len()];
    for class in 1..spec.classes {
        let n = rng.gen_range(spec.blobs.0..=spec.blobs.1);
        for _ in 0..n {
            let centre = [
                rng.gen_range(0.0..s.w as f64),
                rng.gen_range(0.0..s.h as f64),
                rng.gen_range(0.0..s.z as f64),
            ];
            let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.radius.0..=spec.radius.1));
            let lo: [usize; 3] = std::array::from_fn(|a| (centre[a] - r[a]).floor().max(0.0) as usize);
            let dims = s.as_array();
            let hi: [usize; 3] = std::array::from_fn(|a| ((centre[a] + r[a]).ceil() as usize).min(dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let q = [x, y, z];
                        let d: f64 = (0..3)
                            .map(|a| {
                                let t = (q[a] as f64 + 0.5 - centre[a]) / r[a];
                                t * t
                            })
                            .sum();
                        if d <= 1.0 {
                            values[s.index(x, y, z)] = class as u8;
                        }
                    }
                }
            }
        }
    }
    values
}

/// Draws labels until every class is present and the foreground fraction is
/// in range, then renders the image.
pub fn synth_case<T: Scalar, R: Rng>(rng: &mut R, spec: &SynthSpec) -> Result<(Volume<T>, LabelMap)> {
    spec.validate()?;
    let n = spec.shape.len() as f64;
    let (lo, hi) = spec.foreground_fraction;
    for _ in 0..MAX_ATTEMPTS {
        let values = draw_labels(spec, rng);
        let mut counts = vec![0usize; spec.classes];
        values.iter().for_each(|&c| counts[c as usize] += 1);
        let fg = (spec.shape.len() - counts[0]) as f64 / n;
        if counts.contains(&0) || fg < lo || fg > hi {
            continue;
        }
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let image: Vec<T> = values
            .iter()
            .map(|&c| {
                let e = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                T::lit(spec.level(c as usize) + e)
            })
            .collect();
        let labels = LabelMap::new(spec.shape, spec.classes, values)?;
        return Ok((Volume::new(spec.shape, [1.0; 3], image)?, labels));
    }
    Err(Error::invalid(format!(
        "could not place blobs for every class with foreground fraction in [{lo}, {hi}] on {} after {MAX_ATTEMPTS} attempts",
        spec.shape
    )))
}
