//! Small procedurally generated domains for fast experiments.
//!
//! Every class has a fixed prototype made of a few Gaussian blobs, shared by
//! all domains. Domain `h` applies a clockwise rotation of `30 * shift * h`
//! degrees and overlays an oriented stripe texture whose strength grows with
//! `shift`. With `shift = 0` all domains sample the same distribution.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::datasets::rotate::rotate_image;
use crate::datasets::{Domain, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub side: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            side: 20,
            train_per_class: 50,
            test_per_class: 30,
            noise: 0.1,
        }
    }
}

pub fn synthetic_domains(seed: u64, domains: usize, classes: usize, shift: f64) -> Result<Vec<Domain>> {
    synthetic_domains_with(&SyntheticConfig::default(), seed, domains, classes, shift)
}

pub fn synthetic_domains_with(
    cfg: &SyntheticConfig,
    seed: u64,
    domains: usize,
    classes: usize,
    shift: f64,
) -> Result<Vec<Domain>> {
    if domains < 2 || classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 domains and 2 classes, got {domains} and {classes}"
        )));
    }
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(Error::invalid(format!("shift must be finite and >= 0, got {shift}")));
    }
    if cfg.side < 8 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::invalid("synthetic config needs side >= 8 and non-empty splits"));
    }
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|c| prototype(cfg.side, &mut rng_from(seed, &[0xC1A55, c as u64])))
        .collect();
    (0..domains)
        .map(|h| {
            let id = format!("S{h}");
            let make = |split: Split, per_class: usize| {
                let mut rng = rng_from(seed, &[0xD0, h as u64, split as u64]);
                sample_split(cfg, &id, &prototypes, h, domains, shift, per_class, split, &mut rng)
            };
            let mut d = Domain::new(
                make(Split::Train, cfg.train_per_class)?,
                make(Split::Test, cfg.test_per_class)?,
            )?;
            d.seed = Some(seed);
            Ok(d)
        })
        .collect()
}

fn prototype(side: usize, rng: &mut Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; side * side];
    let lo = side as f64 * 0.25;
    let hi = side as f64 * 0.75;
    for _ in 0..3 {
        let cy = rng.random_range(lo..hi);
        let cx = rng.random_range(lo..hi);
        let sigma = rng.random_range(1.0..side as f64 / 8.0);
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                img[r * side + c] += (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.min(1.0));
    img
}

#[allow(clippy::too_many_arguments)]
fn sample_split(
    cfg: &SyntheticConfig,
    id: &str,
    prototypes: &[Vec<f32>],
    h: usize,
    domains: usize,
    shift: f64,
    per_class: usize,
    split: Split,
    rng: &mut Rng,
) -> Result<DomainDataset> {
    let side = cfg.side;
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let angle = 30.0 * shift * h as f64;
    let stripe_amp = 0.4 * shift.min(1.0);
    let orient = std::f64::consts::PI * h as f64 / domains as f64;
    let (so, co) = orient.sin_cos();
    let classes = prototypes.len();
    let mut data = Vec::with_capacity(classes * per_class * side * side);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let class = i % classes;
        let dy = rng.random_range(-1i64..=1);
        let dx = rng.random_range(-1i64..=1);
        let amp = rng.random_range(0.8..1.0);
        let proto = &prototypes[class];
        let mut img = vec![0.0f32; side * side];
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = (r as i64 - dy, c as i64 - dx);
                let base = if sr >= 0 && sc >= 0 && (sr as usize) < side && (sc as usize) < side {
                    proto[sr as usize * side + sc as usize] as f64
                } else {
                    0.0
                };
                img[r * side + c] = (amp * base + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
        let mut img = rotate_image(&img, 1, side, angle);
        if stripe_amp > 0.0 {
            for r in 0..side {
                for c in 0..side {
                    let u = (c as f64 * co + r as f64 * so) / side as f64;
                    let t = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * u).sin();
                    let v = &mut img[r * side + c];
                    *v = (*v as f64 + stripe_amp * t).clamp(0.0, 1.0) as f32;
                }
            }
        }
        data.extend(img);
        labels.push(class);
    }
    DomainDataset::new(
        id,
        Tensor::from_vec(&[labels.len(), 1, side, side], data)?,
        labels,
        classes,
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synthetic_domains(11, 3, 4, 0.5).unwrap();
        let b = synthetic_domains(11, 3, 4, 0.5).unwrap();
        assert_eq!(a, b);
        let c = synthetic_domains(12, 3, 4, 0.5).unwrap();
        assert_ne!(a[0].train, c[0].train);
    }

    #[test]
    fn shapes_and_balance() {
        let cfg = SyntheticConfig::default();
        let ds = synthetic_domains(1, 3, 4, 1.0).unwrap();
        assert_eq!(ds.len(), 3);
        for (h, d) in ds.iter().enumerate() {
            assert_eq!(d.id, format!("S{h}"));
            assert_eq!(d.image_shape(), [1, cfg.side, cfg.side]);
            assert_eq!(d.train.class_counts(), vec![cfg.train_per_class; 4]);
            assert_eq!(d.test.class_counts(), vec![cfg.test_per_class; 4]);
            assert!(d.train.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn class_mean_gap(a: &DomainDataset, b: &DomainDataset) -> f64 {
        let per = a.images().row_len();
        let mean = |d: &DomainDataset, class: usize| -> Vec<f64> {
            let mut m = vec![0.0; per];
            let mut n = 0.0;
            for (img, &y) in d.images().data().chunks_exact(per).zip(d.labels()) {
                if y == class {
                    m.iter_mut().zip(img).for_each(|(s, &v)| *s += v as f64);
                    n += 1.0;
                }
            }
            m.iter().map(|s| s / n).collect()
        };
        (0..a.num_classes())
            .map(|c| {
                let (x, y) = (mean(a, c), mean(b, c));
                x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / per as f64
            })
            .sum::<f64>()
            / a.num_classes() as f64
    }

    #[test]
    fn zero_shift_domains_share_distribution() {
        let same = synthetic_domains(5, 2, 3, 0.0).unwrap();
        let shifted = synthetic_domains(5, 2, 3, 1.0).unwrap();
        let g0 = class_mean_gap(&same[0].train, &same[1].train);
        let g1 = class_mean_gap(&shifted[0].train, &shifted[1].train);
        assert!(g0 < 0.05, "gap without shift {g0}");
        assert!(g1 > 3.0 * g0, "gap with shift {g1} vs {g0}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synthetic_domains(0, 1, 4, 0.0).is_err());
        assert!(synthetic_domains(0, 2, 1, 0.0).is_err());
        assert!(synthetic_domains(0, 2, 2, -0.1).is_err());
    }
}
