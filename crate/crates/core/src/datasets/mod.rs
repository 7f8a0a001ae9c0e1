//! Multi-domain image datasets and leave-one-domain-out splits.

mod idx;
mod rotate;
mod store;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub use idx::{load_mnist, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use rotate::{generate_rotated_domains, rotate_image, rotated_mnist, ROTATED_MNIST_ANGLES};
pub use store::{load_domain, save_domain, DomainManifest};
pub use synthetic::{synthetic_domains, synthetic_domains_with, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled images of one domain and one split, stored `(N, channels, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domain_id: String,
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        if images.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "images must be (N, channels, H, W), got {:?}",
                images.shape()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset(domain_id));
        }
        if images.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(DomainDataset {
            domain_id,
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_domain_id(mut self, id: impl Into<String>) -> Self {
        self.domain_id = id.into();
        self
    }

    /// Images and labels at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        DomainDataset::new(
            self.domain_id.clone(),
            self.images.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.split,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenate datasets sharing class count and image shape.
    pub fn concat(id: impl Into<String>, parts: &[&DomainDataset], split: Split) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let shape = first.image_shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != shape || p.num_classes != first.num_classes {
                return Err(Error::invalid(format!(
                    "cannot concatenate `{}` with `{}`: incompatible shape or classes",
                    first.domain_id, p.domain_id
                )));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let images = Tensor::from_vec(&[labels.len(), shape[0], shape[1], shape[2]], data)?;
        DomainDataset::new(id, images, labels, first.num_classes, split)
    }
}

/// One named domain with its own train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub id: String,
    pub train: DomainDataset,
    pub test: DomainDataset,
    /// Rotation angle in degrees, for rotated domains.
    pub angle: Option<f64>,
    pub seed: Option<u64>,
}

impl Domain {
    pub fn new(train: DomainDataset, test: DomainDataset) -> Result<Self> {
        if train.domain_id() != test.domain_id() {
            return Err(Error::invalid(format!(
                "train split `{}` and test split `{}` belong to different domains",
                train.domain_id(),
                test.domain_id()
            )));
        }
        if train.num_classes() != test.num_classes() || train.image_shape() != test.image_shape() {
            return Err(Error::invalid(format!(
                "splits of `{}` disagree on classes or image shape",
                train.domain_id()
            )));
        }
        Ok(Domain {
            id: train.domain_id().to_string(),
            train,
            test,
            angle: None,
            seed: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }
}

/// Source domains plus one held-out target.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub sources: Vec<Domain>,
    pub target: Domain,
}

impl DomainSplit {
    pub fn num_classes(&self) -> usize {
        self.target.num_classes()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.target.image_shape()
    }
}

/// Keep exactly `n` items of every class, chosen uniformly per class.
///
/// Selected items keep their original relative order.
pub fn subsample_per_class(ds: &DomainDataset, n: usize, seed: u64) -> Result<DomainDataset> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = rng_from(seed, &[0x5ab5]);
    let mut keep = Vec::with_capacity(n * ds.num_classes());
    for class in 0..ds.num_classes() {
        let members = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < n {
            return Err(Error::InsufficientSamples(format!(
                "class {class} of `{}` has {} items, {n} requested",
                ds.domain_id(),
                members.len()
            )));
        }
        let mut members = members.to_vec();
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    ds.select(&keep)
}

/// Hold out `target_id`; the remaining domains become sources in input order.
pub fn leave_one_domain_out(domains: &[Domain], target_id: &str) -> Result<DomainSplit> {
    if domains.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    let target = domains
        .iter()
        .find(|d| d.id == target_id)
        .ok_or_else(|| Error::UnknownDomain(target_id.to_string()))?
        .clone();
    let sources: Vec<Domain> = domains.iter().filter(|d| d.id != target_id).cloned().collect();
    for s in &sources {
        if s.num_classes() != target.num_classes() || s.image_shape() != target.image_shape() {
            return Err(Error::invalid(format!(
                "domain `{}` is incompatible with target `{}`",
                s.id, target.id
            )));
        }
    }
    Ok(DomainSplit { sources, target })
}
