//! On-disk layout of a generated domain: one directory holding raw
//! little-endian tensors and a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train_images.f32   (N, channels, H, W) float32 LE
//! <dir>/train_labels.u32   N uint32 LE
//! <dir>/test_images.f32
//! <dir>/test_labels.u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Domain, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domain_id: String,
    pub layout: String,
    /// `[channels, H, W]`.
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub angle: Option<f64>,
    pub seed: Option<u64>,
}

impl DomainManifest {
    pub fn of(domain: &Domain) -> Self {
        DomainManifest {
            domain_id: domain.id.clone(),
            layout: "NCHW".into(),
            image_shape: domain.image_shape(),
            num_classes: domain.num_classes(),
            train_size: domain.train.len(),
            test_size: domain.test.len(),
            angle: domain.angle,
            seed: domain.seed,
        }
    }
}

fn write_split(dir: &Path, name: &str, ds: &DomainDataset) -> Result<()> {
    let mut img = Vec::with_capacity(ds.images().len() * 4);
    for v in ds.images().data() {
        img.extend_from_slice(&v.to_le_bytes());
    }
    let p = dir.join(format!("{name}_images.f32"));
    fs::write(&p, img).map_err(|e| Error::io(&p, e))?;
    let mut lbl = Vec::with_capacity(ds.len() * 4);
    for &y in ds.labels() {
        lbl.extend_from_slice(&(y as u32).to_le_bytes());
    }
    let p = dir.join(format!("{name}_labels.u32"));
    fs::write(&p, lbl).map_err(|e| Error::io(&p, e))
}

fn read_split(dir: &Path, name: &str, m: &DomainManifest, n: usize, split: Split) -> Result<DomainDataset> {
    let p = dir.join(format!("{name}_images.f32"));
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let [c, h, w] = m.image_shape;
    if bytes.len() != n * c * h * w * 4 {
        return Err(Error::Format {
            path: p,
            reason: format!("expected {} bytes, found {}", n * c * h * w * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let p = dir.join(format!("{name}_labels.u32"));
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            path: p,
            reason: format!("expected {n} labels"),
        });
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    DomainDataset::new(
        m.domain_id.clone(),
        Tensor::from_vec(&[n, c, h, w], data)?,
        labels,
        m.num_classes,
        split,
    )
}

pub fn save_domain(dir: &Path, domain: &Domain) -> Result<DomainManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_split(dir, "train", &domain.train)?;
    write_split(dir, "test", &domain.test)?;
    let manifest = DomainManifest::of(domain);
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn load_domain(dir: &Path) -> Result<Domain> {
    let p = dir.join("manifest.json");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let m: DomainManifest = serde_json::from_slice(&bytes)?;
    if m.layout != "NCHW" {
        return Err(Error::Format {
            path: p,
            reason: format!("unsupported layout `{}`", m.layout),
        });
    }
    let train = read_split(dir, "train", &m, m.train_size, Split::Train)?;
    let test = read_split(dir, "test", &m, m.test_size, Split::Test)?;
    let mut d = Domain::new(train, test)?;
    d.angle = m.angle;
    d.seed = m.seed;
    Ok(d)
}
