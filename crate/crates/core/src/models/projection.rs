//! Single-convolution projectors that bring every calibration layer's
//! features to the shape of the last layer in the set.
//!
//! A projector for an input of side `s_in` and target side `s_t` uses stride
//! `floor(s_in / s_t)` and kernel `s_in - (s_t - 1) * stride`, so the output
//! side is exactly `s_t`. A layer whose shape already matches the target
//! gets the identity.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::cnn::{init_uniform, FeatureTap, BIAS, WEIGHT};
use crate::models::layers::{conv2d_backward, conv2d_forward, ConvCache, ConvGeom};
use crate::models::params::ParameterTree;
use crate::rng::rng_from;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Projector {
    Identity,
    Conv(ConvGeom),
}

/// Per-layer projectors plus their trainable parameters.
///
/// Parameters live in a tree keyed by layer name; identity layers have none.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    projectors: IndexMap<String, Projector>,
    params: ParameterTree<T>,
    target: [usize; 3],
}

/// Per-layer caches of a projection forward pass.
pub type ProjectionCache<T> = IndexMap<String, Option<ConvCache<T>>>;

pub fn build_projection<T: Real>(layers: &[(String, [usize; 3])], seed: u64) -> Result<ProjectionHead<T>> {
    let (_, target) = layers
        .last()
        .ok_or_else(|| Error::invalid("calibration layer set is empty"))?;
    let target = *target;
    let mut rng = rng_from(seed, &[0x9A0]);
    let mut projectors = IndexMap::new();
    let mut params = ParameterTree::new();
    for (name, shape) in layers {
        let [cin, h, w] = *shape;
        if *shape == target {
            projectors.insert(name.clone(), Projector::Identity);
            continue;
        }
        if h != w || target[1] != target[2] {
            return Err(Error::invalid(format!("layer `{name}` is not square")));
        }
        if h < target[1] {
            return Err(Error::invalid(format!(
                "layer `{name}` ({h}x{w}) is smaller than the projection target ({}x{})",
                target[1], target[2]
            )));
        }
        let stride = h / target[1];
        let kernel = h - (target[1] - 1) * stride;
        let geom = ConvGeom {
            cin,
            cout: target[0],
            kernel,
            stride,
            h,
            w,
        };
        debug_assert_eq!(geom.out_hw(), (target[1], target[2]));
        let fan_in = cin * kernel * kernel;
        params.insert(
            name,
            WEIGHT,
            init_uniform(&[target[0], cin, kernel, kernel], fan_in, &mut rng),
        );
        params.insert(name, BIAS, init_uniform(&[target[0]], fan_in, &mut rng));
        projectors.insert(name.clone(), Projector::Conv(geom));
    }
    Ok(ProjectionHead {
        projectors,
        params,
        target,
    })
}

impl<T: Real> ProjectionHead<T> {
    pub fn target_shape(&self) -> [usize; 3] {
        self.target
    }

    pub fn projector(&self, layer: &str) -> Option<&Projector> {
        self.projectors.get(layer)
    }

    pub fn params(&self) -> &ParameterTree<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterTree<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> ProjectionHead<U> {
        ProjectionHead {
            projectors: self.projectors.clone(),
            params: self.params.cast(),
            target: self.target,
        }
    }

    /// Project one layer's features `(B, c, h, w)` to `(B, target...)`.
    pub fn project_layer(&self, layer: &str, x: &Tensor<T>) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        match self.projectors.get(layer) {
            None => Err(Error::invalid(format!("no projector for layer `{layer}`"))),
            Some(Projector::Identity) => Ok((x.clone(), None)),
            Some(Projector::Conv(geom)) => {
                if x.shape()[1..] != [geom.cin, geom.h, geom.w] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![x.rows(), geom.cin, geom.h, geom.w],
                        actual: x.shape().to_vec(),
                    });
                }
                let (y, cache) = conv2d_forward(
                    x,
                    self.params.tensor(layer, WEIGHT),
                    self.params.tensor(layer, BIAS),
                    *geom,
                );
                Ok((y, Some(cache)))
            }
        }
    }

    /// Project every tapped layer.
    pub fn project(&self, taps: &FeatureTap<T>) -> Result<(FeatureTap<T>, ProjectionCache<T>)> {
        let mut out = FeatureTap::new();
        let mut caches = ProjectionCache::new();
        for (layer, x) in taps {
            let (y, c) = self.project_layer(layer, x)?;
            out.insert(layer.clone(), y);
            caches.insert(layer.clone(), c);
        }
        Ok((out, caches))
    }

    /// Accumulate parameter gradients into `grads` and return the gradient
    /// w.r.t. the projector input when `need_dx`.
    pub fn backward_layer(
        &self,
        layer: &str,
        dy: &Tensor<T>,
        cache: Option<&ConvCache<T>>,
        grads: &mut ParameterTree<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        match (self.projectors.get(layer), cache) {
            (Some(Projector::Conv(_)), Some(cache)) => {
                let (dw, db, dx) = conv2d_backward(dy, self.params.tensor(layer, WEIGHT), cache, need_dx);
                grads.get_mut(layer, WEIGHT).expect("schema").axpy(T::one(), &dw);
                grads.get_mut(layer, BIAS).expect("schema").axpy(T::one(), &db);
                dx
            }
            _ => need_dx.then(|| dy.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_layers() -> Vec<(String, [usize; 3])> {
        vec![("conv1".into(), [32, 12, 12]), ("conv2".into(), [64, 4, 4])]
    }

    #[test]
    fn every_layer_projects_to_target() {
        let head = build_projection::<f32>(&mnist_layers(), 0).unwrap();
        assert_eq!(head.target_shape(), [64, 4, 4]);
        assert_eq!(head.projector("conv2"), Some(&Projector::Identity));
        let x = Tensor::from_vec(&[2, 32, 12, 12], (0..2 * 32 * 144).map(|i| (i % 7) as f32).collect()).unwrap();
        let (y, _) = head.project_layer("conv1", &x).unwrap();
        assert_eq!(y.shape(), &[2, 64, 4, 4]);
        assert!(y.is_finite());
    }

    #[test]
    fn identity_on_last_layer() {
        let head = build_projection::<f32>(&mnist_layers(), 0).unwrap();
        let x = Tensor::from_vec(&[1, 64, 4, 4], (0..1024).map(|i| i as f32).collect()).unwrap();
        let (y, cache) = head.project_layer("conv2", &x).unwrap();
        assert_eq!(y, x);
        assert!(cache.is_none());
    }

    #[test]
    fn odd_sizes_still_match() {
        let layers = vec![("a".into(), [3, 8, 8]), ("b".into(), [5, 3, 3])];
        let head = build_projection::<f64>(&layers, 1).unwrap();
        let (y, _) = head.project_layer("a", &Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3, 3]);
        assert!(build_projection::<f64>(&[], 0).is_err());
        let too_small = vec![("a".into(), [3, 2, 2]), ("b".into(), [5, 3, 3])];
        assert!(build_projection::<f64>(&too_small, 0).is_err());
    }
}
