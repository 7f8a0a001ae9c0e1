use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, maxpool2_backward, maxpool2_forward,
    relu_backward_inplace, relu_inplace, ConvCache, ConvGeom,
};
use crate::models::params::ParameterTree;
use crate::rng::{rng_from, Rng};
use crate::tensor::{Real, Tensor};

pub const CONV1: &str = "conv1";
pub const CONV2: &str = "conv2";
pub const FC1: &str = "fc1";
pub const FC2: &str = "fc2";
pub const WEIGHT: &str = "weight";
pub const BIAS: &str = "bias";

/// Dimensions of the two-conv, two-dense backbone.
///
/// Each convolution is unpadded, followed by a rectifier and 2x2 max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_side: usize,
    pub in_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub fc_hidden: usize,
    pub classes: usize,
}

impl CnnArch {
    /// The canonical MNIST network: 5x5 convolutions with 32 and 64 filters,
    /// a 128-unit hidden layer and `classes` logits.
    pub fn mnist(classes: usize) -> Self {
        CnnArch {
            input_side: 28,
            in_channels: 1,
            conv1_filters: 32,
            conv2_filters: 64,
            kernel: 5,
            fc_hidden: 128,
            classes,
        }
    }

    /// Same layer widths for a different (square) input size.
    pub fn mnist_for_side(classes: usize, side: usize) -> Self {
        CnnArch {
            input_side: side,
            ..Self::mnist(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if [
            self.in_channels,
            self.conv1_filters,
            self.conv2_filters,
            self.kernel,
            self.fc_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let c1 = self.input_side.saturating_sub(self.kernel - 1);
        let p1 = c1 / 2;
        let c2 = p1.saturating_sub(self.kernel - 1);
        if c1 < 2 || c2 < 2 {
            return Err(Error::invalid(format!(
                "input side {} too small for kernel {}",
                self.input_side, self.kernel
            )));
        }
        Ok(())
    }

    fn conv1_geom(&self) -> ConvGeom {
        ConvGeom {
            cin: self.in_channels,
            cout: self.conv1_filters,
            kernel: self.kernel,
            stride: 1,
            h: self.input_side,
            w: self.input_side,
        }
    }

    fn conv2_geom(&self) -> ConvGeom {
        let [_, s, _] = self.tap_shape(CONV1);
        ConvGeom {
            cin: self.conv1_filters,
            cout: self.conv2_filters,
            kernel: self.kernel,
            stride: 1,
            h: s,
            w: s,
        }
    }

    /// `(channels, H, W)` of the pooled output of a convolution layer.
    pub fn tap_shape(&self, layer: &str) -> [usize; 3] {
        let p1 = (self.input_side - self.kernel + 1) / 2;
        match layer {
            CONV1 => [self.conv1_filters, p1, p1],
            CONV2 => {
                let p2 = (p1 - self.kernel + 1) / 2;
                [self.conv2_filters, p2, p2]
            }
            other => panic!("`{other}` has no feature tap"),
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.tap_shape(CONV2).iter().product()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_side, self.input_side]
    }
}

/// Activations at the calibration layers for one batch, keyed by layer name.
pub type FeatureTap<T> = IndexMap<String, Tensor<T>>;

/// Intermediates kept by a training forward pass.
pub struct ForwardCache<T> {
    c1: ConvCache<T>,
    a1: Tensor<T>,
    arg1: Vec<u32>,
    c2: ConvCache<T>,
    a2: Tensor<T>,
    arg2: Vec<u32>,
    flat: Tensor<T>,
    a3: Tensor<T>,
}

/// The backbone with its parameters and calibration layer set.
#[derive(Clone, Debug, PartialEq)]
pub struct Cnn<T> {
    arch: CnnArch,
    params: ParameterTree<T>,
    calibration_layers: Vec<String>,
    seed: u64,
}

/// The model type used for training and evaluation.
pub type ModelHandle = Cnn<f32>;

pub fn build_mnist_cnn(classes: usize, seed: u64) -> Result<ModelHandle> {
    Cnn::new(CnnArch::mnist(classes), seed)
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
pub(crate) fn init_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

impl<T: Real> Cnn<T> {
    pub fn new(arch: CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(seed, &[0x1417]);
        let k = arch.kernel;
        let mut params = ParameterTree::new();
        let mut layer = |name: &str, wshape: &[usize], fan_in: usize| {
            params.insert(name, WEIGHT, init_uniform(wshape, fan_in, &mut rng));
            params.insert(name, BIAS, init_uniform(&[wshape[0]], fan_in, &mut rng));
        };
        layer(
            CONV1,
            &[arch.conv1_filters, arch.in_channels, k, k],
            arch.in_channels * k * k,
        );
        layer(
            CONV2,
            &[arch.conv2_filters, arch.conv1_filters, k, k],
            arch.conv1_filters * k * k,
        );
        layer(FC1, &[arch.fc_hidden, arch.flat_dim()], arch.flat_dim());
        layer(FC2, &[arch.classes, arch.fc_hidden], arch.fc_hidden);
        Ok(Cnn {
            arch,
            params,
            calibration_layers: vec![CONV1.into(), CONV2.into()],
            seed,
        })
    }

    pub fn arch(&self) -> &CnnArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParameterTree<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterTree<T> {
        &mut self.params
    }

    /// The ordered layer set whose features take part in calibration.
    pub fn calibration_layers(&self) -> &[String] {
        &self.calibration_layers
    }

    pub fn tap_shapes(&self) -> Vec<(String, [usize; 3])> {
        self.calibration_layers
            .iter()
            .map(|l| (l.clone(), self.arch.tap_shape(l)))
            .collect()
    }

    pub fn export_parameters(&self) -> ParameterTree<T> {
        self.params.clone()
    }

    pub fn import_parameters(&mut self, tree: &ParameterTree<T>) -> Result<()> {
        self.params.check_same_schema(tree)?;
        self.params = tree.clone();
        Ok(())
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Real>(&self) -> Cnn<U> {
        Cnn {
            arch: self.arch.clone(),
            params: self.params.cast(),
            calibration_layers: self.calibration_layers.clone(),
            seed: self.seed,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let want = self.arch.input_shape();
        if s.len() != 4 || s[1..] != want {
            return Err(Error::ShapeMismatch {
                expected: [&[x.rows()][..], &want[..]].concat(),
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    fn w(&self, layer: &str) -> &Tensor<T> {
        self.params.tensor(layer, WEIGHT)
    }

    fn b(&self, layer: &str) -> &Tensor<T> {
        self.params.tensor(layer, BIAS)
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeatureTap<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let batch = x.rows();
        let (mut a1, c1) = conv2d_forward(x, self.w(CONV1), self.b(CONV1), self.arch.conv1_geom());
        relu_inplace(&mut a1);
        let (p1, arg1) = maxpool2_forward(&a1);
        let (mut a2, c2) = conv2d_forward(&p1, self.w(CONV2), self.b(CONV2), self.arch.conv2_geom());
        relu_inplace(&mut a2);
        let (p2, arg2) = maxpool2_forward(&a2);
        let flat = p2.clone().reshape(&[batch, self.arch.flat_dim()])?;
        let mut a3 = linear_forward(&flat, self.w(FC1), self.b(FC1));
        relu_inplace(&mut a3);
        let logits = linear_forward(&a3, self.w(FC2), self.b(FC2));
        let mut taps = FeatureTap::new();
        taps.insert(CONV1.to_string(), p1);
        taps.insert(CONV2.to_string(), p2);
        let cache = ForwardCache {
            c1,
            a1,
            arg1,
            c2,
            a2,
            arg2,
            flat,
            a3,
        };
        Ok((logits, taps, cache))
    }

    /// Logits and the activations at every calibration layer.
    pub fn forward_with_features(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeatureTap<T>)> {
        let (logits, taps, _) = self.forward_train(x)?;
        Ok((logits, taps))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Argmax class per row, evaluated in chunks to bound memory.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(x.rows());
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let logits = self.forward(&x.slice_rows(start, end))?;
            out.extend(logits.data().chunks_exact(self.arch.classes).map(argmax));
            start = end;
        }
        Ok(out)
    }

    /// Parameter gradients given the loss gradient w.r.t. the logits and,
    /// optionally, extra gradients arriving at the feature taps.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: &Tensor<T>,
        tap_grads: Option<&FeatureTap<T>>,
    ) -> ParameterTree<T> {
        let mut grads = self.params.zeros_like();
        let mut put = |layer: &str, dw: Tensor<T>, db: Tensor<T>| {
            *grads.get_mut(layer, WEIGHT).expect("schema") = dw;
            *grads.get_mut(layer, BIAS).expect("schema") = db;
        };
        let (dw, db, da3) = linear_backward(d_logits, &cache.a3, self.w(FC2), true);
        put(FC2, dw, db);
        let mut dz3 = da3.expect("requested");
        relu_backward_inplace(&mut dz3, &cache.a3);
        let (dw, db, dflat) = linear_backward(&dz3, &cache.flat, self.w(FC1), true);
        put(FC1, dw, db);

        let tap = |layer: &str| tap_grads.and_then(|t| t.get(layer));
        let batch = cache.flat.rows();
        let s2 = self.arch.tap_shape(CONV2);
        let mut dp2 = dflat
            .expect("requested")
            .reshape(&[batch, s2[0], s2[1], s2[2]])
            .expect("tap shape");
        if let Some(g) = tap(CONV2) {
            dp2.axpy(T::one(), g);
        }
        let mut dz2 = maxpool2_backward(&dp2, &cache.arg2, cache.a2.shape());
        relu_backward_inplace(&mut dz2, &cache.a2);
        let (dw, db, dp1) = conv2d_backward(&dz2, self.w(CONV2), &cache.c2, true);
        put(CONV2, dw, db);
        let mut dp1 = dp1.expect("requested");
        if let Some(g) = tap(CONV1) {
            dp1.axpy(T::one(), g);
        }
        let mut dz1 = maxpool2_backward(&dp1, &cache.arg1, cache.a1.shape());
        relu_backward_inplace(&mut dz1, &cache.a1);
        let (dw, db, _) = conv2d_backward(&dz1, self.w(CONV1), &cache.c1, false);
        put(CONV1, dw, db);
        grads
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, side: usize, k: f32) -> Tensor<f32> {
        let data = (0..n * side * side).map(|i| (i as f32 * k).sin() * 0.5 + 0.5).collect();
        Tensor::from_vec(&[n, 1, side, side], data).unwrap()
    }

    #[test]
    fn mnist_shapes() {
        let m = build_mnist_cnn(10, 0).unwrap();
        let (logits, taps) = m.forward_with_features(&batch(8, 28, 0.37)).unwrap();
        assert_eq!(logits.shape(), &[8, 10]);
        let keys: Vec<_> = taps.keys().cloned().collect();
        assert_eq!(keys, m.calibration_layers());
        assert_eq!(taps[CONV1].shape(), &[8, 32, 12, 12]);
        assert_eq!(taps[CONV2].shape(), &[8, 64, 4, 4]);
        let names: Vec<_> = m.params().layer_names().collect();
        assert_eq!(names, [CONV1, CONV2, FC1, FC2]);
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(build_mnist_cnn(10, 3).unwrap(), build_mnist_cnn(10, 3).unwrap());
        assert_ne!(
            build_mnist_cnn(10, 3).unwrap().params(),
            build_mnist_cnn(10, 4).unwrap().params()
        );
    }

    #[test]
    fn rejects_bad_input_and_arch() {
        let m = build_mnist_cnn(10, 0).unwrap();
        assert!(matches!(
            m.forward(&batch(2, 20, 0.1)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(build_mnist_cnn(1, 0).is_err());
        assert!(Cnn::<f32>::new(CnnArch::mnist_for_side(10, 12), 0).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_taps() {
        let mut m = build_mnist_cnn(10, 1).unwrap();
        for layer in [CONV1, CONV2, FC1, FC2] {
            m.params_mut().get_mut(layer, BIAS).unwrap().fill(0.0);
        }
        let (_, taps) = m.forward_with_features(&Tensor::zeros(&[4, 1, 28, 28])).unwrap();
        for t in taps.values() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tap_forward_logits_equal_plain_forward() {
        let m = build_mnist_cnn(10, 2).unwrap();
        let x = batch(5, 28, 0.11);
        let (a, _) = m.forward_with_features(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn import_reproduces_exporter() {
        let a = build_mnist_cnn(10, 5).unwrap();
        let mut b = build_mnist_cnn(10, 6).unwrap();
        let x = batch(3, 28, 0.23);
        assert_ne!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        b.import_parameters(&a.export_parameters()).unwrap();
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_eq!(b.export_parameters(), a.export_parameters());

        let mut other = build_mnist_cnn(7, 0).unwrap();
        assert!(matches!(
            other.import_parameters(&a.export_parameters()),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = CnnArch {
            input_side: 12,
            in_channels: 1,
            conv1_filters: 2,
            conv2_filters: 3,
            kernel: 3,
            fc_hidden: 4,
            classes: 3,
        };
        let m = Cnn::<f64>::new(arch, 9).unwrap();
        let x = batch(2, 12, 0.77).cast::<f64>();
        let r: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).cos()).collect();
        let loss = |m: &Cnn<f64>| -> f64 { m.forward(&x).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum() };
        let (_, _, cache) = m.forward_train(&x).unwrap();
        let grads = m.backward(&cache, &Tensor::from_vec(&[2, 3], r.clone()).unwrap(), None);
        let analytic = grads.flatten_all();
        let base = m.params().flatten_all();
        let eps = 1e-6;
        let mut num = Vec::new();
        for i in 0..base.len() {
            let mut p = m.clone();
            let mut v = base.clone();
            v[i] += eps;
            p.params_mut().unflatten_all(&v).unwrap();
            let up = loss(&p);
            v[i] -= 2.0 * eps;
            p.params_mut().unflatten_all(&v).unwrap();
            num.push((up - loss(&p)) / (2.0 * eps));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }
}
