use crate::models::ParameterTree;
use crate::tensor::Real;

/// Gradient descent with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: Option<ParameterTree<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr: T::from_f64_lossy(lr),
            momentum: T::from_f64_lossy(momentum),
            velocity: None,
        }
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn step(&mut self, params: &mut ParameterTree<T>, grads: &ParameterTree<T>) {
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        v.scale(self.momentum);
        v.axpy(T::one(), grads);
        params.axpy(-self.lr, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tree(v: f64) -> ParameterTree<f64> {
        let mut t = ParameterTree::new();
        t.insert("l", "w", Tensor::from_vec(&[1], vec![v]).unwrap());
        t
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = tree(1.0);
        let mut opt = Sgd::new(0.1, 0.5);
        opt.step(&mut p, &tree(1.0));
        assert!((p.flatten_all()[0] - 0.9).abs() < 1e-12);
        opt.step(&mut p, &tree(1.0));
        // v = 0.5 * 1 + 1 = 1.5
        assert!((p.flatten_all()[0] - 0.75).abs() < 1e-12);
        opt.reset();
        opt.step(&mut p, &tree(1.0));
        assert!((p.flatten_all()[0] - 0.65).abs() < 1e-12);
    }
}
