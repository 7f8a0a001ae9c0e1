use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named tensors of one layer group, in schema order (weight, then bias).
pub type LayerGroup<T> = IndexMap<String, Tensor<T>>;

/// Ordered map of layer-group name to its tensors.
///
/// This is the unit that clients transmit and the aggregator fuses. The
/// iteration order is the schema order and is what flattening follows.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterTree<T> {
    groups: IndexMap<String, LayerGroup<T>>,
}

/// Layer names with their tensor names and shapes, in order.
pub type Schema = Vec<(String, Vec<(String, Vec<usize>)>)>;

impl<T: Real> Default for ParameterTree<T> {
    fn default() -> Self {
        ParameterTree {
            groups: IndexMap::new(),
        }
    }
}

impl<T: Real> ParameterTree<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: &str, name: &str, tensor: Tensor<T>) {
        self.groups
            .entry(layer.to_string())
            .or_default()
            .insert(name.to_string(), tensor);
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn num_layers(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, layer: &str) -> Option<&LayerGroup<T>> {
        self.groups.get(layer)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &LayerGroup<T>)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&Tensor<T>> {
        self.groups.get(layer)?.get(name)
    }

    pub fn get_mut(&mut self, layer: &str, name: &str) -> Option<&mut Tensor<T>> {
        self.groups.get_mut(layer)?.get_mut(name)
    }

    /// Panicking lookup for code paths whose schema is fixed by construction.
    pub fn tensor(&self, layer: &str, name: &str) -> &Tensor<T> {
        self.get(layer, name)
            .unwrap_or_else(|| panic!("parameter {layer}.{name} missing"))
    }

    /// Every tensor in schema order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &str, &Tensor<T>)> {
        self.groups
            .iter()
            .flat_map(|(l, g)| g.iter().map(move |(n, t)| (l.as_str(), n.as_str(), t)))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.groups.values_mut().flat_map(|g| g.values_mut())
    }

    pub fn schema(&self) -> Schema {
        self.groups
            .iter()
            .map(|(l, g)| {
                (
                    l.clone(),
                    g.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
                )
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(|(_, _, t)| t.len()).sum()
    }

    pub fn check_same_schema(&self, other: &ParameterTree<T>) -> Result<()> {
        let (a, b) = (self.schema(), other.schema());
        if a != b {
            return Err(Error::SchemaMismatch(format!("{} vs {}", describe(&a), describe(&b))));
        }
        Ok(())
    }

    /// All tensors of a layer group concatenated in schema order.
    pub fn flatten_group(&self, layer: &str) -> Result<Vec<T>> {
        let g = self
            .groups
            .get(layer)
            .ok_or_else(|| Error::SchemaMismatch(format!("no layer group `{layer}`")))?;
        let mut out = Vec::with_capacity(g.values().map(Tensor::len).sum());
        for t in g.values() {
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }

    /// Inverse of [`flatten_group`](Self::flatten_group).
    pub fn unflatten_group(&mut self, layer: &str, flat: &[T]) -> Result<()> {
        let g = self
            .groups
            .get_mut(layer)
            .ok_or_else(|| Error::SchemaMismatch(format!("no layer group `{layer}`")))?;
        let total: usize = g.values().map(Tensor::len).sum();
        if total != flat.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![total],
                actual: vec![flat.len()],
            });
        }
        let mut at = 0;
        for t in g.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().for_each(|t| t.fill(T::zero()));
        out
    }

    /// `self += alpha * other`; schemas must agree.
    pub fn axpy(&mut self, alpha: T, other: &ParameterTree<T>) {
        for (a, (_, _, b)) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.tensors_mut().for_each(|t| t.scale(alpha));
    }

    pub fn cast<U: Real>(&self) -> ParameterTree<U> {
        let mut out = ParameterTree::new();
        for (l, n, t) in self.tensors() {
            out.insert(l, n, t.cast());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|(_, _, t)| t.is_finite())
    }

    /// All parameters as one vector, in schema order.
    pub fn flatten_all(&self) -> Vec<T> {
        self.tensors().flat_map(|(_, _, t)| t.data().iter().copied()).collect()
    }

    pub fn unflatten_all(&mut self, flat: &[T]) -> Result<()> {
        let total = self.num_params();
        if total != flat.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![total],
                actual: vec![flat.len()],
            });
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

fn describe(s: &Schema) -> String {
    s.iter()
        .map(|(l, ts)| {
            let inner: Vec<String> = ts.iter().map(|(n, sh)| format!("{n}{sh:?}")).collect();
            format!("{l}{{{}}}", inner.join(","))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(vals: &[f64]) -> ParameterTree<f64> {
        let mut t = ParameterTree::new();
        t.insert("a", "weight", Tensor::from_vec(&[2, 2], vals[..4].to_vec()).unwrap());
        t.insert("a", "bias", Tensor::from_vec(&[2], vals[4..6].to_vec()).unwrap());
        t.insert("b", "weight", Tensor::from_vec(&[3], vals[6..9].to_vec()).unwrap());
        t
    }

    #[test]
    fn flatten_follows_schema_order() {
        let t = tree(&[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(t.flatten_group("a").unwrap(), vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.flatten_group("b").unwrap(), vec![7., 8., 9.]);
        assert!(t.flatten_group("c").is_err());
        let names: Vec<_> = t.layer_names().collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let a = tree(&[0.0; 9]);
        let mut b = a.clone();
        b.insert("b", "bias", Tensor::zeros(&[3]));
        assert!(matches!(a.check_same_schema(&b), Err(Error::SchemaMismatch(_))));
        assert!(a.check_same_schema(&a.zeros_like()).is_ok());
    }

    proptest! {
        #[test]
        fn unflatten_inverts_flatten(vals in proptest::collection::vec(-10.0f64..10.0, 9), other in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let mut t = tree(&vals);
            let flat = t.flatten_group("a").unwrap();
            t.unflatten_group("a", &other).unwrap();
            prop_assert_eq!(t.flatten_group("a").unwrap(), other);
            t.unflatten_group("a", &flat).unwrap();
            prop_assert_eq!(t, tree(&vals));
        }
    }
}
