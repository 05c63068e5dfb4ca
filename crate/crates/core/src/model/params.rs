//! Named, grouped parameter tensors with a per-parameter trainable flag.

use std::collections::BTreeSet;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{bit_checksum, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group: group.into(), value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.params
            .iter()
            .filter(|p| seen.insert(p.group.clone()))
            .map(|p| p.group.clone())
            .collect()
    }

    /// Total element count of all parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn count_group(&self, group: &str) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Marks every parameter trainable iff its group is in `groups`.
    pub fn train_only(&mut self, groups: &[&str]) -> Result<()> {
        let known = self.groups();
        for g in groups {
            if !known.iter().any(|k| k == g) {
                return invalid(format!("unknown parameter group `{g}` (have {})", known.join(", ")));
            }
        }
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group.as_str());
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// FNV checksum over the bits of every parameter in `group`.
    pub fn group_checksum(&self, group: &str) -> u64 {
        bit_checksum(self.params.iter().filter(|p| p.group == group).flat_map(|p| p.value.data().iter().copied()))
    }

    pub fn checksum(&self) -> u64 {
        bit_checksum(self.params.iter().flat_map(|p| p.value.data().iter().copied()))
    }

    /// Concatenation of all parameter values.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.count() {
            return shape_err(format!("{} values for {} parameters", flat.len(), self.count()));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.params.len() != other.params.len() {
            return shape_err("parameter stores differ in length");
        }
        let mut m = 0.0f64;
        for (a, b) in self.params.iter().zip(&other.params) {
            m = m.max(a.value.max_abs_diff(&b.value)?);
        }
        Ok(m)
    }

    /// Inserts every parameter into `g`; frozen ones do not require grad.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), p.trainable)).collect()
    }

    /// Collects gradients of bound parameters into one flat vector (zeros
    /// for frozen or unused ones).
    pub fn gather_grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for (p, &v) in self.params.iter().zip(vars) {
            match g.grad(v) {
                Some(t) if p.trainable => out.extend_from_slice(t.data()),
                _ => out.extend(std::iter::repeat_n(T::zero(), p.value.numel())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_count_and_freeze() {
        let mut s = ParamStore::<f64>::new();
        s.add("body.w", "body", Tensor::zeros(&[4, 4]).unwrap());
        s.add("head.w", "head", Tensor::zeros(&[768, 10]).unwrap());
        s.add("head.b", "head", Tensor::zeros(&[10]).unwrap());
        assert_eq!(s.count_group("head"), 7690);
        s.train_only(&["head"]).unwrap();
        assert_eq!(s.count_trainable(), 7690);
        assert!(s.train_only(&["nope"]).is_err());
        assert_eq!(s.groups(), vec!["body".to_string(), "head".to_string()]);
    }

    #[test]
    fn flat_roundtrip() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", "g", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        s.add("b", "g", Tensor::from_f64(&[1], &[3.0]).unwrap());
        let f = s.flatten();
        assert_eq!(f, vec![1.0, 2.0, 3.0]);
        s.load_flat(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(s.find("b").unwrap().value.data(), &[6.0]);
        assert!(s.load_flat(&[1.0]).is_err());
    }
}
