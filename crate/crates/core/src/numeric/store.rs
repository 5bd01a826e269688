use std::collections::HashMap;

use super::Array;
use crate::error::{Error, Result};

/// Named trainable arrays. Names are unique and shapes never change after
/// insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
    rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.arrays.len();
        self.index.insert(name.to_owned(), id);
        self.names.push(name.to_owned());
        self.arrays.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn by_id(&self, id: usize) -> &Array {
        &self.arrays[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Array {
        &mut self.arrays[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }
}

/// Gradients aligned with the ids of a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            grads: store.arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    pub fn by_id(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
}

/// Plain SGD: every parameter moves by `-lr * grad`. Refuses to touch the
/// store when any gradient is non-finite.
pub fn sgd_step(store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr}")));
    }
    if grads.len() != store.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!("{} gradients for {} parameters", grads.len(), store.len()),
        });
    }
    for (id, g) in grads.grads.iter().enumerate() {
        if g.len() != store.arrays[id].len() {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!("gradient size mismatch for `{}`", store.names[id]),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(store.names[id].clone()));
        }
    }
    for (param, g) in store.arrays.iter_mut().zip(&grads.grads) {
        for (p, d) in param.data_mut().iter_mut().zip(g) {
            *p -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        s.insert("theta", Array::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut s = scalar_store(0.7);
        let g = Gradients::zeros_like(&s);
        sgd_step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.get("theta").unwrap().data(), [0.7]);
    }

    #[test]
    fn unit_rate_with_gradient_equal_to_theta_zeroes() {
        let mut s = scalar_store(3.25);
        let mut g = Gradients::zeros_like(&s);
        g.by_id_mut(0)[0] = 3.25;
        sgd_step(&mut s, &g, 1.0).unwrap();
        assert_eq!(s.get("theta").unwrap().data(), [0.0]);
    }

    #[test]
    fn two_half_steps_on_quadratic() {
        // loss = theta^2 / 2, gradient = theta
        let mut s = scalar_store(1.0);
        for _ in 0..2 {
            let mut g = Gradients::zeros_like(&s);
            g.by_id_mut(0)[0] = s.get("theta").unwrap().data()[0];
            sgd_step(&mut s, &g, 0.5).unwrap();
        }
        assert_eq!(s.get("theta").unwrap().data(), [0.25]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut g = Gradients::zeros_like(&s);
        g.by_id_mut(0)[0] = f64::NAN;
        let err = sgd_step(&mut s, &g, 0.5).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(s.get("theta").unwrap().data(), [1.0]);
    }

    #[test]
    fn clip_rescales() {
        let s = scalar_store(0.0);
        let mut g = Gradients::zeros_like(&s);
        g.by_id_mut(0)[0] = -10.0;
        clip_global_norm(&mut g, 2.0);
        assert_eq!(g.by_id(0), [-2.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(0.0);
        assert!(s.insert("theta", Array::vector(vec![1.0])).is_err());
        assert!(s.id("nope").is_err());
    }
}
