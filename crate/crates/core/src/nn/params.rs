use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays with aligned gradient buffers and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    step: u64,
}

/// Gradient buffers shaped like a store's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "{name}: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(data);
        self.grads.push(vec![0.0; n]);
        self.moment1.push(vec![0.0; n]);
        self.moment2.push(vec![0.0; n]);
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId, NnError> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, shape, data)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn new_grads(&self) -> Grads {
        Grads(self.values.iter().map(|v| vec![0.0; v.len()]).collect())
    }

    /// Replaces the stored gradients.
    pub fn set_grads(&mut self, g: Grads) {
        assert_eq!(g.0.len(), self.grads.len(), "gradient buffer count");
        for (a, b) in self.grads.iter().zip(&g.0) {
            assert_eq!(a.len(), b.len(), "gradient buffer shape");
        }
        self.grads = g.0;
    }

    pub fn grads(&self) -> Grads {
        Grads(self.grads.clone())
    }

    /// Copies parameter values (not optimizer state) from `other`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), NnError> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .index
                .get(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if other.shapes[*j] != self.shapes[i] {
                return Err(NnError::Shape(format!("{name}: shape mismatch on load")));
            }
            self.values[i].clone_from(&other.values[*j]);
        }
        Ok(())
    }

    /// One Adam update from the stored gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let (w, g) = (&mut self.values[i], &self.grads[i]);
            let (m, v) = (&mut self.moment1[i], &mut self.moment2[i]);
            for k in 0..w.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                w[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_shape_errors() {
        let mut s = ParamStore::new();
        s.add("a", &[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(s.add("a", &[1], vec![0.0]), Err(NnError::DuplicateParam(_))));
        assert!(matches!(s.add("b", &[3], vec![0.0; 2]), Err(NnError::Shape(_))));
        assert_eq!(s.grad(s.id("a").unwrap()).len(), 4);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        let a = s.add("a", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        s.adam_step(0.1, AdamConfig::default());
        assert_eq!(s.value(a), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_bias_correction() {
        // m̂ = g, v̂ = g², so the first step is lr * g / (|g| + eps)
        let mut s = ParamStore::new();
        let a = s.add("a", &[1], vec![1.0]).unwrap();
        let mut g = s.new_grads();
        g.get_mut(a)[0] = 0.5;
        s.set_grads(g);
        s.adam_step(0.01, AdamConfig::default());
        let want = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((s.value(a)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2
        let mut s = ParamStore::new();
        let a = s.add("x", &[1], vec![0.0]).unwrap();
        let mut steps = 0;
        for _ in 0..2000 {
            let x = s.value(a)[0];
            let mut g = s.new_grads();
            g.get_mut(a)[0] = 2.0 * (x - 3.0);
            s.set_grads(g);
            s.adam_step(0.05, AdamConfig::default());
            steps += 1;
        }
        assert!(steps <= 2000);
        assert!((s.value(a)[0] - 3.0).abs() < 1e-6, "{}", s.value(a)[0]);
    }
}
