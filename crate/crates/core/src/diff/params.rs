use std::collections::BTreeMap;

use rand::Rng;

use super::container::Container;
use super::optim::AdamConfig;
use super::{Real, Tensor2D};
use crate::error::{Error, Result};

/// One named parameter array and its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    shape: Vec<usize>,
    value: Tensor2D<S>,
    first_moment: Vec<S>,
    second_moment: Vec<S>,
    step: u64,
}

impl<S: Real> Param<S> {
    fn new(shape: Vec<usize>, value: Tensor2D<S>) -> Self {
        let n = value.len();
        Self {
            shape,
            value,
            first_moment: vec![S::zero(); n],
            second_moment: vec![S::zero(); n],
            step: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &Tensor2D<S> {
        &self.value
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Matrix view of an n-d shape: first axis by the product of the rest.
pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [r] => (*r, 1),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// Gradients keyed by parameter name.
pub type Grads<S> = BTreeMap<String, Tensor2D<S>>;

/// Named parameter arrays with per-parameter optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<S>) -> Result<()> {
        let (rows, cols) = matrix_dims(shape);
        let value = Tensor2D::from_vec(rows, cols, data)?;
        self.params.insert(name.into(), Param::new(shape.to_vec(), value));
        Ok(())
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
        self.insert(name, shape, data).expect("shape product matches buffer");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.params.get(name).map(|p| p.shape.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies every parameter (values only, fresh optimizer state) whose name
    /// starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<S>, prefix: &str) {
        for (name, p) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params
                .insert(name.clone(), Param::new(p.shape.clone(), p.value.clone()));
        }
    }

    pub fn reset_optimizer_state(&mut self) {
        for p in self.params.values_mut() {
            p.first_moment.iter_mut().for_each(|m| *m = S::zero());
            p.second_moment.iter_mut().for_each(|v| *v = S::zero());
            p.step = 0;
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.shape.clone(), p.value.cast())))
                .collect(),
        }
    }

    /// One bias-corrected Adam update for every parameter that has a gradient.
    pub fn adam_step(&mut self, grads: &Grads<S>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
            }
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("validated above");
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i].as_f64();
                let m = b1 * p.first_moment[i].as_f64() + (1.0 - b1) * gi;
                let v = b2 * p.second_moment[i].as_f64() + (1.0 - b2) * gi * gi;
                p.first_moment[i] = S::from_f64(m);
                p.second_moment[i] = S::from_f64(v);
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
                let decay = lr * cfg.weight_decay * w[i].as_f64();
                w[i] = S::from_f64(w[i].as_f64() - update - decay);
            }
        }
        Ok(())
    }
}

impl<S: Real> ParamStore<S> {
    /// Appends every parameter value (as f32) to `container`.
    pub fn write_into(&self, container: &mut Container) -> Result<()> {
        for (name, p) in &self.params {
            let data = p.value.data().iter().map(|v| v.as_f32()).collect();
            container.push_array(name.clone(), p.shape.clone(), data)?;
        }
        Ok(())
    }

    /// Rebuilds a store from the container arrays accepted by `keep`.
    pub fn read_from(container: &Container, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let mut store = Self::new();
        for a in container.arrays.iter().filter(|a| keep(&a.name)) {
            let data = a.data.iter().map(|&v| S::from_f32(v)).collect();
            store.insert(a.name.clone(), &a.shape, data)?;
        }
        Ok(store)
    }
}
