use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};

/// Initial value of a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(-bound, bound).
    Uniform(f64),
    Const(f64),
}

impl Init {
    /// Fan-in uniform bound 1/sqrt(fan_in).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

/// Named trainable parameters plus non-trainable buffers (normalisation
/// running statistics). Values are drawn from a seeded stream in
/// registration order, so identical construction yields identical weights.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    /// Registration hands out existing values instead of creating them.
    shared: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            shared: false,
        }
    }

    /// A store over the same storage whose registration calls return the
    /// existing values detached. A network built from it records no autograd
    /// history, so inference memory does not grow with the graph, yet it sees
    /// every in-place update made through the original variables.
    pub fn inference_view(&self) -> ParamStore {
        ParamStore {
            device: self.device.clone(),
            dtype: self.dtype,
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            rng: self.rng.clone(),
            shared: true,
        }
    }

    fn existing(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let v = self.params.get(name);
        ensure!(v.is_some(), "parameter {name} is not in the shared store");
        let v = v.unwrap();
        ensure!(v.dims() == shape, "parameter {name} has shape {:?}, expected {shape:?}", v.dims());
        Ok(v.as_tensor().detach())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.shared {
            return self.existing(name, shape);
        }
        ensure!(!self.params.contains_key(name), "parameter {name} registered twice");
        let v = self.make(shape, init)?;
        let t = v.as_tensor().clone();
        self.params.insert(name.to_string(), v);
        Ok(t)
    }

    /// Registers a parameter with explicit initial values.
    pub fn param_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.shared {
            return self.existing(name, shape);
        }
        ensure!(!self.params.contains_key(name), "parameter {name} registered twice");
        ensure!(values.len() == shape.iter().product::<usize>(), "value count does not match shape of {name}");
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let t = v.as_tensor().clone();
        self.params.insert(name.to_string(), v);
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        if self.shared {
            let v = self.buffers.get(name).cloned();
            ensure!(v.is_some(), "buffer {name} is not in the shared store");
            return Ok(v.unwrap());
        }
        ensure!(!self.buffers.contains_key(name), "buffer {name} registered twice");
        let v = self.make(shape, Init::Const(value))?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count("")
    }

    /// Overwrites every parameter and buffer from `values` (all must be present
    /// with matching shapes).
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let src = values
                .get(name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing tensor {name}")))?;
            ensure!(
                src.dims() == var.dims(),
                "tensor {name} has shape {:?}, model expects {:?}",
                src.dims(),
                var.dims()
            );
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Redraws every parameter whose name contains `pattern` from U(-bound, bound).
    /// Used to leave structured initializations (identity heads) in tests.
    pub fn randomize(&self, pattern: &str, bound: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = 0;
        for (_, var) in self.params.iter().filter(|(k, _)| k.contains(pattern)) {
            let v: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-bound..bound)).collect();
            var.set(&Tensor::from_vec(v, var.shape(), &self.device)?.to_dtype(self.dtype)?)?;
            n += 1;
        }
        Ok(n)
    }

    /// Detached copies of all parameters and buffers.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_detached_tensor().copy().expect("cpu copy")))
            .collect()
    }
}

/// Scoped view of a store that prefixes every registered name.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n = self.full(name);
        self.store.param(&n, shape, init)
    }

    pub fn param_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let n = self.full(name);
        self.store.param_values(&n, shape, values)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = self.full(name);
        self.store.buffer(&n, shape, value)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}
