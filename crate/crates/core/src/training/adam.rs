use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Global L2 norm of the gradients of `params` (missing gradients count as zero).
pub fn grad_norm(params: &BTreeMap<String, Var>, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for v in params.values() {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

impl Adam {
    /// One update of every parameter in `params`. Gradients are rescaled so
    /// their global norm is at most `clip` when given. Returns the pre-clip norm.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = grad_norm(params, grads)?;
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params {
            // variable gradients still reference the forward graph; moments
            // built from them would keep every step's activations alive
            let g = match grads.get(var.as_tensor()) {
                Some(g) => (g.detach() * scale)?,
                None => var.as_tensor().zeros_like()?,
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_scalar_reference_with_clipping() {
        let w = Var::from_vec(vec![1.0f64, -2.0], 2, &Device::Cpu).unwrap();
        let params: BTreeMap<String, Var> = [("w".to_string(), w.clone())].into();
        let mut opt = Adam::default();
        let (mut p, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=5 {
            // loss = 3 * sum(w^2), grad = 6 w
            let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 3.0).unwrap();
            let grads = loss.backward().unwrap();
            let norm = opt.step(&params, &grads, 0.1, Some(5.0)).unwrap();
            let g = [6.0 * p[0], 6.0 * p[1]];
            let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
            assert!((norm - n).abs() < 1e-12);
            let s = if n > 5.0 { 5.0 / n } else { 1.0 };
            for i in 0..2 {
                let gi = g[i] * s;
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            let got: Vec<f64> = w.as_tensor().to_vec1().unwrap();
            assert!((got[0] - p[0]).abs() < 1e-12 && (got[1] - p[1]).abs() < 1e-12);
        }
    }
}
