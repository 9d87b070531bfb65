//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only evaluates forward passes; it never touches the
//! backward rules it is checking. The scalar objective is `Σ out ⊙ r` for a
//! fixed pseudo-random `r`, so every output element contributes.

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Base step; the actual step is `step · max(1, |x|)`.
    pub step: f64,
    /// Upper bound on the relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely against it.
    pub floor: f64,
    /// Entries checked per tensor (all entries when the tensor is smaller).
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_entries: 12, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    fn record(&mut self, m: Mismatch) {
        self.checked += 1;
        if m.rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(m.rel_error);
            self.worst = Some(m);
        }
    }
}

/// splitmix64; keeps the checker free of RNG crate dependencies.
struct Mix(u64);

impl Mix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl GradCheck {
    fn weights(&self, n: usize) -> Vec<f64> {
        let mut rng = Mix(self.seed);
        (0..n).map(|_| rng.unit() * 2.0 - 1.0).collect()
    }

    fn entries(&self, n: usize, salt: u64) -> Vec<usize> {
        if n <= self.max_entries {
            return (0..n).collect();
        }
        let mut rng = Mix(self.seed ^ salt.wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut picked: Vec<usize> = (0..self.max_entries).map(|_| (rng.next() % n as u64) as usize).collect();
        picked.sort_unstable();
        picked.dedup();
        picked
    }

    fn objective(&self, tape: &mut Tape<f64>, out: Var) -> Result<Var> {
        let n = tape.value(out).numel();
        let shape = tape.shape(out).to_vec();
        let r = tape.constant(Tensor::new(shape, self.weights(n))?);
        let prod = tape.mul(out, r)?;
        Ok(tape.sum_all(prod))
    }

    fn rel(&self, a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(self.floor)
    }

    /// Checks gradients with respect to free input tensors.
    pub fn inputs<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            let loss = self.objective(&mut tape, out)?;
            Ok(tape.value(loss).data()[0])
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = self.objective(&mut tape, out)?;
        tape.backward(loss)?;

        let mut report = GradReport { checked: 0, max_rel_error: 0.0, worst: None };
        let mut work = inputs.to_vec();
        for (t, var) in vars.iter().enumerate() {
            let zero = Tensor::zeros(inputs[t].shape().to_vec());
            let analytic = tape.grad(*var).unwrap_or(&zero).clone();
            for idx in self.entries(inputs[t].numel(), t as u64) {
                let x = inputs[t].data()[idx];
                let h = self.step * x.abs().max(1.0);
                work[t].data_mut()[idx] = x + h;
                let up = eval(&work)?;
                work[t].data_mut()[idx] = x - h;
                let down = eval(&work)?;
                work[t].data_mut()[idx] = x;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[idx];
                report.record(Mismatch {
                    tensor: format!("input{t}"),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: self.rel(a, numeric),
                });
            }
        }
        Ok(report)
    }

    /// Checks gradients with respect to every parameter in `store` whose name
    /// starts with `prefix`.
    pub fn params<F>(&self, store: &mut ParamStore<f64>, prefix: &str, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let loss = self.objective(&mut tape, out)?;
        tape.backward(loss)?;
        store.zero_grad();
        store.accumulate(&tape);

        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect();
        if ids.is_empty() {
            return Err(TensorError::Contract(format!("no parameters under {prefix:?}")));
        }
        let mut report = GradReport { checked: 0, max_rel_error: 0.0, worst: None };
        for id in ids {
            let name = store.get(id).name.clone();
            let analytic =
                store.get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape().to_vec()));
            let n = analytic.numel();
            for idx in self.entries(n, id.index() as u64 + 1) {
                let x = store.get(id).value.data()[idx];
                let h = self.step * x.abs().max(1.0);
                let mut probe = |v: f64| -> Result<f64> {
                    store.get_mut(id).value.data_mut()[idx] = v;
                    let mut t = Tape::new();
                    let out = f(&mut t, store)?;
                    let loss = self.objective(&mut t, out)?;
                    Ok(t.value(loss).data()[0])
                };
                let up = probe(x + h)?;
                let down = probe(x - h)?;
                store.get_mut(id).value.data_mut()[idx] = x;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[idx];
                report.record(Mismatch {
                    tensor: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: self.rel(a, numeric),
                });
            }
        }
        store.zero_grad();
        Ok(report)
    }
}
