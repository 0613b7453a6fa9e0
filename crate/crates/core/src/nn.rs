//! Parameter storage, layer building blocks and the Adam optimizer.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: ArrayD<f64>,
    trainable: bool,
}

/// Named parameter arrays for one model, in registration order.
///
/// Non-trainable entries hold batch-norm running statistics; they are saved
/// in checkpoints but never see the optimizer.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    /// (entry index, tape var) bindings of the current step.
    bound: Vec<(usize, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Clear the parameter/tape bindings before recording a new step.
    pub fn begin_step(&mut self) {
        self.bound.clear();
    }

    /// Insert the parameter into the tape as a leaf and remember the binding.
    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        let v = tape.leaf(e.value.clone(), e.trainable);
        self.bound.push((id.0, v));
        v
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across trainable entries.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|&(i, v)| (ParamId(i), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Overwrite an entry by name (checkpoint loading). Shape must match.
    pub fn load_named(&mut self, name: &str, value: ArrayD<f64>) -> crate::Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if e.value.shape() != value.shape() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter {name:?} shape {:?} does not match stored {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Set every entry to zero (used by architecture sanity tests).
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value.fill(0.0);
        }
    }
}

/// Kaiming fan-in normal init for a (Cout, Cin, K, K) kernel. `gain` is the
/// activation gain, e.g. `leaky_gain(0.2)` or 1.0 for a linear output.
pub fn kaiming_conv(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
) -> ArrayD<f64> {
    let fan_in = (cin * k * k) as f64;
    let std = gain / fan_in.sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let mut w = Array4::<f64>::zeros((cout, cin, k, k));
    for v in w.iter_mut() {
        *v = normal.sample(rng);
    }
    w.into_dyn()
}

pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Stride-1 square convolution layer with bias.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
    ) -> Self {
        let pad = k / 2;
        let w = store.register(&format!("{name}.weight"), kaiming_conv(rng, cout, cin, k, gain), true);
        let b = store.register(
            &format!("{name}.bias"),
            Array1::<f64>::zeros(cout).into_dyn(),
            true,
        );
        Conv2d { w, b, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> Var {
        let w = store.bind(tape, self.w);
        let b = store.bind(tape, self.b);
        tape.conv2d(x, w, Some(b), self.pad)
    }
}

/// Batch normalization with running statistics.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.register(
            &format!("{name}.gamma"),
            Array1::<f64>::ones(c).into_dyn(),
            true,
        );
        let beta = store.register(
            &format!("{name}.beta"),
            Array1::<f64>::zeros(c).into_dyn(),
            true,
        );
        let running_mean = store.register(
            &format!("{name}.running_mean"),
            Array1::<f64>::zeros(c).into_dyn(),
            false,
        );
        let running_var = store.register(
            &format!("{name}.running_var"),
            Array1::<f64>::ones(c).into_dyn(),
            false,
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, training: bool) -> Var {
        if training {
            let gamma = store.bind(tape, self.gamma);
            let beta = store.bind(tape, self.beta);
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps);
            // Running update uses the unbiased variance, as is conventional.
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count as f64 - 1.0)
            } else {
                1.0
            };
            let mom = self.momentum;
            {
                let rm = store.value_mut(self.running_mean);
                for (r, &m) in rm.iter_mut().zip(stats.mean.iter()) {
                    *r = (1.0 - mom) * *r + mom * m;
                }
            }
            {
                let rv = store.value_mut(self.running_var);
                for (r, &v) in rv.iter_mut().zip(stats.var.iter()) {
                    *r = (1.0 - mom) * *r + mom * v * unbias;
                }
            }
            y
        } else {
            let gamma: Vec<f64> = store.value(self.gamma).iter().copied().collect();
            let beta: Vec<f64> = store.value(self.beta).iter().copied().collect();
            let rm: Vec<f64> = store.value(self.running_mean).iter().copied().collect();
            let rv: Vec<f64> = store.value(self.running_var).iter().copied().collect();
            tape.batch_norm_eval(x, &gamma, &beta, &rm, &rv, self.eps)
        }
    }
}

/// Adam with the conventional defaults (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    /// Apply one update from the gradients of the current tape bindings.
    pub fn step(&mut self, store: &mut ParamStore, grads: &crate::autodiff::Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let bound: Vec<(ParamId, Var)> = store.bound().collect();
        for (pid, var) in bound {
            if !store.is_trainable(pid) {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let idx = pid.0;
            if self.m[idx].is_none() {
                self.m[idx] = Some(ArrayD::zeros(g.raw_dim()));
                self.v[idx] = Some(ArrayD::zeros(g.raw_dim()));
            }
            let m = self.m[idx].as_mut().unwrap();
            let v = self.v[idx].as_mut().unwrap();
            let p = store.value_mut(pid);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|pi, mi, vi, &gi| {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Sample a standard-normal array (test helper and synthetic data use).
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
    let normal = Normal::new(0.0, 1.0).unwrap();
    for v in a.iter_mut() {
        *v = normal.sample(rng);
    }
    a
}

/// Sample a uniform [0,1) array.
pub fn rand_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng.gen::<f64>();
    }
    a
}
