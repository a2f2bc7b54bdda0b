//! Named trainable tensors, Adam with decoupled weight decay, and the
//! finite-difference gradient checker.

use std::collections::HashMap;

use ndarray::Array2;

use super::tape::{AutodiffError, Tape, Var};

/// Handle into a [`ParamStore`]. Only valid for the store that issued it.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Array2<f64>,
    grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

/// Optimizer settings. `beta1`, `beta2`, and `eps` default to the standard
/// Adam constants.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    #[must_use]
    pub fn new(lr: f64, weight_decay: f64) -> AdamConfig {
        AdamConfig { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Tape handles for every parameter of one store, in registration order.
/// Produced by [`ParamStore::attach`]; indexed by [`ParamId`].
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    #[must_use]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Ordered collection of named parameters with Adam state.
///
/// Iteration order is registration order everywhere, so optimizer updates
/// and checkpoints are deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    step_count: u64,
    grads_live: bool,
}

impl ParamStore {
    #[must_use]
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        let dim = value.dim();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Array2::zeros(dim),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
        });
        self.by_name.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[must_use]
    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    #[must_use]
    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    #[must_use]
    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    #[must_use]
    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.entries[id.0].value.dim(), value.dim(), "set_value: shape change");
        self.entries[id.0].value = value;
    }

    /// Mutable access for in-place perturbation (finite differences).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    #[must_use]
    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].grad
    }

    /// Accumulates a gradient contribution. Contributions from independent
    /// tapes sum, matching the linearity of differentiation.
    pub fn add_grad(&mut self, id: ParamId, delta: &Array2<f64>) {
        assert_eq!(self.entries[id.0].grad.dim(), delta.dim(), "add_grad: shape mismatch");
        self.entries[id.0].grad += delta;
        self.grads_live = true;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
        self.grads_live = false;
    }

    /// Copies every parameter onto a tape as a leaf, in registration order.
    #[must_use]
    pub fn attach(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.entries.iter().map(|e| tape.input(e.value.clone())).collect())
    }

    /// Pulls gradients for attached parameters out of a finished tape.
    /// Parameters the loss never touched contribute nothing.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &ParamVars) {
        for (i, var) in vars.0.iter().enumerate() {
            if let Some(g) = tape.grad(*var) {
                let g = g.clone();
                self.add_grad(ParamId(i), &g);
            }
        }
        // A backward pass happened even if every touched grad was absent.
        self.grads_live = true;
    }

    /// One Adam step over every parameter, with decoupled weight decay
    /// applied first. Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), AutodiffError> {
        if !self.grads_live {
            return Err(AutodiffError::StepBeforeBackward);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            if cfg.weight_decay != 0.0 {
                e.value.mapv_inplace(|x| x - cfg.lr * cfg.weight_decay * x);
            }
            ndarray::Zip::from(&mut e.m).and(&e.grad).for_each(|m, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            });
            ndarray::Zip::from(&mut e.v).and(&e.grad).for_each(|v, &g| {
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            });
            ndarray::Zip::from(&mut e.value).and(&e.m).and(&e.v).for_each(|x, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
        }
        self.zero_grads();
        Ok(())
    }

    /// Number of optimizer steps taken.
    #[must_use]
    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// FNV-1a hash over names and exact value bits; changes iff any
    /// parameter value changes.
    #[must_use]
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for x in e.value.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Exports (name, shape, row-major values) triples in registration order.
    #[must_use]
    pub fn export(&self) -> Vec<(String, (usize, usize), Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.dim(), e.value.iter().copied().collect()))
            .collect()
    }

    /// Loads values into already-registered parameters by name. Adam state
    /// is reset for reloaded entries.
    pub fn import(&mut self, name: &str, shape: (usize, usize), data: &[f64]) -> Result<(), String> {
        let idx = *self.by_name.get(name).ok_or_else(|| format!("unknown parameter `{name}`"))?;
        let e = &mut self.entries[idx];
        if e.value.dim() != shape {
            return Err(format!(
                "parameter `{name}`: checkpoint shape {shape:?} does not match {:?}",
                e.value.dim()
            ));
        }
        if data.len() != shape.0 * shape.1 {
            return Err(format!("parameter `{name}`: data length mismatch"));
        }
        e.value = Array2::from_shape_vec(shape, data.to_vec()).expect("length checked");
        e.m.fill(0.0);
        e.v.fill(0.0);
        Ok(())
    }
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_entry: (usize, usize),
    pub entries_checked: usize,
}

/// Verifies reverse-mode gradients of `build` against central finite
/// differences over every entry of every parameter in `store`.
///
/// `build` receives a fresh tape with all parameters already attached and
/// must rebuild the same forward computation on each call (freeze any noise
/// outside the closure); non-determinism is detected by evaluating the
/// baseline twice and comparing bit-exactly. Relative error is
/// |a - b| / max(1e-8, |a| + |b|).
pub fn grad_check<F>(
    store: &mut ParamStore,
    eps: f64,
    build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &ParamVars) -> Var,
{
    let eval = |store: &ParamStore| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape);
        let loss = build(&mut tape, &vars);
        if let Some(op) = tape.poisoned() {
            return Err(AutodiffError::NonFinite { op: op.to_string() });
        }
        Ok(tape.scalar(loss))
    };
    let base_a = eval(store)?;
    let base_b = eval(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(AutodiffError::NonDeterministic);
    }

    let mut tape = Tape::new();
    let vars = store.attach(&mut tape);
    let loss = build(&mut tape, &vars);
    tape.backward(loss)?;
    let analytic: Vec<Array2<f64>> = store
        .ids()
        .iter()
        .map(|id| {
            tape.grad(vars.var(*id))
                .cloned()
                .unwrap_or_else(|| Array2::zeros(store.value(*id).dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_entry: (0, 0),
        entries_checked: 0,
    };
    for (pi, id) in store.ids().iter().enumerate() {
        let (rows, cols) = store.value(*id).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(*id)[(i, j)];
                store.value_mut(*id)[(i, j)] = orig + eps;
                let f_plus = eval(store)?;
                store.value_mut(*id)[(i, j)] = orig - eps;
                let f_minus = eval(store)?;
                store.value_mut(*id)[(i, j)] = orig;
                let numeric = (f_plus - f_minus) / (2.0 * eps);
                let a = analytic[pi][(i, j)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                report.entries_checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst_param = store.name(*id).to_string();
                    report.worst_entry = (i, j);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::cell::Cell;

    #[test]
    fn register_rejects_duplicate_names() {
        let mut s = ParamStore::new();
        s.register("w", Array2::zeros((2, 2))).unwrap();
        assert!(matches!(
            s.register("w", Array2::zeros((1, 1))),
            Err(AutodiffError::DuplicateName(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[1.0, -2.0]]).unwrap();
        s.add_grad(w, &Array2::zeros((1, 2)));
        s.adam_step(&AdamConfig::new(0.1, 0.0)).unwrap();
        assert_eq!(s.value(w), &array![[1.0, -2.0]]);
    }

    #[test]
    fn adam_step_without_gradients_is_an_error() {
        let mut s = ParamStore::new();
        s.register("w", array![[1.0]]).unwrap();
        assert!(matches!(
            s.adam_step(&AdamConfig::new(0.1, 0.0)),
            Err(AutodiffError::StepBeforeBackward)
        ));
    }

    #[test]
    fn adam_first_step_magnitude_approaches_lr() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[0.0, 0.0]]).unwrap();
        s.add_grad(w, &array![[3.0, -0.5]]);
        s.adam_step(&AdamConfig::new(0.01, 0.0)).unwrap();
        // First-step update is lr * g / (|g| + eps): lr in magnitude,
        // opposite in sign.
        assert!((s.value(w)[(0, 0)] + 0.01).abs() < 1e-6);
        assert!((s.value(w)[(0, 1)] - 0.01).abs() < 1e-6);
        assert_eq!(s.grad(w), &Array2::<f64>::zeros((1, 2)), "grads zeroed after step");
    }

    #[test]
    fn decoupled_weight_decay_shrinks_before_update() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[10.0]]).unwrap();
        s.add_grad(w, &array![[0.0]]);
        s.adam_step(&AdamConfig::new(0.1, 0.5)).unwrap();
        // Zero gradient: only the decay acts, theta *= (1 - lr * wd).
        assert!((s.value(w)[(0, 0)] - 10.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulation_is_linear_across_tapes() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[1.0, 2.0]]).unwrap();
        let run = |s: &mut ParamStore, scale: f64| {
            let mut t = Tape::new();
            let vars = s.attach(&mut t);
            let sq = t.square(vars.var(w));
            let sum = t.reduce_sum(sq);
            let loss = t.mul_scalar(sum, scale);
            t.backward(loss).unwrap();
            s.collect_grads(&t, &vars);
        };
        run(&mut s, 1.0);
        run(&mut s, 2.0);
        // d/dw of (1 + 2) * sum(w^2) = 6w.
        assert_eq!(s.grad(w), &array![[6.0, 12.0]]);
    }

    #[test]
    fn grad_check_linear_loss_is_exact() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let report = grad_check(&mut s, 1e-4, |tape, vars| tape.reduce_sum(vars.var(w))).unwrap();
        assert!(report.max_rel_err < 1e-10, "linear loss err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn grad_check_two_layer_composite() {
        let mut s = ParamStore::new();
        let w1 = s.register("w1", array![[0.4, -0.3], [0.2, 0.9]]).unwrap();
        let w2 = s.register("w2", array![[1.1], [-0.7]]).unwrap();
        let x = array![[1.0, 2.0], [-0.5, 0.3], [0.7, -1.4]];
        let report = grad_check(&mut s, 1e-4, move |tape, vars| {
            let vx = tape.input(x.clone());
            let h = tape.matmul(vx, vars.var(w1));
            let h = tape.sigmoid(h);
            let out = tape.matmul(h, vars.var(w2));
            let sq = tape.square(out);
            tape.reduce_mean(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "composite err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_nondeterministic_closures() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[1.0]]).unwrap();
        let counter = Cell::new(0.0f64);
        let err = grad_check(&mut s, 1e-4, |tape, vars| {
            counter.set(counter.get() + 1.0);
            let shifted = tape.add_scalar(vars.var(w), counter.get());
            tape.reduce_sum(shifted)
        })
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonDeterministic));
    }

    #[test]
    fn content_hash_tracks_value_changes() {
        let mut s = ParamStore::new();
        let w = s.register("w", array![[1.0]]).unwrap();
        let h0 = s.content_hash();
        assert_eq!(h0, s.content_hash());
        s.value_mut(w)[(0, 0)] = 1.5;
        assert_ne!(h0, s.content_hash());
    }

    #[test]
    fn import_round_trips_export() {
        let mut s = ParamStore::new();
        s.register("a", array![[1.0, 2.0]]).unwrap();
        s.register("b", array![[3.0], [4.0]]).unwrap();
        let exported = s.export();
        let mut s2 = ParamStore::new();
        s2.register("a", Array2::zeros((1, 2))).unwrap();
        s2.register("b", Array2::zeros((2, 1))).unwrap();
        for (name, shape, data) in &exported {
            s2.import(name, *shape, data).unwrap();
        }
        assert_eq!(s2.value(s2.id_of("a").unwrap()), &array![[1.0, 2.0]]);
        assert_eq!(s2.value(s2.id_of("b").unwrap()), &array![[3.0], [4.0]]);
        assert!(s2.import("missing", (1, 1), &[0.0]).is_err());
        assert!(s2.import("a", (2, 1), &[0.0, 0.0]).is_err());
    }
}
