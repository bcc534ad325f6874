//! Named parameter traversal.
//!
//! Every trainable module exposes its tensors through [`ParamSet`], which
//! gives the rest of the crate one uniform surface for initialization,
//! optimizer updates, checkpoint serialization, finite-difference probing,
//! and gradient bookkeeping. Names are dot-separated paths such as
//! `enc.eo.stem_w` and are stable across runs; they key checkpoints and
//! optimizer state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tape::{Gradients, Tape, Value};
use crate::nn::Tensor;

/// Gradients accumulated across a batch, keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// A collection of named parameter tensors.
pub trait ParamSet {
    /// Visit every parameter in a fixed declaration order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    /// Mutable variant of [`ParamSet::visit`], same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// All parameter names under the given prefix, in visit order.
    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(prefix, &mut |name, _| names.push(name.to_string()));
        names
    }

    /// Round every parameter to f32-representable values (the persisted
    /// precision; see [`Tensor::round_to_f32`]).
    fn round_all_to_f32(&mut self) {
        self.visit_mut("", &mut |_, t| t.round_to_f32());
    }

    /// Look up one parameter by its name under the given prefix.
    fn get_param(&self, prefix: &str, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit(prefix, &mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Apply `f` to the named parameter; errors if no such name exists.
    fn update_param(
        &mut self,
        prefix: &str,
        name: &str,
        f: &mut dyn FnMut(&mut Tensor),
    ) -> Result<()> {
        let mut hit = false;
        self.visit_mut(prefix, &mut |n, t| {
            if n == name {
                f(t);
                hit = true;
            }
        });
        if hit {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("no parameter named {name}")))
        }
    }
}

/// Record of which tape values hold which parameters, written while a module
/// copies its tensors onto a tape. After `backward`, [`ParamLease::accumulate`]
/// folds the per-value gradients into a named [`GradMap`].
#[derive(Default)]
pub struct ParamLease {
    entries: Vec<(String, Value)>,
}

impl ParamLease {
    pub fn new() -> ParamLease {
        ParamLease::default()
    }

    pub fn record(&mut self, name: String, value: Value) {
        self.entries.push((name, value));
    }

    /// Put one parameter tensor on the tape and remember the pairing.
    pub fn leaf(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Value {
        let v = tape.leaf(t.clone());
        self.record(name, v);
        v
    }

    /// Add `scale` times each leased parameter's gradient into `out`.
    /// Parameters that did not influence the loss contribute nothing.
    pub fn accumulate(&self, tape: &Tape, grads: &Gradients, scale: f64, out: &mut GradMap) {
        for (name, v) in &self.entries {
            if let Some(g) = grads.get(*v) {
                let slot = out
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; tape.value(*v).numel()]);
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += scale * gi;
                }
            }
        }
    }

    pub fn entries(&self) -> &[(String, Value)] {
        &self.entries
    }
}
