//! Trainable parameters, reverse-mode gradients and a central
//! finite-difference checker.
//!
//! Positive quantities (variances, lengthscales, noise) are stored as
//! unconstrained reals `u` and mapped through `softplus(u) = ln(1 + eᵘ)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Positive reals from unconstrained ones.
pub fn softplus_forward(u: f64) -> f64 {
    softplus(u)
}

/// Inverse of [`softplus_forward`]: `ln(eʸ − 1)`, computed stably.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive value, got {y}");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// How a stored raw value maps to the value the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    Unconstrained,
    /// Value = softplus(raw), elementwise.
    Positive,
}

/// Stable handle into a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: String,
    raw: DenseMatrix,
    constraint: Constraint,
    trainable: bool,
}

/// Named, grouped parameter tensors held in unconstrained form.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter from its constrained value.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        value: DenseMatrix,
        constraint: Constraint,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter {name}")));
        }
        if !value.is_finite() {
            return Err(Error::NumericalIntegrity(format!("{name} has non-finite entries")));
        }
        let raw = match constraint {
            Constraint::Unconstrained => value,
            Constraint::Positive => {
                if let Some(bad) = value.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::NumericalIntegrity(format!(
                        "{name} must be positive, got {bad}"
                    )));
                }
                value.map(softplus_inverse)
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.clone(),
            group: group.into(),
            raw,
            constraint,
            trainable: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn constraint(&self, id: ParamId) -> Constraint {
        self.entries[id.0].constraint
    }

    pub fn raw(&self, id: ParamId) -> &DenseMatrix {
        &self.entries[id.0].raw
    }

    pub fn raw_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.entries[id.0].raw
    }

    /// Constrained value.
    pub fn value(&self, id: ParamId) -> DenseMatrix {
        let e = &self.entries[id.0];
        match e.constraint {
            Constraint::Unconstrained => e.raw.clone(),
            Constraint::Positive => e.raw.map(softplus),
        }
    }

    /// Overwrites the constrained value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: DenseMatrix) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.raw.shape() != value.shape() {
            return Err(Error::dims(format!(
                "{}: {:?} vs {:?}",
                e.name,
                e.raw.shape(),
                value.shape()
            )));
        }
        e.raw = match e.constraint {
            Constraint::Unconstrained => value,
            Constraint::Positive => value.map(softplus_inverse),
        };
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Frozen parameters still enter the loss but receive zero gradient.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.raw.len()).sum()
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut raw = Vec::with_capacity(self.entries.len());
        let mut value = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let r = if e.trainable {
                tape.var(e.raw.clone())
            } else {
                tape.constant(e.raw.clone())
            };
            raw.push(r);
            value.push(match e.constraint {
                Constraint::Unconstrained => r,
                Constraint::Positive => r.softplus(),
            });
        }
        Bound { raw, value }
    }

    /// Places every parameter on `tape` as a constant, for inference.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut raw = Vec::with_capacity(self.entries.len());
        let mut value = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let r = tape.constant(e.raw.clone());
            raw.push(r);
            value.push(match e.constraint {
                Constraint::Unconstrained => r,
                Constraint::Positive => r.softplus(),
            });
        }
        Bound { raw, value }
    }

    pub(crate) fn push_raw(
        &mut self,
        name: String,
        group: String,
        raw: DenseMatrix,
        constraint: Constraint,
        trainable: bool,
    ) {
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, group, raw, constraint, trainable });
    }
}

/// Parameters placed on a tape: raw leaves and their constrained images.
pub struct Bound<'t> {
    raw: Vec<Var<'t>>,
    value: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Constrained value node.
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.value[id.0]
    }

    /// Raw (unconstrained) leaf.
    pub fn raw(&self, id: ParamId) -> Var<'t> {
        self.raw[id.0]
    }
}

/// Gradient with respect to the raw parameters, one matrix per parameter.
#[derive(Clone, Debug)]
pub struct ParamGradients {
    pub loss: f64,
    pub grads: Vec<DenseMatrix>,
}

impl ParamGradients {
    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A loss expressed over bound parameters.
pub trait LossFn {
    fn eval<'t>(&self, tape: &'t Tape, params: &Bound<'t>) -> Result<Var<'t>>;
}

impl<F> LossFn for F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    fn eval<'t>(&self, tape: &'t Tape, params: &Bound<'t>) -> Result<Var<'t>> {
        self(tape, params)
    }
}

/// Pins a closure to the higher-ranked signature [`LossFn`] needs, which
/// closure inference does not pick up on its own.
pub fn as_loss<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    f
}

/// Loss value only.
pub fn loss_value(loss: &dyn LossFn, params: &ParameterStore) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let v = loss.eval(&tape, &bound)?.scalar_value();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(v));
    }
    Ok(v)
}

/// Reverse-mode gradient of `loss` with respect to every raw parameter.
pub fn gradient(loss: &dyn LossFn, params: &ParameterStore) -> Result<ParamGradients> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = loss.eval(&tape, &bound)?;
    let v = out.scalar_value();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(v));
    }
    let g = tape.backward(out);
    let grads: Vec<DenseMatrix> = params.ids().map(|id| g.wrt(bound.raw(id))).collect();
    if grads.iter().any(|m| !m.is_finite()) {
        return Err(Error::NumericalIntegrity("non-finite gradient".into()));
    }
    Ok(ParamGradients { loss: v, grads })
}

/// Settings for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7 }
    }
}

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares reverse-mode gradients against central differences in the raw
/// coordinates, so the bijection's chain rule is part of what is checked.
/// An entry passes when `|a − n| ≤ abs_floor` or
/// `|a − n| / max(|a|, |n|) ≤ rel_tol`.
pub fn check_gradients(
    loss: &dyn LossFn,
    params: &ParameterStore,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = gradient(loss, params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport { checked: 0, failures: 0, max_rel_err: 0.0, worst: None };
    for id in params.ids() {
        if !params.is_trainable(id) {
            continue;
        }
        for k in 0..params.raw(id).len() {
            let x0 = params.raw(id).data()[k];
            work.raw_mut(id).data_mut()[k] = x0 + cfg.step;
            let fp = loss_value(loss, &work)?;
            work.raw_mut(id).data_mut()[k] = x0 - cfg.step;
            let fm = loss_value(loss, &work)?;
            work.raw_mut(id).data_mut()[k] = x0;
            let num = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.get(id).data()[k];
            let diff = (a - num).abs();
            let rel = if diff <= cfg.abs_floor {
                0.0
            } else {
                diff / a.abs().max(num.abs())
            };
            report.checked += 1;
            if rel > cfg.rel_tol {
                report.failures += 1;
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((params.name(id).to_string(), k, a, num));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_examples() {
        assert!((softplus_forward(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_forward(50.0) - 50.0).abs() < 1e-15);
        assert!((softplus_inverse(softplus_forward(1.3)) - 1.3).abs() < 1e-10);
        for &x in &[-30.0, -3.0, -1e-3, 0.0, 0.7, 12.0, 40.0, 200.0] {
            let y = softplus_forward(x);
            assert!(y > 0.0);
            assert!((softplus_inverse(y) - x).abs() <= 1e-10 * (1.0 + x.abs()), "{x}");
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut ps = ParameterStore::new();
        let x = ps.add("x", "g", DenseMatrix::column(&[1.0, 2.0]), Constraint::Unconstrained).unwrap();
        let loss = as_loss(move |_t, b| {
            let v = b.get(x);
            Ok(v.matmul_tn(v).sum())
        });
        let g = gradient(&loss, &ps).unwrap();
        assert_eq!(g.loss, 5.0);
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut ps = ParameterStore::new();
        let x = ps.add("x", "g", DenseMatrix::scalar(-1.0), Constraint::Unconstrained).unwrap();
        let loss = as_loss(move |_t, b| { Ok(b.get(x).ln().sum()) });
        assert!(matches!(gradient(&loss, &ps), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn positive_constraint_chain_rule() {
        // loss = θ² with θ = softplus(u): dloss/du = 2θ·σ(u)
        let mut ps = ParameterStore::new();
        let t = ps.add("theta", "g", DenseMatrix::scalar(2.0), Constraint::Positive).unwrap();
        assert!((ps.value(t).get(0, 0) - 2.0).abs() < 1e-12);
        let loss = as_loss(move |_t, b| { Ok(b.get(t).square().sum()) });
        let g = gradient(&loss, &ps).unwrap();
        let u = ps.raw(t).get(0, 0);
        let expect = 4.0 / (1.0 + (-u).exp());
        assert!((g.get(t).get(0, 0) - expect).abs() < 1e-12);
        let rep = check_gradients(&loss, &ps, GradCheckConfig::default()).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn frozen_parameters_get_zero_gradient() {
        let mut ps = ParameterStore::new();
        let a = ps.add("a", "g", DenseMatrix::scalar(3.0), Constraint::Unconstrained).unwrap();
        ps.set_trainable(a, false);
        let loss = as_loss(move |_t, b| { Ok(b.get(a).square().sum()) });
        assert_eq!(gradient(&loss, &ps).unwrap().get(a).get(0, 0), 0.0);
    }

    #[test]
    fn rejects_bad_registrations() {
        let mut ps = ParameterStore::new();
        ps.add("a", "g", DenseMatrix::scalar(1.0), Constraint::Positive).unwrap();
        assert!(ps.add("a", "g", DenseMatrix::scalar(1.0), Constraint::Positive).is_err());
        assert!(ps.add("b", "g", DenseMatrix::scalar(0.0), Constraint::Positive).is_err());
    }
}
