//! Optimality-condition losses.
//!
//! Pontryagin's principle requires, along an optimal trajectory with
//! Hamiltonian `H = L + lambda^T f`:
//!
//! * the initial state equals the observation and the ODE holds,
//! * `dlambda/dt = -dH/dx`,
//! * `dH/du = 0`,
//! * reference-tied states reach the reference at `t_f` and the remaining
//!   co-states vanish there.
//!
//! Each condition becomes a mean-square loss. Under the T-mano architecture
//! the initial-state loss is unnecessary (the Taylor operator enforces it)
//! and ODE rows with a control point are satisfied by the control
//! definition, so only the remaining rows enter the ODE loss.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{HionError, Result};
use crate::jets::{Jet, Scalar};
use crate::systems::{Cost, Plant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Init,
    TerminalState,
    Ode,
    CostateDyn,
    CostateTerm,
    Stationarity,
}

impl LossId {
    pub const ALL: [LossId; 6] = [
        LossId::Init,
        LossId::TerminalState,
        LossId::Ode,
        LossId::CostateDyn,
        LossId::CostateTerm,
        LossId::Stationarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossId::Init => "init",
            LossId::TerminalState => "terminal_state",
            LossId::Ode => "ode",
            LossId::CostateDyn => "costate_dyn",
            LossId::CostateTerm => "costate_term",
            LossId::Stationarity => "stationarity",
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-loss multipliers of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub init: f64,
    pub terminal_state: f64,
    pub ode: f64,
    pub costate_dyn: f64,
    pub costate_term: f64,
    pub stationarity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            init: 1.0,
            terminal_state: 1.0,
            ode: 1.0,
            costate_dyn: 1.0,
            costate_term: 1.0,
            stationarity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, id: LossId) -> f64 {
        match id {
            LossId::Init => self.init,
            LossId::TerminalState => self.terminal_state,
            LossId::Ode => self.ode,
            LossId::CostateDyn => self.costate_dyn,
            LossId::CostateTerm => self.costate_term,
            LossId::Stationarity => self.stationarity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for id in LossId::ALL {
            let w = self.get(id);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(HionError::Config(format!("loss weight `{id}` must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one evaluation. Inactive losses are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBreakdown {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_state: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ode: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costate_dyn: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costate_term: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity: Option<f64>,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Builds a breakdown from the values of the active losses and computes the weighted total.
    pub fn from_values(values: &[(LossId, f64)], weights: LossWeights) -> Self {
        let mut b = LossBreakdown {
            init: None,
            terminal_state: None,
            ode: None,
            costate_dyn: None,
            costate_term: None,
            stationarity: None,
            total: 0.0,
            weights,
        };
        for &(id, v) in values {
            *b.slot(id) = Some(v);
            b.total += weights.get(id) * v;
        }
        b
    }

    fn slot(&mut self, id: LossId) -> &mut Option<f64> {
        match id {
            LossId::Init => &mut self.init,
            LossId::TerminalState => &mut self.terminal_state,
            LossId::Ode => &mut self.ode,
            LossId::CostateDyn => &mut self.costate_dyn,
            LossId::CostateTerm => &mut self.costate_term,
            LossId::Stationarity => &mut self.stationarity,
        }
    }

    pub fn get(&self, id: LossId) -> Option<f64> {
        match id {
            LossId::Init => self.init,
            LossId::TerminalState => self.terminal_state,
            LossId::Ode => self.ode,
            LossId::CostateDyn => self.costate_dyn,
            LossId::CostateTerm => self.costate_term,
            LossId::Stationarity => self.stationarity,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && LossId::ALL.iter().all(|&id| self.get(id).is_none_or(f64::is_finite))
    }
}

/// Losses that take part in training.
pub fn active_losses(plant: &Plant, has_reference: bool) -> BTreeSet<LossId> {
    let mut set = BTreeSet::from([LossId::CostateDyn, LossId::CostateTerm, LossId::Stationarity]);
    if has_reference {
        set.insert(LossId::TerminalState);
    }
    if plant.control_points.iter().any(|&c| !c) {
        set.insert(LossId::Ode);
    }
    set
}

fn mean_square<S: Scalar>(terms: impl IntoIterator<Item = S>) -> Option<S> {
    let mut n = 0usize;
    let mut acc: Option<S> = None;
    for t in terms {
        let sq = t * t;
        acc = Some(match acc {
            None => sq,
            Some(a) => a + sq,
        });
        n += 1;
    }
    acc.map(|a| a / n as f64)
}

/// Mean square of `x_h(0) - x_o` over states.
pub fn loss_init<S: Scalar>(x_at_0: &[S], x_o: &[f64]) -> S {
    mean_square(x_at_0.iter().zip(x_o).map(|(&x, &o)| x - o)).expect("non-empty state")
}

/// Mean square of ODE residuals of rows without a control point, or `None` if there are none.
pub fn loss_ode<S: Scalar>(plant: &Plant, x_jets: &[Jet<S>], u: &[S]) -> Result<Option<S>> {
    Ok(mean_square(plant.uncontrolled_residual(x_jets, u)?))
}

/// Mean square error of reference-tied states at `t_f`.
pub fn loss_terminal_state<S: Scalar>(plant: &Plant, x_at_tf: &[S], x_r: &[f64]) -> S {
    mean_square(plant.reference_states.iter().zip(x_r).map(|(&i, &r)| x_at_tf[i] - r)).expect("at least one reference")
}

/// Mean square of `dlambda/dt + dH/dx` over states.
pub fn loss_costate_dynamics<S: Scalar>(lambda_dot: &[S], dh_dx: &[S]) -> S {
    mean_square(lambda_dot.iter().zip(dh_dx).map(|(&a, &b)| a + b)).expect("non-empty state")
}

/// Mean square of the co-states not tied to a reference, at `t_f`.
pub fn loss_costate_terminal<S: Scalar>(plant: &Plant, lambda_at_tf: &[S]) -> S {
    let free = plant.non_reference_states();
    mean_square(free.iter().map(|&i| lambda_at_tf[i])).unwrap_or_else(|| lambda_at_tf[0].lift(0.0))
}

/// Mean square of `dH/du` over controls.
pub fn loss_stationarity<S: Scalar>(dh_du: &[S]) -> S {
    mean_square(dh_du.iter().copied()).expect("non-empty control")
}

/// Transient condition terms at one query.
#[derive(Clone, Copy, Debug)]
pub struct TransientTerms<S> {
    pub costate_dyn: S,
    pub stationarity: S,
}

/// Costate-dynamics and stationarity terms at one query from the state,
/// control and co-state jets (first derivatives of the co-states required).
pub fn transient_terms<S: Scalar>(
    plant: &Plant,
    cost: &Cost,
    states: &[Jet<S>],
    controls: &[Jet<S>],
    costates: &[Jet<S>],
    x_r: &[f64],
) -> Result<TransientTerms<S>> {
    let x: Vec<S> = states.iter().map(|j| j.value()).collect();
    let u: Vec<S> = controls.iter().map(|j| j.value()).collect();
    let lambda: Vec<S> = costates.iter().map(|j| j.value()).collect();
    let lambda_dot: Vec<S> = costates.iter().map(|j| j.derivative(1)).collect();
    let ctx = x[0];
    let xr: Vec<S> = x_r.iter().map(|&v| ctx.lift(v)).collect();
    let h = plant.hamiltonian_partials(&x, &xr, &u, &lambda, cost)?;
    Ok(TransientTerms {
        costate_dyn: loss_costate_dynamics(&lambda_dot, &h.dh_dx),
        stationarity: loss_stationarity(&h.dh_du),
    })
}
