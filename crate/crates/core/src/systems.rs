//! Plant models and transient costs.
//!
//! Both plants have a single primitive state `x[0]` with state vector
//! `x = (x[0], x[1])`, `x[1] = dx[0]/dt`, governed by a second-order ODE
//! with one control point:
//!
//! * `linear2`: `x'' = u`
//! * `vanderpol`: `x'' = (1 - x^2) x' - x + u`
//!
//! All four costs are sums of squares of affine terms,
//! `L = q_track (x[0] - x_r)^2 + q_vel x[1]^2 + r u^2`, which keeps the
//! Hamiltonian partials in closed form and lets the SLMPC baseline reuse them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{HionError, JetError, Result};
use crate::jets::{Jet, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemId {
    Linear2,
    Vanderpol,
}

impl SystemId {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::Linear2 => "linear2",
            SystemId::Vanderpol => "vanderpol",
        }
    }

    /// Terminal time used by the reference experiments.
    pub fn default_terminal_time(self) -> f64 {
        match self {
            SystemId::Linear2 => 2.0,
            SystemId::Vanderpol => 5.0,
        }
    }

    /// Training length when a configuration does not set one.
    pub fn default_epochs(self) -> usize {
        match self {
            SystemId::Linear2 => 20_000,
            SystemId::Vanderpol => 50_000,
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = HionError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear2" => Ok(SystemId::Linear2),
            "vanderpol" => Ok(SystemId::Vanderpol),
            other => Err(HionError::Config(format!("unknown system id `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostId {
    LinearQuadratic,
    VdpMinSpeed,
    VdpTrack,
    Compare,
}

impl CostId {
    pub fn as_str(self) -> &'static str {
        match self {
            CostId::LinearQuadratic => "linear_quadratic",
            CostId::VdpMinSpeed => "vdp_min_speed",
            CostId::VdpTrack => "vdp_track",
            CostId::Compare => "compare",
        }
    }
}

impl fmt::Display for CostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostId {
    type Err = HionError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_quadratic" => Ok(CostId::LinearQuadratic),
            "vdp_min_speed" => Ok(CostId::VdpMinSpeed),
            "vdp_track" => Ok(CostId::VdpTrack),
            "compare" => Ok(CostId::Compare),
            other => Err(HionError::Config(format!("unknown cost id `{other}`"))),
        }
    }
}

/// Transient cost: identifier plus intensity `kappa`.
///
/// `kappa` only scales `vdp_min_speed` and `vdp_track`; the other two costs
/// have fixed weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cost {
    pub id: CostId,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    1.0
}

/// Weights of `L = track (x0 - xr)^2 + velocity x1^2 + control u^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticWeights {
    pub track: f64,
    pub velocity: f64,
    pub control: f64,
}

impl Cost {
    pub fn new(id: CostId, kappa: f64) -> Result<Self> {
        let c = Cost { id, kappa };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(HionError::Config(format!(
                "kappa must be finite and nonnegative, got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> QuadraticWeights {
        let k = self.kappa;
        match self.id {
            CostId::LinearQuadratic => QuadraticWeights {
                track: 0.0,
                velocity: 1.0,
                control: 0.5,
            },
            CostId::VdpMinSpeed => QuadraticWeights {
                track: 0.0,
                velocity: k,
                control: 0.0,
            },
            CostId::VdpTrack => QuadraticWeights {
                track: k,
                velocity: 0.0,
                control: 0.0,
            },
            CostId::Compare => QuadraticWeights {
                track: 1.0,
                velocity: 0.1,
                control: 0.0,
            },
        }
    }
}

/// Value and partial derivatives of `H = L + lambda^T f`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianEval<S> {
    pub h: S,
    pub dh_dx: Vec<S>,
    pub dh_du: Vec<S>,
}

/// Static description of a plant.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub id: SystemId,
    pub n_states: usize,
    pub n_controls: usize,
    /// Order of the governing ODE; also the number of known derivatives per primitive state.
    pub ode_order: usize,
    /// Per primitive state: dynamics do not depend on it.
    pub invariant_flags: Vec<bool>,
    /// Per ODE row: the row contains a control point, so the control
    /// definition satisfies it identically.
    pub control_points: Vec<bool>,
    /// Indices into the state vector that are tied to a reference.
    pub reference_states: Vec<usize>,
    pub t_f: f64,
}

impl Plant {
    pub fn new(id: SystemId) -> Self {
        Plant {
            id,
            n_states: 2,
            n_controls: 1,
            ode_order: 2,
            invariant_flags: vec![id == SystemId::Linear2],
            control_points: vec![true],
            reference_states: vec![0],
            t_f: id.default_terminal_time(),
        }
    }

    pub fn with_terminal_time(mut self, t_f: f64) -> Result<Self> {
        if !(t_f > 0.0 && t_f.is_finite()) {
            return Err(HionError::Config(format!("t_f must be positive, got {t_f}")));
        }
        self.t_f = t_f;
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        self.id.as_str()
    }

    pub fn n_primitives(&self) -> usize {
        self.invariant_flags.len()
    }

    pub fn n_references(&self) -> usize {
        self.reference_states.len()
    }

    /// State indices not tied to a reference (their terminal co-states vanish).
    pub fn non_reference_states(&self) -> Vec<usize> {
        (0..self.n_states)
            .filter(|i| !self.reference_states.contains(i))
            .collect()
    }

    fn check_dims(&self, x: usize, u: usize) -> Result<()> {
        if x != self.n_states {
            return Err(HionError::DimensionMismatch {
                context: "state vector",
                expected: self.n_states,
                got: x,
            });
        }
        if u != self.n_controls {
            return Err(HionError::DimensionMismatch {
                context: "control vector",
                expected: self.n_controls,
                got: u,
            });
        }
        Ok(())
    }

    /// `dx/dt = f(x, u)`.
    pub fn dynamics<S: Scalar>(&self, x: &[S], u: &[S]) -> Result<Vec<S>> {
        self.check_dims(x.len(), u.len())?;
        Ok(match self.id {
            SystemId::Linear2 => vec![x[1], u[0]],
            SystemId::Vanderpol => {
                let damping = (x[0] * x[0] - 1.0) * -1.0;
                vec![x[1], damping * x[1] - x[0] + u[0]]
            }
        })
    }

    /// Plain-`f64` dynamics for the integrator.
    pub fn dynamics_f64(&self, x: &[f64; 2], u: f64) -> [f64; 2] {
        match self.id {
            SystemId::Linear2 => [x[1], u],
            SystemId::Vanderpol => [x[1], (1.0 - x[0] * x[0]) * x[1] - x[0] + u],
        }
    }

    fn need_order<S: Scalar>(&self, jets: &[Jet<S>], extra: usize) -> Result<()> {
        if jets.len() != self.n_primitives() {
            return Err(HionError::DimensionMismatch {
                context: "primitive state jets",
                expected: self.n_primitives(),
                got: jets.len(),
            });
        }
        let need = self.ode_order + extra;
        for j in jets {
            if j.order() < need {
                return Err(JetError::InsufficientOrder {
                    have: j.order(),
                    need,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Residual of every ODE row given primitive-state jets and controls.
    pub fn ode_residual<S: Scalar>(&self, x_jets: &[Jet<S>], u: &[S]) -> Result<Vec<S>> {
        self.need_order(x_jets, 0)?;
        if u.len() != self.n_controls {
            return Err(HionError::DimensionMismatch {
                context: "control vector",
                expected: self.n_controls,
                got: u.len(),
            });
        }
        let x = x_jets[0].coeffs();
        Ok(match self.id {
            SystemId::Linear2 => vec![x[2] - u[0]],
            SystemId::Vanderpol => {
                let damping = (x[0] * x[0] - 1.0) * -1.0;
                vec![x[2] - damping * x[1] + x[0] - u[0]]
            }
        })
    }

    /// Residuals of the rows without a control point (empty for both plants).
    pub fn uncontrolled_residual<S: Scalar>(&self, x_jets: &[Jet<S>], u: &[S]) -> Result<Vec<S>> {
        let all = self.ode_residual(x_jets, u)?;
        Ok(all
            .into_iter()
            .zip(&self.control_points)
            .filter(|(_, &has_u)| !has_u)
            .map(|(r, _)| r)
            .collect())
    }

    /// Control that makes each controlled ODE row hold exactly. The result
    /// carries `order - ode_order` time derivatives.
    pub fn control_definition<S: Scalar>(&self, x_jets: &[Jet<S>]) -> Result<Vec<Jet<S>>> {
        self.need_order(x_jets, 0)?;
        let k = self.ode_order;
        let x = &x_jets[0];
        let out_order = x.order() - k;
        let acc = x.shift(k)?;
        Ok(match self.id {
            SystemId::Linear2 => vec![acc],
            SystemId::Vanderpol => {
                let pos = x.truncate(out_order);
                let vel = x.shift(1)?.truncate(out_order);
                let damping = (&pos * &pos).map_value(|v| v - 1.0).scale(-1.0);
                let u = &(&acc - &(&damping * &vel)) + &pos;
                vec![u]
            }
        })
    }

    pub fn lagrangian<S: Scalar>(&self, x: &[S], x_r: &[S], u: &[S], cost: &Cost) -> Result<S> {
        self.check_dims(x.len(), u.len())?;
        if x_r.len() != self.n_references() {
            return Err(HionError::DimensionMismatch {
                context: "reference vector",
                expected: self.n_references(),
                got: x_r.len(),
            });
        }
        let w = cost.weights();
        let e = x[0] - x_r[0];
        Ok(e * e * w.track + x[1] * x[1] * w.velocity + u[0] * u[0] * w.control)
    }

    /// `H = L + lambda^T f` with closed-form partials in `x` and `u`.
    pub fn hamiltonian_partials<S: Scalar>(
        &self,
        x: &[S],
        x_r: &[S],
        u: &[S],
        lambda: &[S],
        cost: &Cost,
    ) -> Result<HamiltonianEval<S>> {
        if lambda.len() != self.n_states {
            return Err(HionError::DimensionMismatch {
                context: "co-state vector",
                expected: self.n_states,
                got: lambda.len(),
            });
        }
        let l = self.lagrangian(x, x_r, u, cost)?;
        let f = self.dynamics(x, u)?;
        let w = cost.weights();
        let h = l + lambda[0] * f[0] + lambda[1] * f[1];

        let dl_dx0 = (x[0] - x_r[0]) * (2.0 * w.track);
        let dl_dx1 = x[1] * (2.0 * w.velocity);
        let dl_du = u[0] * (2.0 * w.control);
        let (df_dx0, df_dx1) = match self.id {
            // d(lambda^T f)/dx0 = 0, d/dx1 = lambda0
            SystemId::Linear2 => (x[0].lift(0.0), lambda[0]),
            SystemId::Vanderpol => {
                let d0 = lambda[1] * (x[0] * x[1] * -2.0 - 1.0);
                let d1 = lambda[0] + lambda[1] * ((x[0] * x[0] - 1.0) * -1.0);
                (d0, d1)
            }
        };
        Ok(HamiltonianEval {
            h,
            dh_dx: vec![dl_dx0 + df_dx0, dl_dx1 + df_dx1],
            dh_du: vec![dl_du + lambda[1]],
        })
    }
}

/// Input distributions for training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDistribution {
    /// `x[0] ~ Uniform(low, high)`
    pub position_range: (f64, f64),
    /// `x[1] ~ Normal(0, velocity_std)`
    pub velocity_std: f64,
    /// `x_r = x[0] + Normal(0, reference_std)`
    pub reference_std: f64,
}

impl Default for StateDistribution {
    fn default() -> Self {
        StateDistribution {
            position_range: (-5.0, 5.0),
            velocity_std: 1.0,
            reference_std: 1.0,
        }
    }
}

impl StateDistribution {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.position_range;
        if !(lo < hi && self.velocity_std >= 0.0 && self.reference_std >= 0.0) {
            return Err(HionError::Config(format!("invalid state distribution {self:?}")));
        }
        Ok(())
    }

    pub fn sample_observed<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let (lo, hi) = self.position_range;
        let pos = Uniform::new_inclusive(lo, hi).expect("validated range").sample(rng);
        let vel = Normal::new(0.0, self.velocity_std).expect("validated std").sample(rng);
        [pos, vel]
    }

    pub fn sample_reference<R: Rng + ?Sized>(&self, x_o: &[f64; 2], rng: &mut R) -> f64 {
        x_o[0] + Normal::new(0.0, self.reference_std).expect("validated std").sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin() -> Plant {
        Plant::new(SystemId::Linear2)
    }

    fn vdp() -> Plant {
        Plant::new(SystemId::Vanderpol)
    }

    fn cost(id: CostId, k: f64) -> Cost {
        Cost::new(id, k).unwrap()
    }

    #[test]
    fn dynamics_examples() {
        assert_eq!(lin().dynamics(&[0.0, 1.0], &[2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(vdp().dynamics(&[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(vdp().dynamics(&[1.0, 2.0], &[0.0]).unwrap(), vec![2.0, -1.0]);
        assert!(matches!(
            lin().dynamics(&[0.0], &[1.0]),
            Err(HionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn residual_examples() {
        let x = Jet::from_coeffs(vec![0.0, 0.0, 3.0]);
        assert_eq!(lin().ode_residual(&[x], &[1.0]).unwrap(), vec![2.0]);
        let short = Jet::from_coeffs(vec![0.0, 1.0]);
        assert!(lin().ode_residual(&[short], &[1.0]).is_err());
    }

    #[test]
    fn paper_systems_have_no_uncontrolled_rows() {
        let x = Jet::from_coeffs(vec![0.5, 1.0, 3.0]);
        assert!(vdp().uncontrolled_residual(&[x], &[1.0]).unwrap().is_empty());
    }

    #[test]
    fn control_definition_examples() {
        let x = Jet::from_coeffs(vec![0.0, 0.0, 3.0]);
        assert_eq!(lin().control_definition(&[x]).unwrap()[0].values(), vec![3.0]);
        let x = Jet::from_coeffs(vec![1.0, 2.0, 0.0]);
        assert_eq!(vdp().control_definition(&[x]).unwrap()[0].values(), vec![1.0]);
        let x = Jet::from_coeffs(vec![0.0, 0.0, 0.0]);
        assert_eq!(vdp().control_definition(&[x]).unwrap()[0].values(), vec![0.0]);
    }

    #[test]
    fn defined_control_cancels_residual() {
        for sys in [lin(), vdp()] {
            let x = Jet::from_coeffs(vec![0.7, -1.3, 2.2, 0.4]);
            let u = sys.control_definition(std::slice::from_ref(&x)).unwrap();
            let r = sys.ode_residual(&[x], &[u[0].value()]).unwrap();
            assert_eq!(r, vec![0.0]);
        }
    }

    #[test]
    fn lagrangian_examples() {
        let lq = cost(CostId::LinearQuadratic, 1.0);
        assert_eq!(lin().lagrangian(&[0.0, 1.0], &[0.0], &[2.0], &lq).unwrap(), 3.0);
        let ms = cost(CostId::VdpMinSpeed, 1.0);
        assert_eq!(vdp().lagrangian(&[5.0, 0.0], &[0.0], &[0.0], &ms).unwrap(), 0.0);
        let cmp = cost(CostId::Compare, 1.0);
        assert_eq!(vdp().lagrangian(&[1.0, 0.0], &[1.0], &[0.0], &cmp).unwrap(), 0.0);
        assert!((vdp().lagrangian(&[3.0, 1.0], &[1.0], &[0.0], &cmp).unwrap() - 4.1).abs() < 1e-15);
    }

    #[test]
    fn hamiltonian_examples() {
        let lq = cost(CostId::LinearQuadratic, 1.0);
        let h = lin()
            .hamiltonian_partials(&[0.0, 1.0], &[0.0], &[2.0], &[1.0, 1.0], &lq)
            .unwrap();
        assert_eq!(h.h, 6.0);
        assert_eq!(h.dh_dx, vec![0.0, 3.0]);
        assert_eq!(h.dh_du, vec![3.0]);

        // lambda = 0: dH/du reduces to dL/du
        let h = lin()
            .hamiltonian_partials(&[0.3, 1.0], &[0.0], &[-0.7], &[0.0, 0.0], &lq)
            .unwrap();
        assert_eq!(h.dh_du, vec![-0.7]);

        let tr = cost(CostId::VdpTrack, 1.0);
        let h = vdp()
            .hamiltonian_partials(&[1.0, 2.0], &[0.0], &[0.0], &[0.0, 1.0], &tr)
            .unwrap();
        assert_eq!(h.dh_du, vec![1.0]);
    }

    #[test]
    fn negative_kappa_rejected() {
        assert!(Cost::new(CostId::VdpTrack, -0.1).is_err());
    }

    #[test]
    fn ids_parse_and_print() {
        for s in ["linear2", "vanderpol"] {
            assert_eq!(s.parse::<SystemId>().unwrap().as_str(), s);
        }
        for s in ["linear_quadratic", "vdp_min_speed", "vdp_track", "compare"] {
            assert_eq!(s.parse::<CostId>().unwrap().as_str(), s);
        }
        assert!("quadcopter".parse::<SystemId>().is_err());
        assert!("energy".parse::<CostId>().is_err());
    }

    #[test]
    fn observed_samples_in_range_and_reproducible() {
        let d = StateDistribution::default();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = d.sample_observed(&mut a);
            let y = d.sample_observed(&mut b);
            assert!((-5.0..=5.0).contains(&x[0]));
            assert_eq!(x[0].to_bits(), y[0].to_bits());
            assert_eq!(x[1].to_bits(), y[1].to_bits());
        }
    }

    #[test]
    fn sample_statistics() {
        let d = StateDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut vel_sum = 0.0;
        let mut diffs = Vec::with_capacity(n);
        for _ in 0..n {
            let x = d.sample_observed(&mut rng);
            vel_sum += x[1];
            diffs.push(d.sample_reference(&x, &mut rng) - x[0]);
        }
        assert!((vel_sum / n as f64).abs() < 0.05);
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_noise_reference_is_observed_position() {
        let d = StateDistribution {
            reference_std: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(d.sample_reference(&[2.5, -1.0], &mut rng), 2.5);
    }
}
