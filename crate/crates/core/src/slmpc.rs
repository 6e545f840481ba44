//! Successive-linearization model predictive control.
//!
//! At every observation the plant is linearized at the observed state,
//! discretized with forward Euler over the horizon, and the summed
//! Lagrangian is minimized over a piecewise-constant control sequence. The
//! cost is quadratic in the controls, so the minimizer is a stacked linear
//! least-squares solution. The first control is held until the next
//! observation.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{HionError, Result};
use crate::simulator::{PhasePolicy, PolicyOutput};
use crate::systems::{Cost, SystemId, Plant};

/// Ridge added to the normal equations.
pub const TIKHONOV: f64 = 1e-9;

/// Condition number above which a solve is reported.
const CONDITION_WARNING: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlmpcConfig {
    /// Prediction horizon in seconds.
    pub horizon: f64,
    /// Number of Euler intervals over the horizon, one control per interval.
    pub n_steps: usize,
    /// Sampling period in seconds.
    pub delta: f64,
    pub cost: Cost,
    #[serde(default)]
    pub u_bound: Option<f64>,
}

impl SlmpcConfig {
    /// Horizon 2.5 s split into 0.5 s control intervals, resolved every 0.5 s.
    pub fn comparison(cost: Cost) -> Self {
        SlmpcConfig {
            horizon: 2.5,
            n_steps: 5,
            delta: 0.5,
            cost,
            u_bound: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(HionError::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.n_steps < 2 {
            return Err(HionError::Config(format!("n_steps must be at least 2, got {}", self.n_steps)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(HionError::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if let Some(b) = self.u_bound {
            if !(b > 0.0) {
                return Err(HionError::Config(format!("u_bound must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Affine model `f(x, u) ~ A x + B u + c` around a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linearization {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: Vector2<f64>,
}

pub fn linearize(plant: &Plant, x: &[f64; 2], u: f64) -> Linearization {
    let a = match plant.id {
        SystemId::Linear2 => Matrix2::new(0.0, 1.0, 0.0, 0.0),
        SystemId::Vanderpol => Matrix2::new(0.0, 1.0, -2.0 * x[0] * x[1] - 1.0, 1.0 - x[0] * x[0]),
    };
    let b = Vector2::new(0.0, 1.0);
    let f = plant.dynamics_f64(x, u);
    let c = Vector2::new(f[0], f[1]) - a * Vector2::new(x[0], x[1]) - b * u;
    Linearization { a, b, c }
}

/// Optimal control sequence for one horizon. `row_order` permutes the rows
/// of the stacked least-squares system.
fn solve_sequence(plant: &Plant, x_now: &[f64; 2], x_r: f64, cfg: &SlmpcConfig, row_order: Option<&[usize]>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let dt = cfg.horizon / n as f64;
    let lin = linearize(plant, x_now, 0.0);
    let ad = Matrix2::identity() + lin.a * dt;
    let bd = lin.b * dt;
    let cd = lin.c * dt;
    let w = cfg.cost.weights();

    // x_{k+1} = free_{k+1} + sum_{j<=k} G_{k,j} u_j
    let mut free = Vec::with_capacity(n);
    let mut gains: Vec<Vec<Vector2<f64>>> = Vec::with_capacity(n);
    let mut x = Vector2::new(x_now[0], x_now[1]);
    let mut prev: Vec<Vector2<f64>> = Vec::new();
    for _ in 0..n {
        x = ad * x + cd;
        let mut g: Vec<Vector2<f64>> = prev.iter().map(|v| ad * v).collect();
        g.push(bd);
        free.push(x);
        gains.push(g.clone());
        prev = g;
    }

    // residual rows: sqrt(dt w) * (state or control term)
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(3 * n);
    for k in 0..n {
        for (state, weight, target) in [(0usize, w.track, x_r), (1, w.velocity, 0.0)] {
            if weight == 0.0 {
                continue;
            }
            let s = (dt * weight).sqrt();
            let mut coeffs = vec![0.0; n];
            for (j, g) in gains[k].iter().enumerate() {
                coeffs[j] = s * g[state];
            }
            rows.push((coeffs, s * (target - free[k][state])));
        }
        if w.control > 0.0 {
            let s = (dt * w.control).sqrt();
            let mut coeffs = vec![0.0; n];
            coeffs[k] = s;
            rows.push((coeffs, 0.0));
        }
    }
    let ridge = TIKHONOV.sqrt();
    for k in 0..n {
        let mut coeffs = vec![0.0; n];
        coeffs[k] = ridge;
        rows.push((coeffs, 0.0));
    }
    let order: Vec<usize> = match row_order {
        Some(o) => o.to_vec(),
        None => (0..rows.len()).collect(),
    };
    if order.len() != rows.len() {
        return Err(HionError::DimensionMismatch {
            context: "row permutation",
            expected: rows.len(),
            got: order.len(),
        });
    }
    let m = DMatrix::from_fn(rows.len(), n, |i, j| rows[order[i]].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[order[i]].1);

    let svd = m.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if s_min <= 0.0 || s_max / s_min > CONDITION_WARNING {
        warn!("ill-conditioned SLMPC least squares (condition {:.3e}); relying on the ridge term", s_max / s_min);
    }
    let u = svd
        .solve(&b, 0.0)
        .map_err(|e| HionError::Config(format!("SLMPC solve failed: {e}")))?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(HionError::SimulationAborted {
            t: 0.0,
            reason: "non-finite SLMPC control".into(),
        });
    }
    Ok(u.iter().copied().collect())
}

/// First control of the optimal sequence, clamped to `u_bound` if set.
pub fn solve_step(plant: &Plant, x_now: &[f64; 2], x_r: f64, cfg: &SlmpcConfig) -> Result<f64> {
    let u = solve_sequence(plant, x_now, x_r, cfg, None)?[0];
    Ok(match cfg.u_bound {
        Some(b) => u.clamp(-b, b),
        None => u,
    })
}

/// SLMPC as a closed-loop policy: one constant control per phase.
pub struct SlmpcPolicy {
    plant: Plant,
    cfg: SlmpcConfig,
    x_o: [f64; 2],
    u: f64,
    model: Option<Linearization>,
}

impl SlmpcPolicy {
    pub fn new(system: SystemId, cfg: SlmpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SlmpcPolicy {
            plant: Plant::new(system),
            cfg,
            x_o: [0.0; 2],
            u: 0.0,
            model: None,
        })
    }

    pub fn config(&self) -> &SlmpcConfig {
        &self.cfg
    }

    /// State predicted by the linear model after holding the control for `t_hat`.
    fn predict(&self, t_hat: f64) -> Vec<f64> {
        let Some(lin) = self.model else {
            return self.x_o.to_vec();
        };
        let f = |x: Vector2<f64>| lin.a * x + lin.b * self.u + lin.c;
        let steps = (t_hat / 0.01).ceil().max(1.0) as usize;
        let h = t_hat / steps as f64;
        let mut x = Vector2::new(self.x_o[0], self.x_o[1]);
        for _ in 0..steps {
            let k1 = f(x);
            let k2 = f(x + k1 * (0.5 * h));
            let k3 = f(x + k2 * (0.5 * h));
            let k4 = f(x + k3 * h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        vec![x[0], x[1]]
    }
}

impl PhasePolicy for SlmpcPolicy {
    fn plant(&self) -> &Plant {
        &self.plant
    }

    // Only the first control of each solve is applied, so a plan lasts one
    // sampling period even though it looks `cfg.horizon` ahead.
    #[allow(clippy::misnamed_getters)]
    fn horizon(&self) -> f64 {
        self.cfg.delta
    }

    fn rearm_at_horizon(&self) -> bool {
        false
    }

    fn start_phase(&mut self, x_o: &[f64], x_r: &[f64]) -> Result<()> {
        self.x_o = [x_o[0], x_o[1]];
        self.u = solve_step(&self.plant, &self.x_o, x_r[0], &self.cfg)?;
        self.model = Some(linearize(&self.plant, &self.x_o, self.u));
        Ok(())
    }

    fn output(&mut self, t_hat: f64) -> Result<PolicyOutput> {
        Ok(PolicyOutput {
            u: vec![self.u],
            x_h: Some(self.predict(t_hat)),
            lambda: None,
        })
    }

    fn control(&mut self, _t_hat: f64) -> Result<Vec<f64>> {
        Ok(vec![self.u])
    }
}
