//! Closed-loop simulation.
//!
//! The plant is integrated with classical RK4 on a uniform grid. A policy
//! plans in phases: a phase starts whenever the plant is observed (every
//! sampling period), and the policy is then queried in elapsed time since
//! the phase start. Two events start a phase without reading the plant:
//! a reference change between observations, and a plan running out of
//! horizon. Both restart from the policy's own estimate of the state.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::controller::{format_f64, ControllerOutput, TmanoController};
use crate::error::{HionError, Result};
use crate::systems::{Cost, SystemId, Plant};

/// When the plant is observed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Every integrator step.
    Realtime,
    /// Every policy horizon (`t_f` for a Hion controller).
    TerminalTime,
    /// Every given number of seconds.
    Period(f64),
}

impl Sampling {
    pub fn label(&self) -> String {
        match self {
            Sampling::Realtime => "realtime".into(),
            Sampling::TerminalTime => "tf".into(),
            Sampling::Period(p) => format!("{p}"),
        }
    }
}

impl FromStr for Sampling {
    type Err = HionError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "realtime" => Ok(Sampling::Realtime),
            "tf" => Ok(Sampling::TerminalTime),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|p| *p > 0.0 && p.is_finite())
                .map(Sampling::Period)
                .ok_or_else(|| HionError::Config(format!("sampling must be \"realtime\", \"tf\" or a positive period, got `{other}`"))),
        }
    }
}

impl Serialize for Sampling {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sampling::Period(p) => s.serialize_f64(*p),
            other => s.serialize_str(&other.label()),
        }
    }
}

impl<'de> Deserialize<'de> for Sampling {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Num(p) => p.to_string(),
            Raw::Text(t) => t,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn default_step() -> f64 {
    0.01
}

/// A closed-loop experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemId,
    pub cost: Cost,
    pub sampling: Sampling,
    pub duration: f64,
    /// `(time, reference)` steps; the first time must be 0.
    pub reference_schedule: Vec<(f64, f64)>,
    pub initial_state: Vec<f64>,
    #[serde(default = "default_step")]
    pub integrator_step: f64,
}

/// Grid tolerance used when matching event times to integrator steps.
const GRID_EPS: f64 = 1e-9;

fn steps_for(duration: f64, h: f64, what: &str) -> Result<usize> {
    let n = duration / h;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > GRID_EPS * n.max(1.0) {
        return Err(HionError::Config(format!(
            "{what} ({duration}) must be a positive multiple of the integrator step ({h})"
        )));
    }
    Ok(r as usize)
}

impl Scenario {
    /// Square-wave reference between 1 and -1 every 5 s over 15 s from rest,
    /// used for controller comparisons.
    pub fn comparison_fixture(system: SystemId, cost: Cost, sampling: Sampling) -> Self {
        Scenario {
            system,
            cost,
            sampling,
            duration: 15.0,
            reference_schedule: vec![(0.0, 1.0), (5.0, -1.0), (10.0, 1.0)],
            initial_state: vec![0.0, 0.0],
            integrator_step: default_step(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        let h = self.integrator_step;
        if !(h > 0.0 && h.is_finite()) {
            return Err(HionError::Config(format!("integrator_step must be positive, got {h}")));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(HionError::Config(format!("duration must be positive, got {}", self.duration)));
        }
        steps_for(self.duration, h, "duration")?;
        if let Sampling::Period(p) = self.sampling {
            if p < h {
                return Err(HionError::Config(format!("sampling period {p} is shorter than the integrator step {h}")));
            }
            steps_for(p, h, "sampling period")?;
        }
        match self.reference_schedule.first() {
            Some(&(0.0, _)) => {}
            _ => return Err(HionError::Config("reference_schedule must start at time 0".into())),
        }
        if self.reference_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(HionError::Config("reference_schedule times must be strictly increasing".into()));
        }
        if self.reference_schedule.iter().any(|(t, r)| !t.is_finite() || !r.is_finite()) {
            return Err(HionError::Config("reference_schedule entries must be finite".into()));
        }
        let plant = Plant::new(self.system);
        if self.initial_state.len() != plant.n_states {
            return Err(HionError::DimensionMismatch {
                context: "initial state",
                expected: plant.n_states,
                got: self.initial_state.len(),
            });
        }
        Ok(())
    }

    pub fn reference_at(&self, t: f64) -> f64 {
        self.reference_schedule
            .iter()
            .take_while(|(ts, _)| *ts <= t + GRID_EPS)
            .last()
            .map(|(_, r)| *r)
            .unwrap_or(self.reference_schedule[0].1)
    }
}

/// What a policy reports at one elapsed time.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub u: Vec<f64>,
    /// Estimated state, if the policy has one.
    pub x_h: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
}

/// A controller that plans from one observation at a time.
pub trait PhasePolicy {
    fn plant(&self) -> &Plant;

    /// Length of one plan in seconds.
    fn horizon(&self) -> f64;

    /// Whether a plan must be renewed once its horizon is exhausted.
    fn rearm_at_horizon(&self) -> bool;

    fn start_phase(&mut self, x_o: &[f64], x_r: &[f64]) -> Result<()>;

    fn output(&mut self, t_hat: f64) -> Result<PolicyOutput>;

    fn control(&mut self, t_hat: f64) -> Result<Vec<f64>> {
        Ok(self.output(t_hat)?.u)
    }
}

/// A trained controller driving the plant with its continuous control.
pub struct HionPolicy<'a> {
    controller: &'a TmanoController,
    x_o: Vec<f64>,
    x_r: Vec<f64>,
    last: Option<ControllerOutput>,
}

impl<'a> HionPolicy<'a> {
    pub fn new(controller: &'a TmanoController) -> Self {
        HionPolicy {
            controller,
            x_o: vec![0.0; controller.plant.n_states],
            x_r: vec![0.0; controller.plant.n_references()],
            last: None,
        }
    }

    fn eval(&mut self, t_hat: f64) -> Result<&ControllerOutput> {
        let hit = self.last.as_ref().is_some_and(|o| o.t.to_bits() == t_hat.to_bits());
        if !hit {
            self.last = Some(self.controller.forward(t_hat, &self.x_o, &self.x_r)?);
        }
        Ok(self.last.as_ref().expect("just filled"))
    }
}

impl PhasePolicy for HionPolicy<'_> {
    fn plant(&self) -> &Plant {
        &self.controller.plant
    }

    fn horizon(&self) -> f64 {
        self.controller.plant.t_f
    }

    fn rearm_at_horizon(&self) -> bool {
        true
    }

    fn start_phase(&mut self, x_o: &[f64], x_r: &[f64]) -> Result<()> {
        self.x_o = x_o.to_vec();
        self.x_r = x_r.to_vec();
        self.last = None;
        Ok(())
    }

    fn output(&mut self, t_hat: f64) -> Result<PolicyOutput> {
        let o = self.eval(t_hat)?;
        Ok(PolicyOutput {
            u: o.control_values(),
            x_h: Some(o.state_values()),
            lambda: Some(o.costate_values()),
        })
    }
}

/// Classical fourth-order Runge-Kutta step. `u` is evaluated at the stage
/// offsets `0`, `dt/2` and `dt`.
pub fn rk4_step(plant: &Plant, x: &[f64; 2], mut u: impl FnMut(f64) -> Result<f64>, dt: f64) -> Result<[f64; 2]> {
    if !(dt > 0.0) {
        return Err(HionError::Config(format!("integration step must be positive, got {dt}")));
    }
    let f = |x: &[f64; 2], u: f64| plant.dynamics_f64(x, u);
    let axpy = |a: &[f64; 2], s: f64, b: &[f64; 2]| [a[0] + s * b[0], a[1] + s * b[1]];
    let u0 = u(0.0)?;
    let um = u(0.5 * dt)?;
    let u1 = u(dt)?;
    let k1 = f(x, u0);
    let k2 = f(&axpy(x, 0.5 * dt, &k1), um);
    let k3 = f(&axpy(x, 0.5 * dt, &k2), um);
    let k4 = f(&axpy(x, dt, &k3), u1);
    Ok([
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ])
}

/// Integrates `x' = f(x, u(t))` over `[0, t_end]` with `n` equal RK4 steps.
pub fn integrate(plant: &Plant, x0: [f64; 2], mut u: impl FnMut(f64) -> f64, t_end: f64, n: usize) -> Result<[f64; 2]> {
    let h = t_end / n as f64;
    let mut x = x0;
    for i in 0..n {
        let t = i as f64 * h;
        x = rk4_step(plant, &x, |s| Ok(u(t + s)), h)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
    /// The policy's estimate of the state at this time, if it has one.
    pub x_h: Option<Vec<f64>>,
    pub x_ref: f64,
    pub phase: usize,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,x0,x1,u,lambda0,lambda1,x_ref,phase,observed";

impl Trajectory {
    pub fn n_phases(&self) -> usize {
        self.rows.last().map_or(0, |r| r.phase + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 200);
        s.push_str(TRAJECTORY_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let lam = match &r.lambda {
                Some(l) => format!("{},{}", format_f64(l[0]), format_f64(l[1])),
                None => ",".into(),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                format_f64(r.t),
                format_f64(r.x[0]),
                format_f64(r.x[1]),
                format_f64(r.u[0]),
                lam,
                format_f64(r.x_ref),
                r.phase,
                u8::from(r.observed)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| HionError::io(path, e))
    }
}

/// Integrated cost and tracking error of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub j: f64,
    pub tracking: f64,
}

/// Trapezoidal integrals of the Lagrangian and of `(x0 - x_ref)^2` along the
/// plant states and applied controls.
pub fn metrics(traj: &Trajectory, plant: &Plant, cost: &Cost) -> Result<Metrics> {
    let mut m = Metrics { j: 0.0, tracking: 0.0 };
    let mut prev: Option<(f64, f64, f64)> = None;
    for r in &traj.rows {
        let l = plant.lagrangian(&r.x, &[r.x_ref], &r.u, cost)?;
        let e = (r.x[0] - r.x_ref).powi(2);
        if let Some((t0, l0, e0)) = prev {
            let dt = r.t - t0;
            m.j += 0.5 * dt * (l0 + l);
            m.tracking += 0.5 * dt * (e0 + e);
        }
        prev = Some((r.t, l, e));
    }
    Ok(m)
}

pub const METRICS_CSV_HEADER: &str = "label,J,tracking";

pub fn write_metrics_csv(path: &Path, rows: &[(String, Metrics)]) -> Result<()> {
    let io = |e| HionError::io(path, e);
    let mut f = std::fs::File::create(path).map_err(io)?;
    writeln!(f, "{METRICS_CSV_HEADER}").map_err(io)?;
    for (label, m) in rows {
        writeln!(f, "{label},{},{}", format_f64(m.j), format_f64(m.tracking)).map_err(io)?;
    }
    Ok(())
}

/// Runs `policy` against the plant of `scenario`.
pub fn run_closed_loop(policy: &mut dyn PhasePolicy, scenario: &Scenario) -> Result<(Trajectory, Metrics)> {
    scenario.validate()?;
    let plant = policy.plant().clone();
    if plant.id != scenario.system {
        return Err(HionError::SystemMismatch {
            expected: scenario.system.to_string(),
            got: plant.id.to_string(),
        });
    }
    let h = scenario.integrator_step;
    let n = steps_for(scenario.duration, h, "duration")?;
    let horizon_steps = steps_for(policy.horizon(), h, "policy horizon")?;
    let observe_every = match scenario.sampling {
        Sampling::Realtime => 1,
        Sampling::TerminalTime => horizon_steps,
        Sampling::Period(p) => steps_for(p, h, "sampling period")?,
    };
    let rearm = policy.rearm_at_horizon();

    let mut x = [scenario.initial_state[0], scenario.initial_state[1]];
    let mut traj = Trajectory::default();
    let mut phase = 0usize;
    let mut phase_start = 0usize;
    let mut current_ref = scenario.reference_at(0.0);
    let abort = |t: f64, reason: String| HionError::SimulationAborted { t, reason };

    for i in 0..=n {
        let t = i as f64 * h;
        let x_ref = scenario.reference_at(t);
        let steps_in = i - phase_start;
        let mut observed = false;
        if i == 0 || (i < n && i % observe_every == 0) {
            if i > 0 {
                phase += 1;
            }
            phase_start = i;
            observed = true;
            policy.start_phase(&x, &[x_ref]).map_err(|e| abort(t, e.to_string()))?;
        } else if x_ref != current_ref || (rearm && steps_in >= horizon_steps) {
            let t_hat = steps_in as f64 * h;
            let est = policy.output(t_hat).map_err(|e| abort(t, e.to_string()))?.x_h.unwrap_or_else(|| x.to_vec());
            phase += 1;
            phase_start = i;
            policy.start_phase(&est, &[x_ref]).map_err(|e| abort(t, e.to_string()))?;
        }
        current_ref = x_ref;

        let t_hat = (i - phase_start) as f64 * h;
        let out = policy.output(t_hat).map_err(|e| abort(t, e.to_string()))?;
        traj.rows.push(TrajectoryRow {
            t,
            x: x.to_vec(),
            u: out.u,
            lambda: out.lambda,
            x_h: out.x_h,
            x_ref,
            phase,
            observed,
        });
        if i == n {
            break;
        }
        let next = rk4_step(&plant, &x, |s| Ok(policy.control(t_hat + s)?[0]), h).map_err(|e| abort(t, e.to_string()))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(abort(t, format!("non-finite state after step from {x:?}")));
        }
        x = next;
    }
    let m = metrics(&traj, &plant, &scenario.cost)?;
    Ok((traj, m))
}

/// Controller outputs on a uniform grid over `[0, t_f]`, as a trajectory
/// with a single phase.
pub fn tpbvp(controller: &TmanoController, x_o: &[f64], x_r: &[f64], n_points: usize) -> Result<Trajectory> {
    if n_points < 2 {
        return Err(HionError::Config(format!("n_points must be at least 2, got {n_points}")));
    }
    let t_f = controller.plant.t_f;
    let queries: Vec<crate::controller::Query> = (0..n_points)
        .map(|i| crate::controller::Query {
            t: if i + 1 == n_points { t_f } else { t_f * i as f64 / (n_points - 1) as f64 },
            x_o: x_o.to_vec(),
            x_r: x_r.to_vec(),
        })
        .collect();
    let outs = controller.evaluate(&queries)?;
    Ok(Trajectory {
        rows: outs
            .into_iter()
            .enumerate()
            .map(|(i, o)| TrajectoryRow {
                t: o.t,
                x: o.state_values(),
                u: o.control_values(),
                lambda: Some(o.costate_values()),
                x_h: Some(o.state_values()),
                x_ref: x_r[0],
                phase: 0,
                observed: i == 0,
            })
            .collect(),
    })
}
