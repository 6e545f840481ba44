//! The T-mano controller.
//!
//! Evaluation runs in four stages:
//!
//! 1. **Invariant mask.** Primitive states the dynamics do not depend on are
//!    moved to zero; the removed offset is subtracted from the matching
//!    reference component and kept for reconstruction.
//! 2. **State generator.** An MLP maps `(t, masked x_o, shifted x_r)` to one
//!    higher-order term `x_hat(t)` per primitive state.
//! 3. **Taylor operator, differentiation and control definition.** The
//!    primitive trajectory is
//!    `x(t) = sum_{n<k} x_o[n] t^n / n! + x_hat(t) t^k + offset`, which equals
//!    the observation at `t = 0` for any network parameters. Time derivatives
//!    come from jets; the control is read off the ODE.
//! 4. **Co-state generator.** A second MLP maps
//!    `(t, masked x_o, shifted x_r, masked x_h, u_h)` to the co-states.
//!    Jet-propagating `t` through the whole chain yields `dlambda/dt`.
//!
//! The co-state generator sees the masked frame as well, so on a plant with
//! invariant states both `u_h` and `lambda_h` are translation invariant.

mod checkpoint;
mod mlp;

use rand::Rng;

pub use checkpoint::{format_f64, Checkpoint, MlpRecord, CHECKPOINT_FORMAT_VERSION};
pub use mlp::{parameter_count, JetBatch, Mlp, MlpCache, MAX_BATCH_ORDER};

use crate::error::{HionError, JetError, Result};
use crate::jets::{Jet, Scalar};
use crate::systems::{Cost, Plant};

/// Default hidden layer widths of both generators.
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

/// Observation and reference after the invariant mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInput {
    pub x_o: Vec<f64>,
    pub x_r: Vec<f64>,
    /// Per primitive state: value removed by the mask.
    pub offset: Vec<f64>,
}

/// Applies the invariant mask of `plant` to an observation and reference.
pub fn invariant_mask(plant: &Plant, x_o: &[f64], x_r: &[f64]) -> Result<MaskedInput> {
    check_len("observed state", plant.n_states, x_o.len())?;
    check_len("reference vector", plant.n_references(), x_r.len())?;
    let k = plant.ode_order;
    let mut masked = MaskedInput {
        x_o: x_o.to_vec(),
        x_r: x_r.to_vec(),
        offset: vec![0.0; plant.n_primitives()],
    };
    for (i, &invariant) in plant.invariant_flags.iter().enumerate() {
        if !invariant {
            continue;
        }
        let delta = x_o[i * k];
        masked.offset[i] = delta;
        masked.x_o[i * k] = 0.0;
        for (slot, &state) in plant.reference_states.iter().enumerate() {
            if state == i * k {
                masked.x_r[slot] -= delta;
            }
        }
    }
    Ok(masked)
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(HionError::DimensionMismatch { context, expected, got })
    }
}

/// Taylor operator for one primitive state.
///
/// `known[n]` is the n-th time derivative of the observation (`n < k`),
/// `hot` the jet of the higher-order term at time `t`. The result has the
/// order of `hot`, which must be at least `k`.
pub fn taylor_operator<S: Scalar>(t: f64, known: &[S], hot: &Jet<S>, offset: f64) -> Result<Jet<S>> {
    let k = known.len();
    let order = hot.order();
    if order < k {
        return Err(JetError::InsufficientOrder { have: order, need: k }.into());
    }
    let zero = hot.value().lift(0.0);
    // derivatives of t^k at t
    let mut tk = vec![0.0; order + 1];
    for (j, d) in tk.iter_mut().enumerate().take(k + 1) {
        let falling: f64 = ((k - j + 1)..=k).map(|v| v as f64).product();
        *d = falling * t.powi((k - j) as i32);
    }
    let mut coeffs = vec![zero; order + 1];
    for (m, c) in coeffs.iter_mut().enumerate() {
        let mut acc = zero;
        let mut inv_fact = 1.0;
        for (p, &kn) in known.iter().enumerate().skip(m) {
            if p > m {
                inv_fact /= (p - m) as f64;
            }
            acc = acc + kn * (t.powi((p - m) as i32) * inv_fact);
        }
        let mut binom = 1.0;
        for i in 0..=m {
            if i > 0 {
                binom = binom * (m - i + 1) as f64 / i as f64;
            }
            let w = tk[m - i];
            if w != 0.0 {
                acc = acc + hot.coeffs()[i] * (binom * w);
            }
        }
        *c = acc;
    }
    coeffs[0] = coeffs[0] + offset;
    Ok(Jet::from_coeffs(coeffs))
}

/// Everything downstream of the state generator for one query.
#[derive(Clone, Debug)]
pub struct Head<S> {
    /// Primitive-state jets in the true frame, order `ode_order + 1`.
    pub primitives: Vec<Jet<S>>,
    /// State-vector jets of order 1 in the true frame.
    pub states: Vec<Jet<S>>,
    /// Control jets of order 1.
    pub controls: Vec<Jet<S>>,
    /// Co-state generator input row, order-1 jets.
    pub costate_inputs: Vec<Jet<S>>,
}

/// Controller output at one query time; every quantity carries its first
/// time derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerOutput {
    pub t: f64,
    pub states: Vec<Jet<f64>>,
    pub controls: Vec<Jet<f64>>,
    pub costates: Vec<Jet<f64>>,
    /// The query time lies outside `[0, t_f]`.
    pub extrapolated: bool,
}

impl ControllerOutput {
    pub fn state_values(&self) -> Vec<f64> {
        self.states.iter().map(|j| j.value()).collect()
    }

    pub fn control_values(&self) -> Vec<f64> {
        self.controls.iter().map(|j| j.value()).collect()
    }

    pub fn costate_values(&self) -> Vec<f64> {
        self.costates.iter().map(|j| j.value()).collect()
    }
}

/// Output of [`TmanoController::forward_generic`].
#[derive(Clone, Debug)]
pub struct GenericOutput<S> {
    pub head: Head<S>,
    pub costates: Vec<Jet<S>>,
}

/// One evaluation request.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub t: f64,
    pub x_o: Vec<f64>,
    pub x_r: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmanoController {
    pub plant: Plant,
    pub cost: Cost,
    pub state_gen: Mlp,
    pub costate_gen: Mlp,
}

impl TmanoController {
    pub fn state_input_dim(plant: &Plant) -> usize {
        1 + plant.n_states + plant.n_references()
    }

    pub fn costate_input_dim(plant: &Plant) -> usize {
        1 + 2 * plant.n_states + plant.n_references() + plant.n_controls
    }

    pub fn init<R: Rng + ?Sized>(
        plant: Plant,
        cost: Cost,
        state_hidden: &[usize],
        costate_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        cost.validate()?;
        let dims = |input: usize, hidden: &[usize], output: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(output);
            d
        };
        let state_gen = Mlp::init(
            dims(Self::state_input_dim(&plant), state_hidden, plant.n_primitives()),
            rng,
        )?;
        let costate_gen = Mlp::init(
            dims(Self::costate_input_dim(&plant), costate_hidden, plant.n_states),
            rng,
        )?;
        Self::from_parts(plant, cost, state_gen, costate_gen)
    }

    pub fn from_parts(plant: Plant, cost: Cost, state_gen: Mlp, costate_gen: Mlp) -> Result<Self> {
        check_len("state generator input", Self::state_input_dim(&plant), state_gen.input_dim())?;
        check_len("state generator output", plant.n_primitives(), state_gen.output_dim())?;
        check_len("co-state generator input", Self::costate_input_dim(&plant), costate_gen.input_dim())?;
        check_len("co-state generator output", plant.n_states, costate_gen.output_dim())?;
        Ok(TmanoController {
            plant,
            cost,
            state_gen,
            costate_gen,
        })
    }

    /// Jet order of the state path: the ODE order plus one, so that the
    /// control carries its own first derivative.
    pub fn jet_order(&self) -> usize {
        self.plant.ode_order + 1
    }

    pub fn n_params(&self) -> usize {
        self.state_gen.n_params() + self.costate_gen.n_params()
    }

    /// State generator parameters followed by co-state generator parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.state_gen.params().to_vec();
        p.extend_from_slice(self.costate_gen.params());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("controller parameters", self.n_params(), params.len())?;
        let (a, b) = params.split_at(self.state_gen.n_params());
        self.state_gen.params_mut().copy_from_slice(a);
        self.costate_gen.params_mut().copy_from_slice(b);
        Ok(())
    }

    pub fn mask(&self, x_o: &[f64], x_r: &[f64]) -> Result<MaskedInput> {
        invariant_mask(&self.plant, x_o, x_r)
    }

    /// State generator input rows for `(t, masked)` pairs; the time column is
    /// seeded as the identity jet.
    pub fn state_input_batch(&self, rows: &[(f64, &MaskedInput)]) -> JetBatch {
        let order = self.jet_order();
        let mut batch = JetBatch::zeros(rows.len(), Self::state_input_dim(&self.plant), order);
        for (r, (t, m)) in rows.iter().enumerate() {
            batch.coeffs[0][[r, 0]] = *t;
            batch.coeffs[1][[r, 0]] = 1.0;
            for (c, v) in m.x_o.iter().chain(&m.x_r).enumerate() {
                batch.coeffs[0][[r, c + 1]] = *v;
            }
        }
        batch
    }

    /// Stage 3 and the co-state input assembly, given the higher-order-term
    /// jets produced by the state generator for one query.
    pub fn head<S: Scalar>(&self, t: f64, masked: &MaskedInput, hot: &[Jet<S>]) -> Result<Head<S>> {
        let plant = &self.plant;
        check_len("higher-order terms", plant.n_primitives(), hot.len())?;
        let k = plant.ode_order;
        let ctx = hot[0].value();
        let lift_const = |v: f64| Jet::constant(ctx.lift(v), 1);

        let mut masked_prims = Vec::with_capacity(hot.len());
        for (i, h) in hot.iter().enumerate() {
            let known: Vec<S> = masked.x_o[i * k..(i + 1) * k].iter().map(|&v| ctx.lift(v)).collect();
            masked_prims.push(taylor_operator(t, &known, h, 0.0)?);
        }
        let masked_states = state_jets(&masked_prims, k)?;
        let primitives: Vec<Jet<S>> = masked_prims
            .iter()
            .zip(&masked.offset)
            .map(|(p, &off)| if off == 0.0 { p.clone() } else { p.map_value(|v| v + off) })
            .collect();
        let states = state_jets(&primitives, k)?;
        let controls = plant.control_definition(&primitives)?;
        for (name, jets) in [("states", &states), ("controls", &controls)] {
            for j in jets.iter() {
                j.check_finite(name)?;
            }
        }

        let mut costate_inputs = Vec::with_capacity(Self::costate_input_dim(plant));
        costate_inputs.push(Jet::time(ctx, t, 1));
        costate_inputs.extend(masked.x_o.iter().chain(&masked.x_r).map(|&v| lift_const(v)));
        costate_inputs.extend(masked_states);
        costate_inputs.extend(controls.iter().map(|u| u.truncate(1)));
        Ok(Head {
            primitives,
            states,
            controls,
            costate_inputs,
        })
    }

    /// Batched `f64` evaluation of many queries.
    pub fn evaluate(&self, queries: &[Query]) -> Result<Vec<ControllerOutput>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let masked: Vec<MaskedInput> = queries
            .iter()
            .map(|q| self.mask(&q.x_o, &q.x_r))
            .collect::<Result<_>>()?;
        let rows: Vec<(f64, &MaskedInput)> = queries.iter().zip(&masked).map(|(q, m)| (q.t, m)).collect();
        for (t, _) in &rows {
            if !t.is_finite() {
                return Err(JetError::RejectedInput(format!("non-finite elapsed time {t}")).into());
            }
        }
        let (hot, _) = self.state_gen.forward_batch(&self.state_input_batch(&rows)).map_err(|e| stage(e, "state generator"))?;
        let n_prim = self.plant.n_primitives();
        let mut heads = Vec::with_capacity(rows.len());
        for (r, (t, m)) in rows.iter().enumerate() {
            let hot_r: Vec<Jet<f64>> = (0..n_prim).map(|i| Jet::from_coeffs(hot.jet(r, i))).collect();
            heads.push(self.head(*t, m, &hot_r)?);
        }
        let mut cin = JetBatch::zeros(rows.len(), Self::costate_input_dim(&self.plant), 1);
        for (r, h) in heads.iter().enumerate() {
            for (c, j) in h.costate_inputs.iter().enumerate() {
                cin.set_jet(r, c, j.coeffs());
            }
        }
        let (lam, _) = self.costate_gen.forward_batch(&cin).map_err(|e| stage(e, "co-state generator"))?;
        let t_f = self.plant.t_f;
        Ok(heads
            .into_iter()
            .zip(&rows)
            .enumerate()
            .map(|(r, (h, (t, _)))| ControllerOutput {
                t: *t,
                states: h.states,
                controls: h.controls,
                costates: (0..self.plant.n_states).map(|i| Jet::from_coeffs(lam.jet(r, i))).collect(),
                extrapolated: !(0.0..=t_f).contains(t),
            })
            .collect())
    }

    pub fn forward(&self, t: f64, x_o: &[f64], x_r: &[f64]) -> Result<ControllerOutput> {
        let q = Query {
            t,
            x_o: x_o.to_vec(),
            x_r: x_r.to_vec(),
        };
        Ok(self.evaluate(std::slice::from_ref(&q))?.remove(0))
    }

    /// Scalar-by-scalar evaluation with externally supplied parameters
    /// (state generator first). With tape variables as parameters this
    /// records the whole model.
    pub fn forward_generic<S: Scalar>(&self, params: &[S], t: f64, x_o: &[f64], x_r: &[f64]) -> Result<GenericOutput<S>> {
        check_len("controller parameters", self.n_params(), params.len())?;
        let (ps, pc) = params.split_at(self.state_gen.n_params());
        let masked = self.mask(x_o, x_r)?;
        let ctx = ps[0];
        let order = self.jet_order();
        let mut input = vec![Jet::time(ctx, t, order)];
        input.extend(masked.x_o.iter().chain(&masked.x_r).map(|&v| Jet::constant(ctx.lift(v), order)));
        let hot = self.state_gen.forward_generic(ps, &input)?;
        let head = self.head(t, &masked, &hot)?;
        let costates = self.costate_gen.forward_generic(pc, &head.costate_inputs)?;
        Ok(GenericOutput { head, costates })
    }
}

fn stage(e: HionError, name: &str) -> HionError {
    match e {
        HionError::Jet(JetError::NumericOverflow { .. }) => JetError::NumericOverflow { stage: name.into() }.into(),
        other => other,
    }
}

/// Order-1 jets of the state vector from primitive jets: state `i*k + n` is
/// the n-th derivative of primitive `i`.
fn state_jets<S: Scalar>(primitives: &[Jet<S>], k: usize) -> Result<Vec<Jet<S>>> {
    let mut out = Vec::with_capacity(primitives.len() * k);
    for p in primitives {
        for n in 0..k {
            out.push(p.shift(n)?.truncate(1));
        }
    }
    Ok(out)
}
