//! Training and fine-tuning.
//!
//! Every epoch draws a fresh batch of `(x_o, x_r)` pairs, evaluates the
//! controller at `t = 0`, `t = t_f` and `n_transient` uniformly drawn
//! interior times per pair, and takes one Adam step on the weighted sum of
//! the active optimality losses. The transient losses use every row,
//! endpoints included; the terminal losses use the `t_f` rows.
//!
//! Gradients are computed chunk by chunk. Within a chunk the two generators
//! run as batched jet MLPs, while everything between and after them is
//! recorded on a tape. The backward pass sweeps the tape down to the
//! co-state generator outputs, runs the batched co-state backward pass,
//! injects its input adjoints, finishes the sweep and runs the batched state
//! backward pass. Chunks have a fixed size and are reduced in order, so the
//! result does not depend on the number of worker threads.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{format_f64, Checkpoint, Head, JetBatch, MaskedInput, TmanoController};
use crate::error::{HionError, Result};
use crate::jets::{Jet, Scalar, Tape, Var};
use crate::pmp::{self, LossBreakdown, LossId, LossWeights};
use crate::systems::{Cost, StateDistribution};

/// Samples per gradient chunk.
pub const CHUNK_SIZE: usize = 16;

/// Consecutive failed epochs after which training stops.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub n_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_n_transient")]
    pub n_transient: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub finetune_from: Option<PathBuf>,
    /// Cosine decay of the learning rate from `lr` to 0 over `n_epochs`.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Train the terminal reference condition.
    #[serde(default = "default_true")]
    pub has_reference: bool,
    #[serde(default)]
    pub distribution: StateDistribution,
    /// Leading epochs trained on the boundary losses only. The co-state and
    /// stationarity losses are switched on afterwards. Singular costs (no
    /// control penalty) admit a trivial co-state solution that never reaches
    /// the reference; fitting the terminal map first steers clear of it.
    #[serde(default)]
    pub warmup_epochs: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}
fn default_epochs() -> usize {
    20_000
}
fn default_batch_size() -> usize {
    256
}
fn default_n_transient() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_epochs: default_epochs(),
            batch_size: default_batch_size(),
            n_transient: default_n_transient(),
            lr: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            loss_weights: LossWeights::default(),
            finetune_from: None,
            cosine_decay: false,
            has_reference: true,
            distribution: StateDistribution::default(),
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HionError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_transient == 0 {
            return bad("n_transient must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        self.loss_weights.validate()?;
        self.distribution.validate()
    }

    /// Loss weights in effect at `epoch`, accounting for the warm-up phase.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        if epoch < self.warmup_epochs {
            LossWeights {
                costate_dyn: 0.0,
                costate_term: 0.0,
                stationarity: 0.0,
                ..self.loss_weights
            }
        } else {
            self.loss_weights
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay && self.n_epochs > 0 {
            let p = epoch as f64 / self.n_epochs as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_config(n: usize, cfg: &TrainConfig) -> Self {
        Self::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One training pair with its interior evaluation times.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x_o: Vec<f64>,
    pub x_r: Vec<f64>,
    pub interior: Vec<f64>,
}

impl Sample {
    /// Evaluation times: `0`, `t_f`, then the interior times.
    pub fn times(&self, t_f: f64) -> impl Iterator<Item = f64> + '_ {
        [0.0, t_f].into_iter().chain(self.interior.iter().copied())
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    dist: &StateDistribution,
    t_f: f64,
    batch_size: usize,
    n_transient: usize,
    rng: &mut R,
) -> Vec<Sample> {
    let times = Uniform::new(0.0, t_f).expect("positive terminal time");
    (0..batch_size)
        .map(|_| {
            let x_o = dist.sample_observed(rng);
            let x_r = dist.sample_reference(&x_o, rng);
            Sample {
                x_o: x_o.to_vec(),
                x_r: vec![x_r],
                interior: (0..n_transient).map(|_| times.sample(rng)).collect(),
            }
        })
        .collect()
}

/// Generator for the batch of `epoch`: one stream of the seeded ChaCha8 generator per epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Loss normalizers for a batch.
#[derive(Clone, Copy, Debug)]
struct Norms {
    samples: f64,
    rows: f64,
}

impl Norms {
    fn of(samples: &[Sample]) -> Self {
        Norms {
            samples: samples.len() as f64,
            rows: samples.iter().map(|s| s.interior.len() + 2).sum::<usize>() as f64,
        }
    }
}

/// Running sums of the per-row loss terms.
struct Accum<S> {
    costate_dyn: Option<S>,
    stationarity: Option<S>,
    terminal_state: Option<S>,
    costate_term: Option<S>,
}

fn add<S: Scalar>(slot: &mut Option<S>, v: S) {
    *slot = Some(match *slot {
        None => v,
        Some(a) => a + v,
    });
}

impl<S: Scalar> Accum<S> {
    fn new() -> Self {
        Accum {
            costate_dyn: None,
            stationarity: None,
            terminal_state: None,
            costate_term: None,
        }
    }

    /// Adds the terms of one evaluation row.
    fn row(
        &mut self,
        controller: &TmanoController,
        sample: &Sample,
        terminal: bool,
        states: &[Jet<S>],
        controls: &[Jet<S>],
        costates: &[Jet<S>],
    ) -> Result<()> {
        let plant = &controller.plant;
        let t = pmp::transient_terms(plant, &controller.cost, states, controls, costates, &sample.x_r)?;
        add(&mut self.costate_dyn, t.costate_dyn);
        add(&mut self.stationarity, t.stationarity);
        if terminal {
            let x: Vec<S> = states.iter().map(|j| j.value()).collect();
            let lambda: Vec<S> = costates.iter().map(|j| j.value()).collect();
            add(&mut self.terminal_state, pmp::loss_terminal_state(plant, &x, &sample.x_r));
            add(&mut self.costate_term, pmp::loss_costate_terminal(plant, &lambda));
        }
        Ok(())
    }

    /// Weighted total over the active losses, and the unweighted contributions.
    fn finish(self, norms: Norms, weights: &LossWeights, has_reference: bool) -> Option<(S, Vec<(LossId, f64)>)> {
        let parts = [
            (LossId::TerminalState, self.terminal_state, norms.samples, has_reference),
            (LossId::CostateDyn, self.costate_dyn, norms.rows, true),
            (LossId::CostateTerm, self.costate_term, norms.samples, true),
            (LossId::Stationarity, self.stationarity, norms.rows, true),
        ];
        let mut total: Option<S> = None;
        let mut values = Vec::new();
        for (id, sum, n, active) in parts {
            let (Some(sum), true) = (sum, active) else { continue };
            let mean = sum / n;
            values.push((id, mean.value()));
            add(&mut total, mean * weights.get(id));
        }
        total.map(|t| (t, values))
    }
}

/// Loss and gradient of one chunk, through the batched generators and a split tape.
fn chunk_gradient(
    controller: &TmanoController,
    samples: &[Sample],
    norms: Norms,
    weights: &LossWeights,
    has_reference: bool,
) -> Result<(Vec<(LossId, f64)>, Vec<f64>)> {
    let plant = &controller.plant;
    let t_f = plant.t_f;
    let n_prim = plant.n_primitives();
    let n_states = plant.n_states;

    let masked: Vec<MaskedInput> = samples
        .iter()
        .map(|s| controller.mask(&s.x_o, &s.x_r))
        .collect::<Result<_>>()?;
    let mut rows: Vec<(f64, &MaskedInput)> = Vec::new();
    let mut owner: Vec<(usize, bool)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for (j, t) in s.times(t_f).enumerate() {
            rows.push((t, &masked[i]));
            owner.push((i, j == 1));
        }
    }
    let n_rows = rows.len();

    let (hot, state_cache) = controller.state_gen.forward_batch(&controller.state_input_batch(&rows))?;
    let order = hot.order();

    let tape = Tape::with_capacity(n_rows * 160);
    let mut hot_vars: Vec<Vec<Jet<Var<'_>>>> = Vec::with_capacity(n_rows);
    let mut heads: Vec<Head<Var<'_>>> = Vec::with_capacity(n_rows);
    for (r, (t, m)) in rows.iter().enumerate() {
        let h: Vec<Jet<Var<'_>>> = (0..n_prim)
            .map(|p| Jet::from_coeffs((0..=order).map(|k| tape.var(hot.coeffs[k][[r, p]])).collect()))
            .collect();
        heads.push(controller.head(*t, m, &h)?);
        hot_vars.push(h);
    }
    let mark = tape.len();

    let n_cin = TmanoController::costate_input_dim(plant);
    let mut cin = JetBatch::zeros(n_rows, n_cin, 1);
    for (r, h) in heads.iter().enumerate() {
        for (c, j) in h.costate_inputs.iter().enumerate() {
            for k in 0..=1 {
                cin.coeffs[k][[r, c]] = j.coeffs()[k].value();
            }
        }
    }
    let (lam, costate_cache) = controller.costate_gen.forward_batch(&cin)?;
    let lam_vars: Vec<Vec<Jet<Var<'_>>>> = (0..n_rows)
        .map(|r| {
            (0..n_states)
                .map(|i| Jet::from_coeffs(vec![tape.var(lam.coeffs[0][[r, i]]), tape.var(lam.coeffs[1][[r, i]])]))
                .collect()
        })
        .collect();

    let mut acc = Accum::new();
    for r in 0..n_rows {
        let (i, terminal) = owner[r];
        acc.row(controller, &samples[i], terminal, &heads[r].states, &heads[r].controls, &lam_vars[r])?;
    }
    let (total, values) = acc.finish(norms, weights, has_reference).expect("non-empty chunk");
    if !total.value().is_finite() {
        let node = tape.first_non_finite().unwrap_or(tape.len());
        return Err(crate::error::JetError::NonFiniteNode { node, len: tape.len() }.into());
    }

    let mut adj = tape.adjoints();
    adj.accumulate(total, 1.0);
    tape.sweep(&mut adj, tape.len(), mark);

    let mut g_lam = JetBatch::zeros(n_rows, n_states, 1);
    for (r, ls) in lam_vars.iter().enumerate() {
        for (i, l) in ls.iter().enumerate() {
            for k in 0..=1 {
                g_lam.coeffs[k][[r, i]] = adj.get(l.coeffs()[k]);
            }
        }
    }
    let mut grad_c = vec![0.0; controller.costate_gen.n_params()];
    let g_cin = controller.costate_gen.backward_batch(&costate_cache, &g_lam, &mut grad_c);
    for (r, h) in heads.iter().enumerate() {
        for (c, j) in h.costate_inputs.iter().enumerate() {
            for k in 0..=1 {
                adj.accumulate(j.coeffs()[k], g_cin.coeffs[k][[r, c]]);
            }
        }
    }
    tape.sweep(&mut adj, mark, 0);

    let mut g_hot = JetBatch::zeros(n_rows, n_prim, order);
    for (r, hs) in hot_vars.iter().enumerate() {
        for (p, h) in hs.iter().enumerate() {
            for k in 0..=order {
                g_hot.coeffs[k][[r, p]] = adj.get(h.coeffs()[k]);
            }
        }
    }
    let mut grad = vec![0.0; controller.state_gen.n_params()];
    controller.state_gen.backward_batch(&state_cache, &g_hot, &mut grad);
    grad.extend_from_slice(&grad_c);
    Ok((values, grad))
}

/// Weighted loss and its gradient with respect to all controller
/// parameters (state generator first) for a batch.
pub fn loss_and_gradient(
    controller: &TmanoController,
    samples: &[Sample],
    weights: &LossWeights,
    has_reference: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let norms = Norms::of(samples);
    let parts: Vec<Result<(Vec<(LossId, f64)>, Vec<f64>)>> = samples
        .par_chunks(CHUNK_SIZE)
        .map(|chunk| chunk_gradient(controller, chunk, norms, weights, has_reference))
        .collect();
    let mut grad = vec![0.0; controller.n_params()];
    let mut values: Vec<(LossId, f64)> = Vec::new();
    for part in parts {
        let (v, g) = part?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        if values.is_empty() {
            values = v;
        } else {
            for (slot, (_, x)) in values.iter_mut().zip(v) {
                slot.1 += x;
            }
        }
    }
    Ok((LossBreakdown::from_values(&values, *weights), grad))
}

/// Weighted loss of a batch through the scalar reference path, generic over
/// the parameter scalar type. With tape variables this yields reference
/// gradients for [`loss_and_gradient`].
pub fn loss_generic<S: Scalar>(
    controller: &TmanoController,
    params: &[S],
    samples: &[Sample],
    weights: &LossWeights,
    has_reference: bool,
) -> Result<(S, Vec<(LossId, f64)>)> {
    let t_f = controller.plant.t_f;
    let mut acc = Accum::new();
    for s in samples {
        for (j, t) in s.times(t_f).enumerate() {
            let out = controller.forward_generic(params, t, &s.x_o, &s.x_r)?;
            acc.row(controller, s, j == 1, &out.head.states, &out.head.controls, &out.costates)?;
        }
    }
    acc.finish(Norms::of(samples), weights, has_reference)
        .ok_or_else(|| HionError::Config("empty batch".into()))
}

/// Loss breakdown of a batch without gradients.
pub fn evaluate_loss(controller: &TmanoController, samples: &[Sample], weights: &LossWeights, has_reference: bool) -> Result<LossBreakdown> {
    Ok(loss_and_gradient(controller, samples, weights, has_reference)?.0)
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub wall_ms: f64,
}

/// One Adam step on a fresh batch. On a non-finite loss or update the
/// parameters and optimizer state are left exactly as they were.
pub fn train_epoch(controller: &mut TmanoController, cfg: &TrainConfig, adam: &mut AdamState, epoch: usize) -> Result<LossBreakdown> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let samples = sample_batch(&cfg.distribution, controller.plant.t_f, cfg.batch_size, cfg.n_transient, &mut rng);
    let abort = |reason: String| HionError::TrainingAborted { epoch, reason };
    let (loss, grad) = loss_and_gradient(controller, &samples, &cfg.weights_at(epoch), cfg.has_reference)
        .map_err(|e| abort(format!("loss evaluation failed: {e}")))?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(abort(format!("non-finite loss or gradient: {loss:?}")));
    }
    let before = (controller.params(), adam.clone());
    let mut params = before.0.clone();
    adam.update(&mut params, &grad, cfg.lr_at(epoch));
    if params.iter().any(|p| !p.is_finite()) {
        *adam = before.1;
        return Err(abort(format!("update produced non-finite parameters after loss {loss:?}")));
    }
    controller.set_params(&params)?;
    Ok(loss)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub controller: TmanoController,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Runs `cfg.n_epochs` epochs from the given controller.
pub fn train(mut controller: TmanoController, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    controller.cost.validate()?;
    let mut adam = AdamState::for_config(controller.n_params(), cfg);
    let mut history = Vec::with_capacity(cfg.n_epochs);
    let mut failures = 0;
    for epoch in 0..cfg.n_epochs {
        let start = Instant::now();
        if epoch > 0 && epoch == cfg.warmup_epochs {
            // Moment estimates from the boundary-only objective badly
            // underestimate the new gradient scale.
            adam = AdamState::for_config(controller.n_params(), cfg);
        }
        match train_epoch(&mut controller, cfg, &mut adam, epoch) {
            Ok(loss) => {
                failures = 0;
                if epoch % 500 == 0 || epoch + 1 == cfg.n_epochs {
                    info!("epoch {epoch}: total {:.6e}", loss.total);
                } else {
                    debug!("epoch {epoch}: total {:.6e}", loss.total);
                }
                history.push(EpochRecord {
                    epoch,
                    loss,
                    lr: cfg.lr_at(epoch),
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
            }
            Err(e) => {
                failures += 1;
                warn!("{e}");
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(e);
                }
            }
        }
    }
    let mut checkpoint = Checkpoint::from_controller(&controller, cfg.seed, cfg.n_epochs);
    checkpoint.distribution = Some(cfg.distribution);
    checkpoint.final_loss = history.last().map(|r| r.loss.clone());
    Ok(TrainOutcome {
        controller,
        checkpoint,
        history,
    })
}

/// Continues training a parent checkpoint under a new cost and terminal
/// time. The parent's system must match `system`.
pub fn finetune(
    parent: &Checkpoint,
    system: crate::systems::SystemId,
    cost: Cost,
    t_f: f64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if parent.system != system {
        return Err(HionError::SystemMismatch {
            expected: system.to_string(),
            got: parent.system.to_string(),
        });
    }
    let mut controller = parent.to_controller()?;
    controller.cost = cost;
    controller.plant = controller.plant.clone().with_terminal_time(t_f)?;
    let mut out = train(controller, cfg)?;
    out.checkpoint.epochs_trained = parent.epochs_trained + cfg.n_epochs;
    out.checkpoint.parent_hash = Some(parent.content_hash()?);
    Ok(out)
}

pub const LOSS_CSV_HEADER: &str = "epoch,total,terminal_state,costate_dyn,costate_term,stationarity,lr,wall_ms";

/// Writes the loss history; inactive losses are left empty.
pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let io = |e| HionError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{LOSS_CSV_HEADER}").map_err(io)?;
    let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for r in history {
        let l = &r.loss;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{:.3}",
            r.epoch,
            format_f64(l.total),
            opt(l.terminal_state),
            opt(l.costate_dyn),
            opt(l.costate_term),
            opt(l.stationarity),
            format_f64(r.lr),
            r.wall_ms
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}
