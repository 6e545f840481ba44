//! Hamiltonian-informed optimal neural (Hion) controllers.
//!
//! A Hion controller maps elapsed time, an observed state and a reference to
//! a predicted state trajectory, the control that realizes it and the
//! co-states of the underlying optimal control problem. It is trained by
//! penalizing violations of the necessary optimality conditions of
//! Pontryagin's maximum principle, so no solved trajectories are needed.
//!
//! Crate layout:
//!
//! * [`jets`]: Taylor-mode time derivatives and reverse-mode gradients.
//! * [`systems`]: plants, costs, Hamiltonians and sampling distributions.
//! * [`controller`]: the T-mano model and its checkpoints.
//! * [`pmp`]: optimality-condition losses.
//! * [`training`]: Adam training and fine-tuning.
//! * [`simulator`]: RK4 closed-loop runs and cost metrics.
//! * [`slmpc`]: successive-linearization MPC baseline.

pub mod controller;
pub mod error;
pub mod jets;
pub mod pmp;
pub mod simulator;
pub mod slmpc;
pub mod systems;
pub mod training;

pub use controller::{Checkpoint, ControllerOutput, Mlp, TmanoController};
pub use error::{HionError, JetError, Result};
pub use jets::{Jet, Scalar, Tape, Var};
pub use pmp::{LossBreakdown, LossId, LossWeights};
pub use simulator::{Metrics, Sampling, Scenario, Trajectory};
pub use slmpc::SlmpcConfig;
pub use systems::{CostId, Cost, StateDistribution, SystemId, Plant};
pub use training::{AdamState, TrainConfig};
