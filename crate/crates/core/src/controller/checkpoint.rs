//! JSON checkpoints with exact floating-point round trips.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;
use sha2::{Digest, Sha256};

use super::{Mlp, TmanoController};
use crate::error::{HionError, Result};
use crate::pmp::LossBreakdown;
use crate::systems::{CostId, Cost, StateDistribution, SystemId, Plant};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Decimal rendering with 17 significant digits; parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct ExactFloats;

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` as compact JSON with every float at 17 significant digits.
pub(crate) fn to_exact_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpRecord {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for MlpRecord {
    fn from(m: &Mlp) -> Self {
        let (weights, biases) = m.weights_and_biases();
        MlpRecord {
            dims: m.dims().to_vec(),
            weights,
            biases,
        }
    }
}

impl MlpRecord {
    pub fn to_mlp(&self) -> Result<Mlp> {
        Mlp::from_weights_and_biases(self.dims.clone(), &self.weights, &self.biases)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub system: SystemId,
    pub cost_id: CostId,
    pub kappa: f64,
    pub t_f: f64,
    pub ode_order: usize,
    pub state_gen: MlpRecord,
    pub costate_gen: MlpRecord,
    pub seed: u64,
    pub epochs_trained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<StateDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<LossBreakdown>,
    /// Content hash of the checkpoint this one was fine-tuned from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_hash: Option<String>,
}

impl Checkpoint {
    pub fn from_controller(controller: &TmanoController, seed: u64, epochs_trained: usize) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            system: controller.plant.id,
            cost_id: controller.cost.id,
            kappa: controller.cost.kappa,
            t_f: controller.plant.t_f,
            ode_order: controller.plant.ode_order,
            state_gen: (&controller.state_gen).into(),
            costate_gen: (&controller.costate_gen).into(),
            seed,
            epochs_trained,
            distribution: None,
            final_loss: None,
            parent_hash: None,
        }
    }

    pub fn to_controller(&self) -> Result<TmanoController> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(HionError::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let plant = Plant::new(self.system).with_terminal_time(self.t_f)?;
        if plant.ode_order != self.ode_order {
            return Err(HionError::Checkpoint(format!(
                "ode_order {} does not match system {} (order {})",
                self.ode_order, self.system, plant.ode_order
            )));
        }
        let cost = Cost::new(self.cost_id, self.kappa)?;
        TmanoController::from_parts(plant, cost, self.state_gen.to_mlp()?, self.costate_gen.to_mlp()?)
    }

    pub fn to_json(&self) -> Result<String> {
        to_exact_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 (hex) of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| HionError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HionError::io(path, e))?;
        Self::from_json(&text)
    }
}
