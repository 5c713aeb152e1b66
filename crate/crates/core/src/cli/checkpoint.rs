use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{StudentModel, StudentOutput};
use crate::error::{Error, Result};
use crate::net::{Activation, DenoiserNet};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::teacher::TeacherModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
}

/// Serialized network with its schedule. Parameters are written as
/// shortest round-trip decimals, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub role: Role,
    pub schedule: ScheduleParams,
    pub layer_sizes: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub params: Vec<f64>,
    /// Output mapping, students only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_output: Option<StudentOutput>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    fn from_net(
        role: Role,
        schedule: &NoiseSchedule,
        net: &DenoiserNet,
        student_output: Option<StudentOutput>,
        meta: TrainingMeta,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role,
            schedule: schedule.params(),
            layer_sizes: net.layer_sizes().to_vec(),
            time_embed_dim: net.time_embed_dim(),
            activation: net.activation(),
            params: net.params().to_vec(),
            student_output,
            meta,
        }
    }

    pub fn from_teacher(teacher: &TeacherModel, meta: TrainingMeta) -> Self {
        Self::from_net(Role::Teacher, teacher.schedule(), teacher.net(), None, meta)
    }

    pub fn from_student(student: &StudentModel, meta: TrainingMeta) -> Self {
        Self::from_net(
            Role::Student,
            student.schedule(),
            student.net(),
            Some(student.output()),
            meta,
        )
    }

    fn parts(&self, want: Role) -> Result<(NoiseSchedule, DenoiserNet)> {
        if self.role != want {
            return Err(Error::artifact(format!(
                "expected a {want:?} checkpoint, found {:?}",
                self.role
            )));
        }
        let schedule = NoiseSchedule::from_params(self.schedule)
            .map_err(|e| Error::artifact(format!("checkpoint schedule: {e}")))?;
        let net = DenoiserNet::from_parts(
            self.layer_sizes.clone(),
            self.params.clone(),
            self.activation,
            self.time_embed_dim,
        )
        .map_err(|e| Error::artifact(format!("checkpoint network: {e}")))?;
        Ok((schedule, net))
    }

    pub fn to_teacher(&self) -> Result<TeacherModel> {
        let (schedule, net) = self.parts(Role::Teacher)?;
        TeacherModel::new(schedule, net)
    }

    pub fn to_student(&self) -> Result<StudentModel> {
        let (schedule, net) = self.parts(Role::Student)?;
        let output = self
            .student_output
            .ok_or_else(|| Error::artifact("student checkpoint has no output mapping"))?;
        StudentModel::new(schedule, net, output)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::artifact(format!("serialize checkpoint: {e}")))
    }

    /// Parse and check the format version before anything else.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::artifact(format!("checkpoint is not valid JSON: {e}")))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::artifact(format!(
                    "checkpoint version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(Error::artifact("checkpoint has no version field")),
        }
        serde_json::from_value(raw).map_err(|e| Error::artifact(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
