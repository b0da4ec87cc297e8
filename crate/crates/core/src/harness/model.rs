use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochStats, HarnessError, Result, RunConfig};
use crate::data::EpisodeSet;
use crate::encoder::{ContextTable, EncoderParams};
use crate::losses::ClassifierHead;
use crate::tensor::Tensor;

/// Parameters owned by one task: its sub-forum table and classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub context: ContextTable,
    pub head: ClassifierHead,
    /// `authors[label]` for the head's classes.
    pub authors: Vec<String>,
    /// `subforums[context_id]` for the context rows.
    pub subforums: Vec<String>,
}

/// Shared encoder plus per-task parameters, keyed by task name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub tasks: BTreeMap<String, TaskParams>,
}

impl Model {
    /// Parameter names in a fixed order: `encoder/<i>`, then `ctx/<task>`
    /// and `head/<task>` per task.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.encoder.tensors().len()).map(|i| format!("encoder/{i}")).collect();
        for task in self.tasks.keys() {
            names.push(format!("ctx/{task}"));
            names.push(format!("head/{task}"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        for t in self.tasks.values() {
            v.push(&t.context.table);
            v.push(&t.head.weights);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        for t in self.tasks.values_mut() {
            v.push(&mut t.context.table);
            v.push(&mut t.head.weights);
        }
        v
    }

    pub fn task(&self, name: &str) -> Result<&TaskParams> {
        self.tasks
            .get(name)
            .ok_or_else(|| HarnessError::Data(format!("unknown task {name:?}")))
    }

    /// Eval-mode embeddings of episode sets under a task's context table.
    pub fn embed(&self, task: &str, sets: &[&EpisodeSet]) -> Result<Tensor> {
        Ok(self.encoder.embed_sets(&self.task(task)?.context, sets)?)
    }
}

/// SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor>,
    pub steps: usize,
}

impl Momentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for ((p, v), g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Momentum,
    /// Completed epochs.
    pub epoch: usize,
    pub curve: Vec<EpochStats>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("config_hash", &self.config_hash)
            .field("epoch", &self.epoch)
            .field("tasks", &self.model.tasks.keys().collect::<Vec<_>>())
            .field("optimizer_steps", &self.optimizer.steps)
            .finish_non_exhaustive()
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ck.config.hash() != ck.config_hash {
            return Err(HarnessError::Data("checkpoint config hash mismatch".into()));
        }
        Ok(ck)
    }
}
