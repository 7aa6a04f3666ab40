//! Prompt tuning of the shot prefix table.
//!
//! Only the prefix entries are optimized; the objective is pluggable. The
//! analytic quadratic objective makes the optimizer checkable without a
//! diffusion backend, and the backend-delegated objective runs the same
//! step code against a training-capable backend.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::dataset::ShotPair;
use super::prefix::{save_table, PrefixError, ShotPrefixTable};
use crate::backend::{call_id, BackendError, BackendHandle, Capability};
use crate::protocol::{PrefixEntryPayload, TuneExample, TuneStepRequest, PROTOCOL_VERSION};
use crate::tensor::{b64_decode, Matrix};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("iters must be at least 1")]
    ZeroIterations,
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("NONFINITE_LOSS at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        /// Last good checkpoint.
        checkpoint: Box<ShotPrefixTable>,
    },
    #[error("gradient shape does not match the table: {0}")]
    GradientShape(String),
    #[error("backend error in {call_id}: {source}")]
    Backend {
        call_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Prefix(#[from] PrefixError),
}

/// Loss and per-entry gradient (vocab order, entry dims).
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Vec<Matrix>,
}

pub trait TuneObjective {
    fn evaluate(&mut self, table: &ShotPrefixTable, batch: &[&ShotPair]) -> Result<Evaluation, TuneError>;
}

/// `loss(E) = sum_k ||E_k - T_k||^2` against a fixed target table.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    target: ShotPrefixTable,
}

impl QuadraticObjective {
    pub fn new(target: ShotPrefixTable) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &ShotPrefixTable {
        &self.target
    }

    pub fn loss(&self, table: &ShotPrefixTable) -> f64 {
        table
            .entries()
            .iter()
            .zip(self.target.entries())
            .flat_map(|(e, t)| e.as_slice().iter().zip(t.as_slice()))
            .map(|(&e, &t)| (e as f64 - t as f64).powi(2))
            .sum()
    }
}

impl TuneObjective for QuadraticObjective {
    fn evaluate(&mut self, table: &ShotPrefixTable, _batch: &[&ShotPair]) -> Result<Evaluation, TuneError> {
        if table.dims() != self.target.dims() || table.entries().len() != self.target.entries().len() {
            return Err(TuneError::GradientShape("target table differs from tuned table".into()));
        }
        let gradient = table
            .entries()
            .iter()
            .zip(self.target.entries())
            .map(|(e, t)| {
                let g = e
                    .as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .map(|(&e, &t)| (2.0 * (e as f64 - t as f64)) as f32)
                    .collect();
                Matrix::from_vec(e.rows(), e.cols(), g).expect("same shape")
            })
            .collect();
        Ok(Evaluation {
            loss: self.loss(table),
            gradient,
        })
    }
}

/// Delegates loss and gradient to a backend's `tune_step`. Only the entries
/// of labels present in the batch are sent; the rest get zero gradient.
pub struct BackendObjective {
    handle: BackendHandle,
    seed: u64,
}

impl BackendObjective {
    pub fn new(handle: BackendHandle, seed: u64) -> Self {
        Self { handle, seed }
    }
}

impl TuneObjective for BackendObjective {
    fn evaluate(&mut self, table: &ShotPrefixTable, batch: &[&ShotPair]) -> Result<Evaluation, TuneError> {
        let mut labels: Vec<usize> = batch
            .iter()
            .filter_map(|p| table.vocab().index_of(&p.shot_label))
            .collect();
        labels.sort_unstable();
        labels.dedup();
        let dims = table.dims();
        let req = TuneStepRequest {
            protocol_version: PROTOCOL_VERSION,
            entries: labels
                .iter()
                .map(|&i| PrefixEntryPayload {
                    label: table.vocab().labels()[i].to_string(),
                    n: dims.n,
                    d: dims.d,
                    values_b64: table.entries()[i].to_b64(),
                })
                .collect(),
            batch: batch
                .iter()
                .map(|p| TuneExample {
                    label: p.shot_label.to_string(),
                    caption: p.caption.clone(),
                    reference_sha256: p.reference_frame.sha256.clone(),
                    target_sha256: p.target_frame.sha256.clone(),
                })
                .collect(),
            seed: self.seed,
        };
        let id = call_id(Capability::TuneStep, &req);
        let resp = self
            .handle
            .call(Capability::TuneStep, |b| b.tune_step(&req))
            .map_err(|source| TuneError::Backend {
                call_id: id.clone(),
                source,
            })?;
        let mut gradient = vec![Matrix::zeros(dims.n, dims.d); table.entries().len()];
        for g in resp.gradients {
            let shot = table
                .vocab()
                .parse(&g.label)
                .map_err(|_| TuneError::GradientShape(format!("unknown label {}", g.label)))?;
            let i = table.vocab().index_of(&shot).expect("parsed from vocab");
            if g.n != dims.n || g.d != dims.d {
                return Err(TuneError::GradientShape(format!("{} is {}x{}", g.label, g.n, g.d)));
            }
            let raw = b64_decode(&g.values_b64).map_err(|e| TuneError::GradientShape(e.to_string()))?;
            gradient[i] =
                Matrix::from_le_bytes(dims.n, dims.d, &raw).map_err(|e| TuneError::GradientShape(e.to_string()))?;
        }
        Ok(Evaluation {
            loss: resp.loss,
            gradient,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

#[derive(Clone, Debug)]
pub struct TuneParams {
    pub iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Checkpoint interval C in iterations.
    pub checkpoint_every: usize,
    /// Where checkpoints are written, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TuneParams {
    fn default() -> Self {
        Self {
            iters: 4000,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::default(),
            checkpoint_every: 500,
            checkpoint_path: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub table: ShotPrefixTable,
    /// Loss evaluated before each update, one per iteration.
    pub losses: Vec<f64>,
    /// Loss of the returned table on the last batch.
    pub final_loss: f64,
    pub checkpoints: usize,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

/// Hex SHA-256 over the dataset's JSON lines.
pub fn dataset_digest(dataset: &[ShotPair]) -> String {
    let mut h = Sha256::new();
    for p in dataset {
        h.update(serde_json::to_vec(p).unwrap_or_default());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Runs `params.iters` optimizer steps over seeded minibatches of `dataset`.
pub fn tune(
    table: &ShotPrefixTable,
    dataset: &[ShotPair],
    objective: &mut dyn TuneObjective,
    params: &TuneParams,
) -> Result<TuneOutcome, TuneError> {
    if dataset.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    if params.iters == 0 {
        return Err(TuneError::ZeroIterations);
    }
    if params.batch_size == 0 {
        return Err(TuneError::ZeroBatch);
    }

    let mut table = table.clone();
    let sizes: Vec<usize> = table.entries().iter().map(|m| m.as_slice().len()).collect();
    let mut adam = AdamState {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut checkpoint = table.clone();
    let mut checkpoints = 0;
    let mut losses = Vec::with_capacity(params.iters);
    let mut batch: Vec<&ShotPair> = Vec::with_capacity(params.batch_size);

    for it in 0..params.iters {
        batch.clear();
        for _ in 0..params.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }

        let eval = objective.evaluate(&table, &batch)?;
        if !eval.loss.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
            return Err(TuneError::NonFiniteLoss {
                iteration: it,
                checkpoint: Box::new(checkpoint),
            });
        }
        if eval.gradient.len() != sizes.len()
            || eval.gradient.iter().zip(&sizes).any(|(g, &n)| g.as_slice().len() != n)
        {
            return Err(TuneError::GradientShape("gradient entry count or size differs".into()));
        }
        losses.push(eval.loss);
        apply_step(&mut table, &eval.gradient, &params.optimizer, &mut adam);

        if params.checkpoint_every > 0 && (it + 1) % params.checkpoint_every == 0 {
            checkpoint = table.clone();
            checkpoints += 1;
            if let Some(path) = &params.checkpoint_path {
                save_table(&checkpoint, path)?;
            }
        }
    }

    let final_loss = objective.evaluate(&table, &batch)?.loss;
    table.training_meta.iterations += params.iters as u64;
    table.training_meta.dataset_digest = Some(dataset_digest(dataset));
    Ok(TuneOutcome {
        table,
        losses,
        final_loss,
        checkpoints,
    })
}

fn apply_step(table: &mut ShotPrefixTable, gradient: &[Matrix], opt: &Optimizer, state: &mut AdamState) {
    match *opt {
        Optimizer::Sgd { lr } => {
            for (e, g) in table.entries_mut().iter_mut().zip(gradient) {
                for (p, &g) in e.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *p = (*p as f64 - lr * g as f64) as f32;
                }
            }
        }
        Optimizer::Adam { lr, beta1, beta2, eps } => {
            state.step += 1;
            let c1 = 1.0 - beta1.powi(state.step);
            let c2 = 1.0 - beta2.powi(state.step);
            for (k, (e, g)) in table.entries_mut().iter_mut().zip(gradient).enumerate() {
                let (m, v) = (&mut state.m[k], &mut state.v[k]);
                for (i, (p, &g)) in e.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                    let g = g as f64;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    *p = (*p as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
                }
            }
        }
    }
}
