//! The training loop: task loss plus the auxiliary gate losses, SGD/Adam
//! on the adapter parameters, queue maintenance, and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{GatingNetwork, LayerConfig, LoraExpert, MoeLoraLayer};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::harness::{
    Batch, HarnessError, Optimizer, OptimizerKind, SyntheticTask, TaskConfig, ToyModel,
};
use crate::losses::{
    auxiliary_loss, expert_separation_score, experts_contrastive_loss, load_balance_loss,
    update_queues, AuxLossConfig, ExpertQueue,
};
use crate::numerics::{SeededRng, Tape, Tensor2D, VarId};
use crate::scalar::{cast, Scalar};
use crate::tracer::{summarize, RoutingRecord, RoutingSummary};

/// Everything one training run needs, JSON-loadable with unknown keys
/// rejected. Field defaults follow the reference mixture configuration
/// (8 experts of rank 4, top-2 routing, tau 0.07, alpha = beta = 0.01)
/// at desk scale (d = 32, two adapted layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub d: usize,
    pub n_layers: usize,
    /// Frozen-base entry scale relative to fan-in std; 0 gives a null
    /// backbone so the adapters carry the whole map.
    pub base_scale: f64,
    pub n_experts: usize,
    pub lora_rank: usize,
    pub top_k: usize,
    pub dropout_p: f64,
    pub scaling: f64,
    pub renormalize_topk: bool,
    pub normalize_embeddings: bool,
    pub balance_count_topk: bool,
    pub aux: AuxLossConfig,
    pub task: TaskConfig,
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 200,
            batch_size: 32,
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            d: 32,
            n_layers: 2,
            base_scale: 1.0,
            n_experts: 8,
            lora_rank: 4,
            top_k: 2,
            dropout_p: 0.0,
            scaling: 1.0,
            renormalize_topk: true,
            normalize_embeddings: true,
            balance_count_topk: false,
            aux: AuxLossConfig::default(),
            task: TaskConfig::default(),
            eval_batches: 8,
        }
    }
}

impl TrainConfig {
    /// Reads a config from a JSON file. Unknown keys fail the load.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let body = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: TrainConfig = serde_json::from_str(&body).map_err(|e| HarnessError::Config {
            message: format!("{}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |message: String| Err(HarnessError::Config { message });
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".to_string());
        }
        if self.d == 0 || self.n_layers == 0 || self.n_experts == 0 || self.lora_rank == 0 {
            return bad(format!(
                "d={}, n_layers={}, n_experts={}, lora_rank={} must all be >= 1",
                self.d, self.n_layers, self.n_experts, self.lora_rank
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "top_k={} must be in 1..={}",
                self.top_k, self.n_experts
            ));
        }
        if !self.base_scale.is_finite() || self.base_scale < 0.0 {
            return bad(format!(
                "base_scale={} must be finite and >= 0",
                self.base_scale
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!(
                "learning_rate={} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p={} must be in [0, 1)", self.dropout_p));
        }
        if !self.scaling.is_finite() {
            return bad(format!("scaling={} must be finite", self.scaling));
        }
        if self.aux.tau <= 0.0 || !self.aux.tau.is_finite() {
            return bad(format!("tau={} must be positive", self.aux.tau));
        }
        if self.aux.alpha < 0.0 || self.aux.beta < 0.0 {
            return bad(format!(
                "alpha={} and beta={} must be >= 0",
                self.aux.alpha, self.aux.beta
            ));
        }
        if self.task.n_clusters == 0 {
            return bad("task.n_clusters must be >= 1".to_string());
        }
        if self.eval_batches == 0 {
            return bad("eval_batches must be >= 1".to_string());
        }
        Ok(())
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            d: self.d,
            n_experts: self.n_experts,
            lora_rank: self.lora_rank,
            top_k: self.top_k,
            dropout_p: self.dropout_p,
            scaling: self.scaling,
            renormalize_topk: self.renormalize_topk,
        }
    }
}

/// Loss values of one step, before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub task_loss: f64,
    /// Load-balance loss summed over gated layers (unweighted).
    pub balance_loss: f64,
    /// Contrastive loss summed over gated layers (unweighted).
    pub contrastive_loss: f64,
    /// task + alpha * balance + beta * contrastive.
    pub total_loss: f64,
}

/// Result of a full training run.
pub struct TrainingRun<F> {
    pub config: TrainConfig,
    pub model: ToyModel<F>,
    pub task: SyntheticTask<F>,
    pub reports: Vec<StepReport>,
    /// Queues as they stood after the last step.
    pub queues: Vec<Vec<ExpertQueue<F>>>,
    /// Evaluation on fresh batches after training.
    pub final_eval: EvalReport,
}

/// Aggregated evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mean_task_loss: f64,
    pub summary: RoutingSummary,
    pub records: Vec<RoutingRecord>,
}

// Fork labels for the per-run random streams.
const FORK_TASK: u64 = 0;
const FORK_MODEL: u64 = 1;
const FORK_DATA: u64 = 2;
const FORK_DROPOUT: u64 = 3;
const FORK_EVAL: u64 = 4;

/// The task a config's training run draws, reproducible from the config
/// alone (used to evaluate checkpoints on their original data).
pub fn task_for<F: Scalar>(cfg: &TrainConfig) -> Result<SyntheticTask<F>, HarnessError> {
    SyntheticTask::generate(
        cfg.d,
        &cfg.task,
        &mut SeededRng::new(cfg.seed).fork(FORK_TASK),
    )
}

/// Trains a fresh model on a fresh task drawn from `cfg.seed`, then
/// evaluates it. Bit-identical for identical configs.
pub fn run_training<F: Scalar>(cfg: &TrainConfig) -> Result<TrainingRun<F>, HarnessError> {
    cfg.validate()?;
    let mut root = SeededRng::new(cfg.seed);
    root.fork(FORK_TASK);
    let task = task_for(cfg)?;
    let mut model = ToyModel::init(
        &cfg.layer_config(),
        cfg.n_layers,
        cfg.base_scale,
        &mut root.fork(FORK_MODEL),
    )?;
    let mut data_rng = root.fork(FORK_DATA);
    let mut dropout_rng = root.fork(FORK_DROPOUT);
    let eval_seed = root.fork(FORK_EVAL).seed();

    let mut queues: Vec<Vec<ExpertQueue<F>>> = (0..cfg.n_layers)
        .map(|_| {
            (0..cfg.n_experts)
                .map(|_| ExpertQueue::new(cfg.aux.queue_capacity))
                .collect()
        })
        .collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);

    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = task.generate_batch(cfg.batch_size, &mut data_rng);
        let report = train_step(
            &mut model,
            &mut optimizer,
            &mut queues,
            &batch,
            cfg,
            step,
            &mut dropout_rng,
        )?;
        reports.push(report);
    }

    let final_eval = evaluate(&model, &task, cfg.eval_batches, cfg.batch_size, eval_seed)?;
    Ok(TrainingRun {
        config: cfg.clone(),
        model,
        task,
        reports,
        queues,
        final_eval,
    })
}

/// One optimization step. Auxiliary losses see the queues as they were
/// before the batch; the current expert outputs are pushed afterwards.
fn train_step<F: Scalar>(
    model: &mut ToyModel<F>,
    optimizer: &mut Optimizer<F>,
    queues: &mut [Vec<ExpertQueue<F>>],
    batch: &Batch<F>,
    cfg: &TrainConfig,
    step: usize,
    dropout_rng: &mut SeededRng,
) -> Result<StepReport, HarnessError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());

    let fwd = model.forward(&mut tape, &vars, x, dropout_rng, true)?;
    let task_loss = mse(&mut tape, fwd.output, y)?;

    let mut total = task_loss;
    let mut balance_sum = 0.0;
    let mut contrastive_sum = 0.0;
    for (li, lf) in fwd.layers.iter().enumerate() {
        let Some(probs) = lf.gate_probs else { continue };
        let balance = load_balance_loss(&mut tape, probs, &lf.dispatch, cfg.balance_count_topk)?;
        let contrastive = experts_contrastive_loss(
            &mut tape,
            &lf.expert_outputs,
            &queues[li],
            cfg.aux.tau,
            cfg.normalize_embeddings,
        )?;
        balance_sum += scalar(&tape, balance)?;
        contrastive_sum += scalar(&tape, contrastive)?;
        let aux = auxiliary_loss(&mut tape, balance, contrastive, &cfg.aux)?;
        total = tape.add(total, aux)?;
    }

    let report = StepReport {
        step,
        task_loss: scalar(&tape, task_loss)?,
        balance_loss: balance_sum,
        contrastive_loss: contrastive_sum,
        total_loss: scalar(&tape, total)?,
    };
    if !report.total_loss.is_finite() {
        return Err(HarnessError::NonFiniteLoss { step });
    }

    // Detach the expert outputs now; backward consumes the tape.
    let captured: Vec<Vec<Option<Tensor2D<F>>>> = fwd
        .layers
        .iter()
        .map(|lf| {
            lf.expert_outputs
                .iter()
                .map(|o| o.map(|id| tape.value(id).clone()))
                .collect()
        })
        .collect();

    let param_ids = vars.param_ids();
    let mut grads = tape.backward(total)?;
    let grad_list: Vec<Option<Tensor2D<F>>> = param_ids.iter().map(|&id| grads.take(id)).collect();
    optimizer.step(model.params_mut(), &grad_list);

    for (li, outputs) in captured.iter().enumerate() {
        update_queues(&mut queues[li], outputs)?;
    }
    Ok(report)
}

/// Mean squared error between a prediction and a constant target.
fn mse<F: Scalar>(tape: &mut Tape<F>, pred: VarId, target: VarId) -> Result<VarId, HarnessError> {
    let neg = tape.scalar_mul(target, cast::<F>(-1.0))?;
    let diff = tape.add(pred, neg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq)?)
}

fn scalar<F: Scalar>(tape: &Tape<F>, id: VarId) -> Result<f64, HarnessError> {
    let v = tape.value(id).scalar_value()?;
    Ok(v.to_f64().expect("scalar converts to f64"))
}

/// Runs the model over fresh batches without updates: dropout off, queues
/// untouched. Produces the mean task loss, the routing summary (with
/// expert separation when computable), and the raw routing records.
pub fn evaluate<F: Scalar>(
    model: &ToyModel<F>,
    task: &SyntheticTask<F>,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    if batches == 0 || batch_size == 0 {
        return Err(HarnessError::Config {
            message: "evaluation needs batches >= 1 and batch_size >= 1".to_string(),
        });
    }
    let mut root = SeededRng::new(seed);
    let mut data_rng = root.fork(FORK_DATA);
    let mut unused_dropout = root.fork(FORK_DROPOUT);

    let mut loss_sum = 0.0;
    let mut records = Vec::new();
    let d = model.d();
    let last = model.n_layers() - 1;
    let mut last_layer_rows: Vec<Vec<Vec<F>>> = vec![Vec::new(); model.layers()[last].n_experts()];

    for b in 0..batches {
        let batch = task.generate_batch(batch_size, &mut data_rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(batch.x.clone());
        let y = tape.constant(batch.y.clone());
        let fwd = model.forward(&mut tape, &vars, x, &mut unused_dropout, false)?;
        let loss = mse(&mut tape, fwd.output, y)?;
        loss_sum += scalar(&tape, loss)?;

        for (li, lf) in fwd.layers.iter().enumerate() {
            let dense = &lf.dispatch.gate_probs;
            for t in 0..batch_size {
                records.push(RoutingRecord {
                    step: b,
                    layer: li,
                    token: t,
                    token_type: batch.label(t),
                    gate_probs: dense
                        .row(t)
                        .iter()
                        .map(|p| p.to_f64().expect("scalar converts to f64"))
                        .collect(),
                    selected: lf.dispatch.selected[t].clone(),
                });
            }
            if li == last {
                for (e, out) in lf.expert_outputs.iter().enumerate() {
                    if let Some(id) = out {
                        let v = tape.value(*id);
                        for r in 0..v.rows() {
                            last_layer_rows[e].push(v.row(r).to_vec());
                        }
                    }
                }
            }
        }
    }

    let mut summary = summarize(&records).map_err(|e| HarnessError::Config {
        message: format!("evaluation produced unusable routing records: {e}"),
    })?;
    let pooled: Vec<Tensor2D<F>> = last_layer_rows
        .into_iter()
        .map(|rows| {
            if rows.is_empty() {
                Tensor2D::zeros(0, d)
            } else {
                Tensor2D::from_rows(&rows).expect("expert rows share the model width")
            }
        })
        .collect();
    if let Ok(sep) = expert_separation_score(&pooled) {
        summary = summary.with_separation(sep);
    }

    Ok(EvalReport {
        mean_task_loss: loss_sum / batches as f64,
        summary,
        records,
    })
}

/// Writes step reports as JSON lines.
pub fn write_reports(path: &Path, reports: &[StepReport]) -> Result<(), HarnessError> {
    let mut body = String::new();
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| HarnessError::Config {
            message: e.to_string(),
        })?;
        body.push_str(&line);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Checkpoints the run's config and every model tensor under `dir`.
pub fn save_run<F: Scalar>(
    dir: &Path,
    cfg: &TrainConfig,
    model: &ToyModel<F>,
) -> Result<(), HarnessError> {
    let named: Vec<(String, &Tensor2D<F>)> = model.named_tensors();
    Ok(save_checkpoint(dir, cfg, &named)?)
}

/// Rebuilds a model (and its config) from a checkpoint directory.
pub fn load_run<F: Scalar>(dir: &Path) -> Result<(TrainConfig, ToyModel<F>), HarnessError> {
    let (cfg, tensors): (TrainConfig, Vec<(String, Tensor2D<F>)>) = load_checkpoint(dir)?;
    cfg.validate()?;
    let mut by_name: BTreeMap<String, Tensor2D<F>> = tensors.into_iter().collect();
    let mut take = |name: String| {
        by_name.remove(&name).ok_or_else(|| {
            HarnessError::Checkpoint(CheckpointError::Format {
                message: format!("missing tensor {name}"),
            })
        })
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let base = take(format!("layer{i}.base"))?;
        let gate = if cfg.n_experts > 1 {
            Some(GatingNetwork::from_weights(take(format!("layer{i}.gate"))?))
        } else {
            None
        };
        let mut experts = Vec::with_capacity(cfg.n_experts);
        for j in 0..cfg.n_experts {
            let a = take(format!("layer{i}.expert{j}.a"))?;
            let b = take(format!("layer{i}.expert{j}.b"))?;
            experts.push(LoraExpert::from_parts(a, b, cfg.dropout_p, cfg.scaling)?);
        }
        layers.push(MoeLoraLayer::from_parts(
            base,
            gate,
            experts,
            cfg.top_k,
            cfg.renormalize_topk,
        )?);
    }
    Ok((cfg, ToyModel::from_layers(layers)?))
}
