//! Auxiliary losses that shape expert routing.
//!
//! Two terms are combined on top of the task loss:
//!
//! * **Load balancing.** With hard assignment fractions `f_i` (how often
//!   expert `i` wins the argmax) and mean gate probabilities `P_i`, the loss
//!   is `n * sum_i f_i * P_i`. It reaches its minimum of 1 under perfectly
//!   uniform routing and grows toward `n` as routing collapses onto one
//!   expert. `f` is a counting statistic and carries no gradient; the
//!   gradient flows through `P` alone.
//!
//! * **Expert contrastive.** Each expert keeps a fixed-capacity queue of its
//!   recent (detached, unit-normalized) outputs. The current outputs act as
//!   anchors: an anchor's positives are its own expert's queue entries, the
//!   denominator runs over every expert's queue entries, and each
//!   (anchor, positive) pair contributes an InfoNCE term at temperature
//!   `tau`. The total is averaged over the pair count. Queues are updated
//!   *after* the loss is computed, so an anchor never competes with itself.
//!
//! Anything with zero norm (the adapter outputs start at exactly zero) is
//! skipped both as an anchor and for queue insertion.

use std::collections::VecDeque;
use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::DispatchResult;
use crate::numerics::{NumericsError, Tape, Tensor2D, VarId};
use crate::scalar::{cast, Scalar};

/// Errors raised by loss computation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// A loss over an empty batch is undefined.
    EmptyBatch,
    /// The contrastive temperature must be positive.
    InvalidTemperature {
        tau: f64,
    },
    /// Outputs and queues must be indexed by the same experts.
    ExpertCountMismatch {
        outputs: usize,
        queues: usize,
    },
    /// Separation scores need at least one pair on the named side.
    InsufficientSamples {
        side: &'static str,
    },
    Numerics(NumericsError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::EmptyBatch => write!(f, "loss of an empty batch is undefined"),
            LossError::InvalidTemperature { tau } => {
                write!(f, "temperature {tau} must be positive")
            }
            LossError::ExpertCountMismatch { outputs, queues } => {
                write!(f, "{outputs} expert outputs do not match {queues} queues")
            }
            LossError::InsufficientSamples { side } => {
                write!(f, "not enough samples to form any {side}-expert pair")
            }
            LossError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl Error for LossError {}

impl From<NumericsError> for LossError {
    fn from(e: NumericsError) -> Self {
        LossError::Numerics(e)
    }
}

/// Weights and shared settings for the auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxLossConfig {
    /// Weight of the load-balancing term.
    pub alpha: f64,
    /// Weight of the contrastive term.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Per-expert queue capacity.
    pub queue_capacity: usize,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        AuxLossConfig {
            alpha: 0.01,
            beta: 0.01,
            tau: 0.07,
            queue_capacity: 256,
        }
    }
}

/// Fixed-capacity ring buffer of detached, unit-normalized expert outputs.
///
/// Pushing normalizes a copy of the row and evicts the oldest entry once
/// the capacity is reached. Zero-norm rows are skipped.
#[derive(Clone, Debug)]
pub struct ExpertQueue<F> {
    capacity: usize,
    entries: VecDeque<Vec<F>>,
}

impl<F: Scalar> ExpertQueue<F> {
    pub fn new(capacity: usize) -> Self {
        ExpertQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a normalized copy of `row`. Returns `false` when the row has
    /// zero norm and was skipped.
    pub fn push(&mut self, row: &[F]) -> bool {
        if let Some(front) = self.entries.front() {
            assert_eq!(
                front.len(),
                row.len(),
                "queue entries must share one embedding width"
            );
        }
        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
        if norm == F::zero() {
            return false;
        }
        if self.capacity == 0 {
            return false;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries
            .push_back(row.iter().map(|&x| x / norm).collect());
        true
    }

    /// Entries oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &[F]> {
        self.entries.iter().map(Vec::as_slice)
    }
}

/// Pushes each expert's current output rows into its queue.
///
/// Call this after the step's losses are computed: the contrastive loss
/// must see the queues as they were before the batch.
pub fn update_queues<F: Scalar>(
    queues: &mut [ExpertQueue<F>],
    outputs: &[Option<Tensor2D<F>>],
) -> Result<(), LossError> {
    if queues.len() != outputs.len() {
        return Err(LossError::ExpertCountMismatch {
            outputs: outputs.len(),
            queues: queues.len(),
        });
    }
    for (queue, out) in queues.iter_mut().zip(outputs) {
        if let Some(t) = out {
            for r in 0..t.rows() {
                queue.push(t.row(r));
            }
        }
    }
    Ok(())
}

/// Load-balancing loss `n * sum_i f_i * P_i` over one batch of gate
/// probabilities.
///
/// `f_i` counts hard assignments: by default the fraction of tokens whose
/// argmax is expert `i` (regardless of the dispatch `top_k`); with
/// `count_topk` set it is instead expert `i`'s share of the actual top-k
/// assignment slots. Either way `f` enters as a constant. `P_i` is the
/// column mean of the probabilities and is where the gradient flows.
pub fn load_balance_loss<F: Scalar>(
    tape: &mut Tape<F>,
    gate_probs: VarId,
    disp: &DispatchResult<F>,
    count_topk: bool,
) -> Result<VarId, LossError> {
    let v = tape.value(gate_probs);
    let (tokens, n) = v.shape();
    if tokens == 0 {
        return Err(LossError::EmptyBatch);
    }

    let mut f = Tensor2D::zeros(1, n);
    if count_topk {
        let total = disp.assignment_count();
        if total == 0 {
            return Err(LossError::EmptyBatch);
        }
        for (i, routed) in disp.per_expert_tokens.iter().enumerate() {
            f.set(0, i, cast(routed.len() as f64 / total as f64));
        }
    } else {
        for t in 0..tokens {
            let row = v.row(t);
            let mut arg = 0;
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > row[arg] {
                    arg = j;
                }
            }
            f.set(0, arg, f.get(0, arg) + F::one());
        }
        let count: F = cast(tokens as f64);
        for i in 0..n {
            f.set(0, i, f.get(0, i) / count);
        }
    }

    let f = tape.constant(f);
    let p = tape.mean_rows(gate_probs)?;
    let fp = tape.mul(p, f)?;
    let sum = tape.sum_all(fp)?;
    Ok(tape.scalar_mul(sum, cast(n as f64))?)
}

/// Queue-based contrastive loss over the current expert outputs.
///
/// For each expert `i` with current (anchor) outputs and a non-empty queue,
/// every (anchor, queue entry) pair contributes
/// `-log( exp(q.k+ / tau) / sum_k exp(q.k / tau) )` where the denominator
/// runs over **all** experts' queue entries. The result is the sum over
/// pairs divided by the number of pairs; with no pairs at all the loss is a
/// constant zero. Anchors are L2-normalized on the tape when
/// `normalize_embeddings` is set (zero-norm anchors are skipped either
/// way); queue entries are normalized at insertion and enter as constants.
pub fn experts_contrastive_loss<F: Scalar>(
    tape: &mut Tape<F>,
    current_outputs: &[Option<VarId>],
    queues: &[ExpertQueue<F>],
    tau: f64,
    normalize_embeddings: bool,
) -> Result<VarId, LossError> {
    if tau <= 0.0 {
        return Err(LossError::InvalidTemperature { tau });
    }
    if current_outputs.len() != queues.len() {
        return Err(LossError::ExpertCountMismatch {
            outputs: current_outputs.len(),
            queues: queues.len(),
        });
    }

    let total_keys: usize = queues.iter().map(ExpertQueue::len).sum();
    if total_keys == 0 {
        return Ok(tape_zero(tape));
    }
    let d = queues
        .iter()
        .flat_map(|q| q.entries().next())
        .map(<[F]>::len)
        .next()
        .expect("a non-empty queue has an entry");

    // All queue entries as one d x K constant (keys are matmul'd from the
    // right), plus each expert's summed queue for the positive term.
    let mut keys_t = Tensor2D::zeros(d, total_keys);
    let mut col = 0;
    let mut positive_sums: Vec<Option<Tensor2D<F>>> = Vec::with_capacity(queues.len());
    for queue in queues {
        if queue.is_empty() {
            positive_sums.push(None);
            continue;
        }
        let mut sum = Tensor2D::zeros(d, 1);
        for entry in queue.entries() {
            for (j, &x) in entry.iter().enumerate() {
                keys_t.set(j, col, x);
                sum.set(j, 0, sum.get(j, 0) + x);
            }
            col += 1;
        }
        positive_sums.push(Some(sum));
    }
    let keys_t = tape.constant(keys_t);

    let inv_tau = 1.0 / tau;
    let mut total: Option<VarId> = None;
    let mut pairs: u64 = 0;
    for (i, out) in current_outputs.iter().enumerate() {
        let Some(out) = out else { continue };
        let Some(pos_sum) = positive_sums[i].take() else {
            continue; // anchors without positives contribute nothing
        };
        let value = tape.value(*out);
        let valid: Vec<usize> = (0..value.rows())
            .filter(|&r| value.row(r).iter().any(|&x| x != F::zero()))
            .collect();
        if valid.is_empty() {
            continue;
        }
        let anchors = if valid.len() == value.rows() {
            *out
        } else {
            tape.gather_rows(*out, &valid)?
        };
        let anchors = if normalize_embeddings {
            tape.l2_normalize_rows(anchors)?
        } else {
            anchors
        };

        let logits = tape.matmul(anchors, keys_t)?;
        let logits = tape.scalar_mul(logits, cast(inv_tau))?;
        let lse = tape.logsumexp_rows(logits)?;
        let lse_sum = tape.sum_all(lse)?;
        // Each anchor pairs with all c_i positives, so its log-sum-exp
        // appears c_i times while the positive similarities sum directly.
        let lse_term = tape.scalar_mul(lse_sum, cast(queues[i].len() as f64))?;
        let pos_sum = tape.constant(pos_sum);
        let pos = tape.matmul(anchors, pos_sum)?;
        let pos_total = tape.sum_all(pos)?;
        let pos_term = tape.scalar_mul(pos_total, cast(-inv_tau))?;
        let contrib = tape.add(lse_term, pos_term)?;

        total = Some(match total {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
        pairs += (valid.len() * queues[i].len()) as u64;
    }

    match total {
        None => Ok(tape_zero(tape)),
        Some(acc) => Ok(tape.scalar_mul(acc, cast(1.0 / pairs as f64))?),
    }
}

fn tape_zero<F: Scalar>(tape: &mut Tape<F>) -> VarId {
    tape.constant(Tensor2D::scalar(F::zero()))
}

/// Weighted sum of the two auxiliary terms: `alpha * balance + beta *
/// contrastive`.
pub fn auxiliary_loss<F: Scalar>(
    tape: &mut Tape<F>,
    balance: VarId,
    contrastive: VarId,
    cfg: &AuxLossConfig,
) -> Result<VarId, LossError> {
    let a = tape.scalar_mul(balance, cast(cfg.alpha))?;
    let b = tape.scalar_mul(contrastive, cast(cfg.beta))?;
    Ok(tape.add(a, b)?)
}

/// Mean cosine distances within and across experts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    /// Mean cosine distance between outputs of the same expert.
    pub intra: f64,
    /// Mean cosine distance between outputs of different experts.
    pub inter: f64,
}

impl SeparationScore {
    /// `intra / inter`; lower means tighter clusters that sit further
    /// apart. Infinite when `inter` is zero but `intra` is not.
    pub fn ratio(&self) -> f64 {
        if self.inter == 0.0 && self.intra == 0.0 {
            0.0
        } else {
            self.intra / self.inter
        }
    }
}

/// Measures how separated the experts' output distributions are.
///
/// Zero-norm rows are dropped (cosine distance is undefined for them).
/// Needs at least one same-expert pair and one cross-expert pair; otherwise
/// the deficient side is reported.
pub fn expert_separation_score<F: Scalar>(
    outputs: &[Tensor2D<F>],
) -> Result<SeparationScore, LossError> {
    let groups: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|t| {
            (0..t.rows())
                .filter_map(|r| {
                    let row: Vec<f64> = t
                        .row(r)
                        .iter()
                        .map(|x| x.to_f64().expect("scalar converts to f64"))
                        .collect();
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        None
                    } else {
                        Some(row.iter().map(|x| x / norm).collect())
                    }
                })
                .collect()
        })
        .collect();

    let cosine_distance =
        |u: &[f64], v: &[f64]| -> f64 { 1.0 - u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() };

    let mut intra_sum = 0.0;
    let mut intra_pairs = 0u64;
    for group in &groups {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                intra_sum += cosine_distance(&group[i], &group[j]);
                intra_pairs += 1;
            }
        }
    }
    if intra_pairs == 0 {
        return Err(LossError::InsufficientSamples { side: "intra" });
    }

    let mut inter_sum = 0.0;
    let mut inter_pairs = 0u64;
    for gi in 0..groups.len() {
        for gj in gi + 1..groups.len() {
            for u in &groups[gi] {
                for v in &groups[gj] {
                    inter_sum += cosine_distance(u, v);
                    inter_pairs += 1;
                }
            }
        }
    }
    if inter_pairs == 0 {
        return Err(LossError::InsufficientSamples { side: "inter" });
    }

    Ok(SeparationScore {
        intra: intra_sum / intra_pairs as f64,
        inter: inter_sum / inter_pairs as f64,
    })
}
