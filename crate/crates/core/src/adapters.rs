//! LoRA experts, gating, and the mixture layer.
//!
//! A [`MoeLoraLayer`] computes
//!
//! ```text
//! y = x W_base + sum_i w_i(x) * scaling * (dropout(x) A_i B_i)
//! ```
//!
//! where `W_base` is frozen, each expert `(A_i, B_i)` is a rank-`r` adapter
//! pair, and the per-token weights `w_i(x)` come from a softmax gate
//! sparsified to the `top_k` largest entries. Gradients flow into the gate
//! through the retained softmax probabilities; the top-k *selection* itself
//! is a non-differentiable mask frozen at its forward value.
//!
//! With one expert the layer degrades to plain LoRA: no gate, no gate
//! parameters, every token routed to the single expert with weight 1.

use std::cmp::Ordering;
use std::error::Error;
use std::fmt;

use crate::numerics::{NumericsError, SeededRng, Tape, Tensor2D, VarId};
use crate::scalar::{cast, Scalar};

/// Standard deviation for the Gaussian init of `A` matrices and gate weights.
/// `B` starts at zero so a freshly initialized layer is exactly the base map.
pub const INIT_STD: f64 = 0.02;

/// Errors raised when building or running adapter layers.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterError {
    /// `top_k` must satisfy `1 <= top_k <= n_experts`.
    TopKOutOfRange {
        top_k: usize,
        n_experts: usize,
    },
    /// A layer needs at least one expert.
    NoExperts,
    /// Input width does not match the layer dimension.
    WrongInputWidth {
        expected: usize,
        got: usize,
    },
    /// `A` is `d x r` and `B` is `r x d`; the given pair disagrees.
    BadExpertShapes {
        a: (usize, usize),
        b: (usize, usize),
    },
    /// The frozen base must be `d x d` for dimension `d`.
    BadBaseShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Gate weights must be `d x n_experts`.
    BadGateShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Experts within one layer must share `d` and `r`.
    MixedExpertShapes,
    Numerics(NumericsError),
}

impl fmt::Display for AdapterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterError::TopKOutOfRange { top_k, n_experts } => {
                write!(f, "top_k {top_k} not in 1..={n_experts}")
            }
            AdapterError::NoExperts => write!(f, "layer needs at least one expert"),
            AdapterError::WrongInputWidth { expected, got } => {
                write!(
                    f,
                    "input width {got} does not match layer dimension {expected}"
                )
            }
            AdapterError::BadExpertShapes { a, b } => write!(
                f,
                "expert matrices {}x{} and {}x{} do not form a d x r, r x d pair",
                a.0, a.1, b.0, b.1
            ),
            AdapterError::BadBaseShape { expected, got } => write!(
                f,
                "base weight is {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            AdapterError::BadGateShape { expected, got } => write!(
                f,
                "gate weight is {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            AdapterError::MixedExpertShapes => {
                write!(f, "experts within a layer must share dimensions")
            }
            AdapterError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl Error for AdapterError {}

impl From<NumericsError> for AdapterError {
    fn from(e: NumericsError) -> Self {
        AdapterError::Numerics(e)
    }
}

/// One low-rank adapter: `A` is `d x r`, `B` is `r x d`.
#[derive(Clone, Debug)]
pub struct LoraExpert<F> {
    a: Tensor2D<F>,
    b: Tensor2D<F>,
    dropout_p: f64,
    scaling: F,
}

/// Tape handles for one expert's trainable matrices.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub a: VarId,
    pub b: VarId,
}

impl<F: Scalar> LoraExpert<F> {
    /// Fresh expert: `A ~ N(0, INIT_STD^2)`, `B = 0`, so the adapter output
    /// is exactly zero until training moves `B`.
    pub fn init(d: usize, rank: usize, dropout_p: f64, scaling: f64, rng: &mut SeededRng) -> Self {
        LoraExpert {
            a: rng.normal_tensor(d, rank, INIT_STD),
            b: Tensor2D::zeros(rank, d),
            dropout_p,
            scaling: cast(scaling),
        }
    }

    /// Rebuilds an expert from existing matrices (e.g. a checkpoint).
    pub fn from_parts(
        a: Tensor2D<F>,
        b: Tensor2D<F>,
        dropout_p: f64,
        scaling: f64,
    ) -> Result<Self, AdapterError> {
        if a.cols() != b.rows() || a.rows() != b.cols() {
            return Err(AdapterError::BadExpertShapes {
                a: a.shape(),
                b: b.shape(),
            });
        }
        Ok(LoraExpert {
            a,
            b,
            dropout_p,
            scaling: cast(scaling),
        })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn a(&self) -> &Tensor2D<F> {
        &self.a
    }

    pub fn b(&self) -> &Tensor2D<F> {
        &self.b
    }

    pub fn scaling(&self) -> F {
        self.scaling
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    /// Registers `A` and `B` on the tape as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<F>) -> ExpertVars {
        ExpertVars {
            a: tape.var(self.a.clone()),
            b: tape.var(self.b.clone()),
        }
    }

    /// `scaling * (dropout(x) A B)` for any number of input rows.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: &ExpertVars,
        x: VarId,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<VarId, AdapterError> {
        if tape.value(x).cols() != self.dim() {
            return Err(AdapterError::WrongInputWidth {
                expected: self.dim(),
                got: tape.value(x).cols(),
            });
        }
        let dropped = tape.dropout(x, self.dropout_p, rng, training)?;
        let xa = tape.matmul(dropped, vars.a)?;
        let xab = tape.matmul(xa, vars.b)?;
        Ok(tape.scalar_mul(xab, self.scaling)?)
    }
}

/// Linear softmax gate with no bias: `G(x) = softmax(x W_g)`.
#[derive(Clone, Debug)]
pub struct GatingNetwork<F> {
    wg: Tensor2D<F>,
}

impl<F: Scalar> GatingNetwork<F> {
    pub fn init(d: usize, n_experts: usize, rng: &mut SeededRng) -> Self {
        GatingNetwork {
            wg: rng.normal_tensor(d, n_experts, INIT_STD),
        }
    }

    pub fn from_weights(wg: Tensor2D<F>) -> Self {
        GatingNetwork { wg }
    }

    pub fn weights(&self) -> &Tensor2D<F> {
        &self.wg
    }

    pub fn dim(&self) -> usize {
        self.wg.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.wg.cols()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> VarId {
        tape.var(self.wg.clone())
    }

    /// Per-token routing probabilities, one row per token, rows sum to 1.
    pub fn forward(&self, tape: &mut Tape<F>, wg: VarId, x: VarId) -> Result<VarId, AdapterError> {
        if tape.value(x).cols() != self.dim() {
            return Err(AdapterError::WrongInputWidth {
                expected: self.dim(),
                got: tape.value(x).cols(),
            });
        }
        let logits = tape.matmul(x, wg)?;
        Ok(tape.softmax_rows(logits)?)
    }
}

/// Routing decision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchResult<F> {
    /// Dense softmax output, `T x n`.
    pub gate_probs: Tensor2D<F>,
    /// For each token, its `top_k` experts in descending probability order
    /// (ties broken toward the lower index).
    pub selected: Vec<Vec<usize>>,
    /// Dense `T x n` combination weights: zero outside the selection,
    /// renormalized to sum to 1 per token when requested.
    pub sparse_weights: Tensor2D<F>,
    /// For each expert, the tokens routed to it, in ascending token order.
    pub per_expert_tokens: Vec<Vec<usize>>,
}

impl<F: Scalar> DispatchResult<F> {
    /// Routing where a single expert takes every token with weight 1.
    fn single_expert(tokens: usize) -> Self {
        DispatchResult {
            gate_probs: Tensor2D::filled(tokens, 1, F::one()),
            selected: vec![vec![0]; tokens],
            sparse_weights: Tensor2D::filled(tokens, 1, F::one()),
            per_expert_tokens: vec![(0..tokens).collect()],
        }
    }

    /// Total number of (token, expert) assignments; equals `T * top_k`.
    pub fn assignment_count(&self) -> usize {
        self.per_expert_tokens.iter().map(Vec::len).sum()
    }
}

/// Selects each token's `top_k` experts from dense gate probabilities.
///
/// Retained weights are renormalized to sum to 1 per token when
/// `renormalize` is set; with `top_k == n` that renormalization is the
/// identity and the weights equal the gate probabilities bit for bit.
pub fn dispatch<F: Scalar>(
    gate_probs: &Tensor2D<F>,
    top_k: usize,
    renormalize: bool,
) -> Result<DispatchResult<F>, AdapterError> {
    let (tokens, n) = gate_probs.shape();
    if top_k == 0 || top_k > n {
        return Err(AdapterError::TopKOutOfRange {
            top_k,
            n_experts: n,
        });
    }
    let mut selected = Vec::with_capacity(tokens);
    let mut sparse = Tensor2D::zeros(tokens, n);
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];

    for t in 0..tokens {
        let probs = gate_probs.row(t);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            probs[j]
                .partial_cmp(&probs[i])
                .unwrap_or(Ordering::Equal)
                .then(i.cmp(&j))
        });
        let chosen = &order[..top_k];

        let mut keep = vec![false; n];
        for &i in chosen {
            keep[i] = true;
        }
        // Denominator summed in ascending expert order so it matches the
        // masked row sum the differentiable path computes.
        let mut denom = F::zero();
        for j in 0..n {
            if keep[j] {
                denom += probs[j];
            }
        }
        for j in 0..n {
            if !keep[j] {
                continue;
            }
            let w = if !renormalize || top_k == n {
                probs[j]
            } else {
                probs[j] / denom
            };
            sparse.set(t, j, w);
            per_expert[j].push(t);
        }
        selected.push(chosen.to_vec());
    }

    Ok(DispatchResult {
        gate_probs: gate_probs.clone(),
        selected,
        sparse_weights: sparse,
        per_expert_tokens: per_expert,
    })
}

/// Shape and behavior of one mixture layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerConfig {
    pub d: usize,
    pub n_experts: usize,
    pub lora_rank: usize,
    pub top_k: usize,
    pub dropout_p: f64,
    pub scaling: f64,
    /// Renormalize the retained top-k weights to sum to 1 per token.
    pub renormalize_topk: bool,
}

/// A frozen base projection plus gated LoRA experts.
#[derive(Clone, Debug)]
pub struct MoeLoraLayer<F> {
    base: Tensor2D<F>,
    gate: Option<GatingNetwork<F>>,
    experts: Vec<LoraExpert<F>>,
    top_k: usize,
    renormalize_topk: bool,
}

/// Tape handles for one layer's tensors. The base is a constant and never
/// receives a gradient; everything else is trainable.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub base: VarId,
    pub gate: Option<VarId>,
    pub experts: Vec<ExpertVars>,
}

impl LayerVars {
    /// Trainable handles in the layer's canonical parameter order:
    /// gate first (when present), then each expert's `A` and `B`.
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        if let Some(g) = self.gate {
            ids.push(g);
        }
        for e in &self.experts {
            ids.push(e.a);
            ids.push(e.b);
        }
        ids
    }
}

/// Everything the forward pass of one layer exposes to its callers.
#[derive(Debug)]
pub struct LayerForward<F> {
    /// Layer output, `T x d`.
    pub output: VarId,
    /// On-tape gate probabilities; absent for the ungated single-expert case.
    pub gate_probs: Option<VarId>,
    /// The routing decision used, with dense weights for inspection.
    pub dispatch: DispatchResult<F>,
    /// Per-expert adapter outputs (`t_i x d`, before gate weighting);
    /// `None` for experts that received no tokens.
    pub expert_outputs: Vec<Option<VarId>>,
}

impl<F: Scalar> MoeLoraLayer<F> {
    /// Initializes a layer around an existing frozen base weight.
    ///
    /// With `n_experts == 1` the layer is plain LoRA: no gate is created
    /// and `top_k` must be 1.
    pub fn init(
        base: Tensor2D<F>,
        cfg: &LayerConfig,
        rng: &mut SeededRng,
    ) -> Result<Self, AdapterError> {
        if cfg.n_experts == 0 {
            return Err(AdapterError::NoExperts);
        }
        if base.shape() != (cfg.d, cfg.d) {
            return Err(AdapterError::BadBaseShape {
                expected: (cfg.d, cfg.d),
                got: base.shape(),
            });
        }
        if cfg.top_k == 0 || cfg.top_k > cfg.n_experts {
            return Err(AdapterError::TopKOutOfRange {
                top_k: cfg.top_k,
                n_experts: cfg.n_experts,
            });
        }
        let gate = if cfg.n_experts > 1 {
            Some(GatingNetwork::init(cfg.d, cfg.n_experts, rng))
        } else {
            None
        };
        let experts = (0..cfg.n_experts)
            .map(|_| LoraExpert::init(cfg.d, cfg.lora_rank, cfg.dropout_p, cfg.scaling, rng))
            .collect();
        Ok(MoeLoraLayer {
            base,
            gate,
            experts,
            top_k: cfg.top_k,
            renormalize_topk: cfg.renormalize_topk,
        })
    }

    /// Rebuilds a layer from existing tensors (e.g. a checkpoint).
    pub fn from_parts(
        base: Tensor2D<F>,
        gate: Option<GatingNetwork<F>>,
        experts: Vec<LoraExpert<F>>,
        top_k: usize,
        renormalize_topk: bool,
    ) -> Result<Self, AdapterError> {
        let first = experts.first().ok_or(AdapterError::NoExperts)?;
        let d = first.dim();
        let rank = first.rank();
        if experts.iter().any(|e| e.dim() != d || e.rank() != rank) {
            return Err(AdapterError::MixedExpertShapes);
        }
        if base.shape() != (d, d) {
            return Err(AdapterError::BadBaseShape {
                expected: (d, d),
                got: base.shape(),
            });
        }
        if top_k == 0 || top_k > experts.len() {
            return Err(AdapterError::TopKOutOfRange {
                top_k,
                n_experts: experts.len(),
            });
        }
        if let Some(g) = &gate {
            if g.weights().shape() != (d, experts.len()) {
                return Err(AdapterError::BadGateShape {
                    expected: (d, experts.len()),
                    got: g.weights().shape(),
                });
            }
        }
        Ok(MoeLoraLayer {
            base,
            gate,
            experts,
            top_k,
            renormalize_topk,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn renormalize_topk(&self) -> bool {
        self.renormalize_topk
    }

    pub fn base(&self) -> &Tensor2D<F> {
        &self.base
    }

    pub fn gate(&self) -> Option<&GatingNetwork<F>> {
        self.gate.as_ref()
    }

    pub fn experts(&self) -> &[LoraExpert<F>] {
        &self.experts
    }

    /// Trainable tensors in canonical order; see [`LayerVars::param_ids`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor2D<F>> {
        let mut params: Vec<&mut Tensor2D<F>> = Vec::new();
        if let Some(g) = self.gate.as_mut() {
            params.push(&mut g.wg);
        }
        for e in &mut self.experts {
            params.push(&mut e.a);
            params.push(&mut e.b);
        }
        params
    }

    /// Number of trainable scalar parameters actually held by the layer.
    pub fn trainable_param_count(&self) -> u64 {
        let gate = self.gate.as_ref().map_or(0, |g| g.weights().len()) as u64;
        let experts: u64 = self
            .experts
            .iter()
            .map(|e| (e.a.len() + e.b.len()) as u64)
            .sum();
        gate + experts
    }

    /// Registers the layer on a tape: base as constant, the rest trainable.
    pub fn bind(&self, tape: &mut Tape<F>) -> LayerVars {
        LayerVars {
            base: tape.constant(self.base.clone()),
            gate: self.gate.as_ref().map(|g| g.bind(tape)),
            experts: self.experts.iter().map(|e| e.bind(tape)).collect(),
        }
    }

    /// Full forward pass: gate, dispatch, expert combination.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: &LayerVars,
        x: VarId,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<LayerForward<F>, AdapterError> {
        self.check_input(tape, x)?;
        match &self.gate {
            None => self.forward_single(tape, vars, x, rng, training),
            Some(gate) => {
                let gate_var = vars.gate.expect("gated layer binds gate weights");
                let probs = gate.forward(tape, gate_var, x)?;
                let disp = dispatch(tape.value(probs), self.top_k, self.renormalize_topk)?;
                self.combine(tape, vars, x, probs, disp, rng, training)
            }
        }
    }

    /// Forward pass with the routing decision pinned to `disp` instead of
    /// being recomputed from the current gate probabilities. Weights are
    /// still rebuilt on the tape from the live probabilities, so gradients
    /// flow through them; only the selection mask is frozen. This is what a
    /// finite-difference check needs: perturbing a parameter must not flip
    /// the mask mid-measurement.
    pub fn forward_with_dispatch(
        &self,
        tape: &mut Tape<F>,
        vars: &LayerVars,
        x: VarId,
        disp: &DispatchResult<F>,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<LayerForward<F>, AdapterError> {
        self.check_input(tape, x)?;
        match &self.gate {
            None => self.forward_single(tape, vars, x, rng, training),
            Some(gate) => {
                let gate_var = vars.gate.expect("gated layer binds gate weights");
                let probs = gate.forward(tape, gate_var, x)?;
                self.combine(tape, vars, x, probs, disp.clone(), rng, training)
            }
        }
    }

    fn check_input(&self, tape: &Tape<F>, x: VarId) -> Result<(), AdapterError> {
        let got = tape.value(x).cols();
        if got != self.dim() {
            return Err(AdapterError::WrongInputWidth {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    fn forward_single(
        &self,
        tape: &mut Tape<F>,
        vars: &LayerVars,
        x: VarId,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<LayerForward<F>, AdapterError> {
        let tokens = tape.value(x).rows();
        let base_out = tape.matmul(x, vars.base)?;
        let lora = self.experts[0].forward(tape, &vars.experts[0], x, rng, training)?;
        let output = tape.add(base_out, lora)?;
        Ok(LayerForward {
            output,
            gate_probs: None,
            dispatch: DispatchResult::single_expert(tokens),
            expert_outputs: vec![Some(lora)],
        })
    }

    /// Builds the gate-weighted expert sum on the tape.
    ///
    /// The combination weights are reconstructed from the live softmax
    /// probabilities: the selection mask zeroes the dropped entries and,
    /// when renormalization is on, each row is divided by its retained
    /// mass. For `top_k == n` the mask keeps everything and renormalizing
    /// a full softmax row is the identity, so the probabilities are used
    /// directly (same values, same gradient).
    #[allow(clippy::too_many_arguments)]
    fn combine(
        &self,
        tape: &mut Tape<F>,
        vars: &LayerVars,
        x: VarId,
        probs: VarId,
        disp: DispatchResult<F>,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<LayerForward<F>, AdapterError> {
        let tokens = tape.value(x).rows();
        let n = self.n_experts();

        let weights = if self.renormalize_topk && self.top_k == n {
            probs
        } else {
            let mut mask = Tensor2D::zeros(tokens, n);
            for (t, chosen) in disp.selected.iter().enumerate() {
                for &i in chosen {
                    mask.set(t, i, F::one());
                }
            }
            let mask = tape.constant(mask);
            let masked = tape.mul(probs, mask)?;
            if self.renormalize_topk {
                let denom = tape.row_sum(masked)?;
                tape.div_rows(masked, denom)?
            } else {
                masked
            }
        };

        let mut output = tape.matmul(x, vars.base)?;
        let mut expert_outputs: Vec<Option<VarId>> = vec![None; n];
        for (i, expert) in self.experts.iter().enumerate() {
            let routed = &disp.per_expert_tokens[i];
            if routed.is_empty() {
                continue;
            }
            let x_i = tape.gather_rows(x, routed)?;
            let lora = expert.forward(tape, &vars.experts[i], x_i, rng, training)?;
            expert_outputs[i] = Some(lora);

            let mut onehot = Tensor2D::zeros(n, 1);
            onehot.set(i, 0, F::one());
            let onehot = tape.constant(onehot);
            let col = tape.matmul(weights, onehot)?;
            let w_i = tape.gather_rows(col, routed)?;

            let weighted = tape.scale_rows(lora, w_i)?;
            let scattered = tape.scatter_rows(weighted, routed, tokens)?;
            output = tape.add(output, scattered)?;
        }

        Ok(LayerForward {
            output,
            gate_probs: Some(probs),
            dispatch: disp,
            expert_outputs,
        })
    }
}

/// Trainable parameters of a mixture configuration: each adapted matrix
/// carries `n` rank-`r` expert pairs (`2 d r` each) plus a `d x n` gate.
pub fn moelora_trainable_params(num_matrices: u64, d: u64, n_experts: u64, rank: u64) -> u64 {
    num_matrices * (n_experts * 2 * d * rank + d * n_experts)
}

/// Trainable parameters of plain LoRA (one expert, no gate) at rank `R`.
pub fn lora_trainable_params(num_matrices: u64, d: u64, rank: u64) -> u64 {
    num_matrices * 2 * d * rank
}
