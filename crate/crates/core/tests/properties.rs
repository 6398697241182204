//! Property tests for the routing, queue, and summary invariants that must
//! hold for every input, not just the handful a unit test picks.

use proptest::prelude::*;

use moelora::adapters::{
    dispatch, lora_trainable_params, moelora_trainable_params, LayerConfig, MoeLoraLayer,
};
use moelora::losses::{experts_contrastive_loss, ExpertQueue};
use moelora::numerics::{SeededRng, Tape, Tensor2D, VarId};
use moelora::tracer::{summarize, RoutingRecord};

/// Tokens, expert count, and per-row logits on a coarse grid. The grid keeps
/// distinct logits at least 0.05 apart so floating-point noise cannot flip
/// an ordering, while still allowing exact ties.
fn routing_inputs() -> impl Strategy<Value = (usize, usize, Vec<Vec<f64>>)> {
    (1usize..=16, 2usize..=8).prop_flat_map(|(tokens, n)| {
        proptest::collection::vec(
            proptest::collection::vec((0u8..=120).prop_map(|v| -3.0 + 0.05 * v as f64), n),
            tokens,
        )
        .prop_map(move |logits| (tokens, n, logits))
    })
}

fn softmax_tensor(logits: &[Vec<f64>]) -> Tensor2D<f64> {
    let (tokens, n) = (logits.len(), logits[0].len());
    let mut probs = Tensor2D::zeros(tokens, n);
    for (t, row) in logits.iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            probs.set(t, j, e / sum);
        }
    }
    probs
}

proptest! {
    #[test]
    fn dispatch_assigns_exactly_top_k_slots_per_token(
        (tokens, n, logits) in routing_inputs(),
        k_seed in 0usize..8,
    ) {
        let k = 1 + k_seed % n;
        let probs = softmax_tensor(&logits);
        let disp = dispatch(&probs, k, true).unwrap();

        let assigned: usize = disp.per_expert_tokens.iter().map(Vec::len).sum();
        prop_assert_eq!(assigned, tokens * k, "assignment slots must be conserved");

        for (t, chosen) in disp.selected.iter().enumerate() {
            prop_assert_eq!(chosen.len(), k, "token {} selects {} experts", t, chosen.len());
            let mut sorted = chosen.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k, "token {} selected a duplicate expert", t);
            for &j in chosen {
                prop_assert!(
                    disp.per_expert_tokens[j].contains(&t),
                    "token {} missing from expert {}'s roster",
                    t,
                    j
                );
            }
        }
    }

    #[test]
    fn dispatch_prefers_the_largest_probabilities(
        (_tokens, n, logits) in routing_inputs(),
        k_seed in 0usize..8,
    ) {
        let k = 1 + k_seed % n;
        let probs = softmax_tensor(&logits);
        let disp = dispatch(&probs, k, true).unwrap();
        for (t, chosen) in disp.selected.iter().enumerate() {
            let min_chosen = chosen
                .iter()
                .map(|&j| probs.get(t, j))
                .fold(f64::INFINITY, f64::min);
            for j in 0..n {
                if !chosen.contains(&j) {
                    prop_assert!(
                        probs.get(t, j) <= min_chosen,
                        "token {}: unselected expert {} outweighs a selected one",
                        t,
                        j
                    );
                }
            }
        }
    }

    #[test]
    fn renormalized_weights_form_a_distribution_over_the_selection(
        (tokens, n, logits) in routing_inputs(),
        k_seed in 0usize..8,
    ) {
        let k = 1 + k_seed % n;
        let probs = softmax_tensor(&logits);
        let disp = dispatch(&probs, k, true).unwrap();
        for t in 0..tokens {
            let mut sum = 0.0;
            for j in 0..n {
                let w = disp.sparse_weights.get(t, j);
                if disp.selected[t].contains(&j) {
                    sum += w;
                } else {
                    prop_assert_eq!(w, 0.0, "unselected expert {} got weight {}", j, w);
                }
            }
            prop_assert!(
                (sum - 1.0).abs() <= 1e-12,
                "token {}: renormalized weights sum to {}",
                t,
                sum
            );
            if k == 1 {
                let j = disp.selected[t][0];
                prop_assert_eq!(
                    disp.sparse_weights.get(t, j),
                    1.0,
                    "a single selected expert must carry weight exactly 1"
                );
            }
        }
    }

    #[test]
    fn raw_weights_equal_the_gate_probabilities_on_the_selection(
        (tokens, n, logits) in routing_inputs(),
        k_seed in 0usize..8,
    ) {
        let k = 1 + k_seed % n;
        let probs = softmax_tensor(&logits);
        let disp = dispatch(&probs, k, false).unwrap();
        for t in 0..tokens {
            for j in 0..n {
                let want = if disp.selected[t].contains(&j) {
                    probs.get(t, j)
                } else {
                    0.0
                };
                prop_assert_eq!(
                    disp.sparse_weights.get(t, j),
                    want,
                    "raw weight for token {} expert {} was rescaled",
                    t,
                    j
                );
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_routing_ignores_logit_shifts(
        (tokens, n, logits) in routing_inputs(),
        k_seed in 0usize..8,
        shift in -4i8..=4,
    ) {
        let k = 1 + k_seed % n;
        let raw: Tensor2D<f64> = Tensor2D::from_f64_vec(
            tokens,
            n,
            &logits.iter().flatten().copied().collect::<Vec<f64>>(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let var = tape.var(raw);
        let sm = tape.softmax_rows(var).unwrap();
        let probs = tape.value(sm).clone();
        for t in 0..tokens {
            let mut sum = 0.0;
            for j in 0..n {
                let p = probs.get(t, j);
                prop_assert!(p > 0.0 && p < 1.0 + 1e-12, "probability {} out of range", p);
                sum += p;
            }
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", t, sum);
        }

        // Adding a per-row constant to the logits must not change routing.
        let shifted: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| row.iter().map(|v| v + shift as f64 * 0.75).collect())
            .collect();
        let base = dispatch(&softmax_tensor(&logits), k, true).unwrap();
        let moved = dispatch(&softmax_tensor(&shifted), k, true).unwrap();
        prop_assert_eq!(
            base.selected,
            moved.selected,
            "a constant logit shift changed the selection"
        );
    }

    #[test]
    fn queue_keeps_the_newest_rows_normalized(
        rows in proptest::collection::vec(
            proptest::collection::vec(0.1f64..1.0, 3),
            0..20,
        ),
        capacity in 1usize..=8,
    ) {
        let mut queue: ExpertQueue<f64> = ExpertQueue::new(capacity);
        for row in &rows {
            prop_assert!(queue.push(row), "a nonzero row must be accepted");
        }
        let kept = rows.len().min(capacity);
        prop_assert_eq!(queue.len(), kept, "queue holds the wrong number of rows");
        let tail = &rows[rows.len() - kept..];
        for (entry, source) in queue.entries().zip(tail) {
            let norm: f64 = entry.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12, "entry norm {} is not 1", norm);
            let src_norm: f64 = source.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (e, s) in entry.iter().zip(source) {
                prop_assert_eq!(*e, s / src_norm, "entry is not the normalized source row");
            }
        }
    }

    #[test]
    fn contrastive_loss_is_never_negative(
        seed in 0u64..1000,
        n in 1usize..=4,
        tau_steps in 1u8..=20,
    ) {
        let tau = 0.05 * tau_steps as f64;
        let mut rng = SeededRng::new(seed);
        let d = 4;
        let mut queues: Vec<ExpertQueue<f64>> = (0..n).map(|_| ExpertQueue::new(6)).collect();
        for queue in queues.iter_mut() {
            for _ in 0..rng.index(7) {
                let row: Vec<f64> = (0..d).map(|_| rng.normal(1.0)).collect();
                queue.push(&row);
            }
        }
        let mut tape = Tape::new();
        let anchors: Vec<Option<VarId>> = (0..n)
            .map(|_| {
                let rows = rng.index(5);
                if rows == 0 {
                    None
                } else {
                    Some(tape.var(rng.uniform_tensor(rows, d, -1.0, 1.0)))
                }
            })
            .collect();
        let loss = experts_contrastive_loss(&mut tape, &anchors, &queues, tau, true).unwrap();
        let value = tape.value(loss).get(0, 0);
        prop_assert!(
            value >= -1e-9,
            "the positive key sits in its own denominator, yet the loss is {}",
            value
        );
    }

    #[test]
    fn summarize_is_order_independent(
        (tokens, n, logits) in routing_inputs(),
        rotate in 0usize..16,
    ) {
        let probs = softmax_tensor(&logits);
        let k = 1 + tokens % n.min(2);
        let disp = dispatch(&probs, k, true).unwrap();
        let mut records = Vec::new();
        for t in 0..tokens {
            records.push(RoutingRecord {
                step: 0,
                layer: t % 2,
                token: t,
                token_type: format!("cluster{}", t % 3),
                gate_probs: (0..n).map(|j| probs.get(t, j)).collect(),
                selected: disp.selected[t].clone(),
            });
        }
        let forward = summarize(&records).unwrap();

        let mut shuffled = records.clone();
        shuffled.reverse();
        let turns = rotate % shuffled.len().max(1);
        shuffled.rotate_left(turns);
        let reordered = summarize(&shuffled).unwrap();
        prop_assert_eq!(forward, reordered, "record order leaked into the summary");
    }

    #[test]
    fn layer_allocation_matches_the_closed_form_count(
        d in 2usize..=24,
        n in 1usize..=6,
        rank_seed in 0usize..6,
    ) {
        let rank = 1 + rank_seed.min(d - 1);
        let cfg = LayerConfig {
            d,
            n_experts: n,
            lora_rank: rank,
            top_k: 1,
            dropout_p: 0.0,
            scaling: 1.0,
            renormalize_topk: true,
        };
        let mut rng = SeededRng::new(3);
        let layer: MoeLoraLayer<f64> =
            MoeLoraLayer::init(Tensor2D::zeros(d, d), &cfg, &mut rng).unwrap();
        // A single-expert layer is plain LoRA and carries no gate.
        let want = if n == 1 {
            lora_trainable_params(1, d as u64, rank as u64)
        } else {
            moelora_trainable_params(1, d as u64, n as u64, rank as u64)
        };
        prop_assert_eq!(
            layer.trainable_param_count(),
            want,
            "live layer and closed-form parameter count disagree"
        );
    }
}
