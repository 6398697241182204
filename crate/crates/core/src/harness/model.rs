//! A small stack of adapted projections.
//!
//! Every layer is a frozen random `d x d` base wrapped in a mixture
//! adapter, with tanh between layers (none after the last). The base
//! weights stand in for a pretrained backbone: they never receive
//! gradients, which [`ToyModel::frozen_fingerprint`] lets tests assert
//! bit-for-bit.

use crate::adapters::{LayerConfig, LayerForward, LayerVars, MoeLoraLayer};
use crate::harness::HarnessError;
use crate::numerics::{SeededRng, Tape, Tensor2D, VarId};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ToyModel<F> {
    layers: Vec<MoeLoraLayer<F>>,
}

/// Tape handles for every layer.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<LayerVars>,
}

impl ModelVars {
    /// Trainable handles, layer by layer in canonical order.
    pub fn param_ids(&self) -> Vec<VarId> {
        self.layers.iter().flat_map(LayerVars::param_ids).collect()
    }
}

/// Forward artifacts: final output plus each layer's routing state.
#[derive(Debug)]
pub struct ModelForward<F> {
    pub output: VarId,
    pub layers: Vec<LayerForward<F>>,
}

impl<F: Scalar> ToyModel<F> {
    /// Builds `n_layers` adapted layers with fresh frozen bases
    /// (`W ~ N(0, (base_scale/sqrt(d))²)` entries; `base_scale` 1 is the
    /// usual fan-in scaling, 0 a null backbone the adapters must replace).
    pub fn init(
        layer_cfg: &LayerConfig,
        n_layers: usize,
        base_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, HarnessError> {
        if n_layers == 0 {
            return Err(HarnessError::Config {
                message: "model needs at least one layer".to_string(),
            });
        }
        if !base_scale.is_finite() || base_scale < 0.0 {
            return Err(HarnessError::Config {
                message: format!("base_scale must be finite and >= 0, got {base_scale}"),
            });
        }
        let base_std = base_scale / (layer_cfg.d as f64).sqrt();
        let layers = (0..n_layers)
            .map(|_| {
                let base = rng.normal_tensor(layer_cfg.d, layer_cfg.d, base_std);
                MoeLoraLayer::init(base, layer_cfg, rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ToyModel { layers })
    }

    /// Wraps existing layers (e.g. from a checkpoint).
    pub fn from_layers(layers: Vec<MoeLoraLayer<F>>) -> Result<Self, HarnessError> {
        let first = layers.first().ok_or_else(|| HarnessError::Config {
            message: "model needs at least one layer".to_string(),
        })?;
        let d = first.dim();
        if layers.iter().any(|l| l.dim() != d) {
            return Err(HarnessError::Config {
                message: "layers disagree on width".to_string(),
            });
        }
        Ok(ToyModel { layers })
    }

    pub fn d(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[MoeLoraLayer<F>] {
        &self.layers
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> ModelVars {
        ModelVars {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Forward through every layer with tanh between them.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        x: VarId,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<ModelForward<F>, HarnessError> {
        let mut h = x;
        let mut layer_states = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, (layer, lvars)) in self.layers.iter().zip(&vars.layers).enumerate() {
            let fwd = layer.forward(tape, lvars, h, rng, training)?;
            h = if i < last {
                tape.tanh(fwd.output)?
            } else {
                fwd.output
            };
            layer_states.push(fwd);
        }
        Ok(ModelForward {
            output: h,
            layers: layer_states,
        })
    }

    /// Trainable tensors across layers, same order as
    /// [`ModelVars::param_ids`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor2D<F>> {
        self.layers
            .iter_mut()
            .flat_map(MoeLoraLayer::params_mut)
            .collect()
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(MoeLoraLayer::trainable_param_count)
            .sum()
    }

    /// FNV-1a hash over the bit patterns of all frozen base weights.
    /// Training must never change it.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for byte in x.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for layer in &self.layers {
            for &w in layer.base().data() {
                eat(w.to_f64().expect("scalar converts to f64").to_bits());
            }
        }
        hash
    }

    /// All tensors (frozen and trainable) under stable names, in a fixed
    /// order suitable for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2D<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.base"), layer.base()));
            if let Some(g) = layer.gate() {
                out.push((format!("layer{i}.gate"), g.weights()));
            }
            for (j, e) in layer.experts().iter().enumerate() {
                out.push((format!("layer{i}.expert{j}.a"), e.a()));
                out.push((format!("layer{i}.expert{j}.b"), e.b()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::moelora_trainable_params;
    use crate::scalar::cast;

    fn cfg(d: usize, n: usize, r: usize, k: usize) -> LayerConfig {
        LayerConfig {
            d,
            n_experts: n,
            lora_rank: r,
            top_k: k,
            dropout_p: 0.0,
            scaling: 1.0,
            renormalize_topk: true,
        }
    }

    /// Base-only forward with naive loops: x * W1, tanh, * W2, ...
    fn base_only_forward(model: &ToyModel<f64>, x: &Tensor2D<f64>) -> Tensor2D<f64> {
        let mut h = x.clone();
        let last = model.n_layers() - 1;
        for (i, layer) in model.layers().iter().enumerate() {
            let w = layer.base();
            let mut next = Tensor2D::zeros(h.rows(), w.cols());
            for t in 0..h.rows() {
                for j in 0..w.cols() {
                    let mut acc = 0.0;
                    for k in 0..h.cols() {
                        acc += h.get(t, k) * w.get(k, j);
                    }
                    next.set(t, j, acc);
                }
            }
            if i < last {
                next = next.map(f64::tanh);
            }
            h = next;
        }
        h
    }

    #[test]
    fn fresh_model_equals_its_frozen_base_bitwise() {
        let mut rng = SeededRng::new(11);
        let model: ToyModel<f64> = ToyModel::init(&cfg(8, 4, 2, 2), 2, 1.0, &mut rng).unwrap();
        let x = SeededRng::new(3).normal_tensor(5, 8, 1.0);

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let fwd = model
            .forward(&mut tape, &vars, xv, &mut SeededRng::new(0), true)
            .unwrap();
        let got = tape.value(fwd.output);
        let expected = base_only_forward(&model, &x);
        assert_eq!(
            got, &expected,
            "zero-initialized adapters must leave the base function untouched"
        );
    }

    #[test]
    fn fingerprint_ignores_trainable_parameters() {
        let mut rng = SeededRng::new(2);
        let mut model: ToyModel<f64> = ToyModel::init(&cfg(6, 3, 2, 1), 2, 1.0, &mut rng).unwrap();
        let before = model.frozen_fingerprint();
        for p in model.params_mut() {
            for r in 0..p.rows() {
                for c in 0..p.cols() {
                    p.set(r, c, p.get(r, c) + cast::<f64>(1.5));
                }
            }
        }
        assert_eq!(
            model.frozen_fingerprint(),
            before,
            "fingerprint must only cover frozen tensors"
        );
    }

    #[test]
    fn param_count_matches_closed_form() {
        let mut rng = SeededRng::new(4);
        let model: ToyModel<f64> = ToyModel::init(&cfg(16, 4, 3, 2), 2, 1.0, &mut rng).unwrap();
        assert_eq!(
            model.trainable_param_count(),
            moelora_trainable_params(2, 16, 4, 3)
        );
    }

    #[test]
    fn named_tensors_cover_every_matrix_once() {
        let mut rng = SeededRng::new(4);
        let model: ToyModel<f64> = ToyModel::init(&cfg(4, 3, 2, 1), 2, 1.0, &mut rng).unwrap();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        // Per layer: base + gate + 3 experts * 2 matrices.
        assert_eq!(names.len(), 2 * (1 + 1 + 6));
        assert_eq!(names[0], "layer0.base");
        assert!(names.contains(&"layer1.expert2.b".to_string()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "names must be unique");
    }

    #[test]
    fn forward_reports_routing_per_layer() {
        let mut rng = SeededRng::new(8);
        let model: ToyModel<f64> = ToyModel::init(&cfg(8, 4, 2, 2), 3, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(SeededRng::new(5).normal_tensor(6, 8, 1.0));
        let fwd = model
            .forward(&mut tape, &vars, x, &mut SeededRng::new(0), false)
            .unwrap();
        assert_eq!(fwd.layers.len(), 3);
        for lf in &fwd.layers {
            assert!(lf.gate_probs.is_some());
            assert_eq!(lf.dispatch.selected.len(), 6);
            assert!(lf.dispatch.selected.iter().all(|s| s.len() == 2));
        }
    }
}
