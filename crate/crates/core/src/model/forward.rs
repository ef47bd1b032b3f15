use super::{InstrumentedModel, LayerWeights, RMS_EPS};
use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub token_ids: Vec<u32>,
    /// `L + 1` matrices of shape seq × d; index 0 is the embedding output.
    pub residuals: Vec<Matrix>,
    /// Attention contribution of each layer, seq × d.
    pub attn_out: Vec<Matrix>,
    /// Normalized MLP input (the vector `W_K` is applied to), seq × d.
    pub mlp_inputs: Vec<Matrix>,
    /// Post-nonlinearity neuron coefficients `m`, seq × d_mlp.
    pub mlp_coeffs: Vec<Matrix>,
    /// MLP contribution of each layer, seq × d.
    pub mlp_out: Vec<Matrix>,
    /// Logits at the last position after the final norm.
    pub final_logits: Vec<f32>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn last_position(&self) -> usize {
        self.token_ids.len() - 1
    }
}

/// One term `m_i · v_i` of an MLP output.
#[derive(Debug, Clone, Copy)]
pub struct SubUpdate<'a> {
    pub coefficient: f32,
    pub value: &'a [f32],
}

struct LayerOutput {
    attn: Matrix,
    mlp_in: Matrix,
    coeffs: Matrix,
    mlp: Matrix,
    next: Matrix,
}

fn rms_norm(x: &[f32], scale: &[f32]) -> Vec<f32> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

impl InstrumentedModel {
    fn check_tokens(&self, token_ids: &[u32]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if token_ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: token_ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = token_ids
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, token_ids: &[u32]) -> Matrix {
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(token_ids.len(), d);
        for (pos, &t) in token_ids.iter().enumerate() {
            let row = x.row_mut(pos);
            row.copy_from_slice(self.weights.embed.row(t as usize));
            tensor::add_assign(row, self.weights.pos_embed.row(pos));
        }
        x
    }

    fn attention(&self, lw: &LayerWeights, x: &Matrix) -> Matrix {
        let seq = x.rows();
        let d = self.config.model_dim;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut q = Matrix::zeros(seq, d);
        let mut k = Matrix::zeros(seq, d);
        let mut v = Matrix::zeros(seq, d);
        for pos in 0..seq {
            let n = rms_norm(x.row(pos), &lw.attn_norm);
            q.row_mut(pos).copy_from_slice(&lw.wq.matvec(&n));
            k.row_mut(pos).copy_from_slice(&lw.wk.matvec(&n));
            v.row_mut(pos).copy_from_slice(&lw.wv.matvec(&n));
        }

        let mut out = Matrix::zeros(seq, d);
        let mut mixed = vec![0.0f32; d];
        let mut scores = vec![0.0f32; seq];
        for i in 0..seq {
            mixed.iter_mut().for_each(|m| *m = 0.0);
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                let qi = &q.row(i)[span.clone()];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let s = tensor::dot(qi, &k.row(j)[span.clone()]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut denom = 0.0f32;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for j in 0..=i {
                    let w = scores[j] / denom;
                    tensor::axpy(&mut mixed[span.clone()], w, &v.row(j)[span.clone()]);
                }
            }
            out.row_mut(i).copy_from_slice(&lw.wo.matvec(&mixed));
        }
        out
    }

    fn mlp_coefficients(&self, lw: &LayerWeights, input: &[f32]) -> Vec<f32> {
        let act = self.config.activation;
        lw.mlp_keys
            .matvec(input)
            .into_iter()
            .map(|z| act.apply(z))
            .collect()
    }

    fn layer_forward(&self, layer: usize, x: &Matrix) -> LayerOutput {
        let lw = &self.weights.layers[layer];
        let seq = x.rows();
        let attn = self.attention(lw, x);
        let mut mlp_in = Matrix::zeros(seq, self.config.model_dim);
        let mut coeffs = Matrix::zeros(seq, self.config.mlp_dim);
        let mut mlp = Matrix::zeros(seq, self.config.model_dim);
        let mut next = x.clone();
        for pos in 0..seq {
            let h: Vec<f32> = x.row(pos).iter().zip(attn.row(pos)).map(|(a, b)| a + b).collect();
            let n = rms_norm(&h, &lw.mlp_norm);
            let m = self.mlp_coefficients(lw, &n);
            let out = lw.mlp_values.matvec_t(&m);
            let row = next.row_mut(pos);
            for ((r, hv), o) in row.iter_mut().zip(&h).zip(&out) {
                *r = hv + o;
            }
            mlp_in.row_mut(pos).copy_from_slice(&n);
            coeffs.row_mut(pos).copy_from_slice(&m);
            mlp.row_mut(pos).copy_from_slice(&out);
        }
        LayerOutput {
            attn,
            mlp_in,
            coeffs,
            mlp,
            next,
        }
    }

    fn logits_at(&self, x: &[f32]) -> Vec<f32> {
        let n = rms_norm(x, &self.weights.final_norm);
        self.weights.unembed.matvec(&n)
    }

    /// Runs the model and records every intermediate.
    pub fn forward(&self, token_ids: &[u32]) -> Result<ForwardTrace> {
        self.forward_with_hook(token_ids, &mut |_, _| {})
    }

    /// Like [`forward`](Self::forward), but calls `hook(l, residual)` on the
    /// residual stream produced by layer `l` before layer `l + 1` reads it.
    /// Edits made by the hook are visible downstream and in the trace.
    pub fn forward_with_hook(
        &self,
        token_ids: &[u32],
        hook: &mut dyn FnMut(usize, &mut Matrix),
    ) -> Result<ForwardTrace> {
        self.check_tokens(token_ids)?;
        let l_count = self.config.num_layers;
        let mut residuals = Vec::with_capacity(l_count + 1);
        let mut attn_out = Vec::with_capacity(l_count);
        let mut mlp_inputs = Vec::with_capacity(l_count);
        let mut mlp_coeffs = Vec::with_capacity(l_count);
        let mut mlp_out = Vec::with_capacity(l_count);

        residuals.push(self.embed(token_ids));
        for l in 0..l_count {
            let mut out = self.layer_forward(l, &residuals[l]);
            hook(l, &mut out.next);
            attn_out.push(out.attn);
            mlp_inputs.push(out.mlp_in);
            mlp_coeffs.push(out.coeffs);
            mlp_out.push(out.mlp);
            residuals.push(out.next);
        }
        let final_logits = self.logits_at(residuals[l_count].row(token_ids.len() - 1));
        Ok(ForwardTrace {
            token_ids: token_ids.to_vec(),
            residuals,
            attn_out,
            mlp_inputs,
            mlp_coeffs,
            mlp_out,
            final_logits,
        })
    }

    /// Final-position logits when `residual` is the stream entering layer
    /// `start_layer`.
    fn logits_from(&self, start_layer: usize, residual: Matrix) -> Vec<f32> {
        let mut x = residual;
        for l in start_layer..self.config.num_layers {
            x = self.layer_forward(l, &x).next;
        }
        self.logits_at(x.row(x.rows() - 1))
    }

    /// Decomposes `MLP^layer(mlp_input)` into its `d_mlp` sub-updates.
    /// `mlp_input` is the normalized vector `W_K` is applied to.
    pub fn mlp_sub_updates(&self, layer: usize, mlp_input: &[f32]) -> Result<Vec<SubUpdate<'_>>> {
        self.check_layer(layer)?;
        if mlp_input.len() != self.config.model_dim {
            return Err(Error::OutOfRange {
                what: "mlp input length",
                index: mlp_input.len(),
                limit: self.config.model_dim,
            });
        }
        let lw = &self.weights.layers[layer];
        let coeffs = self.mlp_coefficients(lw, mlp_input);
        Ok(coeffs
            .into_iter()
            .enumerate()
            .map(|(i, coefficient)| SubUpdate {
                coefficient,
                value: lw.mlp_values.row(i),
            })
            .collect())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.config.num_layers,
            });
        }
        Ok(())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let ok = trace.residuals.len() == self.config.num_layers + 1
            && trace.mlp_coeffs.len() == self.config.num_layers
            && trace.final_logits.len() == self.config.vocab_size
            && trace
                .residuals
                .first()
                .is_some_and(|r| r.cols() == self.config.model_dim && r.rows() == trace.seq_len());
        if ok {
            Ok(())
        } else {
            Err(Error::Artifact("trace was not produced by this model".into()))
        }
    }

    /// `log p(target | original) − log p(target | edited)` at the final
    /// position, where the edit subtracts `2·m·v` for `neuron` of `layer` from
    /// the residual stream at `position` and recomputes all later layers.
    pub fn sign_inversion_delta(
        &self,
        trace: &ForwardTrace,
        layer: usize,
        neuron: usize,
        target_token: u32,
        position: usize,
    ) -> Result<f64> {
        self.check_trace(trace)?;
        self.check_layer(layer)?;
        if neuron >= self.config.mlp_dim {
            return Err(Error::OutOfRange {
                what: "neuron",
                index: neuron,
                limit: self.config.mlp_dim,
            });
        }
        if target_token as usize >= self.config.vocab_size {
            return Err(Error::OutOfRange {
                what: "target token",
                index: target_token as usize,
                limit: self.config.vocab_size,
            });
        }
        if position >= trace.seq_len() {
            return Err(Error::OutOfRange {
                what: "position",
                index: position,
                limit: trace.seq_len(),
            });
        }
        let m = trace.mlp_coeffs[layer].get(position, neuron);
        let mut edited = trace.residuals[layer + 1].clone();
        tensor::axpy(
            edited.row_mut(position),
            -2.0 * m,
            self.value_vector(layer, neuron),
        );
        let edited_logits = self.logits_from(layer + 1, edited);
        let t = target_token as usize;
        Ok(tensor::log_softmax(&trace.final_logits)[t] - tensor::log_softmax(&edited_logits)[t])
    }
}

/// Softmax of the final logits, in `f64`.
pub fn next_token_distribution(trace: &ForwardTrace) -> Vec<f64> {
    tensor::softmax(&trace.final_logits)
}

/// Mean of the residual stream at `layer` over all token positions.
pub fn mean_pool(trace: &ForwardTrace, layer: usize) -> Result<Vec<f32>> {
    let x = trace.residuals.get(layer).ok_or(Error::OutOfRange {
        what: "layer",
        index: layer,
        limit: trace.residuals.len(),
    })?;
    let mut acc = vec![0.0f64; x.cols()];
    for pos in 0..x.rows() {
        for (a, &v) in acc.iter_mut().zip(x.row(pos)) {
            *a += v as f64;
        }
    }
    let n = x.rows() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use proptest::prelude::*;

    fn config(layers: usize, d: usize, m: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            model_dim: d,
            mlp_dim: m,
            num_heads: heads,
            vocab_size: 13,
            activation: Activation::Gelu,
            max_seq_len: 16,
        }
    }

    fn rel_err(a: &[f32], b: &[f32]) -> f32 {
        let num: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        let den: f32 = b.iter().map(|y| y * y).sum::<f32>().sqrt().max(1e-6);
        num / den
    }

    #[test]
    fn single_token_residual_is_embedding_row() {
        let mut model = InstrumentedModel::zeroed(config(2, 8, 8, 1)).unwrap();
        for t in 0..13 {
            for c in 0..8 {
                model.weights.embed.set(t, c, (t * 8 + c) as f32 * 0.01);
            }
        }
        let trace = model.forward(&[5]).unwrap();
        assert_eq!(trace.residuals[0].row(0), model.weights.embed.row(5));
    }

    #[test]
    fn residual_update_identity() {
        let model = InstrumentedModel::random(config(3, 16, 32, 4), 11, 0.4).unwrap();
        let trace = model.forward(&[1, 4, 2, 9, 0, 12]).unwrap();
        for l in 0..3 {
            for pos in 0..6 {
                let diff: Vec<f32> = trace.residuals[l + 1]
                    .row(pos)
                    .iter()
                    .zip(trace.residuals[l].row(pos))
                    .map(|(a, b)| a - b)
                    .collect();
                let contrib: Vec<f32> = trace.attn_out[l]
                    .row(pos)
                    .iter()
                    .zip(trace.mlp_out[l].row(pos))
                    .map(|(a, b)| a + b)
                    .collect();
                assert!(rel_err(&diff, &contrib) < 1e-5, "layer {l} pos {pos}");
            }
        }
    }

    #[test]
    fn deterministic_final_logits() {
        let model = InstrumentedModel::random(config(4, 16, 32, 2), 42, 0.3).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let a = model.forward(&tokens).unwrap();
        let b = model.forward(&tokens).unwrap();
        let bits = |t: &ForwardTrace| t.final_logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_sub_updates() {
        let model = InstrumentedModel::random(config(1, 8, 16, 1), 5, 0.5).unwrap();
        let subs = model.mlp_sub_updates(0, &[0.0; 8]).unwrap();
        assert_eq!(subs.len(), 16);
        assert!(subs.iter().all(|s| s.coefficient == Activation::Gelu.apply(0.0)));
    }

    #[test]
    fn single_key_row_activates_one_neuron() {
        let mut model = InstrumentedModel::random(config(1, 8, 16, 1), 5, 0.5).unwrap();
        let keys = &mut model.weights.layers[0].mlp_keys;
        keys.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        keys.set(7, 2, 1.5);
        let x = [0.3, -0.2, 0.9, 0.1, 0.0, 0.4, -0.8, 0.2];
        let subs = model.mlp_sub_updates(0, &x).unwrap();
        let f0 = Activation::Gelu.apply(0.0);
        let changed: Vec<usize> = (0..16).filter(|&i| subs[i].coefficient != f0).collect();
        assert_eq!(changed, vec![7]);
    }

    #[test]
    fn sub_updates_reconstruct_direct_mlp() {
        let model = InstrumentedModel::random(config(2, 8, 16, 2), 9, 0.5).unwrap();
        let x = [0.5, -1.2, 0.3, 0.8, -0.1, 0.0, 1.1, -0.7];
        let subs = model.mlp_sub_updates(1, &x).unwrap();
        let mut sum = vec![0.0f32; 8];
        for s in &subs {
            tensor::axpy(&mut sum, s.coefficient, s.value);
        }
        // oracle: W_V · f(W_K · x) with W_V as a d × d_mlp matrix
        let lw = &model.weights.layers[1];
        let hidden: Vec<f32> = lw.mlp_keys.matvec(&x).into_iter().map(|z| Activation::Gelu.apply(z)).collect();
        let direct = lw.mlp_values.transpose().matvec(&hidden);
        assert!(rel_err(&sum, &direct) < 1e-5);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let model = InstrumentedModel::random(config(2, 8, 16, 2), 9, 0.5).unwrap();
        assert!(matches!(model.forward(&[]), Err(Error::EmptySequence)));
        assert!(matches!(model.forward(&[13]), Err(Error::OutOfRange { .. })));
        assert!(matches!(model.forward(&[0; 17]), Err(Error::SequenceTooLong { .. })));
        assert!(model.mlp_sub_updates(2, &[0.0; 8]).is_err());
        let trace = model.forward(&[1, 2]).unwrap();
        assert!(model.sign_inversion_delta(&trace, 0, 16, 0, 1).is_err());
        assert!(model.sign_inversion_delta(&trace, 0, 0, 0, 2).is_err());
        assert!(model.sign_inversion_delta(&trace, 2, 0, 0, 1).is_err());
        assert!(mean_pool(&trace, 3).is_err());
    }

    #[test]
    fn zero_coefficient_gives_zero_delta() {
        let mut model = InstrumentedModel::random(config(3, 8, 16, 2), 21, 0.5).unwrap();
        // SiLU(0) = 0, so a zero key row yields m = 0 exactly.
        model.config.activation = Activation::Silu;
        model.weights.layers[1].mlp_keys.row_mut(4).iter_mut().for_each(|v| *v = 0.0);
        let trace = model.forward(&[2, 7, 1]).unwrap();
        assert_eq!(trace.mlp_coeffs[1].get(2, 4), 0.0);
        assert_eq!(model.sign_inversion_delta(&trace, 1, 4, 3, 2).unwrap(), 0.0);
    }

    #[test]
    fn next_token_distribution_closed_forms() {
        let mut trace = InstrumentedModel::random(config(1, 8, 8, 1), 1, 0.1)
            .unwrap()
            .forward(&[0])
            .unwrap();
        trace.final_logits = vec![0.7; 4];
        assert!(next_token_distribution(&trace).iter().all(|p| (p - 0.25).abs() < 1e-12));
        let ln3 = 3f32.ln();
        trace.final_logits = vec![0.0, ln3];
        let p = next_token_distribution(&trace);
        let three = (ln3 as f64).exp();
        assert!((p[0] - 1.0 / (1.0 + three)).abs() < 1e-9);
        assert!((p[1] - three / (1.0 + three)).abs() < 1e-9);
        assert!((p[0] - 0.25).abs() < 1e-7 && (p[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn mean_pool_cases() {
        let model = InstrumentedModel::random(config(2, 8, 8, 1), 2, 0.4).unwrap();
        let trace = model.forward(&[4]).unwrap();
        assert_eq!(mean_pool(&trace, 2).unwrap(), trace.residuals[2].row(0));

        let mut trace = model.forward(&[4, 5]).unwrap();
        let u: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        trace.residuals[1].row_mut(0).copy_from_slice(&u);
        let neg: Vec<f32> = u.iter().map(|v| -v).collect();
        trace.residuals[1].row_mut(1).copy_from_slice(&neg);
        assert!(mean_pool(&trace, 1).unwrap().iter().all(|&v| v == 0.0));

        let trace = model.forward(&[1, 2, 3, 4, 5]).unwrap();
        let pooled = mean_pool(&trace, 1).unwrap();
        for c in 0..8 {
            let mut s = 0.0f32;
            for pos in 0..5 {
                s += trace.residuals[1].get(pos, c);
            }
            assert!((pooled[c] - s / 5.0).abs() < 1e-7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn causality_prefix_residuals_unchanged(seed in 0u64..1000, len in 2usize..10, cut in 1usize..9) {
            let cut = cut.min(len - 1);
            let model = InstrumentedModel::random(config(2, 8, 16, 2), seed, 0.5).unwrap();
            let tokens: Vec<u32> = (0..len).map(|i| ((seed as usize + i * 7) % 13) as u32).collect();
            let full = model.forward(&tokens).unwrap();
            let prefix = model.forward(&tokens[..cut]).unwrap();
            for l in 0..=2 {
                for pos in 0..cut {
                    let a: Vec<u32> = full.residuals[l].row(pos).iter().map(|v| v.to_bits()).collect();
                    let b: Vec<u32> = prefix.residuals[l].row(pos).iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn distribution_shift_invariant(shift in -50i32..50, grid in proptest::collection::vec(-640i32..640, 2..20)) {
            // grid values and integer shifts are exact in f32, so the shifted
            // logits carry no rounding and the softmax must agree to 1e-9
            let logits: Vec<f32> = grid.iter().map(|&g| g as f32 / 64.0).collect();
            let base = tensor::softmax(&logits);
            prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f32> = logits.iter().map(|v| v + shift as f32).collect();
            let moved = tensor::softmax(&shifted);
            for (a, b) in moved.iter().zip(&base) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
