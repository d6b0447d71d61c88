use rand_chacha::ChaCha8Rng;

use super::{add_weight, add_zeros, uniform_array};
use crate::autodiff::{Array, Binding, ParamId, ParamSet, Tape, Var};
use crate::data::{StateWindow, PAD, WINDOW};
use crate::error::Result;

/// One-block, one-head self-attention encoder.
///
/// Only the representation at the last window position is needed, so only
/// its query is formed; the causal mask is then vacuous and the attention
/// mask reduces to dropping padding keys. Padding inputs are zeroed before
/// the block, so the padding embedding row never reaches the output.
///
/// ```text
/// X   = (E[s] + P) * keep
/// o   = softmax(q Kᵀ / sqrt(d), keep) V,  q = X[-1] Wq, K = X Wk, V = X Wv
/// h   = X[-1] + o Wo
/// out = LayerNorm(h + relu(h Wf + bf))
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    dim: usize,
    position: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    wf: ParamId,
    bf: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl AttentionParams {
    pub(super) fn init(dim: usize, params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let name = |s: &str| format!("{prefix}.attention.{s}");
        let position = params.add(name("position"), uniform_array(&[WINDOW, dim], rng));
        let wq = add_weight(params, name("wq"), dim, dim, rng);
        let wk = add_weight(params, name("wk"), dim, dim, rng);
        let wv = add_weight(params, name("wv"), dim, dim, rng);
        let wo = add_weight(params, name("wo"), dim, dim, rng);
        let wf = add_weight(params, name("wf"), dim, dim, rng);
        let bf = add_zeros(params, name("bf"), dim);
        let ln_gain = params.add(name("ln_gain"), Array::new(&[dim], vec![1.0; dim]).expect("shape"));
        let ln_bias = add_zeros(params, name("ln_bias"), dim);
        AttentionParams {
            dim,
            position,
            wq,
            wk,
            wv,
            wo,
            wf,
            bf,
            ln_gain,
            ln_bias,
        }
    }

    pub(super) fn encode(&self, tape: &mut Tape, p: &Binding, table: Var, windows: &[StateWindow]) -> Result<Var> {
        let b = windows.len();
        let d = self.dim;
        let ids: Vec<u32> = windows.iter().flatten().copied().collect();
        let keep: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();

        let emb = tape.embedding_lookup(table, &ids)?;
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..WINDOW).collect();
        let pos = tape.gather_rows(p.var(self.position), &pos_idx)?;
        let x = tape.add(emb, pos)?;
        let keep_mask: Vec<f64> = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d))
            .collect();
        let keep_mask = tape.constant(Array::new(&[b * WINDOW, d], keep_mask)?);
        let x = tape.mul(x, keep_mask)?;

        let last_idx: Vec<usize> = (0..b).map(|i| i * WINDOW + WINDOW - 1).collect();
        let x_last = tape.gather_rows(x, &last_idx)?;
        let q = tape.matmul(x_last, p.var(self.wq))?;
        let k = tape.matmul(x, p.var(self.wk))?;
        let v = tape.matmul(x, p.var(self.wv))?;
        let scores = tape.block_dot(q, k, WINDOW)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.masked_softmax(scores, &keep)?;
        let o = tape.block_weighted_sum(attn, v)?;
        let o = tape.matmul(o, p.var(self.wo))?;
        let h = tape.add(x_last, o)?;

        let f = tape.matmul(h, p.var(self.wf))?;
        let f = tape.add_row(f, p.var(self.bf))?;
        let f = tape.relu(f);
        let h = tape.add(h, f)?;
        tape.layer_norm(h, p.var(self.ln_gain), p.var(self.ln_bias))
    }
}
