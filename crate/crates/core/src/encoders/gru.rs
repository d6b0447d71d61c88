use rand_chacha::ChaCha8Rng;

use super::{add_weight, add_zeros, column};
use crate::autodiff::{Array, Binding, ParamId, ParamSet, Tape, Var};
use crate::data::{StateWindow, PAD, WINDOW};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl Gate {
    fn init(dim: usize, params: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng) -> Self {
        Gate {
            w: add_weight(params, format!("{name}.w"), dim, dim, rng),
            u: add_weight(params, format!("{name}.u"), dim, dim, rng),
            b: add_zeros(params, format!("{name}.b"), dim),
        }
    }
}

/// GRU cell weights: update `z`, reset `r` and candidate `n` gates.
///
/// ```text
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// n = tanh(x Wn + bn + r * (h Un))
/// h' = n + z * (h - n)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    update: Gate,
    reset: Gate,
    candidate: Gate,
}

impl GruParams {
    pub(super) fn init(dim: usize, params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        GruParams {
            update: Gate::init(dim, params, &format!("{prefix}.gru.update"), rng),
            reset: Gate::init(dim, params, &format!("{prefix}.gru.reset"), rng),
            candidate: Gate::init(dim, params, &format!("{prefix}.gru.candidate"), rng),
        }
    }

    pub(super) fn encode(&self, tape: &mut Tape, p: &Binding, table: Var, windows: &[StateWindow]) -> Result<Var> {
        let mut h: Option<Var> = None;
        for t in 0..WINDOW {
            let ids = column(windows, t);
            let mut x = tape.embedding_lookup(table, &ids)?;
            // Padding steps feed zero vectors whatever the padding row has drifted to.
            if ids.contains(&PAD) {
                let d = tape.value(x).shape()[1];
                let mask: Vec<f64> = ids
                    .iter()
                    .flat_map(|&i| std::iter::repeat_n(if i == PAD { 0.0 } else { 1.0 }, d))
                    .collect();
                let mask = tape.constant(Array::new(&[ids.len(), d], mask)?);
                x = tape.mul(x, mask)?;
            }
            let pre = |tape: &mut Tape, g: &Gate| -> Result<Var> {
                let xw = tape.matmul(x, p.var(g.w))?;
                tape.add_row(xw, p.var(g.b))
            };
            let mut zp = pre(tape, &self.update)?;
            let mut np = pre(tape, &self.candidate)?;
            // With h = 0 every recurrent term, and with it the reset gate, vanishes.
            if let Some(h) = h {
                let hz = tape.matmul(h, p.var(self.update.u))?;
                zp = tape.add(zp, hz)?;
                let rp = pre(tape, &self.reset)?;
                let hr = tape.matmul(h, p.var(self.reset.u))?;
                let rp = tape.add(rp, hr)?;
                let r = tape.sigmoid(rp);
                let hn = tape.matmul(h, p.var(self.candidate.u))?;
                let gated = tape.mul(r, hn)?;
                np = tape.add(np, gated)?;
            }
            let z = tape.sigmoid(zp);
            let n = tape.tanh(np);
            h = Some(match h {
                Some(h) => {
                    let diff = tape.sub(h, n)?;
                    let keep = tape.mul(z, diff)?;
                    tape.add(n, keep)?
                }
                None => {
                    // h' = n - z * n
                    let zn = tape.mul(z, n)?;
                    tape.sub(n, zn)?
                }
            });
        }
        Ok(h.expect("window is non-empty"))
    }
}
