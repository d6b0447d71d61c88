use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Binding, ParamId, ParamSet, Tape, Var};
use crate::data::StateWindow;
use crate::encoders::{add_weight, add_zeros, Encoder, EncoderKind};
use crate::error::Result;

/// Reward-head classes.
pub const REWARD_NEGATIVE: usize = 0;
pub const REWARD_CLICK: usize = 1;
pub const REWARD_PURCHASE: usize = 2;

/// Fully connected layer `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: add_weight(params, format!("{name}.w"), input, output, rng),
            b: add_zeros(params, format!("{name}.b"), output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

/// Two linear layers with a ReLU between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn init(params: &mut ParamSet, name: &str, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            hidden: Linear::init(params, &format!("{name}.hidden"), dims[0], dims[1], rng),
            out: Linear::init(params, &format!("{name}.out"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, p, h)
    }
}

/// `V(s)`: encoder followed by a `d -> d -> 1` MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub params: ParamSet,
    pub encoder: Encoder,
    pub head: Mlp,
}

impl ValueNet {
    pub fn init(kind: EncoderKind, item_count: u32, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let encoder = Encoder::init(kind, item_count, dim, &mut params, "value.encoder", rng)?;
        let head = Mlp::init(&mut params, "value.head", [dim, dim, 1], rng);
        Ok(ValueNet { params, encoder, head })
    }

    /// State values `[B]`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, windows: &[StateWindow]) -> Result<Var> {
        let z = self.encoder.encode(tape, p, windows)?;
        let v = self.head.forward(tape, p, z)?;
        tape.reshape(v, &[windows.len()])
    }

    /// Forward pass on a private tape without gradients.
    pub fn values(&self, windows: &[StateWindow]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let v = self.forward(&mut tape, &p, windows)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Policy-extraction network: shared encoder with a policy head over the
/// catalog, a reward head and a state-transition head on `[z, e(a)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub params: ParamSet,
    pub encoder: Encoder,
    pub policy: Linear,
    pub reward: Mlp,
    pub transition: Mlp,
}

impl PolicyNet {
    pub fn init(kind: EncoderKind, item_count: u32, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let encoder = Encoder::init(kind, item_count, dim, &mut params, "policy.encoder", rng)?;
        let policy = Linear::init(&mut params, "policy.policy_head", dim, item_count as usize, rng);
        let reward = Mlp::init(&mut params, "policy.reward_head", [2 * dim, dim, 3], rng);
        let transition = Mlp::init(&mut params, "policy.transition_head", [2 * dim, dim, dim], rng);
        Ok(PolicyNet {
            params,
            encoder,
            policy,
            reward,
            transition,
        })
    }

    pub fn item_count(&self) -> u32 {
        self.encoder.item_count()
    }

    pub fn encode(&self, tape: &mut Tape, p: &Binding, windows: &[StateWindow]) -> Result<Var> {
        self.encoder.encode(tape, p, windows)
    }

    /// Representations `[B, d]` computed without gradients.
    pub fn encode_values(&self, windows: &[StateWindow]) -> Result<Array> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = self.encode(&mut tape, &p, windows)?;
        Ok(tape.value(z).clone())
    }

    /// Logits `[B, |I|]`; column `j` scores item `j + 1`.
    pub fn policy_logits(&self, tape: &mut Tape, p: &Binding, z: Var) -> Result<Var> {
        self.policy.forward(tape, p, z)
    }

    /// `[z_row, e(a)]` for every `(row, action)` pair, `[pairs, 2d]`.
    pub fn pair_features(&self, tape: &mut Tape, p: &Binding, z: Var, rows: &[usize], actions: &[u32]) -> Result<Var> {
        let zr = tape.gather_rows(z, rows)?;
        let ea = tape.embedding_lookup(p.var(self.encoder.embedding()), actions)?;
        tape.concat_cols(zr, ea)
    }

    /// Reward logits `[pairs, 3]` ordered (negative, click, purchase).
    pub fn reward_logits(&self, tape: &mut Tape, p: &Binding, pairs: Var) -> Result<Var> {
        self.reward.forward(tape, p, pairs)
    }

    /// Predicted next-state representations `[pairs, d]`.
    pub fn predict_next(&self, tape: &mut Tape, p: &Binding, pairs: Var) -> Result<Var> {
        self.transition.forward(tape, p, pairs)
    }
}
