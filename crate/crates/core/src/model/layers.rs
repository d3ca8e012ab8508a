//! Linear maps, post-norm attention and feed-forward blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Forward-pass mode. Dropout is active only in training.
pub enum Mode<'a> {
    Eval,
    Train {
        rng: &'a mut ChaCha8Rng,
        dropout: f64,
    },
}

impl Mode<'_> {
    pub(crate) fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Mode::Train { rng, dropout } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let scale = T::of(1.0 / keep);
                let n = tape.value(x).numel();
                let mask = (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                tape.mask(x, mask)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), vec![fan_in, fan_out], fan_in, rng);
        let bias = bias.then(|| store.uniform(format!("{name}.bias"), vec![fan_out], fan_in, rng));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x[.., in] -> x W + b`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![width], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Two linear layers with a GELU in between, hidden width `2d`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            up: Linear::new(store, &format!("{name}.up"), d, 2 * d, true, rng),
            down: Linear::new(store, &format!("{name}.down"), 2 * d, d, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product attention weights.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng),
            heads,
        }
    }
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[n, t, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n * heads, t, d / heads])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = tape.reshape(x, &[n, heads, t, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n, t, heads * dh])
}

/// `softmax(Q K^T / sqrt(d/h)) V` per head, then the output projection.
///
/// `q` is `[N, Tq, d]`, `kv` is `[N, Tk, d]`; the result is `[N, Tq, d]`.
pub fn msa<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    attn: &Attention,
    q: Var,
    kv: Var,
) -> Result<Var> {
    let n = tape.shape(q)[0];
    let d = tape.shape(q)[2];
    let h = attn.heads;
    let qp = attn.query.forward(tape, p, q)?;
    let kp = attn.key.forward(tape, p, kv)?;
    let vp = attn.value.forward(tape, p, kv)?;
    let qh = split_heads(tape, qp, h)?;
    let kh = split_heads(tape, kp, h)?;
    let vh = split_heads(tape, vp, h)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::of(1.0 / ((d / h) as f64).sqrt()));
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, vh)?;
    let ctx = merge_heads(tape, ctx, n, h)?;
    attn.output.forward(tape, p, ctx)
}

/// Attention followed by an MLP, each wrapped as
/// `layernorm(x + dropout(sublayer(x)))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub attn: Attention,
    pub attn_norm: LayerNorm,
    pub mlp: Mlp,
    pub mlp_norm: LayerNorm,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Block {
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, rng),
            mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), d),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q: Var,
        kv: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        let a = msa(tape, p, &self.attn, q, kv)?;
        let a = mode.dropout(tape, a)?;
        let x = tape.add(q, a)?;
        let x = self.attn_norm.forward(tape, p, x)?;
        let m = self.mlp.forward(tape, p, x)?;
        let m = mode.dropout(tape, m)?;
        let y = tape.add(x, m)?;
        self.mlp_norm.forward(tape, p, y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| std::iter::once(l.weight).chain(l.bias);
        let a = &self.attn;
        lin(&a.query)
            .chain(lin(&a.key))
            .chain(lin(&a.value))
            .chain(lin(&a.output))
            .chain([self.attn_norm.gain, self.attn_norm.bias])
            .chain(lin(&self.mlp.up))
            .chain(lin(&self.mlp.down))
            .chain([self.mlp_norm.gain, self.mlp_norm.bias])
            .collect()
    }
}
