//! One periodic pattern-recognition branch: phase/period embedding,
//! two-stage attention and a linear predictor.

use rand_chacha::ChaCha8Rng;

use super::fold::period_count;
use super::layers::{Block, Linear, Mode};
use super::params::{Bound, ParamId, ParamStore};
use crate::config::AblationFlags;
use crate::decomposition::PeriodSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    /// Self-attention among phase tokens.
    pub intra: Block,
    /// Self-attention among period tokens.
    pub inter: Block,
    /// Phase tokens attending to period tokens.
    pub cross_phase: Block,
    /// Period tokens attending to phase tokens.
    pub cross_period: Block,
}

#[derive(Debug, Clone)]
pub struct PprBranch {
    pub spec: PeriodSpec,
    /// Folded rows (periods) after truncation.
    pub periods: usize,
    /// Maps a phase's across-period column (length `periods`) to `d`.
    pub phase_embed: Linear,
    /// Maps a period's row (length `tau`) to `d`.
    pub period_embed: Linear,
    /// `[tau, 1]`, one offset per phase token.
    pub phase_pos: ParamId,
    /// `[periods, 1]`, one offset per period token.
    pub period_pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub predictor: Linear,
    /// Tokens in the final encoding.
    pub tokens: usize,
    pub d_model: usize,
}

/// Number of tokens in a branch encoding under the given flags.
pub fn token_count(tau: usize, periods: usize, flags: &AblationFlags) -> usize {
    usize::from(flags.use_intra) * tau + usize::from(flags.use_inter) * periods
}

impl PprBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        index: usize,
        spec: PeriodSpec,
        rho: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        flags: &AblationFlags,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = format!("branch{index}");
        let periods = period_count(&spec, rho);
        let tau = spec.tau;
        let phase_embed = Linear::new(
            store,
            &format!("{name}.phase_embed"),
            periods,
            d_model,
            false,
            rng,
        );
        let period_embed = Linear::new(
            store,
            &format!("{name}.period_embed"),
            tau,
            d_model,
            false,
            rng,
        );
        let phase_pos = store.add(format!("{name}.phase_pos"), Tensor::zeros(vec![tau, 1]));
        let period_pos = store.add(
            format!("{name}.period_pos"),
            Tensor::zeros(vec![periods, 1]),
        );
        let layers = (0..layers)
            .map(|l| {
                let ln = format!("{name}.layer{l}");
                EncoderLayer {
                    intra: Block::new(store, &format!("{ln}.intra"), d_model, heads, rng),
                    inter: Block::new(store, &format!("{ln}.inter"), d_model, heads, rng),
                    cross_phase: Block::new(
                        store,
                        &format!("{ln}.cross_phase"),
                        d_model,
                        heads,
                        rng,
                    ),
                    cross_period: Block::new(
                        store,
                        &format!("{ln}.cross_period"),
                        d_model,
                        heads,
                        rng,
                    ),
                }
            })
            .collect();
        let tokens = token_count(tau, periods, flags);
        let predictor = Linear::new(
            store,
            &format!("{name}.predictor"),
            tokens * d_model,
            spec.eta,
            true,
            rng,
        );
        PprBranch {
            spec,
            periods,
            phase_embed,
            period_embed,
            phase_pos,
            period_pos,
            layers,
            predictor,
            tokens,
            d_model,
        }
    }

    /// Phase embeddings `[N, tau, d]` and period embeddings `[N, n, d]` of a
    /// folded input `[N, n, tau]`.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        folded: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(folded).to_vec();
        if shape.len() != 3 || shape[1] != self.periods || shape[2] != self.spec.tau {
            return Err(Error::Shape {
                op: "embed",
                lhs: shape,
                rhs: vec![self.periods, self.spec.tau],
            });
        }
        let columns = tape.transpose(folded)?;
        let sigma = self.phase_embed.forward(tape, p, columns)?;
        let sigma = tape.add(sigma, p.var(self.phase_pos))?;
        let mu = self.period_embed.forward(tape, p, folded)?;
        let mu = tape.add(mu, p.var(self.period_pos))?;
        Ok((sigma, mu))
    }

    /// Two-stage encoding of the embeddings; returns `z` of shape
    /// `[N, tokens, d]` (phase tokens first).
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        sigma: Var,
        mu: Var,
        flags: &AblationFlags,
        mode: &mut Mode,
    ) -> Result<Var> {
        flags.validate()?;
        let mut sigma = sigma;
        let mut mu = mu;
        for layer in &self.layers {
            let s = if flags.use_intra {
                layer.intra.forward(tape, p, sigma, sigma, mode)?
            } else {
                sigma
            };
            let m = if flags.use_inter {
                layer.inter.forward(tape, p, mu, mu, mode)?
            } else {
                mu
            };
            if flags.use_cross {
                sigma = layer.cross_phase.forward(tape, p, s, m, mode)?;
                mu = layer.cross_period.forward(tape, p, m, s, mode)?;
            } else {
                sigma = s;
                mu = m;
            }
        }
        match (flags.use_intra, flags.use_inter) {
            (true, true) => tape.concat(&[sigma, mu], 1),
            (true, false) => Ok(sigma),
            (false, true) => Ok(mu),
            (false, false) => unreachable!("validated above"),
        }
    }

    /// Flattened encoding through the branch predictor: `[N, eta]`.
    pub fn predict<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[1] != self.tokens || s[2] != self.d_model {
            return Err(Error::Shape {
                op: "predict",
                lhs: s,
                rhs: vec![self.tokens, self.d_model],
            });
        }
        let flat = tape.reshape(z, &[s[0], s[1] * s[2]])?;
        self.predictor.forward(tape, p, flat)
    }

    /// All parameters of one named path, for dataflow checks.
    pub fn path_params(&self, path: Path) -> Vec<ParamId> {
        match path {
            Path::Intra => {
                let mut v: Vec<ParamId> =
                    self.layers.iter().flat_map(|l| l.intra.params()).collect();
                v.extend([self.phase_embed.weight, self.phase_pos]);
                v
            }
            Path::Inter => {
                let mut v: Vec<ParamId> =
                    self.layers.iter().flat_map(|l| l.inter.params()).collect();
                v.extend([self.period_embed.weight, self.period_pos]);
                v
            }
            Path::Cross => self
                .layers
                .iter()
                .flat_map(|l| {
                    l.cross_phase
                        .params()
                        .into_iter()
                        .chain(l.cross_period.params())
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Intra,
    Inter,
    Cross,
}
