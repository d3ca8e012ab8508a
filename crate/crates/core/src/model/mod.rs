//! The forecasting network: one pattern-recognition branch per decomposed
//! component, outputs resampled to the horizon and summed.

mod branch;
mod checkpoint;
mod fold;
mod layers;
mod mix;
mod params;

pub use branch::{token_count, EncoderLayer, Path, PprBranch};
pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fold::{kept_len, period_count, truncate_and_fold, unfold, Folded};
pub use layers::{msa, Attention, Block, LayerNorm, Linear, Mlp, Mode};
pub use mix::{interpolation_matrix, predict_mix, Mixed};
pub use params::{Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decomposition::{mpsd, plan, PeriodSpec};
use crate::error::{Error, Result};
use crate::series::Series;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub specs: Vec<PeriodSpec>,
    pub branches: Vec<PprBranch>,
    pub params: ParamStore<T>,
}

/// Tape handles produced by [`Model::forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `[B, M, H]`
    pub prediction: Var,
    /// `[B * M, eta_j]` per branch, before interpolation.
    pub outputs: Vec<Var>,
    /// `[B * M, H]` per branch; these sum to `prediction`.
    pub contributions: Vec<Var>,
}

/// Result of [`Model::forecast`] on a single window, all `M x _`.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub prediction: Series,
    pub branch_outputs: Vec<Series>,
    pub branch_contributions: Vec<Series>,
}

impl<T: Scalar> Model<T> {
    /// Validates `config` and initializes all weights from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = component_specs(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let branches = specs
            .iter()
            .enumerate()
            .map(|(j, &spec)| {
                PprBranch::new(
                    &mut params,
                    j,
                    spec,
                    config.rho,
                    config.d_model,
                    config.heads,
                    config.layers,
                    &config.ablation,
                    &mut rng,
                )
            })
            .collect();
        Ok(Model {
            config,
            specs,
            branches,
            params,
        })
    }

    pub fn context(&self) -> usize {
        self.config.context
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Decomposes and folds a batch of `M x L` windows into one
    /// `[B * M, n_j, tau_j]` tensor per branch.
    pub fn prepare(&self, windows: &[Series]) -> Result<Vec<Tensor<T>>> {
        let first = windows
            .first()
            .ok_or_else(|| Error::contract("empty batch"))?;
        let channels = first.channels();
        let mut buffers: Vec<Vec<T>> = vec![Vec::new(); self.branches.len()];
        for w in windows {
            if w.channels() != channels {
                return Err(Error::contract(format!(
                    "batch mixes {} and {} channels",
                    channels,
                    w.channels()
                )));
            }
            if w.len() != self.config.context {
                return Err(Error::InputTooShort {
                    len: w.len(),
                    min: self.config.context,
                });
            }
            let components = if self.config.ablation.use_mpsd {
                mpsd(w, &self.config.ascending_periods(), self.config.horizon)?.components
            } else {
                vec![w.clone()]
            };
            for ((c, branch), buf) in components.iter().zip(&self.branches).zip(&mut buffers) {
                let f = truncate_and_fold(c, &branch.spec, self.config.rho)?;
                buf.extend(f.data.iter().map(|&v| T::of(v)));
            }
        }
        let n = windows.len() * channels;
        buffers
            .into_iter()
            .zip(&self.branches)
            .map(|(buf, b)| Tensor::new(vec![n, b.periods, b.spec.tau], buf))
            .collect()
    }

    /// Records a forward pass over `windows` (each `M x L`) on `tape`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        windows: &[Series],
        mode: &mut Mode,
    ) -> Result<BatchOutput> {
        let inputs = self.prepare(windows)?;
        let channels = windows[0].channels();
        let mut encodings = Vec::with_capacity(self.branches.len());
        for (input, branch) in inputs.into_iter().zip(&self.branches) {
            let x = tape.constant(input);
            let (sigma, mu) = branch.embed(tape, p, x)?;
            encodings.push(branch.encode(tape, p, sigma, mu, &self.config.ablation, mode)?);
        }
        let mixed = predict_mix(tape, p, &encodings, &self.branches, self.config.horizon)?;
        let prediction = tape.reshape(
            mixed.prediction,
            &[windows.len(), channels, self.config.horizon],
        )?;
        Ok(BatchOutput {
            prediction,
            outputs: mixed.outputs,
            contributions: mixed.contributions,
        })
    }

    /// Inference on a batch; returns `[B, M, H]`.
    pub fn predict_batch(&self, windows: &[Series]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward_batch(&mut tape, &p, windows, &mut Mode::Eval)?;
        Ok(tape.value(out.prediction).clone())
    }

    /// Inference on one `M x L` window with per-branch detail.
    pub fn forecast(&self, x: &Series) -> Result<Forecast> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward_batch(&mut tape, &p, std::slice::from_ref(x), &mut Mode::Eval)?;
        let m = x.channels();
        let to_series = |tape: &Tape<T>, v: Var| {
            let t = tape.value(v);
            let width = t.numel() / m;
            Series::new(m, width, t.data().iter().map(|v| v.as_f64()).collect())
        };
        Ok(Forecast {
            prediction: to_series(&tape, out.prediction)?,
            branch_outputs: out
                .outputs
                .iter()
                .map(|&v| to_series(&tape, v))
                .collect::<Result<_>>()?,
            branch_contributions: out
                .contributions
                .iter()
                .map(|&v| to_series(&tape, v))
                .collect::<Result<_>>()?,
        })
    }

    /// Identifiers of every parameter on a given path, across branches.
    pub fn path_params(&self, path: Path) -> Vec<ParamId> {
        self.branches
            .iter()
            .flat_map(|b| b.path_params(path))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Component specs implied by a config: the MPSD plan, or a single raw
/// branch keyed by the strongest period.
pub fn component_specs(config: &ModelConfig) -> Result<Vec<PeriodSpec>> {
    if config.ablation.use_mpsd {
        plan(config.context, config.horizon, &config.ascending_periods())
    } else {
        let p = *config
            .periods
            .first()
            .ok_or_else(|| Error::config("no periods configured"))?;
        Ok(vec![PeriodSpec::raw(p, config.context, config.horizon)])
    }
}
