//! Optimization, evaluation and the ablation driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{AblationFlags, Detection, ModelConfig, RunConfig, TrainConfig};
use crate::data::{Dataset, Split, WindowSample};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ParamStore};
use crate::series::Series;
use crate::spectral::{top_k_periods_bounded, top_k_periods_windowed};
use crate::tensor::{Scalar, Tape, Tensor, Var};

fn check_same(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "metric inputs differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_same(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_same(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Differentiable mean squared error over all elements.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape {
            op: "mse_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// Bias-corrected Adam update of one buffer at step `t` (1-based).
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: &AdamParams,
) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] = T::of(param[i].as_f64() - h.lr * mhat / (vhat.sqrt() + h.eps));
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamParams,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(hyper: AdamParams, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            hyper,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, t) in store.tensors_mut() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {name}[{i}] is {}",
                        g[i].as_f64()
                    )));
                }
            }
        }
        self.t += 1;
        for ((_, t), (m, v)) in store
            .tensors_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            adam_update(t.data_mut(), &g, m, v, self.t, &self.hyper);
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in store.tensors_mut() {
            let Some(g) = t
                .grad()
                .map(|g| g.iter().map(|&v| v * T::of(s)).collect::<Vec<T>>())
            else {
                continue;
            };
            t.zero_grad();
            t.accumulate_grad(&g).expect("same length");
        }
    }
    norm
}

/// Random access to training or evaluation windows.
pub trait WindowSource {
    fn count(&self) -> usize;
    fn get(&self, i: usize) -> Result<WindowSample>;
}

impl WindowSource for [WindowSample] {
    fn count(&self) -> usize {
        self.len()
    }

    fn get(&self, i: usize) -> Result<WindowSample> {
        Ok(self[i].clone())
    }
}

impl WindowSource for Vec<WindowSample> {
    fn count(&self) -> usize {
        self.len()
    }

    fn get(&self, i: usize) -> Result<WindowSample> {
        Ok(self[i].clone())
    }
}

/// Windows of one dataset split, sampled on demand.
pub struct SplitWindows<'a> {
    pub data: &'a Dataset,
    pub origins: Vec<usize>,
    pub context: usize,
    pub horizon: usize,
}

impl<'a> SplitWindows<'a> {
    pub fn new(
        data: &'a Dataset,
        split: Split,
        context: usize,
        horizon: usize,
        stride: usize,
    ) -> Self {
        SplitWindows {
            data,
            origins: data.window_origins(split, context, horizon, stride),
            context,
            horizon,
        }
    }
}

impl WindowSource for SplitWindows<'_> {
    fn count(&self) -> usize {
        self.origins.len()
    }

    fn get(&self, i: usize) -> Result<WindowSample> {
        self.data
            .sample(self.origins[i], self.context, self.horizon)
    }
}

fn batch<W: WindowSource + ?Sized>(src: &W, idx: &[usize]) -> Result<(Vec<Series>, Vec<Series>)> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        let w = src.get(i)?;
        xs.push(w.x);
        ys.push(w.y);
    }
    Ok((xs, ys))
}

fn stack<T: Scalar>(ys: &[Series]) -> Result<Tensor<T>> {
    let m = ys[0].channels();
    let h = ys[0].len();
    let data = ys
        .iter()
        .flat_map(|y| y.data().iter().map(|&v| T::of(v)))
        .collect();
    Tensor::new(vec![ys.len(), m, h], data)
}

/// Applies `f` to consecutive batches of `src` on up to `threads` scoped
/// threads and returns the results in batch order.
pub fn map_batches<W, R, F>(src: &W, batch_size: usize, threads: usize, f: F) -> Result<Vec<R>>
where
    W: WindowSource + Sync + ?Sized,
    R: Send,
    F: Fn(&[Series], &[Series]) -> Result<R> + Sync,
{
    let idx: Vec<usize> = (0..src.count()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let run = |chunk: &[usize]| -> Result<R> {
        let (xs, ys) = batch(src, chunk)?;
        f(&xs, &ys)
    };
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        return chunks.iter().map(|c| run(c)).collect();
    }
    let per = chunks.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                scope.spawn(move || group.iter().map(|c| run(c)).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(chunks.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam,
    xs: &[Series],
    ys: &[Series],
    clip_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let dropout = model.config.dropout;
    let mut mode = Mode::Train { rng, dropout };
    let out = model.forward_batch(&mut tape, &p, xs, &mut mode)?;
    let target = tape.constant(stack(ys)?);
    let loss = mse_loss(&mut tape, out.prediction, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    model.params.zero_grads();
    model.params.accumulate(&grads, &p)?;
    clip_grad_norm(&mut model.params, clip_norm);
    opt.step(&mut model.params)?;
    Ok(value)
}

/// Mean squared error of `model` over every window of `src`.
pub fn validation_mse<T: Scalar, W: WindowSource + Sync + ?Sized>(
    model: &Model<T>,
    src: &W,
    batch_size: usize,
    threads: usize,
) -> Result<f64> {
    let parts = map_batches(src, batch_size, threads, |xs, ys| {
        let pred = model.predict_batch(xs)?;
        let mut sum = 0.0;
        for (p, t) in pred.data().iter().zip(ys.iter().flat_map(|y| y.data())) {
            let d = p.as_f64() - t;
            sum += d * d;
        }
        Ok((sum, pred.numel()))
    })?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::contract("no validation windows"));
    }
    Ok(parts.iter().map(|p| p.0).sum::<f64>() / count as f64)
}

/// Seeded mini-batch training with early stopping on validation MSE.
/// The best-validation weights are left in `model`.
pub fn train_on<T: Scalar, A: WindowSource + ?Sized, B: WindowSource + Sync + ?Sized>(
    model: &mut Model<T>,
    train: &A,
    val: &B,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train.count() == 0 {
        return Err(Error::contract("no training windows"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(AdamParams::from(cfg), &model.params);
    let mut order: Vec<usize> = (0..train.count()).collect();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if cfg.max_batches_per_epoch > 0 {
            chunks.truncate(cfg.max_batches_per_epoch);
        }
        let mut total = 0.0;
        for (b, chunk) in chunks.iter().enumerate() {
            let (xs, ys) = batch(train, chunk)?;
            total += train_step(model, &mut opt, &xs, &ys, cfg.clip_norm, &mut dropout_rng)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
        }
        let train_loss = total / chunks.len() as f64;
        let val_mse = validation_mse(model, val, cfg.batch_size, cfg.threads)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite(format!("validation mse at epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_mse:.6}");
        epochs.push(EpochRecord {
            epoch,
            batches: chunks.len(),
            train_loss,
            val_mse,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let (best_val_mse, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    model.params.zero_grads();
    Ok(History {
        epochs,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}

/// [`train_on`] over a dataset's train and validation splits.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<History> {
    let (l, h) = (model.context(), model.horizon());
    let tr = SplitWindows::new(data, Split::Train, l, h, 1);
    let va = SplitWindows::new(data, Split::Val, l, h, cfg.val_stride);
    train_on(model, &tr, &va, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    /// Error at each horizon step, averaged over windows and channels.
    pub per_step_mse: Vec<f64>,
    pub per_step_mae: Vec<f64>,
    pub repeat_last: Metrics,
    pub seasonal_naive: Metrics,
    /// Period used by the seasonal-naive baseline.
    pub season: usize,
}

#[derive(Default, Clone)]
struct Accum {
    se: f64,
    ae: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, p: f64, t: f64) {
        self.se += (p - t) * (p - t);
        self.ae += (p - t).abs();
        self.n += 1;
    }

    fn merge(&mut self, other: &Accum) {
        self.se += other.se;
        self.ae += other.ae;
        self.n += other.n;
    }

    fn metrics(&self) -> Metrics {
        Metrics {
            mse: self.se / self.n as f64,
            mae: self.ae / self.n as f64,
        }
    }
}

/// Repeats the last context value over the horizon.
pub fn repeat_last(x: &Series, horizon: usize) -> Series {
    let rows: Vec<Vec<f64>> = x.rows().map(|r| vec![r[r.len() - 1]; horizon]).collect();
    Series::from_channels(&rows).expect("rectangular")
}

/// Repeats the last full `period` of the context over the horizon.
pub fn seasonal_naive(x: &Series, horizon: usize, period: usize) -> Result<Series> {
    if period == 0 || period > x.len() {
        return Err(Error::contract(format!(
            "season {period} outside [1, {}]",
            x.len()
        )));
    }
    let l = x.len();
    let rows: Vec<Vec<f64>> = x
        .rows()
        .map(|r| (0..horizon).map(|t| r[l - period + t % period]).collect())
        .collect();
    Series::from_channels(&rows)
}

/// Scores any forecaster against both baselines over `src`.
pub fn evaluate_with<W, P>(
    src: &W,
    split: Split,
    horizon: usize,
    season: usize,
    batch_size: usize,
    threads: usize,
    predict: P,
) -> Result<EvalReport>
where
    W: WindowSource + Sync + ?Sized,
    P: Fn(&[Series]) -> Result<Vec<Series>> + Sync,
{
    if src.count() == 0 {
        return Err(Error::contract(format!("no {split:?} windows to evaluate")));
    }
    let parts = map_batches(src, batch_size, threads, |xs, ys| {
        let mut model = Accum::default();
        let mut last = Accum::default();
        let mut naive = Accum::default();
        let mut step = vec![Accum::default(); horizon];
        let preds = predict(xs)?;
        for ((x, y), p) in xs.iter().zip(ys).zip(&preds) {
            if p.channels() != y.channels() || p.len() != horizon || y.len() != horizon {
                return Err(Error::contract("prediction shape differs from target"));
            }
            let rl = repeat_last(x, horizon);
            let sn = seasonal_naive(x, horizon, season)?;
            for c in 0..y.channels() {
                let yc = y.channel(c);
                for t in 0..horizon {
                    let pv = p.channel(c)[t];
                    model.add(pv, yc[t]);
                    step[t].add(pv, yc[t]);
                    last.add(rl.channel(c)[t], yc[t]);
                    naive.add(sn.channel(c)[t], yc[t]);
                }
            }
        }
        Ok((model, last, naive, step))
    })?;
    let mut model = Accum::default();
    let mut last = Accum::default();
    let mut naive = Accum::default();
    let mut step = vec![Accum::default(); horizon];
    for (m, l, n, s) in &parts {
        model.merge(m);
        last.merge(l);
        naive.merge(n);
        step.iter_mut().zip(s).for_each(|(a, b)| a.merge(b));
    }
    let m = model.metrics();
    let report = EvalReport {
        split,
        windows: src.count(),
        mse: m.mse,
        mae: m.mae,
        per_step_mse: step.iter().map(|a| a.metrics().mse).collect(),
        per_step_mae: step.iter().map(|a| a.metrics().mae).collect(),
        repeat_last: last.metrics(),
        seasonal_naive: naive.metrics(),
        season,
    };
    if !(report.mse.is_finite() && report.mae.is_finite()) {
        return Err(Error::NonFinite(format!("{split:?} metrics")));
    }
    Ok(report)
}

impl<T: Scalar> Model<T> {
    /// Batch inference returning one `M x H` series per window.
    pub fn predict_series(&self, xs: &[Series]) -> Result<Vec<Series>> {
        let t = self.predict_batch(xs)?;
        let (m, h) = (t.shape()[1], t.shape()[2]);
        t.data()
            .chunks_exact(m * h)
            .map(|c| Series::new(m, h, c.iter().map(|v| v.as_f64()).collect()))
            .collect()
    }
}

/// Test-protocol evaluation of a trained model on one split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    split: Split,
    batch_size: usize,
    threads: usize,
) -> Result<EvalReport> {
    let (l, h) = (model.context(), model.horizon());
    let src = SplitWindows::new(data, split, l, h, 1);
    let season = model.config.periods[0];
    evaluate_with(&src, split, h, season, batch_size, threads, |xs| {
        model.predict_series(xs)
    })
}

/// Periods for a run: the preset list, or `k` periods detected on the
/// training split. Detected periods are kept below the context length so
/// each fits inside one window.
pub fn resolve_periods(data: &Dataset, run: &RunConfig) -> Result<Vec<usize>> {
    if !run.model.periods.is_empty() {
        return Ok(run.model.periods.clone());
    }
    let train = data.split_values(Split::Train);
    let bound = run.model.context.saturating_sub(1);
    let found = match run.detection {
        Detection::TrainSplit => top_k_periods_bounded(&train, run.k, bound)?,
        Detection::Window => top_k_periods_windowed(&train, run.model.context, run.k, bound)?,
    };
    if found.periods.is_empty() {
        return Err(Error::Format(format!(
            "no periodic component found in the training split of {}",
            data.name
        )));
    }
    if found.periods.len() < run.k {
        log::warn!(
            "only {} distinct periods found (k = {})",
            found.periods.len(),
            run.k
        );
    }
    Ok(found.periods)
}

/// The six ablation settings: the full model, then components switched off.
pub const ABLATIONS: [(&str, AblationFlags); 6] = [
    ("baseline", AblationFlags::new(true, true, true, true)),
    ("aba1", AblationFlags::new(false, true, true, true)),
    ("aba2", AblationFlags::new(false, true, true, false)),
    ("aba3", AblationFlags::new(false, true, false, false)),
    ("aba4", AblationFlags::new(false, false, true, false)),
    ("aba5", AblationFlags::new(true, true, false, false)),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub val_mse: f64,
    pub test: EvalReport,
    pub history: History,
}

/// Trains and evaluates every ablation row with the same seed and budget.
pub fn run_ablation<T: Scalar>(
    data: &Dataset,
    base: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ABLATIONS
        .iter()
        .map(|(name, flags)| {
            let config = ModelConfig {
                ablation: *flags,
                ..base.clone()
            };
            let mut model = Model::<T>::build(config, cfg.seed)?;
            let history = train(&mut model, data, cfg)?;
            let test = evaluate(&model, data, Split::Test, cfg.batch_size, cfg.threads)?;
            log::info!(
                "{name}: val {:.6} test {:.6}",
                history.best_val_mse,
                test.mse
            );
            Ok(AblationRow {
                name: (*name).to_owned(),
                flags: *flags,
                val_mse: history.best_val_mse,
                test,
                history,
            })
        })
        .collect()
}

fn bit(b: bool) -> u8 {
    u8::from(b)
}

/// Table with the component flags followed by test MSE and MAE.
pub fn ablation_csv(rows: &[AblationRow], dataset: &str, horizon: usize) -> String {
    let mut s = format!(
        "components,MP-SeriesDecomp,Intra-Period,Inter-Period,Cross-Attn,{dataset}-{horizon} MSE,{dataset}-{horizon} MAE\n"
    );
    for r in rows {
        let f = r.flags;
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.name,
            bit(f.use_mpsd),
            bit(f.use_intra),
            bit(f.use_inter),
            bit(f.use_cross),
            r.test.mse,
            r.test.mae
        ));
    }
    s
}
