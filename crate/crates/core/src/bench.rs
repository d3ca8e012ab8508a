//! Wall-time and peak-memory measurement of training iterations.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::training::{train_step, Adam, AdamParams, SplitWindows, WindowSource};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub context: usize,
    /// Mean wall time of one optimizer step.
    pub ms_per_iter: f64,
    /// Standard deviation over the timed steps.
    pub ms_std: f64,
    /// Peak resident set size during the run, if the platform reports it.
    pub peak_rss_mb: Option<f64>,
    pub tokens_per_branch: Vec<usize>,
    pub iterations: usize,
}

fn status_kb(field: &str) -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/status").ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix(field))
        .and_then(|rest| rest.trim().trim_end_matches("kB").trim().parse().ok())
}

/// Peak resident set size of this process in kB (`VmHWM`).
pub fn peak_rss_kb() -> Option<u64> {
    status_kb("VmHWM:")
}

/// Resets the peak-RSS counter to the current RSS. Returns false when the
/// kernel does not allow it.
pub fn reset_peak_rss() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

/// Times `iters` training steps after `warmup` untimed ones.
pub fn bench_training<T: Scalar>(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    warmup: usize,
    iters: usize,
) -> Result<BenchResult> {
    if iters == 0 {
        return Err(Error::config("bench needs at least one timed iteration"));
    }
    let mut model = Model::<T>::build(model_cfg.clone(), train_cfg.seed)?;
    let src = SplitWindows::new(data, Split::Train, model_cfg.context, model_cfg.horizon, 1);
    let need = train_cfg.batch_size;
    if src.count() < need {
        return Err(Error::InputTooShort {
            len: src.count(),
            min: need,
        });
    }
    let mut order: Vec<usize> = (0..src.count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    order.shuffle(&mut rng);
    let mut opt = Adam::new(AdamParams::from(train_cfg), &model.params);
    let reset = reset_peak_rss();
    let mut times = Vec::with_capacity(iters);
    for i in 0..warmup + iters {
        let start = (i * need) % (order.len() - need + 1);
        let idx = &order[start..start + need];
        let (mut xs, mut ys) = (Vec::with_capacity(need), Vec::with_capacity(need));
        for &j in idx {
            let w = src.get(j)?;
            xs.push(w.x);
            ys.push(w.y);
        }
        let t = Instant::now();
        train_step(
            &mut model,
            &mut opt,
            &xs,
            &ys,
            train_cfg.clip_norm,
            &mut rng,
        )?;
        if i >= warmup {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
    if !reset {
        log::warn!("peak RSS could not be reset; values are process-wide maxima");
    }
    Ok(BenchResult {
        context: model_cfg.context,
        ms_per_iter: mean,
        ms_std: var.sqrt(),
        peak_rss_mb: peak_rss_kb().map(|kb| kb as f64 / 1024.0),
        tokens_per_branch: model.branches.iter().map(|b| b.tokens).collect(),
        iterations: iters,
    })
}

pub fn results_csv(rows: &[BenchResult]) -> String {
    let mut s =
        String::from("context,ms_per_iter,ms_std,peak_rss_mb,tokens_per_branch,iterations\n");
    for r in rows {
        let tokens: Vec<String> = r.tokens_per_branch.iter().map(usize::to_string).collect();
        s.push_str(&format!(
            "{},{:.3},{:.3},{},{},{}\n",
            r.context,
            r.ms_per_iter,
            r.ms_std,
            r.peak_rss_mb.map_or(String::new(), |m| format!("{m:.1}")),
            tokens.join(";"),
            r.iterations
        ));
    }
    s
}
