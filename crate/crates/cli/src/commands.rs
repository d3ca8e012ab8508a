use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use multitoken_core::bench::{bench_training, results_csv, BenchResult};
use multitoken_core::config::{parse_list, ConstantChannels, DataOptions};
use multitoken_core::data::{export_forecast, load_csv, Dataset, ExportFormat};
use multitoken_core::decomposition::mpsd;
use multitoken_core::model::{load, save};
use multitoken_core::spectral::top_k_periods_bounded;
use multitoken_core::training::{ablation_csv, evaluate, resolve_periods, run_ablation, train};
use multitoken_core::{Error, Model, Result, RunConfig, Scalar, Split};
use serde_json::json;

use crate::cli::{Cli, Command, Format, Global, Overrides};

/// 1: usage, configuration or contract; 2: input data; 3: numeric failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Parse { .. }
        | Error::Format(_)
        | Error::ConstantChannel { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Checkpoint(_) => 2,
        Error::Shape { .. }
        | Error::Contract(_)
        | Error::InputTooShort { .. }
        | Error::Window { .. }
        | Error::Config(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Periods {
            input,
            k,
            column,
            max_period,
        } => periods(&input, k, column.as_deref(), max_period),
        Command::Decompose {
            input,
            periods,
            output_dir,
            column,
            start,
            len,
            horizon,
        } => decompose(
            &input,
            &periods,
            &output_dir,
            column.as_deref(),
            start,
            len,
            horizon,
        ),
        Command::Train {
            data,
            overrides,
            checkpoint_out,
            history_out,
        } => {
            let run = run_config(&g, &overrides)?;
            dispatch!(g, cmd_train(&data, &run, &checkpoint_out, history_out))
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            config,
            output,
        } => {
            let run = run_config(
                &g,
                &Overrides {
                    config,
                    ..Overrides::default()
                },
            )?;
            let split: Split = split.parse()?;
            dispatch!(
                g,
                cmd_eval(&data, &checkpoint, split, &run, output.as_deref())
            )
        }
        Command::Forecast {
            data,
            checkpoint,
            output,
            format,
            denormalize,
            end,
            config,
        } => {
            let run = run_config(
                &g,
                &Overrides {
                    config,
                    ..Overrides::default()
                },
            )?;
            let format = match format {
                Format::Csv => ExportFormat::Csv,
                Format::Json => ExportFormat::Json,
            };
            dispatch!(
                g,
                cmd_forecast(&data, &checkpoint, &output, format, denormalize, end, &run)
            )
        }
        Command::Bench {
            data,
            lengths,
            horizon,
            rho,
            periods,
            k,
            warmup,
            iters,
            config,
            output,
        } => {
            let mut run = run_config(
                &g,
                &Overrides {
                    config,
                    ..Overrides::default()
                },
            )?;
            run.model.horizon = horizon;
            run.model.rho = rho;
            run.k = k;
            if let Some(p) = periods {
                run.model.periods = parse_list("periods", &p)?;
            }
            let lengths = parse_list("lengths", &lengths)?;
            dispatch!(
                g,
                cmd_bench(&data, &lengths, &run, warmup, iters, output.as_deref())
            )
        }
        Command::Ablate {
            data,
            overrides,
            output,
            details_out,
        } => {
            let run = run_config(&g, &overrides)?;
            dispatch!(g, cmd_ablate(&data, &run, &output, details_out.as_deref()))
        }
    }
}

macro_rules! dispatch {
    ($g:expr, $f:ident($($arg:expr),*)) => {
        if $g.float64 {
            $f::<f64>($($arg),*)
        } else {
            $f::<f32>($($arg),*)
        }
    };
}
use dispatch;

fn run_config(g: &Global, o: &Overrides) -> Result<RunConfig> {
    let mut run = match &o.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.context {
        run.model.context = v;
    }
    if let Some(v) = o.horizon {
        run.model.horizon = v;
    }
    if let Some(v) = o.epochs {
        run.train.epochs = v;
    }
    if let Some(p) = &o.periods {
        run.model.periods = parse_list("periods", p)?;
    }
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        run.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        run.train.seed = s;
    }
    if let Some(t) = g.threads {
        run.train.threads = t;
    }
    run.validate()?;
    Ok(run)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn lenient() -> DataOptions {
    DataOptions {
        constant_channels: ConstantChannels::Guard,
        ..DataOptions::default()
    }
}

fn select_column(
    data: &Dataset,
    column: Option<&str>,
) -> Result<(Vec<String>, multitoken_core::Series)> {
    match column {
        None => Ok((data.columns.clone(), data.values.clone())),
        Some(name) => {
            let c = data.columns.iter().position(|n| n == name).ok_or_else(|| {
                Error::Config(format!(
                    "no column named {name:?} (have {})",
                    data.columns.join(", ")
                ))
            })?;
            Ok((
                vec![name.to_owned()],
                multitoken_core::Series::univariate(data.values.channel(c).to_vec())?,
            ))
        }
    }
}

fn periods(input: &Path, k: usize, column: Option<&str>, max_period: Option<usize>) -> Result<()> {
    let data = load_csv(input, &lenient())?;
    let (names, values) = select_column(&data, column)?;
    let found = top_k_periods_bounded(&values, k, max_period.unwrap_or(usize::MAX))?;
    if found.periods.is_empty() {
        return Err(Error::Format(format!(
            "no periodic component in {}",
            names.join(", ")
        )));
    }
    if found.periods.len() < k {
        log::warn!("only {} distinct periods found", found.periods.len());
    }
    let amps: Vec<f64> = found
        .frequencies
        .iter()
        .map(|&f| found.amplitudes[f])
        .collect();
    let out = json!({
        "input": input,
        "length": values.len(),
        "columns": names,
        "periods": found.periods,
        "frequencies": found.frequencies,
        "amplitudes": amps,
    });
    emit(&serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

fn decompose(
    input: &Path,
    periods: &str,
    out_dir: &Path,
    column: Option<&str>,
    start: usize,
    len: Option<usize>,
    horizon: usize,
) -> Result<()> {
    let data = load_csv(input, &lenient())?;
    let (names, values) = select_column(&data, column)?;
    let raw = data.norm.denormalize(&values);
    let raw = if column.is_some() {
        let c = data
            .columns
            .iter()
            .position(|n| Some(n.as_str()) == column)
            .expect("checked");
        values.map_values(|_, v| v * data.norm.std[c] + data.norm.mean[c])
    } else {
        raw
    };
    let len = len.unwrap_or(raw.len().saturating_sub(start));
    if start + len > raw.len() || len == 0 {
        return Err(Error::Config(format!(
            "rows {start}..{} outside the {} available",
            start + len,
            raw.len()
        )));
    }
    let mut periods = parse_list("periods", periods)?;
    periods.sort_unstable();
    periods.dedup();
    let group = mpsd(&raw.slice(start, len)?, &periods, horizon)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::new();
    for (j, (c, spec)) in group.components.iter().zip(&group.specs).enumerate() {
        let kind = if j == periods.len() {
            "trend"
        } else {
            "season"
        };
        let file = format!("component_{j}_{kind}_p{}.csv", spec.p);
        let mut text = names.join(",");
        text.push('\n');
        for t in 0..c.len() {
            let row: Vec<String> = (0..c.channels())
                .map(|ch| c.channel(ch)[t].to_string())
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        write(&out_dir.join(&file), &text)?;
        manifest.push(json!({ "file": file, "kind": kind, "spec": spec }));
    }
    let manifest = json!({
        "input": input,
        "start": start,
        "len": len,
        "horizon": horizon,
        "periods": periods,
        "components": manifest,
    });
    write(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    log::info!(
        "wrote {} components to {}",
        periods.len() + 1,
        out_dir.display()
    );
    Ok(())
}

fn cmd_train<T: Scalar>(
    data_path: &Path,
    run: &RunConfig,
    ckpt: &Path,
    history_out: Option<PathBuf>,
) -> Result<()> {
    let data = load_csv(data_path, &run.data)?;
    let mut config = run.model.clone();
    config.periods = resolve_periods(&data, run)?;
    log::info!("periods {:?}", config.periods);
    let mut model = Model::<T>::build(config, run.train.seed)?;
    log::info!(
        "{} parameters in {} branches",
        model.num_parameters(),
        model.branches.len()
    );
    let history = train(&mut model, &data, &run.train)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save(&model, ckpt)?;
    let history_path = history_out.unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".history.json");
        PathBuf::from(p)
    });
    write(&history_path, &history.to_json()?)?;
    let summary = json!({
        "checkpoint": ckpt,
        "history": history_path,
        "periods": model.config.periods,
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_mse": history.best_val_mse,
    });
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn cmd_eval<T: Scalar>(
    data_path: &Path,
    ckpt: &Path,
    split: Split,
    run: &RunConfig,
    output: Option<&Path>,
) -> Result<()> {
    let model: Model<T> = load(ckpt)?;
    let data = load_csv(data_path, &run.data)?;
    let report = evaluate(
        &model,
        &data,
        split,
        run.train.batch_size,
        run.train.threads,
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    match output {
        Some(p) => write(p, &text)?,
        None => emit(&text)?,
    }
    Ok(())
}

fn cmd_forecast<T: Scalar>(
    data_path: &Path,
    ckpt: &Path,
    output: &Path,
    format: ExportFormat,
    denormalize: bool,
    end: Option<usize>,
    run: &RunConfig,
) -> Result<()> {
    let model: Model<T> = load(ckpt)?;
    let data = load_csv(data_path, &run.data)?;
    let l = model.context();
    let end = end.unwrap_or(data.rows());
    if end > data.rows() || end < l {
        return Err(Error::Config(format!(
            "--end {end} needs {l} context rows and at most {} rows",
            data.rows()
        )));
    }
    let x = data.values.slice(end - l, l)?;
    let fc = model.forecast(&x)?;
    let text = export_forecast(
        &fc,
        &data.columns,
        denormalize.then_some(&data.norm),
        format,
    )?;
    write(output, &text)?;
    log::info!(
        "forecast of {} steps from row {end} written to {}",
        model.horizon(),
        output.display()
    );
    Ok(())
}

fn cmd_bench<T: Scalar>(
    data_path: &Path,
    lengths: &[usize],
    run: &RunConfig,
    warmup: usize,
    iters: usize,
    output: Option<&Path>,
) -> Result<()> {
    let data = load_csv(data_path, &run.data)?;
    let shortest = *lengths
        .iter()
        .min()
        .ok_or_else(|| Error::Config("no lengths given".into()))?;
    let mut shared = run.clone();
    shared.model.context = shortest;
    let periods = resolve_periods(&data, &shared)?;
    log::info!("bench periods {periods:?}");
    let mut rows: Vec<BenchResult> = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let mut cfg = run.model.clone();
        cfg.context = l;
        cfg.periods = periods.clone();
        let r = bench_training::<T>(&data, &cfg, &run.train, warmup, iters)?;
        log::info!("L={l}: {:.1} ms/iter", r.ms_per_iter);
        rows.push(r);
    }
    let csv = results_csv(&rows);
    match output {
        Some(p) => write(p, &csv)?,
        None => emit(csv.trim_end())?,
    }
    Ok(())
}

fn cmd_ablate<T: Scalar>(
    data_path: &Path,
    run: &RunConfig,
    output: &Path,
    details: Option<&Path>,
) -> Result<()> {
    let data = load_csv(data_path, &run.data)?;
    let mut base = run.model.clone();
    base.periods = resolve_periods(&data, run)?;
    let rows = run_ablation::<T>(&data, &base, &run.train)?;
    write(output, &ablation_csv(&rows, &data.name, base.horizon))?;
    if let Some(p) = details {
        write(p, &serde_json::to_string_pretty(&rows)?)?;
    }
    let summary: Vec<_> = rows
        .iter()
        .map(|r| json!({ "name": r.name, "val_mse": r.val_mse, "test_mse": r.test.mse, "test_mae": r.test.mae }))
        .collect();
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
