//! CSV ingestion, train-split z-normalization, splits and sliding windows.

use std::path::Path;

use serde::Serialize;

use crate::config::{ConstantChannels, DataOptions, SplitRatios};
use crate::error::{Error, Result};
use crate::model::Forecast;
use crate::series::Series;

/// Per-channel statistics of the training rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation of each row of `x`.
    pub fn fit(x: &Series, names: &[String], policy: ConstantChannels) -> Result<Self> {
        let mut mean = Vec::with_capacity(x.channels());
        let mut std = Vec::with_capacity(x.channels());
        for (c, row) in x.rows().enumerate() {
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let mut s = var.sqrt();
            if s <= 1e-12 * m.abs().max(1.0) {
                match policy {
                    ConstantChannels::Reject => {
                        return Err(Error::ConstantChannel {
                            channel: c,
                            name: names.get(c).cloned().unwrap_or_default(),
                        })
                    }
                    ConstantChannels::Guard => s = 1.0,
                }
            }
            mean.push(m);
            std.push(s);
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, x: &Series) -> Series {
        x.map_values(|c, v| (v - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, x: &Series) -> Series {
        x.map_values(|c, v| v * self.std[c] + self.mean[c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!(
                "split must be train|val|test, got {s:?}"
            ))),
        }
    }
}

/// One context/target pair; `y` starts right after `x` ends.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: Series,
    pub y: Series,
    /// Row index of the first context step.
    pub origin: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    /// Normalized values, `M x T`.
    pub values: Series,
    pub train_end: usize,
    pub val_end: usize,
    pub norm: NormStats,
}

/// Split bounds for `rows` under ratios `a:b:c`.
pub fn split_bounds(rows: usize, (a, b, c): (u32, u32, u32)) -> Result<(usize, usize)> {
    let total = (a + b + c) as usize;
    let train_end = rows * a as usize / total;
    let val_end = rows * (a + b) as usize / total;
    if train_end == 0 || val_end <= train_end || val_end > rows {
        return Err(Error::Format(format!(
            "{rows} rows are too few to split {a}:{b}:{c}"
        )));
    }
    Ok((train_end, val_end))
}

fn ratios_for(name: &str, split: SplitRatios) -> (u32, u32, u32) {
    match split {
        SplitRatios::Fixed(a, b, c) => (a, b, c),
        SplitRatios::Auto if name.starts_with("ETT") => (6, 2, 2),
        SplitRatios::Auto => (7, 1, 2),
    }
}

impl Dataset {
    /// Builds a dataset from raw `M x T` values.
    pub fn from_raw(
        name: impl Into<String>,
        columns: Vec<String>,
        timestamps: Option<Vec<String>>,
        raw: &Series,
        options: &DataOptions,
    ) -> Result<Self> {
        let name = name.into();
        if columns.len() != raw.channels() {
            return Err(Error::Format(format!(
                "{} column names for {} channels",
                columns.len(),
                raw.channels()
            )));
        }
        let (train_end, val_end) = split_bounds(raw.len(), ratios_for(&name, options.split))?;
        let norm = NormStats::fit(
            &raw.slice(0, train_end)?,
            &columns,
            options.constant_channels,
        )?;
        Ok(Dataset {
            name,
            columns,
            timestamps,
            values: norm.normalize(raw),
            train_end,
            val_end,
            norm,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    /// Row range `[start, end)` of a split.
    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.rows()),
        }
    }

    /// Normalized rows of one split.
    pub fn split_values(&self, split: Split) -> Series {
        let (a, b) = self.range(split);
        self.values.slice(a, b - a).expect("non-empty split")
    }

    /// Context origins of every window of a split.
    ///
    /// Training windows lie entirely inside the training rows. Validation
    /// and test targets lie inside their split, while their context may
    /// reach back into preceding rows.
    pub fn window_origins(
        &self,
        split: Split,
        context: usize,
        horizon: usize,
        stride: usize,
    ) -> Vec<usize> {
        let (start, end) = self.range(split);
        let stride = stride.max(1);
        let first = match split {
            Split::Train => start,
            Split::Val | Split::Test => start.saturating_sub(context),
        };
        if end < first + context + horizon {
            log::warn!(
                "{:?} split of {} has no window for context {context} and horizon {horizon}",
                split,
                self.name
            );
            return Vec::new();
        }
        (first..=end - context - horizon).step_by(stride).collect()
    }

    pub fn sample(&self, origin: usize, context: usize, horizon: usize) -> Result<WindowSample> {
        Ok(WindowSample {
            x: self.values.slice(origin, context)?,
            y: self.values.slice(origin + context, horizon)?,
            origin,
        })
    }

    pub fn windows(
        &self,
        split: Split,
        context: usize,
        horizon: usize,
        stride: usize,
    ) -> impl Iterator<Item = WindowSample> + '_ {
        self.window_origins(split, context, horizon, stride)
            .into_iter()
            .map(move |o| self.sample(o, context, horizon).expect("origin in range"))
    }

    pub fn denormalize(&self, x: &Series) -> Series {
        self.norm.denormalize(x)
    }
}

fn looks_numeric(s: &str) -> bool {
    s.trim().parse::<f64>().is_ok()
}

/// Reads a benchmark CSV: a header row, an optional leading date column
/// and at least one numeric column.
pub fn load_csv(path: impl AsRef<Path>, options: &DataOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = std::fs::read_to_string(path)?;
    parse_csv(&name, &text, options)
}

pub fn parse_csv(name: &str, text: &str, options: &DataOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.len() < 2 {
        return Err(Error::Format(format!(
            "expected a header with at least 2 columns, found {}",
            header.len()
        )));
    }
    let records: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Format("no data rows".into()))?;
    let has_date = header[0].eq_ignore_ascii_case("date") || !looks_numeric(&first[0]);
    let skip = usize::from(has_date);
    let columns: Vec<String> = header[skip..].to_vec();
    if columns.is_empty() {
        return Err(Error::Format("no numeric columns".into()));
    }
    let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(records.len()); columns.len()];
    let mut stamps = Vec::with_capacity(if has_date { records.len() } else { 0 });
    for (r, rec) in records.iter().enumerate() {
        // header is row 1 in file terms
        let row = r + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        if has_date {
            stamps.push(rec[0].to_owned());
        }
        for (c, out) in rows.iter_mut().enumerate() {
            let cell = &rec[c + skip];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + skip + 1,
                message: format!("{cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + skip + 1,
                    message: format!("{cell:?} is not finite"),
                });
            }
            out.push(v);
        }
    }
    let raw = Series::from_channels(&rows)?;
    Dataset::from_raw(name, columns, has_date.then_some(stamps), &raw, options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            _ => Err(Error::config(format!("format must be csv|json, got {s:?}"))),
        }
    }
}

#[derive(Serialize)]
struct ChannelForecast<'a> {
    name: &'a str,
    offset: f64,
    prediction: Vec<f64>,
    branches: Vec<Vec<f64>>,
}

/// Renders a forecast with its branch contributions.
///
/// With `stats`, values are mapped back to data units: each branch is
/// scaled by the channel std and the channel mean goes into `offset`, so
/// `prediction = offset + sum(branches)` holds in both modes.
pub fn export_forecast(
    fc: &Forecast,
    columns: &[String],
    stats: Option<&NormStats>,
    format: ExportFormat,
) -> Result<String> {
    let m = fc.prediction.channels();
    let h = fc.prediction.len();
    let mut channels = Vec::with_capacity(m);
    for c in 0..m {
        let (scale, offset) = stats.map_or((1.0, 0.0), |s| (s.std[c], s.mean[c]));
        channels.push(ChannelForecast {
            name: columns.get(c).map_or("", String::as_str),
            offset,
            prediction: fc
                .prediction
                .channel(c)
                .iter()
                .map(|v| v * scale + offset)
                .collect(),
            branches: fc
                .branch_contributions
                .iter()
                .map(|b| b.channel(c).iter().map(|v| v * scale).collect())
                .collect(),
        });
    }
    match format {
        ExportFormat::Json => Ok(serde_json::to_string_pretty(&serde_json::json!({
            "denormalized": stats.is_some(),
            "horizon": h,
            "channels": channels,
        }))?),
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut head = vec![
                "channel".to_owned(),
                "step".to_owned(),
                "prediction".to_owned(),
                "offset".to_owned(),
            ];
            head.extend((0..fc.branch_contributions.len()).map(|j| format!("branch{j}")));
            w.write_record(&head)?;
            for ch in &channels {
                for t in 0..h {
                    let mut rec = vec![
                        ch.name.to_owned(),
                        t.to_string(),
                        ch.prediction[t].to_string(),
                        ch.offset.to_string(),
                    ];
                    rec.extend(ch.branches.iter().map(|b| b[t].to_string()));
                    w.write_record(&rec)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
        }
    }
}
