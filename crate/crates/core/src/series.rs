//! Multichannel series container shared by the preprocessing stages.

use crate::error::{Error, Result};

/// An `M x L` block of values, one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn new(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(Error::contract(format!(
                "series must be non-empty, got {channels}x{len}"
            )));
        }
        if data.len() != channels * len {
            return Err(Error::contract(format!(
                "series {channels}x{len} needs {} values, got {}",
                channels * len,
                data.len()
            )));
        }
        Ok(Series {
            channels,
            len,
            data,
        })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Series {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_channels(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::contract("channels have unequal lengths"));
        }
        Series::new(rows.len(), len, rows.concat())
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        Series::new(1, len, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.len)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Applies `f` to every channel, producing rows of a new length.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Series> {
        let rows: Vec<Vec<f64>> = self.rows().map(&mut f).collect();
        Series::from_channels(&rows)
    }

    /// Elementwise map that also sees the channel index.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Series {
        let data = self
            .data
            .chunks_exact(self.len)
            .enumerate()
            .flat_map(|(c, row)| row.iter().map(move |&v| (c, v)))
            .map(|(c, v)| f(c, v))
            .collect();
        Series {
            channels: self.channels,
            len: self.len,
            data,
        }
    }

    pub fn zip_with(&self, other: &Series, f: impl Fn(f64, f64) -> f64) -> Result<Series> {
        if self.channels != other.channels || self.len != other.len {
            return Err(Error::contract(format!(
                "series shapes differ: {}x{} vs {}x{}",
                self.channels, self.len, other.channels, other.len
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Series::new(self.channels, self.len, data)
    }

    /// Columns `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Series> {
        if start + len > self.len || len == 0 {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range for length {}",
                start + len,
                self.len
            )));
        }
        self.map_rows(|r| r[start..start + len].to_vec())
    }
}
