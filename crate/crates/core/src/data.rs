use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tsnas_tensor::rng::NamedRng;
use tsnas_tensor::{Element, Tensor};

use crate::config::SizeClass;
use crate::error::{CoreError, Result};
use crate::network::Batch;

pub const BIG_THRESHOLD: usize = 100;
const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"];

/// A T×C matrix of observations, row-major, plus which columns are forecast targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub values: Vec<f64>,
    pub names: Vec<String>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    pub target_mask: Vec<bool>,
    pub size_class: SizeClass,
    /// Rows dropped at load time because they contained NaN.
    pub rejected_rows: usize,
}

pub fn size_class_for(n: usize, threshold: usize) -> SizeClass {
    if n > threshold {
        SizeClass::Big
    } else {
        SizeClass::Small
    }
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    DATE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().map(|d| d.and_hms_opt(0, 0, 0).expect("midnight")))
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

impl TimeSeriesDataset {
    pub fn new(values: Vec<f64>, names: Vec<String>) -> Result<Self> {
        let c = names.len();
        if c == 0 || values.len() % c != 0 {
            return Err(CoreError::data(format!("{} values do not fill {c} columns", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::data("non-finite value"));
        }
        Ok(TimeSeriesDataset {
            values,
            target_mask: vec![true; c],
            size_class: size_class_for(c, BIG_THRESHOLD),
            names,
            timestamps: None,
            rejected_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.n_vars() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(t, c)).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        (0..self.n_vars()).filter(|&c| self.target_mask[c]).collect()
    }

    pub fn features(&self) -> Vec<usize> {
        (0..self.n_vars()).filter(|&c| !self.target_mask[c]).collect()
    }

    pub fn n_targets(&self) -> usize {
        self.targets().len()
    }

    pub fn n_features(&self) -> usize {
        self.n_vars() - self.n_targets()
    }

    /// Marks the named columns as targets; all others become known features.
    pub fn with_targets(mut self, targets: &[String]) -> Result<Self> {
        if targets.is_empty() {
            return Ok(self);
        }
        let mut mask = vec![false; self.n_vars()];
        for t in targets {
            let i = self
                .names
                .iter()
                .position(|n| n == t)
                .ok_or_else(|| CoreError::Data { msg: format!("no column named {t:?}"), row: None, column: Some(t.clone()) })?;
            mask[i] = true;
        }
        self.target_mask = mask;
        self.size_class = size_class_for(self.n_targets(), BIG_THRESHOLD);
        Ok(self)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f)
    }

    pub fn read_csv(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| CoreError::data(format!("unreadable header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(CoreError::data("empty file"));
        }
        let has_date = header[0].eq_ignore_ascii_case("date");
        let names: Vec<String> = header[has_date as usize..].to_vec();
        if names.is_empty() {
            return Err(CoreError::data("no value columns"));
        }
        let mut values = Vec::new();
        let mut stamps = Vec::new();
        let mut stamps_ok = has_date;
        let mut rejected = 0;
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| CoreError::Data { msg: e.to_string(), row: Some(row), column: None })?;
            if rec.len() != header.len() {
                return Err(CoreError::Data {
                    msg: format!("row {row} has {} fields, header has {}", rec.len(), header.len()),
                    row: Some(row),
                    column: None,
                });
            }
            let mut parsed = Vec::with_capacity(names.len());
            for (j, name) in names.iter().enumerate() {
                let cell = &rec[j + has_date as usize];
                let v: f64 = cell.parse().map_err(|_| CoreError::Data {
                    msg: format!("unparsable number {cell:?} at row {row}, column {name:?}"),
                    row: Some(row),
                    column: Some(name.clone()),
                })?;
                parsed.push(v);
            }
            if parsed.iter().any(|v| v.is_nan()) {
                rejected += 1;
                continue;
            }
            if let Some(j) = parsed.iter().position(|v| v.is_infinite()) {
                return Err(CoreError::Data {
                    msg: format!("infinite value at row {row}, column {:?}", names[j]),
                    row: Some(row),
                    column: Some(names[j].clone()),
                });
            }
            if stamps_ok {
                match parse_time(&rec[0]) {
                    Some(t) => stamps.push(t),
                    None => {
                        log::warn!("unparsable date {:?} at row {row}; dropping timestamps", &rec[0]);
                        stamps_ok = false;
                    }
                }
            }
            values.extend(parsed);
        }
        if values.is_empty() {
            return Err(CoreError::data(if rejected > 0 { "every row contains NaN" } else { "empty file" }));
        }
        if rejected > 0 {
            log::warn!("rejected {rejected} rows containing NaN");
        }
        let mut ds = Self::new(values, names)?;
        ds.rejected_rows = rejected;
        ds.timestamps = stamps_ok.then_some(stamps);
        Ok(ds)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::data(e.to_string()))?;
        let mut header: Vec<String> = Vec::new();
        if self.timestamps.is_some() {
            header.push("date".into());
        }
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(|e| CoreError::data(e.to_string()))?;
        for t in 0..self.len() {
            let mut rec: Vec<String> = Vec::new();
            if let Some(ts) = &self.timestamps {
                rec.push(ts[t].format("%Y-%m-%d %H:%M:%S").to_string());
            }
            // `{:?}` prints the shortest representation that parses back to the same f64
            rec.extend((0..self.n_vars()).map(|c| format!("{:?}", self.get(t, c))));
            w.write_record(&rec).map_err(|e| CoreError::data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-column z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &TimeSeriesDataset, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > ds.len() {
            return Err(CoreError::contract(format!("cannot fit statistics on {range:?} of {}", ds.len())));
        }
        let n = range.len() as f64;
        let mut mean = vec![0.0; ds.n_vars()];
        let mut std = vec![0.0; ds.n_vars()];
        for (c, (m, s)) in mean.iter_mut().zip(&mut std).enumerate() {
            *m = range.clone().map(|t| ds.get(t, c)).sum::<f64>() / n;
            let var = range.clone().map(|t| (ds.get(t, c) - *m).powi(2)).sum::<f64>() / n;
            // constant columns are only centred
            *s = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> TimeSeriesDataset {
        let c = ds.n_vars();
        let values = ds.values.iter().enumerate().map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c]).collect();
        TimeSeriesDataset { values, ..ds.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPurpose {
    Search,
    Final,
}

pub const FINAL_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Chronological ranges: search → (train, val) halves; final → (train, val, test).
pub fn chrono_split(t: usize, purpose: SplitPurpose, ratios: [f64; 3], l: usize, h: usize) -> Result<Vec<Range<usize>>> {
    let ranges = match purpose {
        SplitPurpose::Search => {
            if t < 2 * (l + h) {
                return Err(CoreError::config(format!("search split needs T ≥ 2(L+H) = {}, got {t}", 2 * (l + h))));
            }
            vec![0..t / 2, t / 2..t]
        }
        SplitPurpose::Final => {
            let s: f64 = ratios.iter().sum();
            if ratios.iter().any(|&r| r <= 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(CoreError::config(format!("split ratios {ratios:?} must be positive and sum to 1")));
            }
            let a = (t as f64 * ratios[0]).round() as usize;
            let b = (t as f64 * (ratios[0] + ratios[1])).round() as usize;
            vec![0..a, a..b, b..t]
        }
    };
    for r in &ranges {
        if r.len() < l + h {
            return Err(CoreError::config(format!("split {r:?} is shorter than L+H = {}", l + h)));
        }
    }
    Ok(ranges)
}

/// Window start indices s, s+stride, … with s+L+H ≤ range end.
pub fn window_starts(range: Range<usize>, l: usize, h: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(CoreError::contract("stride must be at least 1"));
    }
    if range.len() < l + h {
        log::warn!("range {range:?} holds no window of length {}", l + h);
        return Ok(Vec::new());
    }
    Ok((range.start..=range.end - l - h).step_by(stride).collect())
}

/// Windows over one split of a dataset.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    pub ds: &'a TimeSeriesDataset,
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl<'a> Windows<'a> {
    pub fn new(ds: &'a TimeSeriesDataset, range: Range<usize>, l: usize, h: usize, stride: usize) -> Result<Self> {
        if range.end > ds.len() {
            return Err(CoreError::contract(format!("range {range:?} exceeds series length {}", ds.len())));
        }
        Ok(Windows { ds, starts: window_starts(range, l, h, stride)?, lookback: l, horizon: h })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    fn block<T: Element>(&self, starts: &[usize], offset: usize, len: usize, cols: &[usize]) -> Tensor<T> {
        let mut v = Vec::with_capacity(starts.len() * len * cols.len());
        for &s in starts {
            for t in s + offset..s + offset + len {
                v.extend(cols.iter().map(|&c| T::from_f64(self.ds.get(t, c)).expect("finite")));
            }
        }
        Tensor::new(&[starts.len(), len, cols.len()], v).expect("shape matches")
    }

    pub fn batch<T: Element>(&self, starts: &[usize]) -> Batch<T> {
        let (l, h) = (self.lookback, self.horizon);
        let (tg, ft) = (self.ds.targets(), self.ds.features());
        let feats = !ft.is_empty();
        Batch {
            past: self.block(starts, 0, l, &tg),
            future: self.block(starts, l, h, &tg),
            past_feats: feats.then(|| self.block(starts, 0, l, &ft)),
            future_feats: feats.then(|| self.block(starts, l, h, &ft)),
            starts: starts.to_vec(),
        }
    }

    /// Batches in start order, or shuffled by `rng`.
    pub fn batches<T: Element>(&self, batch_size: usize, rng: Option<&mut NamedRng>) -> Vec<Batch<T>> {
        let mut order = self.starts.clone();
        if let Some(r) = rng {
            order.shuffle(r);
        }
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Sine,
    Trend,
    Piecewise,
    TrendSeasonal,
    SineMixture,
}

/// Deterministic test series. Trend columns ramp with slope 1 from offset j.
pub fn make_synthetic(kind: SyntheticKind, t: usize, n: usize, sigma: f64, seed: u64) -> TimeSeriesDataset {
    let mut rng = NamedRng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = match kind {
            SyntheticKind::Sine => {
                let period = rng.random_range(8.0..48.0);
                let phase = rng.random_range(0.0..tau);
                (0..t).map(|i| (tau * i as f64 / period + phase).sin()).collect()
            }
            SyntheticKind::Trend => (0..t).map(|i| i as f64 + j as f64).collect(),
            SyntheticKind::Piecewise => {
                let mut out = Vec::with_capacity(t);
                let (mut level, mut slope) = (0.0, 0.0);
                let mut left = 0usize;
                for _ in 0..t {
                    if left == 0 {
                        left = rng.random_range((t / 10).max(1)..=(t / 4).max(1));
                        level += rng.random_range(-2.0..2.0);
                        slope = rng.random_range(-0.05..0.05);
                    }
                    level += slope;
                    left -= 1;
                    out.push(level);
                }
                out
            }
            SyntheticKind::TrendSeasonal => {
                let slope = 0.002 * (j + 1) as f64;
                let amp = 1.0 + 0.5 * j as f64;
                let phase = rng.random_range(0.0..tau);
                (0..t).map(|i| slope * i as f64 + amp * (tau * i as f64 / 24.0 + phase).sin()).collect()
            }
            SyntheticKind::SineMixture => {
                let parts: Vec<(f64, f64, f64)> = [24.0, 12.0, 48.0]
                    .iter()
                    .map(|&p| (rng.random_range(0.3..1.0), p, rng.random_range(0.0..tau)))
                    .collect();
                (0..t)
                    .map(|i| parts.iter().map(|(a, p, ph)| a * (tau * i as f64 / p + ph).sin()).sum())
                    .collect()
            }
        };
        cols.push(col);
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        for col in &mut cols {
            for v in col.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let values = (0..t).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    let names = (0..n).map(|j| format!("v{j}")).collect();
    TimeSeriesDataset::new(values, names).expect("finite synthetic data")
}

/// One dataset entry of a registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub size_class: Option<SizeClass>,
    #[serde(default = "default_ratios")]
    pub split: [f64; 3],
    #[serde(default = "default_threshold")]
    pub big_threshold: usize,
}

fn default_ratios() -> [f64; 3] {
    FINAL_RATIOS
}

fn default_threshold() -> usize {
    BIG_THRESHOLD
}

impl DatasetEntry {
    pub fn load(&self) -> Result<TimeSeriesDataset> {
        let mut ds = TimeSeriesDataset::load_csv(&self.path)?.with_targets(&self.targets)?;
        ds.size_class = self.size_class.unwrap_or_else(|| size_class_for(ds.n_targets(), self.big_threshold));
        Ok(ds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistry {
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl DatasetRegistry {
    /// Relative paths resolve against the registry file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut reg: DatasetRegistry = toml::from_str(&text).map_err(|e| CoreError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in reg.datasets.values_mut() {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets.get(name).ok_or_else(|| CoreError::config(format!("dataset {name:?} is not in the registry")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_two_vars() {
        let ds = TimeSeriesDataset::read_csv("a,b\n1,2\n3,4\n5,6\n".as_bytes()).unwrap();
        assert_eq!((ds.len(), ds.n_vars()), (3, 2));
        assert!(ds.timestamps.is_none());
    }

    #[test]
    fn date_column_becomes_timestamps() {
        let ds = TimeSeriesDataset::read_csv("date,x\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n".as_bytes()).unwrap();
        assert_eq!(ds.n_vars(), 1);
        assert_eq!(ds.timestamps.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let csv = "x,OT\n1,1\n2,2\n3,3\n4,4\n5,abc\n";
        match TimeSeriesDataset::read_csv(csv.as_bytes()).unwrap_err() {
            CoreError::Data { row, column, .. } => assert_eq!((row, column.as_deref()), (Some(5), Some("OT"))),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn nan_rows_are_counted_and_dropped() {
        let ds = TimeSeriesDataset::read_csv("x\n1\nNaN\n3\n".as_bytes()).unwrap();
        assert_eq!((ds.len(), ds.rejected_rows), (2, 1));
        assert!(TimeSeriesDataset::read_csv("".as_bytes()).is_err());
        assert!(TimeSeriesDataset::read_csv("x\n".as_bytes()).is_err());
    }

    #[test]
    fn splits() {
        assert_eq!(chrono_split(100, SplitPurpose::Final, FINAL_RATIOS, 4, 4).unwrap(), vec![0..70, 70..80, 80..100]);
        assert_eq!(chrono_split(100, SplitPurpose::Search, FINAL_RATIOS, 8, 4).unwrap(), vec![0..50, 50..100]);
        assert_eq!(chrono_split(24, SplitPurpose::Search, FINAL_RATIOS, 8, 4).unwrap(), vec![0..12, 12..24]);
        assert!(chrono_split(23, SplitPurpose::Search, FINAL_RATIOS, 8, 4).is_err());
        assert!(chrono_split(100, SplitPurpose::Final, FINAL_RATIOS, 8, 4).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(10..22, 8, 4, 1).unwrap(), vec![10]);
        assert_eq!(window_starts(0..14, 8, 4, 1).unwrap().len(), 3);
        assert!(window_starts(0..11, 8, 4, 1).unwrap().is_empty());
        assert_eq!(window_starts(0..20, 4, 2, 5).unwrap(), vec![0, 5, 10]);
    }

    #[test]
    fn trend_ramp() {
        let ds = make_synthetic(SyntheticKind::Trend, 5, 2, 0.0, 0);
        assert_eq!(ds.column(0), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn batches_carry_features() {
        let ds = make_synthetic(SyntheticKind::Trend, 20, 3, 0.0, 0).with_targets(&["v0".into()]).unwrap();
        let w = Windows::new(&ds, 0..20, 4, 2, 1).unwrap();
        let b: Batch<f64> = w.batch(&[3]);
        assert_eq!(b.past.shape(), &[1, 4, 1]);
        assert_eq!(b.future.to_f64_vec(), vec![7.0, 8.0]);
        assert_eq!(b.future_feats.unwrap().to_f64_vec(), vec![8.0, 9.0, 9.0, 10.0]);
    }
}
