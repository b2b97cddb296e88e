//! Traffic series ingestion, windowing, splitting, scaling and synthetic data.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use numcore::{named_rng, Tensor};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MHGT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

/// Raw readings `[steps, nodes, channels]` in native units; channel 0 is the forecast target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub values: Tensor,
    pub steps_per_day: usize,
    /// 0 = Monday.
    pub start_weekday: usize,
    pub name: String,
}

impl TrafficSeries {
    pub fn new(
        values: Tensor,
        steps_per_day: usize,
        start_weekday: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let s = Self {
            values,
            steps_per_day,
            start_weekday,
            name: name.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.values.shape();
        if shape.len() != 3 {
            return Err(Error::Config(format!(
                "series must be [steps, nodes, channels], got {shape:?}"
            )));
        }
        if shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Config(format!("series has an empty axis: {shape:?}")));
        }
        if self.steps_per_day == 0 {
            return Err(Error::Config("steps_per_day must be positive".into()));
        }
        if self.start_weekday > 6 {
            return Err(Error::Config(format!(
                "start_weekday {} outside [0, 6]",
                self.start_weekday
            )));
        }
        if shape[0] < self.steps_per_day {
            return Err(Error::Size(format!(
                "{} steps is less than one day of {} steps",
                shape[0], self.steps_per_day
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Reading of `channel` at (`step`, `node`).
    pub fn get(&self, step: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.nodes(), self.channels());
        self.values.data()[(step * n + node) * c + channel]
    }

    pub fn time_of_day(&self, step: usize) -> usize {
        step % self.steps_per_day
    }

    pub fn day_of_week(&self, step: usize) -> usize {
        (self.start_weekday + step / self.steps_per_day) % 7
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.numel());
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.steps() as u32,
            self.nodes() as u32,
            self.channels() as u32,
            self.steps_per_day as u32,
            self.start_weekday as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.values.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
            return Err(fmt(0, format!("bad magic {got:?}, expected \"MHGT\"")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FORMAT_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let (steps, nodes, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let (spd, weekday) = (word(4) as usize, word(5) as usize);
        let count = steps
            .checked_mul(nodes)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| fmt(8, "payload size overflows".into()))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(fmt(
                bytes.len(),
                format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, "trailing bytes after payload".into()));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let values = Tensor::new(vec![steps, nodes, channels], data)?;
        Self::new(values, spd, weekday, name)
    }
}

pub fn save_series(series: &TrafficSeries, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&series.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_series(path: &Path) -> Result<TrafficSeries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TrafficSeries::from_bytes(&bytes, &name)
}

/// Reads a CSV with one row per step and one column per node (channel 0 only).
/// A non-numeric first row is taken as a header.
pub fn series_from_csv(
    path: &Path,
    steps_per_day: usize,
    start_weekday: usize,
) -> Result<TrafficSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut nodes = None;
    let mut steps = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(Error::ConfigLine {
                    path: path.display().to_string(),
                    line: line + 1,
                    msg: e.to_string(),
                })
            }
        };
        match nodes {
            None => nodes = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(Error::ConfigLine {
                    path: path.display().to_string(),
                    line: line + 1,
                    msg: format!("expected {n} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        data.extend(row);
        steps += 1;
    }
    let nodes = nodes.ok_or_else(|| Error::Config(format!("{}: no data rows", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TrafficSeries::new(
        Tensor::new(vec![steps, nodes, 1], data)?,
        steps_per_day,
        start_weekday,
        name,
    )
}

/// Time-of-day and day-of-week indices for a `[batch, steps]` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeIndex {
    pub batch: usize,
    pub steps: usize,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

impl TimeIndex {
    pub fn single(tod: Vec<usize>, dow: Vec<usize>) -> Self {
        assert_eq!(tod.len(), dow.len());
        Self {
            batch: 1,
            steps: tod.len(),
            tod,
            dow,
        }
    }

    /// Index of the final step of every sample.
    pub fn last_step(&self) -> TimeIndex {
        let pick = |v: &Vec<usize>| {
            (0..self.batch)
                .map(|b| v[b * self.steps + self.steps - 1])
                .collect()
        };
        TimeIndex {
            batch: self.batch,
            steps: 1,
            tod: pick(&self.tod),
            dow: pick(&self.dow),
        }
    }

    pub fn slice(&self, samples: std::ops::Range<usize>) -> TimeIndex {
        let r = samples.start * self.steps..samples.end * self.steps;
        TimeIndex {
            batch: samples.len(),
            steps: self.steps,
            tod: self.tod[r.clone()].to_vec(),
            dow: self.dow[r].to_vec(),
        }
    }
}

/// z-score on channel 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn new(mean: f64, std: f64) -> Self {
        Self {
            mean,
            std: std.max(1e-8),
        }
    }

    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in values {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        let std = if n > 0 { (m2 / n as f64).sqrt() } else { 1.0 };
        Self::new(mean, std)
    }

    /// Fits on the channel-0 readings covered by the inputs of `train` only.
    pub fn fit_train(train: &WindowedDataset) -> Self {
        let s = &train.series;
        let (lo, hi) = train.input_step_range();
        let n = s.nodes();
        Self::fit((lo..hi).flat_map(|t| (0..n).map(move |i| s.get(t, i, 0))))
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

/// One mini-batch: scaled inputs `[B, T_h, N, 1]`, raw targets `[B, T_f, N, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub time: TimeIndex,
}

/// Stride-1 sliding windows over a shared series. Samples are stored as start steps, so
/// splitting never copies readings.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub series: Arc<TrafficSeries>,
    pub history: usize,
    pub horizon: usize,
    starts: Vec<usize>,
}

pub fn make_windows(series: Arc<TrafficSeries>, history: usize, horizon: usize) -> Result<WindowedDataset> {
    if history == 0 || horizon == 0 {
        return Err(Error::Config("history and horizon must be at least 1".into()));
    }
    if series.steps() < history + horizon {
        return Err(Error::Size(format!(
            "{} steps cannot hold a window of {} + {}",
            series.steps(),
            history,
            horizon
        )));
    }
    let samples = series.steps() - history - horizon + 1;
    Ok(WindowedDataset {
        series,
        history,
        horizon,
        starts: (0..samples).collect(),
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn nodes(&self) -> usize {
        self.series.nodes()
    }

    /// Half-open step range spanned by all inputs.
    pub fn input_step_range(&self) -> (usize, usize) {
        let lo = self.starts.iter().copied().min().unwrap_or(0);
        let hi = self.starts.iter().copied().max().map_or(0, |s| s + self.history);
        (lo, hi)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        WindowedDataset {
            series: Arc::clone(&self.series),
            history: self.history,
            horizon: self.horizon,
            starts: self.starts[range].to_vec(),
        }
    }

    /// Unscaled `[T_h, N, channels]` input of sample `s`.
    pub fn input(&self, s: usize) -> Tensor {
        self.window(self.starts[s], self.history)
    }

    /// Unscaled `[T_f, N, 1]` target of sample `s`.
    pub fn target(&self, s: usize) -> Tensor {
        let w = self.window(self.starts[s] + self.history, self.horizon);
        w.gather(2, &[0]).expect("channel 0 exists")
    }

    fn window(&self, start: usize, len: usize) -> Tensor {
        let s = &self.series;
        let per = s.nodes() * s.channels();
        let data = s.values.data()[start * per..(start + len) * per].to_vec();
        Tensor::new(vec![len, s.nodes(), s.channels()], data).expect("window shape")
    }

    pub fn tod_index(&self, s: usize) -> Vec<usize> {
        let start = self.starts[s];
        (0..self.history).map(|j| self.series.time_of_day(start + j)).collect()
    }

    pub fn dow_index(&self, s: usize) -> Vec<usize> {
        let start = self.starts[s];
        (0..self.history).map(|j| self.series.day_of_week(start + j)).collect()
    }

    pub fn batch(&self, samples: &[usize], scaler: &Scaler) -> Batch {
        let s = &self.series;
        let (n, c) = (s.nodes(), s.channels());
        let (th, tf) = (self.history, self.horizon);
        let b = samples.len();
        let mut x = Vec::with_capacity(b * th * n);
        let mut y = Vec::with_capacity(b * tf * n);
        let mut tod = Vec::with_capacity(b * th);
        let mut dow = Vec::with_capacity(b * th);
        let raw = s.values.data();
        for &i in samples {
            let start = self.starts[i];
            for t in start..start + th {
                x.extend((0..n).map(|v| scaler.transform(raw[(t * n + v) * c])));
                tod.push(s.time_of_day(t));
                dow.push(s.day_of_week(t));
            }
            for t in start + th..start + th + tf {
                y.extend((0..n).map(|v| raw[(t * n + v) * c]));
            }
        }
        Batch {
            x: Tensor::new(vec![b, th, n, 1], x).expect("batch shape"),
            y: Tensor::new(vec![b, tf, n, 1], y).expect("batch shape"),
            time: TimeIndex {
                batch: b,
                steps: th,
                tod,
                dow,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }
}

/// Chronological train/val/test split; train and val take `⌊r·samples⌋`, test the rest.
pub fn split(
    d: &WindowedDataset,
    r: SplitRatios,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let ratios = [r.train, r.val, r.test];
    if ratios.iter().any(|x| x.is_nan() || *x <= 0.0) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let n = d.len();
    // the epsilon absorbs representation error such as 0.7·10 = 7.000000000000001
    let n_train = (r.train * n as f64 + 1e-9).floor() as usize;
    let n_val = (r.val * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split of {n} samples by {ratios:?} leaves an empty part"
        )));
    }
    Ok((
        d.subset(0..n_train),
        d.subset(n_train..n_train + n_val),
        d.subset(n_train + n_val..n),
    ))
}

/// Synthetic series with planted node types.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub series: TrafficSeries,
    /// Planted type of each node (round-robin).
    pub planted: Vec<usize>,
}

pub const SYNTH_STEPS_PER_DAY: usize = 288;

/// Each type has its own daily two-harmonic profile and base level; weekends damp the
/// amplitude; nodes add a small individual gain; Gaussian noise has σ = 5 % of amplitude.
pub fn synthesize(nodes: usize, days: usize, patterns: usize, seed: u64) -> Result<Synthetic> {
    if patterns == 0 || nodes < patterns {
        return Err(Error::Config(format!(
            "need nodes ≥ patterns ≥ 1, got nodes={nodes}, patterns={patterns}"
        )));
    }
    if days < 2 {
        return Err(Error::Config(format!("need at least 2 days, got {days}")));
    }
    let spd = SYNTH_STEPS_PER_DAY;
    let steps = days * spd;
    let planted: Vec<usize> = (0..nodes).map(|i| i % patterns).collect();
    let mut rng = named_rng(seed, "synthesize");
    let gain = Normal::new(1.0, 0.05).expect("valid normal");
    let node_gain: Vec<f64> = (0..nodes).map(|_| gain.sample(&mut rng)).collect();

    let amplitude = |p: usize| 40.0 + 25.0 * p as f64;
    let base = |p: usize| 120.0 + 80.0 * p as f64;
    let phase = |p: usize| 2.0 * PI * p as f64 / patterns as f64;
    let noise: Vec<Normal<f64>> = (0..patterns)
        .map(|p| Normal::new(0.0, 0.05 * amplitude(p)).expect("valid normal"))
        .collect();

    let mut data = Vec::with_capacity(steps * nodes);
    for t in 0..steps {
        let tau = 2.0 * PI * (t % spd) as f64 / spd as f64;
        let weekday = (t / spd) % 7;
        let week_mod = if weekday >= 5 { 0.6 } else { 1.0 };
        for (i, &p) in planted.iter().enumerate() {
            let shape = 0.7 * (tau - phase(p)).sin() + 0.3 * (2.0 * tau + phase(p)).sin();
            let clean = base(p) + node_gain[i] * week_mod * amplitude(p) * shape;
            data.push(clean + noise[p].sample(&mut rng));
        }
    }
    let series = TrafficSeries::new(
        Tensor::new(vec![steps, nodes, 1], data)?,
        spd,
        0,
        format!("synthetic-n{nodes}-d{days}-p{patterns}-s{seed}"),
    )?;
    Ok(Synthetic { series, planted })
}
