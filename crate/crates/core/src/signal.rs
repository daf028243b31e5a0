//! Sampled traces and the operations applied to them before recovery:
//! event encoding, fractional input shifts, decimation, spectral
//! estimation of the Nyquist rate, and batching into training windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("event #{index} (channel {channel}, t = {t}) {reason}")]
    BadEvent {
        index: usize,
        channel: usize,
        t: f64,
        reason: String,
    },
    #[error("shift {s} outside [0, {k})")]
    ShiftOutOfRange { s: f64, k: usize },
    #[error("decimation by {factor} leaves {remaining} samples; at least 2 are required")]
    TooShort { factor: usize, remaining: usize },
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Uniformly sampled observations and inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub t0: f64,
    pub dt: f64,
    /// Observed channels, each of length `k`.
    pub y: Vec<Vec<f64>>,
    /// Input channels (control plus encoded events), each of length `k`.
    pub u: Vec<Vec<f64>>,
    pub y_labels: Vec<String>,
    pub u_labels: Vec<String>,
}

impl Trace {
    pub fn new(t0: f64, dt: f64, y: Vec<Vec<f64>>, u: Vec<Vec<f64>>, y_labels: Vec<String>, u_labels: Vec<String>) -> Result<Self> {
        let tr = Trace {
            t0,
            dt,
            y,
            u,
            y_labels,
            u_labels,
        };
        tr.validate()?;
        Ok(tr)
    }

    /// Builds a trace with default `y1…`, `u1…` labels.
    pub fn unlabeled(t0: f64, dt: f64, y: Vec<Vec<f64>>, u: Vec<Vec<f64>>) -> Result<Self> {
        let yl = (1..=y.len()).map(|i| format!("y{i}")).collect();
        let ul = (1..=u.len()).map(|i| format!("u{i}")).collect();
        Trace::new(t0, dt, y, u, yl, ul)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !self.t0.is_finite() {
            return Err(SignalError::InvalidTrace(format!("bad time base t0 = {}, dt = {}", self.t0, self.dt)));
        }
        if self.y.is_empty() {
            return Err(SignalError::InvalidTrace("no observed channels".into()));
        }
        let k = self.y[0].len();
        if k < 2 {
            return Err(SignalError::InvalidTrace(format!("need at least 2 samples, got {k}")));
        }
        if self.y.iter().chain(&self.u).any(|c| c.len() != k) {
            return Err(SignalError::InvalidTrace("channels differ in length".into()));
        }
        if self.y.iter().chain(&self.u).flatten().any(|v| !v.is_finite()) {
            return Err(SignalError::InvalidTrace("non-finite sample".into()));
        }
        if self.y_labels.len() != self.y.len() || self.u_labels.len() != self.u.len() {
            return Err(SignalError::InvalidTrace("label count does not match channel count".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.y[0].len()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.k()).map(|j| self.t0 + j as f64 * self.dt).collect()
    }

    /// Sample rate in Hz when time is in seconds.
    pub fn fs(&self) -> f64 {
        1.0 / self.dt
    }

    /// Sub-trace `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Trace {
        let cut = |c: &Vec<f64>| c[start..start + len].to_vec();
        Trace {
            t0: self.t0 + start as f64 * self.dt,
            dt: self.dt,
            y: self.y.iter().map(cut).collect(),
            u: self.u.iter().map(cut).collect(),
            y_labels: self.y_labels.clone(),
            u_labels: self.u_labels.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub channel: usize,
    pub t: f64,
    pub magnitude: f64,
}

/// Sparse timestamped external inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    pub events: Vec<Event>,
}

impl EventList {
    pub fn new(events: Vec<Event>) -> Self {
        EventList { events }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Every event delayed by `delay` in channel `channel`.
    pub fn delayed(&self, channel: usize, delay: f64) -> EventList {
        EventList {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    t: if e.channel == channel { e.t + delay } else { e.t },
                    ..*e
                })
                .collect(),
        }
    }
}

/// Places event magnitudes on a uniform grid (`m × k`), nearest index,
/// summing coincident events.
pub fn encode_events(ev: &EventList, m: usize, t0: f64, dt: f64, k: usize) -> Result<Vec<Vec<f64>>> {
    if !(dt > 0.0) || k == 0 {
        return Err(SignalError::Invalid(format!("bad grid dt = {dt}, k = {k}")));
    }
    let mut rows = vec![vec![0.0; k]; m];
    let t_end = t0 + (k - 1) as f64 * dt;
    let tol = 1e-9 * dt;
    for (index, e) in ev.events.iter().enumerate() {
        let fail = |reason: String| SignalError::BadEvent {
            index,
            channel: e.channel,
            t: e.t,
            reason,
        };
        if e.channel >= m {
            return Err(fail(format!("references channel beyond m = {m}")));
        }
        if e.t < 0.0 || !e.t.is_finite() || !e.magnitude.is_finite() {
            return Err(fail("has a negative or non-finite time or magnitude".into()));
        }
        if e.t < t0 - tol || e.t > t_end + tol {
            return Err(fail(format!("lies outside [{t0}, {t_end}]")));
        }
        let j = (((e.t - t0) / dt).round() as usize).min(k - 1);
        rows[e.channel][j] += e.magnitude;
    }
    Ok(rows)
}

/// Delays a row by `s` samples with linear-interpolation placement.
/// Mass pushed past the last index is dropped.
pub fn fractional_shift(row: &[f64], s: f64) -> Result<Vec<f64>> {
    let k = row.len();
    if !(s >= 0.0 && s < k as f64) {
        return Err(SignalError::ShiftOutOfRange { s, k });
    }
    let whole = s.floor() as usize;
    let frac = s - whole as f64;
    let mut out = vec![0.0; k];
    for (j, &v) in row.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let lo = j + whole;
        if lo < k {
            out[lo] += (1.0 - frac) * v;
        }
        if frac > 0.0 && lo + 1 < k {
            out[lo + 1] += frac * v;
        }
    }
    Ok(out)
}

/// Keeps every `factor`-th sample.
pub fn decimate(tr: &Trace, factor: usize) -> Result<Trace> {
    if factor == 0 {
        return Err(SignalError::Invalid("decimation factor must be at least 1".into()));
    }
    let remaining = (tr.k() - 1) / factor + 1;
    if remaining < 2 {
        return Err(SignalError::TooShort { factor, remaining });
    }
    let pick = |c: &Vec<f64>| c.iter().step_by(factor).copied().collect::<Vec<f64>>();
    Ok(Trace {
        t0: tr.t0,
        dt: tr.dt * factor as f64,
        y: tr.y.iter().map(pick).collect(),
        u: tr.u.iter().map(pick).collect(),
        y_labels: tr.y_labels.clone(),
        u_labels: tr.u_labels.clone(),
    })
}

/// One-sided periodogram normalized so that the powers sum to the mean
/// square of the signal.
pub fn periodogram(x: &[f64], fs: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = x.len();
    if k < 4 {
        return Err(SignalError::Invalid(format!("periodogram needs at least 4 samples, got {k}")));
    }
    if !(fs > 0.0) {
        return Err(SignalError::Invalid(format!("sample rate must be positive, got {fs}")));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(k).process(&mut buf);
    let half = k / 2;
    let norm = (k * k) as f64;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut power = Vec::with_capacity(half + 1);
    for (j, c) in buf.iter().take(half + 1).enumerate() {
        let interior = j != 0 && !(k % 2 == 0 && j == half);
        let weight = if interior { 2.0 } else { 1.0 };
        freqs.push(j as f64 * fs / k as f64);
        power.push(weight * c.norm_sqr() / norm);
    }
    Ok((freqs, power))
}

/// Twice the frequency at which cumulative (non-DC) power reaches 90%.
pub fn nyquist_rate(x: &[f64], fs: f64) -> Result<f64> {
    let (freqs, power) = periodogram(x, fs)?;
    let total: f64 = power[1..].iter().sum();
    let all = total + power[0];
    if total <= 1e-24 * all.max(f64::MIN_POSITIVE) || total == 0.0 {
        return Ok(0.0);
    }
    let bin = fs / x.len() as f64;
    let target = 0.9 * total * (1.0 - 1e-9);
    let mut cum = 0.0;
    for (f, p) in freqs.iter().zip(&power).skip(1) {
        cum += p;
        if cum >= target {
            return Ok(2.0 * f.max(bin));
        }
    }
    Ok(2.0 * freqs[freqs.len() - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One training instance: a window of `k` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub trace: Trace,
    /// Index of the source trace and starting sample.
    pub source: (usize, usize),
}

impl Window {
    pub fn k(&self) -> usize {
        self.trace.k()
    }

    /// Channels stacked as `(|Y| + m) × k`.
    pub fn stacked(&self) -> Vec<Vec<f64>> {
        self.trace.y.iter().chain(&self.trace.u).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub split: Split,
    pub windows: Vec<Window>,
}

impl Batch {
    /// Dense `S_B × (|Y|+m) × k` tensor in row-major order, with its shape.
    pub fn tensor(&self) -> ([usize; 3], Vec<f64>) {
        let sb = self.windows.len();
        let ch = self.windows.first().map_or(0, |w| w.trace.y.len() + w.trace.u.len());
        let k = self.windows.first().map_or(0, Window::k);
        let mut data = Vec::with_capacity(sb * ch * k);
        for w in &self.windows {
            for c in w.stacked() {
                data.extend(c);
            }
        }
        ([sb, ch, k], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSet {
    pub batches: Vec<Batch>,
    pub k: usize,
}

impl BatchSet {
    pub fn train(&self) -> impl Iterator<Item = &Batch> {
        self.batches.iter().filter(|b| b.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Batch> {
        self.batches.iter().filter(|b| b.split == Split::Test)
    }

    pub fn train_windows(&self) -> impl Iterator<Item = &Window> {
        self.train().flat_map(|b| &b.windows)
    }

    pub fn test_windows(&self) -> impl Iterator<Item = &Window> {
        self.test().flat_map(|b| &b.windows)
    }

    pub fn count(&self, split: Split) -> usize {
        self.batches.iter().filter(|b| b.split == split).map(|b| b.windows.len()).sum()
    }
}

/// Cuts traces into non-overlapping windows of `k_window` samples, shuffles
/// them under `seed`, splits by `split_ratio`, and groups each split into
/// batches of at most `batch_size`.
pub fn make_batches(traces: &[Trace], batch_size: usize, k_window: usize, split_ratio: f64, seed: u64) -> Result<BatchSet> {
    if batch_size == 0 {
        return Err(SignalError::Invalid("batch size must be at least 1".into()));
    }
    if k_window < 2 {
        return Err(SignalError::Invalid("window length must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(SignalError::Invalid(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    let mut windows = Vec::new();
    for (i, tr) in traces.iter().enumerate() {
        if tr.k() < k_window {
            return Err(SignalError::Insufficient(format!(
                "trace {i} has {} samples but windows need {k_window}",
                tr.k()
            )));
        }
        for w in 0..tr.k() / k_window {
            windows.push(Window {
                trace: tr.slice(w * k_window, k_window),
                source: (i, w * k_window),
            });
        }
    }
    if windows.is_empty() {
        return Err(SignalError::Insufficient("no traces supplied; need at least 1 instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    let n_train = (split_ratio * windows.len() as f64).round() as usize;
    let test = windows.split_off(n_train);
    let mut batches = Vec::new();
    for (split, list) in [(Split::Train, windows), (Split::Test, test)] {
        let mut it = list.into_iter().peekable();
        while it.peek().is_some() {
            batches.push(Batch {
                split,
                windows: it.by_ref().take(batch_size).collect(),
            });
        }
    }
    Ok(BatchSet { batches, k: k_window })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn tone(freq: f64, fs: f64, k: usize, amp: f64) -> Vec<f64> {
        (0..k).map(|j| amp * (2.0 * PI * freq * j as f64 / fs).sin()).collect()
    }

    #[test]
    fn encode_single_event() {
        let ev = EventList::new(vec![Event {
            channel: 0,
            t: 0.2,
            magnitude: 5.0,
        }]);
        let rows = encode_events(&ev, 1, 0.0, 0.1, 5).unwrap();
        assert_eq!(rows, vec![vec![0.0, 0.0, 5.0, 0.0, 0.0]]);
    }

    #[test]
    fn encode_empty_and_coincident() {
        assert_eq!(encode_events(&EventList::default(), 2, 0.0, 0.1, 3).unwrap(), vec![vec![0.0; 3]; 2]);
        let ev = EventList::new(vec![
            Event {
                channel: 0,
                t: 0.31,
                magnitude: 3.0,
            },
            Event {
                channel: 0,
                t: 0.29,
                magnitude: 4.0,
            },
        ]);
        let rows = encode_events(&ev, 1, 0.0, 0.1, 5).unwrap();
        assert_eq!(rows[0][3], 7.0);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let ev = EventList::new(vec![Event {
            channel: 0,
            t: 0.9,
            magnitude: 1.0,
        }]);
        let err = encode_events(&ev, 1, 0.0, 0.1, 5).unwrap_err();
        assert!(matches!(err, SignalError::BadEvent { index: 0, .. }), "{err}");
    }

    #[test]
    fn shift_examples() {
        let row = [0.0, 5.0, 0.0, 1.0];
        assert_eq!(fractional_shift(&row, 0.0).unwrap(), row.to_vec());
        assert_eq!(fractional_shift(&[0.0, 5.0, 0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0, 5.0, 0.0]);
        assert_eq!(fractional_shift(&[4.0, 0.0, 0.0, 0.0], 0.5).unwrap(), vec![2.0, 2.0, 0.0, 0.0]);
        assert!(fractional_shift(&row, 4.0).is_err());
        assert!(fractional_shift(&row, -0.1).is_err());
    }

    #[test]
    fn shift_drops_spilled_mass() {
        let out = fractional_shift(&[0.0, 0.0, 2.0], 1.5).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
        let out = fractional_shift(&[0.0, 2.0, 0.0], 0.5).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn decimate_examples() {
        let tr = Trace::unlabeled(0.0, 0.001, vec![(0..5).map(f64::from).collect()], vec![]).unwrap();
        assert_eq!(decimate(&tr, 1).unwrap(), tr);
        let d = decimate(&tr, 2).unwrap();
        assert_eq!(d.y[0], vec![0.0, 2.0, 4.0]);
        let long = Trace::unlabeled(0.0, 0.001, vec![vec![0.0; 101]], vec![]).unwrap();
        assert_abs_diff_eq!(decimate(&long, 10).unwrap().dt, 0.01, epsilon = 1e-15);
        assert!(matches!(decimate(&tr, 5), Err(SignalError::TooShort { .. })));
    }

    #[test]
    fn periodogram_pure_tone_concentrates() {
        let x = tone(5.0, 100.0, 1000, 1.0);
        let (f, p) = periodogram(&x, 100.0).unwrap();
        let non_dc: f64 = p[1..].iter().sum();
        let peak = p.iter().cloned().enumerate().skip(1).fold((0, 0.0), |a, (i, v)| if v > a.1 { (i, v) } else { a });
        assert_abs_diff_eq!(f[peak.0], 5.0, epsilon = 0.1);
        assert!(peak.1 / non_dc > 0.99);
    }

    #[test]
    fn periodogram_constant_is_all_dc() {
        let (_, p) = periodogram(&[3.0; 64], 10.0).unwrap();
        assert_abs_diff_eq!(p[0], 9.0, epsilon = 1e-12);
        assert!(p[1..].iter().all(|v| *v < 1e-20));
    }

    #[test]
    fn periodogram_two_tones() {
        let x: Vec<f64> = tone(2.0, 100.0, 1000, 1.0).iter().zip(tone(40.0, 100.0, 1000, 0.5)).map(|(a, b)| a + b).collect();
        let (f, p) = periodogram(&x, 100.0).unwrap();
        let mut idx: Vec<usize> = (1..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        let mut top: Vec<f64> = idx[..2].iter().map(|&i| f[i]).collect();
        top.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(top[0], 2.0, epsilon = 0.1);
        assert_abs_diff_eq!(top[1], 40.0, epsilon = 0.1);
    }

    #[test]
    fn nyquist_examples() {
        let bin = 100.0 / 1000.0;
        let rate = nyquist_rate(&tone(5.0, 100.0, 1000, 1.0), 100.0).unwrap();
        assert!((rate - 10.0).abs() <= 2.0 * bin, "{rate}");
        assert_eq!(nyquist_rate(&[2.5; 128], 100.0).unwrap(), 0.0);
        // 9:1 power ratio: amplitudes 3 and 1.
        let x: Vec<f64> = tone(2.0, 100.0, 1000, 3.0).iter().zip(tone(40.0, 100.0, 1000, 1.0)).map(|(a, b)| a + b).collect();
        let rate = nyquist_rate(&x, 100.0).unwrap();
        assert!((rate - 4.0).abs() <= 2.0 * bin, "{rate}");
    }

    fn long_trace(k: usize) -> Trace {
        Trace::unlabeled(0.0, 0.1, vec![(0..k).map(|j| j as f64).collect()], vec![vec![0.0; k]]).unwrap()
    }

    #[test]
    fn batches_split_48_16() {
        let traces: Vec<Trace> = (0..64).map(|_| long_trace(200)).collect();
        let set = make_batches(&traces, 32, 200, 0.75, 7).unwrap();
        assert_eq!(set.count(Split::Train), 48);
        assert_eq!(set.count(Split::Test), 16);
        let first = set.train().next().unwrap();
        assert_eq!(first.tensor().0, [32, 2, 200]);
        assert!(set.batches.iter().all(|b| b.windows.iter().all(|w| w.k() == 200)));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let traces = vec![long_trace(1000)];
        let a = make_batches(&traces, 4, 100, 0.5, 3).unwrap();
        let b = make_batches(&traces, 4, 100, 0.5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_trace_rejected() {
        let err = make_batches(&[long_trace(50)], 8, 100, 0.75, 0).unwrap_err();
        assert!(matches!(err, SignalError::Insufficient(_)), "{err}");
    }
}
