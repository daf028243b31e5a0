//! Experiment configurations and the sweeps that turn them into report rows.

use crate::data::{self, Dataset, GenOptions};
use crate::report::{self, ReportRow};
use crate::HarnessError;
use physrec_core::dynamics::{self, SensingMask, SystemSpec, ThetaVec};
use physrec_core::metrics;
use physrec_core::neuralmr::{self, Arch, RecoveryProblem, TrainConfig};
use physrec_core::signal::{self, Trace};
use physrec_core::sindy::{self, SindyConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

type Result<T> = std::result::Result<T, HarnessError>;

/// Recovery method: one of the neural cells or the sparse-regression baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ltc,
    Ctrnn,
    Node,
    Sindyc,
}

impl Method {
    pub fn arch(self) -> Option<Arch> {
        match self {
            Method::Ltc => Some(Arch::Ltc),
            Method::Ctrnn => Some(Arch::Ctrnn),
            Method::Node => Some(Arch::Node),
            Method::Sindyc => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.arch() {
            Some(a) => a.fmt(f),
            None => f.write_str("sindyc"),
        }
    }
}

impl FromStr for Method {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sindyc" => Ok(Method::Sindyc),
            other => match other.parse::<Arch>() {
                Ok(Arch::Ltc) => Ok(Method::Ltc),
                Ok(Arch::Ctrnn) => Ok(Method::Ctrnn),
                Ok(Arch::Node) => Ok(Method::Node),
                Err(_) => Err(HarnessError::Config(format!("unknown architecture {other:?} (expected ltc, ctrnn, node or sindyc)"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Sampling-rate sweep from the base rate down to the Nyquist rate.
    C1,
    /// With and without input perturbation.
    C2,
    /// Injected input timing errors, with and without shift search.
    C5,
    /// Timing-error sweep on the glucose-insulin preset.
    Aid,
    /// Sinusoidal versus Wiener-process drive on the oscillator preset.
    Eeg,
}

impl FromStr for Experiment {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "c1" => Experiment::C1,
            "c2" => Experiment::C2,
            "c5" => Experiment::C5,
            "aid" => Experiment::Aid,
            "eeg" => Experiment::Eeg,
            other => return Err(HarnessError::Config(format!("unknown experiment {other:?} (expected c1, c2, c5, aid or eeg)"))),
        })
    }
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::C1 => "c1",
            Experiment::C2 => "c2",
            Experiment::C5 => "c5",
            Experiment::Aid => "aid",
            Experiment::Eeg => "eeg",
        }
    }
}

/// A Φ-configuration plus the sweep axes of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in system name or system file; defaults to the preset's system.
    pub system: Option<String>,
    pub preset: String,
    pub archs: Vec<Method>,
    /// Decimation factors relative to the preset rate; `None` derives them
    /// from the Nyquist rate.
    pub sampling_factors: Option<Vec<usize>>,
    /// Sensing mask over the states; `None` observes every state.
    pub mask: Option<Vec<bool>>,
    pub perturbation: bool,
    /// Injected timing error in samples at the experiment rate.
    pub injected_shift: f64,
    /// Timing errors swept by the c5 and aid experiments.
    pub shift_points: Vec<f64>,
    pub shift_search: bool,
    pub train: TrainConfig,
    pub sindy: SindyConfig,
    /// Training seeds; every point runs once per seed.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub traces: Option<usize>,
    pub noise: Option<f64>,
    /// Window length at the experiment rate; defaults to the whole decimated trace.
    pub k_window: Option<usize>,
    pub split_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: None,
            preset: "lv".into(),
            archs: vec![Method::Ltc],
            sampling_factors: None,
            mask: None,
            perturbation: true,
            injected_shift: 0.0,
            shift_points: vec![3.0, 8.0, 14.0, 20.0],
            shift_search: true,
            train: TrainConfig::default(),
            sindy: SindyConfig::default(),
            seeds: vec![0],
            data_seed: 0,
            traces: None,
            noise: None,
            k_window: None,
            split_ratio: 0.75,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// System spec and true coefficients.
    pub fn resolve(&self) -> Result<(SystemSpec, ThetaVec)> {
        let name = match &self.system {
            Some(s) => s.clone(),
            None => data::preset_system(&self.preset)?.to_string(),
        };
        Ok(dynamics::resolve_system(&name)?)
    }

    pub fn sensing_mask(&self, spec: &SystemSpec) -> Result<SensingMask> {
        match &self.mask {
            None => Ok(SensingMask::full(spec.n())),
            Some(m) if m.len() != spec.n() => Err(HarnessError::Config(format!("mask has {} entries; system has {} states", m.len(), spec.n()))),
            Some(m) => Ok(SensingMask::new(m.clone())?),
        }
    }

    fn gen_options(&self, perturbation: bool, shift_base: f64) -> GenOptions {
        GenOptions {
            perturbation,
            injected_shift: shift_base,
            traces: self.traces,
            noise: self.noise,
        }
    }
}

/// Sampling-rate decimation factor that brings the data down to its
/// Nyquist rate: the median over traces of the largest per-state rate,
/// rounded down to a divisor of the input hold length.
pub fn nyquist_factor(ds: &Dataset) -> Result<usize> {
    let mut rates = Vec::with_capacity(ds.traces.len());
    for g in &ds.traces {
        let tr = &g.trace;
        let mut best: f64 = 0.0;
        for row in &tr.y {
            best = best.max(signal::nyquist_rate(row, tr.fs())?);
        }
        rates.push(best);
    }
    rates.sort_by(f64::total_cmp);
    let rate = rates[rates.len() / 2];
    let fs = ds.traces[0].trace.fs();
    let k = ds.traces[0].trace.k();
    let raw = if rate > 0.0 { (fs / rate).floor() as usize } else { 1 };
    let mut f = raw.clamp(1, (k - 1) / 2);
    if ds.hold > 1 {
        while ds.hold % f != 0 {
            f -= 1;
        }
    }
    Ok(f)
}

/// Four factors spaced geometrically from 1 to `top`, snapped to divisors of
/// `hold` when inputs are block-held.
pub fn sampling_schedule(top: usize, hold: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..4 {
        let g = (top as f64).powf(i as f64 / 3.0);
        let mut f = g.round().max(1.0) as usize;
        if hold > 1 {
            let divisors: Vec<usize> = (1..=hold).filter(|d| hold % d == 0 && *d <= top).collect();
            f = *divisors
                .iter()
                .min_by(|a, b| ((**a as f64).ln() - g.ln()).abs().total_cmp(&((**b as f64).ln() - g.ln()).abs()))
                .unwrap_or(&1);
        }
        if !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// Outcome of one recovery run.
#[derive(Clone, Debug, PartialEq)]
pub struct PointOutcome {
    pub theta_est: Vec<f64>,
    pub rmse_theta: f64,
    pub rmse_y: f64,
    pub rmse_y_raw: f64,
    pub shifts: Vec<f64>,
    pub spurious: usize,
    pub loss_history: Vec<f64>,
}

/// Decimates and masks full-state traces for recovery.
pub fn prepare_traces(traces: &[Trace], factor: usize, mask: &SensingMask, keep_all_states: bool) -> Result<Vec<Trace>> {
    traces
        .iter()
        .map(|t| {
            let mut d = signal::decimate(t, factor)?;
            if !keep_all_states {
                let obs = mask.observed();
                d.y = obs.iter().map(|&i| d.y[i].clone()).collect();
                d.y_labels = obs.iter().map(|&i| d.y_labels[i].clone()).collect();
            }
            Ok(d)
        })
        .collect()
}

/// Runs one method on prepared traces.
pub fn run_point(
    method: Method,
    spec: &SystemSpec,
    theta: &ThetaVec,
    mask: &SensingMask,
    traces: &[Trace],
    cfg: &ExperimentConfig,
    seed: u64,
    shift_search: bool,
) -> Result<PointOutcome> {
    let k = cfg.k_window.unwrap_or_else(|| traces.iter().map(Trace::k).min().unwrap_or(0));
    let mut train = cfg.train.clone();
    train.seed = seed;
    train.shift_search = shift_search;
    match method.arch() {
        Some(arch) => {
            let problem = RecoveryProblem::new(spec.clone(), mask.clone());
            let res = neuralmr::recover(traces, &problem, arch, &train, k, cfg.split_ratio, Some(theta))?;
            Ok(PointOutcome {
                rmse_theta: res.rmse_theta.unwrap_or(f64::NAN),
                theta_est: res.theta_est.into_inner(),
                rmse_y: res.rmse_y,
                rmse_y_raw: res.rmse_y_raw,
                shifts: res.shifts,
                spurious: 0,
                loss_history: res.loss_history,
            })
        }
        None => run_sindyc(spec, theta, mask, traces, cfg, k, seed),
    }
}

fn run_sindyc(spec: &SystemSpec, theta: &ThetaVec, mask: &SensingMask, traces: &[Trace], cfg: &ExperimentConfig, k: usize, seed: u64) -> Result<PointOutcome> {
    if !mask.is_full() {
        return Err(HarnessError::Config("SINDYc needs every state observed".into()));
    }
    let batches = signal::make_batches(traces, cfg.train.batch_size, k, cfg.split_ratio, seed)?;
    let train: Vec<Trace> = batches.train_windows().map(|w| w.trace.clone()).collect();
    let model = sindy::sindyc_recover(&train, &cfg.sindy)?;
    let map = sindy::map_to_spec(&model, spec)?;
    let est: Vec<f64> = map.theta.iter().zip(theta.values()).map(|(e, t)| e.unwrap_or(*t)).collect();
    let rmse_theta = map.rmse_theta(theta.values()).unwrap_or(f64::NAN);
    let mut test: Vec<&Trace> = batches.test_windows().map(|w| &w.trace).collect();
    if test.is_empty() {
        test = train.iter().collect();
    }
    let mut err = 0.0;
    let mut err_raw = 0.0;
    for w in &test {
        let x0: Vec<f64> = w.y.iter().map(|r| r[0]).collect();
        let scale: Vec<f64> = w.y.iter().map(|r| std_of(r)).collect();
        match model.simulate(&x0, &w.u, w.dt, w.k(), cfg.train.solver.substeps) {
            Some(sim) => {
                let norm = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().zip(&scale).map(|(r, s)| r.iter().map(|v| v / s).collect()).collect() };
                err += metrics::rmse_y(&norm(&sim), &norm(&w.y)).unwrap_or(f64::INFINITY);
                err_raw += metrics::rmse_y(&sim, &w.y).unwrap_or(f64::INFINITY);
            }
            None => {
                err = f64::INFINITY;
                err_raw = f64::INFINITY;
            }
        }
    }
    Ok(PointOutcome {
        theta_est: est,
        rmse_theta,
        rmse_y: err / test.len() as f64,
        rmse_y_raw: err_raw / test.len() as f64,
        shifts: Vec::new(),
        spurious: map.spurious.len(),
        loss_history: Vec::new(),
    })
}

fn std_of(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    let s = (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

struct Point<'a> {
    experiment: Experiment,
    method: Method,
    factor: usize,
    ds: &'a Dataset,
    perturbation: bool,
    injected_shift: f64,
    shift_search: bool,
    seed: u64,
}

fn mask_string(mask: &SensingMask) -> String {
    mask.diag().iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn execute(p: &Point, spec: &SystemSpec, theta: &ThetaVec, mask: &SensingMask, cfg: &ExperimentConfig, digest: &str) -> ReportRow {
    let dt = p.ds.traces[0].trace.dt * p.factor as f64;
    let mut row = ReportRow {
        digest: digest.to_string(),
        experiment: p.experiment.as_str().into(),
        system: spec.name().into(),
        arch: p.method.to_string(),
        sampling_factor: p.factor,
        dt,
        mask: mask_string(mask),
        perturbation: p.perturbation,
        injected_shift: p.injected_shift,
        shift_search: p.shift_search && p.method != Method::Sindyc,
        seed: p.seed,
        ..ReportRow::default()
    };
    let start = Instant::now();
    let outcome = prepare_traces(&p.ds.plain_traces(), p.factor, mask, cfg.train.explicit_loss)
        .and_then(|traces| run_point(p.method, spec, theta, mask, &traces, cfg, p.seed, row.shift_search));
    row.runtime_s = start.elapsed().as_secs_f64();
    match outcome {
        Ok(o) => {
            row.status = "ok".into();
            row.rmse_theta = Some(o.rmse_theta);
            row.rmse_y = Some(o.rmse_y);
            row.rmse_y_raw = Some(o.rmse_y_raw);
            row.coeff_errors = spec
                .coefficients()
                .iter()
                .zip(o.theta_est.iter().zip(theta.values()))
                .map(|(c, (e, t))| (c.name.clone(), e - t))
                .collect();
            row.shifts = o.shifts;
            row.spurious = o.spurious;
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Runs a sweep and returns one row per point, in sweep order. Failed
/// points are recorded in their row and the sweep continues.
pub fn run_experiment(exp: Experiment, cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let mut cfg = cfg.clone();
    match exp {
        Experiment::Aid if cfg.preset != "aid" => cfg.preset = "aid".into(),
        Experiment::Eeg if !cfg.preset.starts_with("eeg") => cfg.preset = "eeg".into(),
        _ => {}
    }
    let (spec, theta) = cfg.resolve()?;
    let mask = cfg.sensing_mask(&spec)?;
    let digest = report::digest(&(exp.as_str(), &cfg));
    let mut rows = Vec::new();
    if cfg.archs.is_empty() || cfg.seeds.is_empty() {
        return Ok(rows);
    }
    let generate = |preset: &str, perturbation: bool, shift_base: f64| -> Result<Dataset> {
        data::generate_benchmark_data(&spec, &theta, preset, cfg.data_seed, &cfg.gen_options(perturbation, shift_base))
    };
    let fixed_factor = |ds: &Dataset| -> Result<usize> {
        match &cfg.sampling_factors {
            Some(f) => f.first().copied().ok_or_else(|| HarnessError::Config("empty sampling_factors".into())),
            None => nyquist_factor(ds),
        }
    };
    let run = |rows: &mut Vec<ReportRow>, p: Point| rows.push(execute(&p, &spec, &theta, &mask, &cfg, &digest));
    match exp {
        Experiment::C1 => {
            let ds = generate(&cfg.preset, cfg.perturbation, 0.0)?;
            let factors = match &cfg.sampling_factors {
                Some(f) => f.clone(),
                None => sampling_schedule(nyquist_factor(&ds)?, ds.hold),
            };
            for &method in &cfg.archs {
                for &factor in &factors {
                    for &seed in &cfg.seeds {
                        run(&mut rows, Point {
                            experiment: exp,
                            method,
                            factor,
                            ds: &ds,
                            perturbation: cfg.perturbation,
                            injected_shift: 0.0,
                            shift_search: cfg.shift_search,
                            seed,
                        });
                    }
                }
            }
        }
        Experiment::C2 => {
            let on = generate(&cfg.preset, true, 0.0)?;
            let off = generate(&cfg.preset, false, 0.0)?;
            let factor = fixed_factor(&on)?;
            for &method in &cfg.archs {
                for (ds, perturbation) in [(&on, true), (&off, false)] {
                    for &seed in &cfg.seeds {
                        run(&mut rows, Point {
                            experiment: exp,
                            method,
                            factor,
                            ds,
                            perturbation,
                            injected_shift: 0.0,
                            shift_search: cfg.shift_search,
                            seed,
                        });
                    }
                }
            }
        }
        Experiment::C5 | Experiment::Aid => {
            let base = generate(&cfg.preset, true, 0.0)?;
            let factor = fixed_factor(&base)?;
            let shifted: Vec<(f64, Dataset)> = cfg
                .shift_points
                .iter()
                .map(|&s| generate(&cfg.preset, true, s * factor as f64).map(|d| (s, d)))
                .collect::<Result<_>>()?;
            for &method in cfg.archs.iter().filter(|m| m.arch().is_some()) {
                for &seed in &cfg.seeds {
                    let baseline = rows.len();
                    run(&mut rows, Point {
                        experiment: exp,
                        method,
                        factor,
                        ds: &base,
                        perturbation: true,
                        injected_shift: 0.0,
                        shift_search: false,
                        seed,
                    });
                    for (s, ds) in &shifted {
                        for search in [false, true] {
                            run(&mut rows, Point {
                                experiment: exp,
                                method,
                                factor,
                                ds,
                                perturbation: true,
                                injected_shift: *s,
                                shift_search: search,
                                seed,
                            });
                        }
                    }
                    fill_degradation(&mut rows, baseline);
                }
            }
        }
        Experiment::Eeg => {
            let sine = generate("eeg", true, 0.0)?;
            let wiener = generate("eeg_wiener", true, 0.0)?;
            let factor = fixed_factor(&sine)?;
            for &method in &cfg.archs {
                for &seed in &cfg.seeds {
                    let baseline = rows.len();
                    for ds in [&sine, &wiener] {
                        run(&mut rows, Point {
                            experiment: exp,
                            method,
                            factor,
                            ds,
                            perturbation: true,
                            injected_shift: 0.0,
                            shift_search: cfg.shift_search,
                            seed,
                        });
                    }
                    fill_degradation(&mut rows, baseline);
                }
            }
        }
    }
    Ok(rows)
}

/// Fills degradation percentages of `rows[base + 1..]` relative to `rows[base]`.
fn fill_degradation(rows: &mut [ReportRow], base: usize) {
    let (head, tail) = rows.split_at_mut(base + 1);
    let b = &head[base];
    for r in tail {
        r.degradation_theta_pct = b.rmse_theta.zip(r.rmse_theta).and_then(|(b, v)| metrics::degradation_pct(v, b).ok());
        r.degradation_y_pct = b.rmse_y.zip(r.rmse_y).and_then(|(b, v)| metrics::degradation_pct(v, b).ok());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_snaps_to_hold_divisors() {
        assert_eq!(sampling_schedule(10, 10), vec![1, 2, 5, 10]);
        assert_eq!(sampling_schedule(8, 1), vec![1, 2, 4, 8]);
        assert_eq!(sampling_schedule(1, 1), vec![1]);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("sindyc".parse::<Method>().unwrap(), Method::Sindyc);
        assert_eq!("ctrnn".parse::<Method>().unwrap().to_string(), "ctrnn");
        assert!("pinn".parse::<Method>().is_err());
        assert!("c9".parse::<Experiment>().is_err());
    }

    #[test]
    fn empty_sweep_gives_empty_report() {
        let cfg = ExperimentConfig {
            archs: Vec::new(),
            ..ExperimentConfig::default()
        };
        assert!(run_experiment(Experiment::C1, &cfg).unwrap().is_empty());
    }

    #[test]
    fn lv_nyquist_factor_is_five() {
        let (spec, theta) = dynamics::builtin_system("lotka_volterra").unwrap();
        let ds = data::generate_benchmark_data(&spec, &theta, "lv", 0, &GenOptions::default()).unwrap();
        assert_eq!(nyquist_factor(&ds).unwrap(), 5);
    }

    #[test]
    fn mask_length_checked() {
        let cfg = ExperimentConfig {
            mask: Some(vec![true]),
            ..ExperimentConfig::default()
        };
        let (spec, _) = cfg.resolve().unwrap();
        assert!(cfg.sensing_mask(&spec).is_err());
    }
}
