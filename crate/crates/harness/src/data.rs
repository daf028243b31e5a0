//! Benchmark presets, simulation of ground-truth traces, and the on-disk
//! dataset layout (trace and event CSV files plus a metadata file).

use crate::HarnessError;
use physrec_core::dynamics::{SensingMask, SystemSpec, ThetaVec};
use physrec_core::odesolve::{self, InputSignal, SolverConfig};
use physrec_core::signal::{self, Event, EventList, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

type Result<T> = std::result::Result<T, HarnessError>;

/// Generation presets; each fixes a system, time base and input design.
pub const PRESETS: [&str; 7] = ["scalar", "lv", "lv_smooth", "lorenz", "aid", "eeg", "eeg_wiener"];

/// Native system of a preset.
pub fn preset_system(preset: &str) -> Result<&'static str> {
    Ok(match preset {
        "scalar" => "scalar_decay",
        "lv" | "lv_smooth" => "lotka_volterra",
        "lorenz" => "lorenz",
        "aid" => "bergman_aid",
        "eeg" | "eeg_wiener" => "eeg_dvdp",
        other => return Err(HarnessError::Config(format!("unknown preset {other:?}; expected one of {}", PRESETS.join(", ")))),
    })
}

/// Knobs that experiments vary on top of a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    /// External inputs on (`false` gives the unperturbed configuration).
    pub perturbation: bool,
    /// Delay, in base-rate samples, between the reported and the true timing of event inputs.
    pub injected_shift: f64,
    /// Overrides the preset's trace count.
    pub traces: Option<usize>,
    /// Overrides the preset's measurement noise standard deviation.
    pub noise: Option<f64>,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            perturbation: true,
            injected_shift: 0.0,
            traces: None,
            noise: None,
        }
    }
}

/// A simulated trace with both the reported and the true input timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrace {
    /// All states, with inputs as reported.
    pub trace: Trace,
    /// Event inputs at the times they were reported.
    pub reported_events: EventList,
    /// Event inputs at the times they acted on the system.
    pub true_events: EventList,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub system: String,
    pub preset: String,
    pub seed: u64,
    pub theta: Vec<f64>,
    pub options: GenOptions,
    /// Inputs are constant over blocks of this many samples.
    pub hold: usize,
    pub traces: Vec<GeneratedTrace>,
}

impl Dataset {
    pub fn plain_traces(&self) -> Vec<Trace> {
        self.traces.iter().map(|g| g.trace.clone()).collect()
    }
}

struct Design {
    traces: usize,
    k: usize,
    dt: f64,
    substeps: usize,
    hold: usize,
    noise: f64,
}

fn design(preset: &str) -> Design {
    match preset {
        "scalar" => Design { traces: 64, k: 50, dt: 0.1, substeps: 10, hold: 1, noise: 0.0 },
        "lv" => Design { traces: 64, k: 200, dt: 0.5, substeps: 10, hold: 10, noise: 0.0 },
        "lv_smooth" => Design { traces: 64, k: 200, dt: 0.5, substeps: 10, hold: 1, noise: 0.0 },
        "lorenz" => Design { traces: 16, k: 500, dt: 0.01, substeps: 4, hold: 1, noise: 0.0 },
        "aid" => Design { traces: 14, k: 200, dt: 5.0, substeps: 10, hold: 1, noise: 2.0 },
        _ => Design { traces: 16, k: 400, dt: 0.05, substeps: 10, hold: 1, noise: 0.0 },
    }
}

struct Drawn {
    x0: Vec<f64>,
    u: Vec<Vec<f64>>,
    events: Vec<Event>,
}

fn pulse(u: &mut [Vec<f64>], events: &mut Vec<Event>, channel: usize, j: usize, dt: f64, magnitude: f64) {
    u[channel][j] += magnitude;
    events.push(Event {
        channel,
        t: j as f64 * dt,
        magnitude,
    });
}

fn draw(preset: &str, spec: &SystemSpec, theta: &[f64], d: &Design, rng: &mut ChaCha8Rng, perturb: bool) -> Drawn {
    let k = d.k;
    let mut u = vec![vec![0.0; k]; spec.m()];
    let mut events = Vec::new();
    let x0 = match preset {
        "scalar" => {
            if perturb {
                for _ in 0..2 {
                    let j = rng.random_range(5..k - 5);
                    pulse(&mut u, &mut events, 0, j, d.dt, rng.random_range(5.0..15.0));
                }
            }
            vec![rng.random_range(0.5..2.0)]
        }
        "lv" => {
            if perturb {
                for block in 0..k / d.hold {
                    if rng.random::<f64>() < 0.3 {
                        let amp = rng.random_range(0.0..4.0);
                        for j in block * d.hold..(block + 1) * d.hold {
                            u[0][j] = amp;
                        }
                        events.push(Event {
                            channel: 0,
                            t: (block * d.hold) as f64 * d.dt,
                            magnitude: amp,
                        });
                    }
                }
            }
            vec![100.0, rng.random_range(5.0..60.0)]
        }
        "lv_smooth" => {
            if perturb {
                let omega = rng.random_range(0.05..0.3);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.0..4.0);
                for (j, v) in u[0].iter_mut().enumerate() {
                    *v = amp * (1.0 + (omega * j as f64 * d.dt + phase).sin()) / 2.0;
                }
            }
            vec![rng.random_range(60.0..140.0), rng.random_range(5.0..40.0)]
        }
        "lorenz" => vec![rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(15.0..35.0)],
        "aid" => {
            let (p4, n, i_b, g_b) = (theta[3], theta[4], theta[6], theta[7]);
            u[0].iter_mut().for_each(|v| *v = n * i_b / p4);
            if perturb {
                let reported = rng.random_range(15.0..400.0);
                let j = (reported / d.dt).round() as usize;
                let carbs = rng.random_range(0.0..28.0);
                let bolus = rng.random_range(0.0..40.0);
                pulse(&mut u, &mut events, 1, j, d.dt, carbs);
                u[0][j] += bolus / d.dt;
            }
            vec![i_b, 0.0, g_b + rng.random_range(-20.0..20.0)]
        }
        _ => {
            if perturb {
                let amp = rng.random_range(0.5..1.5);
                if preset == "eeg_wiener" {
                    let step = Normal::new(0.0, amp * d.dt.sqrt()).expect("finite std");
                    let mut w = 0.0;
                    for v in u[0].iter_mut() {
                        *v = w;
                        w += step.sample(rng);
                    }
                } else {
                    let omega = rng.random_range(1.0..3.0);
                    for (j, v) in u[0].iter_mut().enumerate() {
                        *v = amp * (omega * j as f64 * d.dt).sin();
                    }
                }
            }
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    };
    Drawn { x0, u, events }
}

/// Simulates `preset` under `theta` and returns full-state traces whose
/// event channels carry the reported timing. True event timing lags the
/// reported one by `opts.injected_shift` samples.
pub fn generate_benchmark_data(spec: &SystemSpec, theta: &ThetaVec, preset: &str, seed: u64, opts: &GenOptions) -> Result<Dataset> {
    let native = preset_system(preset)?;
    if spec.name() != native {
        return Err(HarnessError::Config(format!("preset {preset:?} needs system {native:?}, got {:?}", spec.name())));
    }
    if !(opts.injected_shift >= 0.0) {
        return Err(HarnessError::Config("injected shift must be non-negative".into()));
    }
    let d = design(preset);
    let n_traces = opts.traces.unwrap_or(d.traces);
    let noise = opts.noise.unwrap_or(d.noise);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::rk4(d.substeps);
    let mask = SensingMask::full(spec.n());
    let grid = odesolve::uniform_grid(0.0, d.dt, d.k);
    let mut traces = Vec::with_capacity(n_traces);
    for idx in 0..n_traces {
        let drawn = draw(preset, spec, theta.values(), &d, &mut rng, opts.perturbation);
        let mut true_u = drawn.u.clone();
        for &ch in spec.event_inputs() {
            if opts.injected_shift > 0.0 {
                let s = opts.injected_shift.min((d.k - 1) as f64);
                true_u[ch] = signal::fractional_shift(&drawn.u[ch], s)?;
            }
        }
        let sig = InputSignal::new(0.0, d.dt, true_u)?;
        let traj = odesolve::solve(spec, theta, &drawn.x0, &sig, &grid, &cfg, &mask)
            .map_err(|e| HarnessError::Generation(format!("trace {idx}: {e}")))?;
        let mut y: Vec<Vec<f64>> = (0..spec.n()).map(|i| traj.state(i)).collect();
        if noise > 0.0 {
            let dist = Normal::new(0.0, noise).expect("finite std");
            // Only the last state is measured by a noisy sensor (CGM glucose in the AID preset).
            for v in y.last_mut().expect("at least one state").iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        let trace = Trace::new(0.0, d.dt, y, drawn.u, spec.state_labels(), spec.input_labels())?;
        let reported = EventList::new(drawn.events);
        let mut true_events = reported.clone();
        for &ch in spec.event_inputs() {
            true_events = true_events.delayed(ch, opts.injected_shift * d.dt);
        }
        traces.push(GeneratedTrace {
            trace,
            reported_events: reported,
            true_events,
        });
    }
    Ok(Dataset {
        system: spec.name().to_string(),
        preset: preset.to_string(),
        seed,
        theta: theta.values().to_vec(),
        options: opts.clone(),
        hold: d.hold,
        traces,
    })
}

// ---------------------------------------------------------------------------
// CSV

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a trace as `t,<y-labels...>,<u-labels...>`.
pub fn write_trace_csv(tr: &Trace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::io(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(tr.y_labels.iter().cloned());
    header.extend(tr.u_labels.iter().cloned());
    w.write_record(&header).map_err(|e| HarnessError::io(path, e))?;
    for (j, t) in tr.times().into_iter().enumerate() {
        let mut row = vec![fmt(t)];
        row.extend(tr.y.iter().chain(&tr.u).map(|c| fmt(c[j])));
        w.write_record(&row).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Writes events as `t,channel,magnitude` with channel labels.
pub fn write_events_csv(ev: &EventList, labels: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::io(path, e))?;
    w.write_record(["t", "channel", "magnitude"]).map_err(|e| HarnessError::io(path, e))?;
    for e in &ev.events {
        w.write_record([fmt(e.t), labels[e.channel].clone(), fmt(e.magnitude)]).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Which CSV columns are states and which are inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchema {
    pub states: Vec<String>,
    pub inputs: Vec<String>,
}

fn parse_num(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| HarnessError::Data(format!("row {row}: column {col:?} holds {s:?}, not a finite number")))
}

/// Reads a trace file and an optional event file. Gaps longer than `2·dt`
/// split the record into segments; other irregular spacing is an error.
/// Events are encoded only into input channels that have no column in the
/// trace file.
pub fn load_real_csv(trace_path: &Path, events_path: Option<&Path>, schema: &ChannelSchema) -> Result<(Vec<Trace>, EventList)> {
    let mut rdr = csv::Reader::from_path(trace_path).map_err(|e| HarnessError::io(trace_path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| HarnessError::io(trace_path, e))?.iter().map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(HarnessError::Data(format!("{}: first column must be \"t\"", trace_path.display())));
    }
    for h in &header[1..] {
        if !schema.states.contains(h) && !schema.inputs.contains(h) {
            return Err(HarnessError::Data(format!("{}: unknown channel label {h:?}", trace_path.display())));
        }
    }
    let col_of = |label: &String| header.iter().position(|h| h == label);
    let state_cols: Vec<usize> = schema
        .states
        .iter()
        .map(|s| col_of(s).ok_or_else(|| HarnessError::Data(format!("{}: missing state column {s:?}", trace_path.display()))))
        .collect::<Result<_>>()?;
    let input_cols: Vec<Option<usize>> = schema.inputs.iter().map(col_of).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::io(trace_path, e))?;
        let row = i + 2;
        if rec.len() != header.len() {
            return Err(HarnessError::Data(format!("row {row}: expected {} fields, got {}", header.len(), rec.len())));
        }
        let vals = rec.iter().zip(&header).map(|(s, h)| parse_num(s, row, h)).collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    if rows.len() < 2 {
        return Err(HarnessError::Data(format!("{}: need at least 2 samples", trace_path.display())));
    }
    let diffs: Vec<f64> = rows.windows(2).map(|w| w[1][0] - w[0][0]).collect();
    if let Some(i) = diffs.iter().position(|&d| !(d > 0.0)) {
        return Err(HarnessError::Data(format!("row {}: times must be strictly increasing", i + 3)));
    }
    let dt = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * dt.max(rows[0][0].abs() * 1e-3).max(dt);
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for (i, &d) in diffs.iter().enumerate() {
        if d > 2.0 * dt {
            segments.push((start, i + 1));
            start = i + 1;
        } else if (d - dt).abs() > tol {
            return Err(HarnessError::Data(format!("row {}: spacing {d} departs from dt = {dt}", i + 3)));
        }
    }
    segments.push((start, rows.len()));

    let mut events = EventList::default();
    if let Some(ep) = events_path {
        let mut rdr = csv::Reader::from_path(ep).map_err(|e| HarnessError::io(ep, e))?;
        let h: Vec<String> = rdr.headers().map_err(|e| HarnessError::io(ep, e))?.iter().map(|s| s.trim().to_string()).collect();
        if h != ["t", "channel", "magnitude"] {
            return Err(HarnessError::Data(format!("{}: header must be t,channel,magnitude", ep.display())));
        }
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| HarnessError::io(ep, e))?;
            let row = i + 2;
            let t = parse_num(&rec[0], row, "t")?;
            if t < 0.0 {
                return Err(HarnessError::Data(format!("{}: row {row}: negative event time {t}", ep.display())));
            }
            let label = rec[1].trim();
            let channel = schema
                .inputs
                .iter()
                .position(|l| l == label)
                .or_else(|| label.parse::<usize>().ok().filter(|&c| c < schema.inputs.len()))
                .ok_or_else(|| HarnessError::Data(format!("{}: row {row}: unknown channel {label:?}", ep.display())))?;
            events.events.push(Event {
                channel,
                t,
                magnitude: parse_num(&rec[2], row, "magnitude")?,
            });
        }
    }

    let mut traces = Vec::with_capacity(segments.len());
    for (a, b) in segments {
        let k = b - a;
        if k < 2 {
            continue;
        }
        let t0 = rows[a][0];
        let y = state_cols.iter().map(|&c| rows[a..b].iter().map(|r| r[c]).collect()).collect();
        let mut u: Vec<Vec<f64>> = input_cols
            .iter()
            .map(|c| match c {
                Some(c) => rows[a..b].iter().map(|r| r[*c]).collect(),
                None => vec![0.0; k],
            })
            .collect();
        let inside: Vec<Event> = events
            .events
            .iter()
            .filter(|e| input_cols[e.channel].is_none() && e.t >= t0 - dt / 2.0 && e.t < t0 + (k as f64 - 0.5) * dt)
            .copied()
            .collect();
        if !inside.is_empty() {
            let enc = signal::encode_events(&EventList::new(inside), schema.inputs.len(), t0, dt, k)?;
            for (row, add) in u.iter_mut().zip(enc) {
                for (v, a) in row.iter_mut().zip(add) {
                    *v += a;
                }
            }
        }
        traces.push(Trace::new(t0, dt, y, u, schema.states.clone(), schema.inputs.clone())?);
    }
    Ok((traces, events))
}

/// Writes `trace_NNN.csv`, `events_NNN.csv` and `meta.json` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for (i, g) in ds.traces.iter().enumerate() {
        write_trace_csv(&g.trace, &dir.join(format!("trace_{i:03}.csv")))?;
        write_events_csv(&g.reported_events, &g.trace.u_labels, &dir.join(format!("events_{i:03}.csv")))?;
    }
    let meta = serde_json::to_string_pretty(&DatasetMeta::from(ds)).expect("metadata serializes");
    let path = dir.join("meta.json");
    fs::write(&path, meta + "\n").map_err(|e| HarnessError::io(&path, e))
}

/// Generation metadata stored alongside the CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub preset: String,
    pub seed: u64,
    pub theta: Vec<f64>,
    pub options: GenOptions,
    pub hold: usize,
    pub true_events: Vec<EventList>,
}

impl From<&Dataset> for DatasetMeta {
    fn from(ds: &Dataset) -> Self {
        DatasetMeta {
            system: ds.system.clone(),
            preset: ds.preset.clone(),
            seed: ds.seed,
            theta: ds.theta.clone(),
            options: ds.options.clone(),
            hold: ds.hold,
            true_events: ds.traces.iter().map(|g| g.true_events.clone()).collect(),
        }
    }
}

/// Reads every `trace_*.csv` in `dir` (sorted by name) and `meta.json` if present.
pub fn read_dataset(dir: &Path, schema: &ChannelSchema) -> Result<(Vec<Trace>, Option<DatasetMeta>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trace_") && n.ends_with(".csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::Data(format!("{}: no trace_*.csv files", dir.display())));
    }
    let mut traces = Vec::new();
    for f in &files {
        traces.extend(load_real_csv(f, None, schema)?.0);
    }
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| HarnessError::io(&meta_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", meta_path.display())))?)
    } else {
        None
    };
    Ok((traces, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use physrec_core::dynamics::builtin_system;

    #[test]
    fn aid_preset_shape() {
        let (spec, theta) = builtin_system("bergman_aid").unwrap();
        let ds = generate_benchmark_data(&spec, &theta, "aid", 1, &GenOptions::default()).unwrap();
        assert_eq!(ds.traces.len(), 14);
        assert!(ds.traces.iter().all(|g| g.trace.k() == 200));
        for g in &ds.traces {
            let e = &g.reported_events.events[0];
            assert!((15.0..=400.0).contains(&e.t));
            assert!((0.0..28.0).contains(&e.magnitude));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (spec, theta) = builtin_system("lotka_volterra").unwrap();
        let a = generate_benchmark_data(&spec, &theta, "lv", 4, &GenOptions::default()).unwrap();
        let b = generate_benchmark_data(&spec, &theta, "lv", 4, &GenOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_benchmark_data(&spec, &theta, "lv", 5, &GenOptions::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn preset_system_mismatch() {
        let (spec, theta) = builtin_system("lorenz").unwrap();
        assert!(generate_benchmark_data(&spec, &theta, "aid", 0, &GenOptions::default()).is_err());
        assert!(preset_system("f8").is_err());
    }

    #[test]
    fn injected_shift_moves_true_events() {
        let (spec, theta) = builtin_system("scalar_decay").unwrap();
        let opts = GenOptions {
            injected_shift: 4.0,
            ..GenOptions::default()
        };
        let ds = generate_benchmark_data(&spec, &theta, "scalar", 2, &opts).unwrap();
        let g = &ds.traces[0];
        for (r, t) in g.reported_events.events.iter().zip(&g.true_events.events) {
            assert!((t.t - r.t - 0.4).abs() < 1e-12);
        }
    }
}
