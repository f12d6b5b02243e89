//! Stability metric, moving averages, the experiment matrix, and CSV export.
//!
//! The per-tick metric scores the measured contact state against the
//! captured keep state with the same asymmetric weighting the optimizer
//! uses. Experiment runs compare three conditions over a disturbance
//! scenario: the stabilizer driven by a model trained on variable-search
//! data, the same driven by constant-search data, and the bare feedforward
//! grasp. Every run is seeded and every output is a deterministic CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::model::PredictiveModel;
use crate::search::fmt_f64;
use crate::sim::{make_scenario, DisturbanceSchedule, HandSim, PhysicsConfig, ScenarioKind};
use crate::stabilizer::{run_stabilized, KeepState, StabilizerConfig, TickDiagnostics};
use crate::types::{
    ControlInput, SensorState, CONTROL_DT_S, CONTROL_RATE_HZ, HORIZON, NUM_LOADCELLS, NUM_MUSCLES,
    SENSOR_DIM,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty series")]
    EmptySeries,
    #[error("condition `{0}` needs a model checkpoint")]
    MissingModel(Condition),
    #[error("unknown condition `{0}` (expected variable, constant, or none)")]
    UnknownCondition(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("stabilizer: {0}")]
    Stabilizer(String),
}

/// Stability metric: weighted squared deviation of the current contact
/// state from the keep state, summed over channels. A channel below its
/// keep value costs `below_weight` times one the same distance above.
pub fn l_eval(current: &[f64], keep: &[f64], below_weight: f64) -> Result<f64, EvalError> {
    if current.len() != keep.len() {
        return Err(EvalError::Shape {
            what: "metric operands",
            expected: keep.len(),
            got: current.len(),
        });
    }
    let mut acc = 0.0;
    for (c, k) in current.iter().zip(keep) {
        let w = if c >= k { 1.0 } else { below_weight };
        let d = c - k;
        acc += w * d * d;
    }
    Ok(acc)
}

/// Centered moving average with boundary truncation. The window covers
/// `[i - w/2, i + w - w/2)` clipped to the series; output length equals
/// input length.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>, EvalError> {
    if series.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    let window = window.max(1);
    let half = window / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + (window - half)).min(n);
        let span = &series[lo..hi];
        out.push(span.iter().sum::<f64>() / span.len() as f64);
    }
    Ok(out)
}

/// Moving-average window for the 2 s convention at the 5 Hz control rate.
pub const MA_WINDOW: usize = 10;

/// Sample a 5 Hz series at a time in seconds, clamped to the last sample.
pub fn value_at_time(series: &[f64], t_s: f64) -> f64 {
    let idx = (t_s * CONTROL_RATE_HZ).round() as usize;
    series[idx.min(series.len() - 1)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentEvent {
    None,
    /// The optimizer hit a non-finite loss; the previous command was
    /// repeated for this tick.
    OptimizerFallback,
    Dropped,
}

impl ExperimentEvent {
    fn as_str(&self) -> &'static str {
        match self {
            ExperimentEvent::None => "",
            ExperimentEvent::OptimizerFallback => "optimizer-fallback",
            ExperimentEvent::Dropped => "dropped",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "" => Some(ExperimentEvent::None),
            "optimizer-fallback" => Some(ExperimentEvent::OptimizerFallback),
            "dropped" => Some(ExperimentEvent::Dropped),
            _ => None,
        }
    }
}

/// One logged control tick of an experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTick {
    pub tick: u64,
    pub time_s: f64,
    pub lengths_mm: [f64; NUM_MUSCLES],
    pub tensions_n: [f64; NUM_MUSCLES],
    pub loadcells_n: [f64; NUM_LOADCELLS],
    pub scaled_state: Vec<f64>,
    pub command_mm: Vec<f64>,
    pub l_eval: f64,
    pub event: ExperimentEvent,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentLog {
    pub ticks: Vec<ExperimentTick>,
    pub dropped: bool,
    pub drop_time_s: Option<f64>,
    /// Present for stabilized runs only.
    pub diagnostics: Vec<TickDiagnostics>,
}

impl ExperimentLog {
    pub fn l_eval_series(&self) -> Vec<f64> {
        self.ticks.iter().map(|t| t.l_eval).collect()
    }
}

/// Feedforward-only baseline: hold the grasp posture and log the metric.
pub fn run_feedforward(
    sim: &mut HandSim,
    keep: &KeepState,
    sched: &DisturbanceSchedule,
    duration_s: f64,
    below_weight: f64,
) -> Result<ExperimentLog, EvalError> {
    let ticks = (duration_s * CONTROL_RATE_HZ).round() as usize;
    let mut log = ExperimentLog::default();
    for tick in 0..ticks {
        let raw = sim.read_sensors();
        let sensor = SensorState::from_raw(&raw.tensions_n, &raw.loadcells_n)
            .expect("raw sensors are nonnegative")
            .flatten();
        let le = l_eval(&sensor, keep.element(), below_weight)?;
        log.ticks.push(ExperimentTick {
            tick: tick as u64,
            time_s: tick as f64 * CONTROL_DT_S,
            lengths_mm: raw.muscle_lengths_mm,
            tensions_n: raw.tensions_n,
            loadcells_n: raw.loadcells_n,
            scaled_state: sensor.to_vec(),
            command_mm: vec![0.0; NUM_MUSCLES],
            l_eval: le,
            event: ExperimentEvent::None,
        });
        sim.step_control_tick(ControlInput::ZERO, sched);
        if sim.dropped() {
            log.dropped = true;
            log.drop_time_s = sim.drop_time_s();
            if let Some(last) = log.ticks.last_mut() {
                last.event = ExperimentEvent::Dropped;
            }
            break;
        }
    }
    Ok(log)
}

pub fn write_experiment_csv<W: Write>(log: &ExperimentLog, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["tick".into(), "time_s".into()];
    for k in 0..NUM_MUSCLES {
        header.push(format!("l{k}"));
    }
    for k in 0..NUM_MUSCLES {
        header.push(format!("f{k}"));
    }
    for j in 0..NUM_LOADCELLS {
        header.push(format!("c{j}"));
    }
    for d in 0..SENSOR_DIM {
        header.push(format!("s{d}"));
    }
    for k in 0..NUM_MUSCLES {
        header.push(format!("u{k}"));
    }
    header.push("l_eval".into());
    header.push("event".into());
    w.write_record(&header)?;
    for t in &log.ticks {
        let mut row: Vec<String> = vec![t.tick.to_string(), fmt_f64(t.time_s)];
        row.extend(t.lengths_mm.iter().map(|v| fmt_f64(*v)));
        row.extend(t.tensions_n.iter().map(|v| fmt_f64(*v)));
        row.extend(t.loadcells_n.iter().map(|v| fmt_f64(*v)));
        row.extend(t.scaled_state.iter().map(|v| fmt_f64(*v)));
        row.extend(t.command_mm.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(t.l_eval));
        row.push(t.event.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_experiment_csv<R: Read>(input: R) -> Result<ExperimentLog, EvalError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut log = ExperimentLog::default();
    let expected = 2 + NUM_MUSCLES * 3 + NUM_LOADCELLS + SENSOR_DIM + 2;
    for (idx, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != expected {
            return Err(EvalError::BadRow {
                row: idx + 1,
                msg: format!("expected {expected} fields, got {}", row.len()),
            });
        }
        let num = |i: usize| -> Result<f64, EvalError> {
            row[i].parse::<f64>().map_err(|e| EvalError::BadRow {
                row: idx + 1,
                msg: format!("field {i} `{}`: {e}", &row[i]),
            })
        };
        let mut tick = ExperimentTick {
            tick: row[0].parse::<u64>().map_err(|e| EvalError::BadRow {
                row: idx + 1,
                msg: format!("tick `{}`: {e}", &row[0]),
            })?,
            time_s: num(1)?,
            lengths_mm: [0.0; NUM_MUSCLES],
            tensions_n: [0.0; NUM_MUSCLES],
            loadcells_n: [0.0; NUM_LOADCELLS],
            scaled_state: vec![0.0; SENSOR_DIM],
            command_mm: vec![0.0; NUM_MUSCLES],
            l_eval: 0.0,
            event: ExperimentEvent::None,
        };
        let mut col = 2;
        for k in 0..NUM_MUSCLES {
            tick.lengths_mm[k] = num(col + k)?;
        }
        col += NUM_MUSCLES;
        for k in 0..NUM_MUSCLES {
            tick.tensions_n[k] = num(col + k)?;
        }
        col += NUM_MUSCLES;
        for j in 0..NUM_LOADCELLS {
            tick.loadcells_n[j] = num(col + j)?;
        }
        col += NUM_LOADCELLS;
        for d in 0..SENSOR_DIM {
            tick.scaled_state[d] = num(col + d)?;
        }
        col += SENSOR_DIM;
        for k in 0..NUM_MUSCLES {
            tick.command_mm[k] = num(col + k)?;
        }
        col += NUM_MUSCLES;
        tick.l_eval = num(col)?;
        tick.event = ExperimentEvent::parse(&row[col + 1]).ok_or_else(|| EvalError::BadRow {
            row: idx + 1,
            msg: format!("unknown event `{}`", &row[col + 1]),
        })?;
        if tick.event == ExperimentEvent::Dropped {
            log.dropped = true;
            log.drop_time_s = Some(tick.time_s);
        }
        log.ticks.push(tick);
    }
    Ok(log)
}

/// Diagnostics stream for a stabilized run: one row per tick with the loss
/// trace endpoints, winning candidate, per-epoch step sizes, and the next
/// command. Times are the run's virtual clock, which keeps reruns
/// byte-identical.
pub fn write_diagnostics_csv<W: Write>(
    diags: &[TickDiagnostics],
    out: W,
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let epochs = diags.first().map(|d| d.epoch_losses.len()).unwrap_or(0);
    let muscles = diags.first().map(|d| d.next_command.len()).unwrap_or(0);
    let mut header: Vec<String> = vec![
        "tick".into(),
        "time_s".into(),
        "loss_start".into(),
        "loss_end".into(),
        "candidate".into(),
    ];
    for e in 0..epochs {
        header.push(format!("gamma{e}"));
    }
    for k in 0..muscles {
        header.push(format!("u_next{k}_mm"));
    }
    w.write_record(&header)?;
    for (tick, d) in diags.iter().enumerate() {
        let mut row: Vec<String> = vec![
            tick.to_string(),
            fmt_f64(tick as f64 * CONTROL_DT_S),
            fmt_f64(d.initial_loss),
            fmt_f64(*d.epoch_losses.last().unwrap_or(&d.initial_loss)),
            d.candidate_index.to_string(),
        ];
        row.extend(d.chosen_gammas.iter().map(|g| fmt_f64(*g)));
        row.extend(
            d.next_command
                .iter()
                .map(|v| fmt_f64(v * crate::types::LENGTH_SCALE_MM)),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    VariableStabilizer,
    ConstantStabilizer,
    NoStabilizer,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::VariableStabilizer => "variable",
            Condition::ConstantStabilizer => "constant",
            Condition::NoStabilizer => "none",
        };
        f.write_str(s)
    }
}

impl FromStr for Condition {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "variable" | "variable-stabilizer" => Ok(Condition::VariableStabilizer),
            "constant" | "constant-stabilizer" => Ok(Condition::ConstantStabilizer),
            "none" | "no-stabilizer" => Ok(Condition::NoStabilizer),
            other => Err(EvalError::UnknownCondition(other.to_string())),
        }
    }
}

/// Trained models for the stabilized conditions.
#[derive(Default)]
pub struct ConditionModels {
    pub variable: Option<PredictiveModel>,
    pub constant: Option<PredictiveModel>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub conditions: Vec<Condition>,
    pub duration_s: f64,
    pub trials: usize,
    pub base_seed: u64,
}

/// Moving-average checkpoints at the start, middle, and end of a run, plus
/// the drop outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStats {
    pub ma_checkpoints: [f64; 3],
    pub dropped: bool,
    pub drop_time_s: Option<f64>,
}

/// Compute the per-trial statistics from a log.
pub fn summarize_log(log: &ExperimentLog, duration_s: f64) -> Result<TrialStats, EvalError> {
    let series = log.l_eval_series();
    let ma = moving_average(&series, MA_WINDOW)?;
    let times = [0.0, duration_s / 2.0, duration_s];
    Ok(TrialStats {
        ma_checkpoints: [
            value_at_time(&ma, times[0]),
            value_at_time(&ma, times[1]),
            value_at_time(&ma, times[2]),
        ],
        dropped: log.dropped,
        drop_time_s: log.drop_time_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub scenario: ScenarioKind,
    pub condition: Condition,
    pub trial: usize,
    pub seed: u64,
    pub stats: TrialStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub scenario: ScenarioKind,
    pub condition: Condition,
    /// `mean` or `var_sample` (sample variance, n - 1 denominator).
    pub stat: &'static str,
    pub ma_checkpoints: [f64; 3],
    pub successes: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixOutput {
    pub trials: Vec<TrialSummary>,
    pub aggregates: Vec<AggregateRow>,
}

/// Run the full comparison: `trials` seeded runs of every requested
/// condition over one scenario. Writes one per-tick CSV per run plus
/// `summary.csv` and `aggregate.csv` into `out_dir`.
///
/// Trial `i` uses seed `base_seed + i` for the scenario schedule, the
/// sensor noise, and the optimizer, so conditions face identical
/// disturbances.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    physics: &PhysicsConfig,
    models: &ConditionModels,
    stab: &StabilizerConfig,
    out_dir: &Path,
) -> Result<MatrixOutput, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut output = MatrixOutput::default();
    for &condition in &cfg.conditions {
        for trial in 0..cfg.trials {
            let seed = cfg.base_seed + trial as u64;
            let log = run_trial(cfg.scenario, condition, seed, cfg.duration_s, physics, models, stab)?;
            let name = format!(
                "{}_{}_trial{}_seed{}.csv",
                cfg.scenario, condition, trial, seed
            );
            let file = std::fs::File::create(out_dir.join(name))?;
            write_experiment_csv(&log, std::io::BufWriter::new(file))?;
            output.trials.push(TrialSummary {
                scenario: cfg.scenario,
                condition,
                trial,
                seed,
                stats: summarize_log(&log, cfg.duration_s)?,
            });
        }
    }
    output.aggregates = aggregate(&output.trials);
    let file = std::fs::File::create(out_dir.join("summary.csv"))?;
    write_summary_csv(&output.trials, std::io::BufWriter::new(file))?;
    let file = std::fs::File::create(out_dir.join("aggregate.csv"))?;
    write_aggregate_csv(&output.aggregates, std::io::BufWriter::new(file))?;
    Ok(output)
}

/// One seeded run of one condition.
pub fn run_trial(
    scenario: ScenarioKind,
    condition: Condition,
    seed: u64,
    duration_s: f64,
    physics: &PhysicsConfig,
    models: &ConditionModels,
    stab: &StabilizerConfig,
) -> Result<ExperimentLog, EvalError> {
    let sched = make_scenario(scenario, seed, duration_s, physics);
    let mut sim = HandSim::new(physics.clone(), seed);
    let raw = sim.read_sensors();
    let keep_state = SensorState::from_raw(&raw.tensions_n, &raw.loadcells_n)
        .expect("raw sensors are nonnegative");
    let keep = KeepState::from_sensor_state(&keep_state, HORIZON);
    match condition {
        Condition::NoStabilizer => {
            run_feedforward(&mut sim, &keep, &sched, duration_s, stab.below_keep_weight)
        }
        Condition::VariableStabilizer => {
            let model = models
                .variable
                .as_ref()
                .ok_or(EvalError::MissingModel(condition))?;
            run_stabilized(&mut sim, model, &keep, &sched, duration_s, stab, seed)
                .map_err(|e| EvalError::Stabilizer(e.to_string()))
        }
        Condition::ConstantStabilizer => {
            let model = models
                .constant
                .as_ref()
                .ok_or(EvalError::MissingModel(condition))?;
            run_stabilized(&mut sim, model, &keep, &sched, duration_s, stab, seed)
                .map_err(|e| EvalError::Stabilizer(e.to_string()))
        }
    }
}

fn aggregate(trials: &[TrialSummary]) -> Vec<AggregateRow> {
    let mut by_condition: BTreeMap<(ScenarioKind, Condition), Vec<&TrialSummary>> = BTreeMap::new();
    for t in trials {
        by_condition
            .entry((t.scenario, t.condition))
            .or_default()
            .push(t);
    }
    let mut rows = Vec::new();
    for ((scenario, condition), group) in by_condition {
        let n = group.len();
        let mut mean = [0.0; 3];
        for t in &group {
            for (m, v) in mean.iter_mut().zip(&t.stats.ma_checkpoints) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = [0.0; 3];
        if n > 1 {
            for t in &group {
                for i in 0..3 {
                    let d = t.stats.ma_checkpoints[i] - mean[i];
                    var[i] += d * d;
                }
            }
            for v in &mut var {
                *v /= (n - 1) as f64;
            }
        }
        let successes = group.iter().filter(|t| !t.stats.dropped).count();
        rows.push(AggregateRow {
            scenario,
            condition,
            stat: "mean",
            ma_checkpoints: mean,
            successes,
            trials: n,
        });
        rows.push(AggregateRow {
            scenario,
            condition,
            stat: "var_sample",
            ma_checkpoints: var,
            successes,
            trials: n,
        });
    }
    rows
}

pub fn write_summary_csv<W: Write>(trials: &[TrialSummary], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "condition",
        "trial",
        "seed",
        "ma_start",
        "ma_mid",
        "ma_end",
        "dropped",
        "drop_time_s",
    ])?;
    for t in trials {
        w.write_record(&[
            t.scenario.to_string(),
            t.condition.to_string(),
            t.trial.to_string(),
            t.seed.to_string(),
            fmt_f64(t.stats.ma_checkpoints[0]),
            fmt_f64(t.stats.ma_checkpoints[1]),
            fmt_f64(t.stats.ma_checkpoints[2]),
            t.stats.dropped.to_string(),
            t.stats
                .drop_time_s
                .map(fmt_f64)
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "condition",
        "stat",
        "ma_start",
        "ma_mid",
        "ma_end",
        "successes",
        "trials",
    ])?;
    for r in rows {
        w.write_record(&[
            r.scenario.to_string(),
            r.condition.to_string(),
            r.stat.to_string(),
            fmt_f64(r.ma_checkpoints[0]),
            fmt_f64(r.ma_checkpoints[1]),
            fmt_f64(r.ma_checkpoints[2]),
            r.successes.to_string(),
            r.trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
