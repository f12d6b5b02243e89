//! Random search behaviors for data collection, log windowing, and the
//! train/test split.
//!
//! Two walk policies share one update rule `u <- clamp(u + Uniform(-a, a))`,
//! drawn independently per muscle. Variable search modulates the amplitude
//! `a` with a slow sine so the log contains both busy and nearly-still
//! stretches; constant search keeps the amplitude fixed and never sits
//! still.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::TrainingPair;
use crate::sim::{DisturbanceSchedule, HandSim};
use crate::types::{ControlInput, ControlState, SensorState, NUM_LOADCELLS, NUM_MUSCLES};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("log has {got} records but windowing needs at least {needed}")]
    LogTooShort { needed: usize, got: usize },
    #[error("need at least {needed} pairs to split, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log row {row}: {msg}")]
    BadRow { row: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Step amplitude follows `amplitude * |sin(phase_rate * tick)|`.
    Variable,
    /// Step amplitude is the full `amplitude` at every tick.
    Constant,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Peak walk amplitude, mm.
    pub amplitude_mm: f64,
    /// Sine phase advance per control tick.
    pub phase_rate: f64,
    pub duration_ticks: usize,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(mode: SearchMode, duration_ticks: usize, seed: u64) -> Self {
        Self {
            mode,
            amplitude_mm: 3.0,
            phase_rate: 0.02,
            duration_ticks,
            seed,
        }
    }
}

/// Walk amplitude at a tick. The sine modulation is folded to its magnitude:
/// a negative half-wave admits the same step range, and an interval with
/// inverted endpoints would be ill-formed.
pub fn step_amplitude(cfg: &SearchConfig, tick: u64) -> f64 {
    match cfg.mode {
        SearchMode::Variable => (cfg.amplitude_mm * (cfg.phase_rate * tick as f64).sin()).abs(),
        SearchMode::Constant => cfg.amplitude_mm,
    }
}

/// One random-walk update: independent per-muscle uniform steps inside the
/// current amplitude, then the actuation clamp.
pub fn search_step(
    cfg: &SearchConfig,
    tick: u64,
    u_prev: ControlInput,
    rng: &mut ChaCha8Rng,
) -> ControlInput {
    let amp = step_amplitude(cfg, tick);
    let mut next = u_prev.0;
    if amp > 0.0 {
        for v in &mut next {
            *v += rng.random_range(-amp..=amp);
        }
    }
    ControlInput(next).clamp()
}

/// Flag column values in the collection log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickFlag {
    None,
    Dropped,
}

impl TickFlag {
    fn as_str(&self) -> &'static str {
        match self {
            TickFlag::None => "",
            TickFlag::Dropped => "dropped",
        }
    }
}

/// One control tick of raw recorded data. `command_mm` is the input applied
/// over the interval starting at this tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub lengths_mm: [f64; NUM_MUSCLES],
    pub velocities_mm_per_tick: [f64; NUM_MUSCLES],
    pub tensions_n: [f64; NUM_MUSCLES],
    pub loadcells_n: [f64; NUM_LOADCELLS],
    pub command_mm: [f64; NUM_MUSCLES],
    pub flag: TickFlag,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollectionLog {
    pub records: Vec<TickRecord>,
    pub truncated_by_drop: bool,
}

impl CollectionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Run a search behavior against the simulator and record every tick.
///
/// The simulator must start at the nominal grasp; the walk runs with no
/// disturbances. If the tool drops mid-run the log is truncated at the event
/// and the last record is flagged.
pub fn collect(sim: &mut HandSim, cfg: &SearchConfig) -> CollectionLog {
    let schedule = DisturbanceSchedule::quiet();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5365_6172_6368_5eed);
    let mut log = CollectionLog::default();
    let mut u = ControlInput::ZERO;
    let mut prev_lengths: Option<[f64; NUM_MUSCLES]> = None;

    for tick in 0..cfg.duration_ticks as u64 {
        let raw = sim.read_sensors();
        let velocities = match prev_lengths {
            Some(prev) => {
                let mut v = [0.0; NUM_MUSCLES];
                for k in 0..NUM_MUSCLES {
                    v[k] = raw.muscle_lengths_mm[k] - prev[k];
                }
                v
            }
            None => [0.0; NUM_MUSCLES],
        };
        u = search_step(cfg, tick, u, &mut rng);
        log.records.push(TickRecord {
            tick,
            lengths_mm: raw.muscle_lengths_mm,
            velocities_mm_per_tick: velocities,
            tensions_n: raw.tensions_n,
            loadcells_n: raw.loadcells_n,
            command_mm: u.0,
            flag: TickFlag::None,
        });
        prev_lengths = Some(raw.muscle_lengths_mm);
        sim.step_control_tick(u, &schedule);
        if sim.dropped() {
            log.records.last_mut().expect("just pushed").flag = TickFlag::Dropped;
            log.truncated_by_drop = true;
            break;
        }
    }
    log
}

fn scaled_sensor(rec: &TickRecord) -> Vec<f64> {
    SensorState::from_raw(&rec.tensions_n, &rec.loadcells_n)
        .expect("raw sensors are nonnegative and finite")
        .flatten()
        .to_vec()
}

/// Window a log into supervised pairs with stride 1.
///
/// Pair `t` packs `(s_t, i_t, u_t..u_{t+T-1})` against the target
/// `(s_{t+1}..s_{t+T})`; a log of `n` records yields `n - horizon` pairs.
pub fn build_pairs(log: &CollectionLog, horizon: usize) -> Result<Vec<TrainingPair>, SearchError> {
    let n = log.records.len();
    if n < horizon + 1 {
        return Err(SearchError::LogTooShort {
            needed: horizon + 1,
            got: n,
        });
    }
    let mut pairs = Vec::with_capacity(n - horizon);
    for t in 0..n - horizon {
        let rec = &log.records[t];
        let mut x = Vec::with_capacity(13 + 8 + NUM_MUSCLES * horizon);
        x.extend_from_slice(&scaled_sensor(rec));
        let control = ControlState::from_raw(&rec.lengths_mm, &rec.velocities_mm_per_tick)
            .expect("raw lengths are finite");
        x.extend_from_slice(&control.flatten());
        for k in 0..horizon {
            x.extend_from_slice(&ControlInput(log.records[t + k].command_mm).scaled());
        }
        let mut y = Vec::with_capacity(13 * horizon);
        for k in 1..=horizon {
            y.extend_from_slice(&scaled_sensor(&log.records[t + k]));
        }
        pairs.push(TrainingPair { x, y });
    }
    Ok(pairs)
}

/// Shuffled, disjoint, exhaustive 8:2 split. The train side takes the
/// ceiling of 0.8 n.
pub fn split(
    pairs: &[TrainingPair],
    seed: u64,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>), SearchError> {
    let n = pairs.len();
    if n < 5 {
        return Err(SearchError::TooFewPairs { needed: 5, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7370_6c69_7400_5eed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let train_count = (8 * n + 9) / 10;
    let train = order[..train_count]
        .iter()
        .map(|&i| pairs[i].clone())
        .collect();
    let test = order[train_count..]
        .iter()
        .map(|&i| pairs[i].clone())
        .collect();
    Ok((train, test))
}

pub const LOG_HEADER: [&str; 26] = [
    "tick", "l0", "l1", "l2", "l3", "ldot0", "ldot1", "ldot2", "ldot3", "f0", "f1", "f2", "f3",
    "c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "u0", "u1", "u2", "u3",
];

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_log_csv<W: Write>(log: &CollectionLog, out: W) -> Result<(), SearchError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = LOG_HEADER.to_vec();
    header.push("flags");
    w.write_record(&header)?;
    for rec in &log.records {
        let mut row: Vec<String> = vec![rec.tick.to_string()];
        row.extend(rec.lengths_mm.iter().map(|v| fmt_f64(*v)));
        row.extend(rec.velocities_mm_per_tick.iter().map(|v| fmt_f64(*v)));
        row.extend(rec.tensions_n.iter().map(|v| fmt_f64(*v)));
        row.extend(rec.loadcells_n.iter().map(|v| fmt_f64(*v)));
        row.extend(rec.command_mm.iter().map(|v| fmt_f64(*v)));
        row.push(rec.flag.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv<R: Read>(input: R) -> Result<CollectionLog, SearchError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut log = CollectionLog::default();
    for (idx, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != 27 {
            return Err(SearchError::BadRow {
                row: idx + 1,
                msg: format!("expected 27 fields, got {}", row.len()),
            });
        }
        let num = |i: usize| -> Result<f64, SearchError> {
            row[i].parse::<f64>().map_err(|e| SearchError::BadRow {
                row: idx + 1,
                msg: format!("field {i} `{}`: {e}", &row[i]),
            })
        };
        let mut rec = TickRecord {
            tick: row[0].parse::<u64>().map_err(|e| SearchError::BadRow {
                row: idx + 1,
                msg: format!("tick `{}`: {e}", &row[0]),
            })?,
            lengths_mm: [0.0; 4],
            velocities_mm_per_tick: [0.0; 4],
            tensions_n: [0.0; 4],
            loadcells_n: [0.0; 9],
            command_mm: [0.0; 4],
            flag: match &row[26] {
                "" => TickFlag::None,
                "dropped" => TickFlag::Dropped,
                other => {
                    return Err(SearchError::BadRow {
                        row: idx + 1,
                        msg: format!("unknown flag `{other}`"),
                    })
                }
            },
        };
        for k in 0..4 {
            rec.lengths_mm[k] = num(1 + k)?;
            rec.velocities_mm_per_tick[k] = num(5 + k)?;
            rec.tensions_n[k] = num(9 + k)?;
            rec.command_mm[k] = num(22 + k)?;
        }
        for j in 0..9 {
            rec.loadcells_n[j] = num(13 + j)?;
        }
        if rec.flag == TickFlag::Dropped {
            log.truncated_by_drop = true;
        }
        log.records.push(rec);
    }
    Ok(log)
}

pub fn save_log(log: &CollectionLog, path: &Path) -> Result<(), SearchError> {
    let file = std::fs::File::create(path)?;
    write_log_csv(log, std::io::BufWriter::new(file))
}

pub fn load_log(path: &Path) -> Result<CollectionLog, SearchError> {
    let file = std::fs::File::open(path)?;
    read_log_csv(std::io::BufReader::new(file))
}
