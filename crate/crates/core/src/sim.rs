//! Deterministic plant: a tendon-driven four-muscle grasp on a tool.
//!
//! The plant is an abstraction, not a mesh-level contact simulation. Muscle
//! servos track target lengths with a first-order lag. Tendon stretch maps to
//! muscle tension; a ring of nine loadcells shares the grip force with
//! distinct per-cell sensitivity to the tool pose. The tool pose is a 3-DoF
//! slip coordinate (two in-plane translations plus one rotation, zero at the
//! nominal grasp).
//!
//! Pose dynamics have an elastic and a plastic part. Elastically, the pose
//! is pulled toward a seating anchor at a rate proportional to total
//! contact. The anchor itself creeps toward wherever the tool currently
//! sits and absorbs a fraction of every impulse, so repeated impacts walk
//! the seating away from the nominal grasp unless something actively steers
//! it back. Disturbance transfer grows once contact falls below a slip
//! threshold, any pose excursion slackens the tendons, and contact quality
//! falls with pose magnitude, so an unchecked drift compounds while
//! squeezing harder re-seats the tool.
//!
//! All physics constants live in [`PhysicsConfig`] and can be overridden
//! from a flat `key = value` file. Unknown keys are rejected.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::types::{ControlInput, CONTROL_DT_S, NUM_LOADCELLS, NUM_MUSCLES};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario kind `{0}` (expected quiet, hammer, vacuum, or broom)")]
    UnknownScenario(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Every tunable plant and scenario constant, with documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsConfig {
    /// Physics substeps per 5 Hz control tick (20 gives 100 Hz physics).
    pub substeps: u32,
    /// Muscle servo first-order time constant, seconds.
    pub tau_servo_s: f64,
    /// Slew limit on actual muscle length, mm/s.
    pub servo_rate_mm_s: f64,
    /// Feedforward grasp posture: absolute target muscle lengths, mm.
    pub l_target0_mm: [f64; NUM_MUSCLES],
    /// Tendon stretch at the nominal grasp, mm. Shortening a muscle adds
    /// stretch, lengthening removes it; a muscle goes slack at zero.
    pub pretension_mm: [f64; NUM_MUSCLES],
    /// Tendon spring constant, N/mm.
    pub k_tension_n_mm: f64,
    /// Tension sensor saturation, N.
    pub tension_rated_n: f64,
    /// Loadcell profile at the nominal grasp, N.
    pub loadcell_nominal_n: [f64; NUM_LOADCELLS],
    /// Loadcell saturation, N.
    pub loadcell_rated_n: f64,
    /// Loadcell sensitivity to in-plane tool translation.
    pub pose_sensitivity: f64,
    /// Loadcell sensitivity to tool rotation.
    pub rotation_sensitivity: f64,
    /// Tendon stretch picked up per unit tool pose, mm.
    pub tension_pose_mm: f64,
    /// Tendon slack caused by squared pose magnitude, mm. This is what makes
    /// an uncorrected drift loosen the grip.
    pub pose_loosen_mm: f64,
    /// Pose velocity per unit differential tension (re-centering by
    /// asymmetric squeezing).
    pub steer_gain: f64,
    /// Contact falloff with squared pose magnitude.
    pub quality_curvature: f64,
    /// Elastic re-seating rate toward the anchor at nominal contact, 1/s.
    pub k_restore: f64,
    /// Continuous creep rate of the seating anchor toward the pose, 1/s.
    pub k_anchor: f64,
    /// Fraction of each transmitted impulse absorbed by the anchor.
    pub plastic_frac: f64,
    /// Fraction of nominal contact below which the tool starts slipping.
    pub slip_threshold: f64,
    /// Componentwise cap on the pose coordinates.
    pub pose_cap: f64,
    /// Fraction of an impulse transmitted even at full grip.
    pub impulse_base_transfer: f64,
    /// Additive Gaussian noise on reported muscle lengths, mm.
    pub sigma_l_mm: f64,
    /// Multiplicative noise fraction on tensions and loadcells.
    pub sensor_noise_frac: f64,
    /// Contact fraction below which the drop timer runs.
    pub drop_contact_frac: f64,
    /// Time below the contact floor that declares the tool dropped, s.
    pub drop_hold_s: f64,

    pub hammer_interval_s: f64,
    pub hammer_impulse: f64,
    pub hammer_jitter_frac: f64,
    pub vacuum_drag: f64,
    pub vacuum_freq_hz: f64,
    pub vacuum_impulse: f64,
    pub vacuum_interval_s: f64,
    pub broom_gap_min_s: f64,
    pub broom_gap_max_s: f64,
    pub broom_impulse_min: f64,
    pub broom_impulse_max: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            substeps: 20,
            tau_servo_s: 0.1,
            servo_rate_mm_s: 400.0,
            l_target0_mm: [50.0; NUM_MUSCLES],
            pretension_mm: [14.0, 16.0, 18.0, 19.0],
            k_tension_n_mm: 6.0,
            tension_rated_n: 200.0,
            loadcell_nominal_n: [6.0, 5.0, 7.0, 4.0, 8.0, 5.0, 6.0, 3.0, 4.0],
            loadcell_rated_n: 50.0,
            pose_sensitivity: 0.45,
            rotation_sensitivity: 0.4,
            tension_pose_mm: 3.0,
            pose_loosen_mm: 1.0,
            steer_gain: 0.06,
            quality_curvature: 0.45,
            k_restore: 0.6,
            k_anchor: 0.05,
            plastic_frac: 0.07,
            slip_threshold: 0.65,
            pose_cap: 2.5,
            impulse_base_transfer: 0.25,
            sigma_l_mm: 0.05,
            sensor_noise_frac: 0.02,
            drop_contact_frac: 0.05,
            drop_hold_s: 1.0,
            hammer_interval_s: 2.0,
            hammer_impulse: 0.35,
            hammer_jitter_frac: 0.25,
            vacuum_drag: 0.3,
            vacuum_freq_hz: 0.4,
            vacuum_impulse: 0.12,
            vacuum_interval_s: 3.0,
            broom_gap_min_s: 2.0,
            broom_gap_max_s: 5.0,
            broom_impulse_min: 1.1,
            broom_impulse_max: 2.0,
        }
    }
}

impl PhysicsConfig {
    /// Noise-free variant for oracle tests.
    pub fn noiseless() -> Self {
        Self {
            sigma_l_mm: 0.0,
            sensor_noise_frac: 0.0,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn nominal_tension_n(&self, muscle: usize) -> f64 {
        self.k_tension_n_mm * self.pretension_mm[muscle]
    }
}

fn parse_scalar(value: &str, line: usize) -> Result<f64, SimError> {
    value.trim().parse::<f64>().map_err(|e| SimError::Config {
        line,
        msg: format!("bad number `{}`: {e}", value.trim()),
    })
}

fn parse_vec<const N: usize>(value: &str, line: usize) -> Result<[f64; N], SimError> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != N {
        return Err(SimError::Config {
            line,
            msg: format!("expected {N} comma-separated values, got {}", parts.len()),
        });
    }
    let mut out = [0.0; N];
    for (dst, p) in out.iter_mut().zip(parts) {
        *dst = parse_scalar(p, line)?;
    }
    Ok(out)
}

impl FromStr for PhysicsConfig {
    type Err = SimError;

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    fn from_str(text: &str) -> Result<Self, SimError> {
        let mut cfg = PhysicsConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| SimError::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "substeps" => {
                    cfg.substeps = value.parse::<u32>().map_err(|e| SimError::Config {
                        line,
                        msg: format!("bad integer `{value}`: {e}"),
                    })?;
                    if cfg.substeps == 0 {
                        return Err(SimError::Config {
                            line,
                            msg: "substeps must be positive".into(),
                        });
                    }
                }
                "tau_servo_s" => cfg.tau_servo_s = parse_scalar(value, line)?,
                "servo_rate_mm_s" => cfg.servo_rate_mm_s = parse_scalar(value, line)?,
                "l_target0_mm" => cfg.l_target0_mm = parse_vec(value, line)?,
                "pretension_mm" => cfg.pretension_mm = parse_vec(value, line)?,
                "k_tension_n_mm" => cfg.k_tension_n_mm = parse_scalar(value, line)?,
                "tension_rated_n" => cfg.tension_rated_n = parse_scalar(value, line)?,
                "loadcell_nominal_n" => cfg.loadcell_nominal_n = parse_vec(value, line)?,
                "loadcell_rated_n" => cfg.loadcell_rated_n = parse_scalar(value, line)?,
                "pose_sensitivity" => cfg.pose_sensitivity = parse_scalar(value, line)?,
                "rotation_sensitivity" => cfg.rotation_sensitivity = parse_scalar(value, line)?,
                "tension_pose_mm" => cfg.tension_pose_mm = parse_scalar(value, line)?,
                "pose_loosen_mm" => cfg.pose_loosen_mm = parse_scalar(value, line)?,
                "steer_gain" => cfg.steer_gain = parse_scalar(value, line)?,
                "quality_curvature" => cfg.quality_curvature = parse_scalar(value, line)?,
                "k_restore" => cfg.k_restore = parse_scalar(value, line)?,
                "k_anchor" => cfg.k_anchor = parse_scalar(value, line)?,
                "plastic_frac" => cfg.plastic_frac = parse_scalar(value, line)?,
                "slip_threshold" => cfg.slip_threshold = parse_scalar(value, line)?,
                "pose_cap" => cfg.pose_cap = parse_scalar(value, line)?,
                "impulse_base_transfer" => cfg.impulse_base_transfer = parse_scalar(value, line)?,
                "sigma_l_mm" => cfg.sigma_l_mm = parse_scalar(value, line)?,
                "sensor_noise_frac" => cfg.sensor_noise_frac = parse_scalar(value, line)?,
                "drop_contact_frac" => cfg.drop_contact_frac = parse_scalar(value, line)?,
                "drop_hold_s" => cfg.drop_hold_s = parse_scalar(value, line)?,
                "hammer_interval_s" => cfg.hammer_interval_s = parse_scalar(value, line)?,
                "hammer_impulse" => cfg.hammer_impulse = parse_scalar(value, line)?,
                "hammer_jitter_frac" => cfg.hammer_jitter_frac = parse_scalar(value, line)?,
                "vacuum_drag" => cfg.vacuum_drag = parse_scalar(value, line)?,
                "vacuum_freq_hz" => cfg.vacuum_freq_hz = parse_scalar(value, line)?,
                "vacuum_impulse" => cfg.vacuum_impulse = parse_scalar(value, line)?,
                "vacuum_interval_s" => cfg.vacuum_interval_s = parse_scalar(value, line)?,
                "broom_gap_min_s" => cfg.broom_gap_min_s = parse_scalar(value, line)?,
                "broom_gap_max_s" => cfg.broom_gap_max_s = parse_scalar(value, line)?,
                "broom_impulse_min" => cfg.broom_impulse_min = parse_scalar(value, line)?,
                "broom_impulse_max" => cfg.broom_impulse_max = parse_scalar(value, line)?,
                other => {
                    return Err(SimError::Config {
                        line,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioKind {
    /// No disturbances; used for data collection and baseline runs.
    Quiet,
    Hammer,
    Vacuum,
    Broom,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioKind::Quiet => "quiet",
            ScenarioKind::Hammer => "hammer",
            ScenarioKind::Vacuum => "vacuum",
            ScenarioKind::Broom => "broom",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "quiet" => Ok(ScenarioKind::Quiet),
            "hammer" => Ok(ScenarioKind::Hammer),
            "vacuum" => Ok(ScenarioKind::Vacuum),
            "broom" => Ok(ScenarioKind::Broom),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpulseEvent {
    pub time_s: f64,
    pub impulse: [f64; 3],
}

/// A deterministic disturbance timeline for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSchedule {
    pub kind: ScenarioKind,
    pub events: Vec<ImpulseEvent>,
    pub drag_coeff: f64,
    pub drag_freq_hz: f64,
}

impl DisturbanceSchedule {
    pub fn quiet() -> Self {
        Self {
            kind: ScenarioKind::Quiet,
            events: Vec::new(),
            drag_coeff: 0.0,
            drag_freq_hz: 0.0,
        }
    }
}

/// Build the disturbance timeline for `kind` over `duration_s` seconds.
/// Identical `(kind, seed, duration)` always yields an identical schedule.
pub fn make_scenario(
    kind: ScenarioKind,
    seed: u64,
    duration_s: f64,
    cfg: &PhysicsConfig,
) -> DisturbanceSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_a51a_11ed_c0de);
    let mut events = Vec::new();
    match kind {
        ScenarioKind::Quiet => DisturbanceSchedule::quiet(),
        ScenarioKind::Hammer => {
            let mut t = cfg.hammer_interval_s;
            while t <= duration_s {
                let jitter = 1.0 + cfg.hammer_jitter_frac * rng.random_range(-1.0..=1.0);
                let mag = cfg.hammer_impulse * jitter;
                let side: f64 = rng.random_range(-0.3..=0.3);
                let spin: f64 = rng.random_range(-0.3..=0.3);
                let norm = (1.0 + side * side + spin * spin).sqrt();
                events.push(ImpulseEvent {
                    time_s: t,
                    impulse: [mag / norm, mag * side / norm, mag * spin / norm],
                });
                t += cfg.hammer_interval_s;
            }
            DisturbanceSchedule {
                kind,
                events,
                drag_coeff: 0.0,
                drag_freq_hz: 0.0,
            }
        }
        ScenarioKind::Vacuum => {
            let mut t = cfg.vacuum_interval_s;
            while t <= duration_s {
                let mag = cfg.vacuum_impulse * (1.0 + 0.3 * rng.random_range(-1.0..=1.0));
                let angle: f64 = rng.random_range(0.0..2.0 * PI);
                events.push(ImpulseEvent {
                    time_s: t,
                    impulse: [mag * angle.cos(), mag * angle.sin(), 0.0],
                });
                t += cfg.vacuum_interval_s;
            }
            DisturbanceSchedule {
                kind,
                events,
                drag_coeff: cfg.vacuum_drag,
                drag_freq_hz: cfg.vacuum_freq_hz,
            }
        }
        ScenarioKind::Broom => {
            let mut t = 0.0;
            let mut sweep = 1.0;
            loop {
                t += rng.random_range(cfg.broom_gap_min_s..=cfg.broom_gap_max_s);
                if t > duration_s {
                    break;
                }
                let mag = rng.random_range(cfg.broom_impulse_min..=cfg.broom_impulse_max);
                let side: f64 = rng.random_range(-0.6..=0.6);
                let spin: f64 = rng.random_range(-0.6..=0.6);
                let norm = (0.64 + side * side + spin * spin).sqrt();
                events.push(ImpulseEvent {
                    time_s: t,
                    impulse: [
                        mag * 0.8 * sweep / norm,
                        mag * side / norm,
                        mag * spin / norm,
                    ],
                });
                sweep = -sweep;
            }
            DisturbanceSchedule {
                kind,
                events,
                drag_coeff: 0.0,
                drag_freq_hz: 0.0,
            }
        }
    }
}

/// Raw (unscaled) sensor readings at a control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSensors {
    pub muscle_lengths_mm: [f64; NUM_MUSCLES],
    pub tensions_n: [f64; NUM_MUSCLES],
    pub loadcells_n: [f64; NUM_LOADCELLS],
}

/// Plant state. `tool_pose = 0` is the nominal grasp configuration;
/// `anchor` is where the tool is currently seated in the grasp.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub l_actual_mm: [f64; NUM_MUSCLES],
    pub l_target_mm: [f64; NUM_MUSCLES],
    pub tool_pose: [f64; 3],
    pub anchor: [f64; 3],
    pub time_s: f64,
}

/// Fixed sensor arrangement: loadcells on a ring, muscles at compass points.
/// Derived once from the config scalars.
#[derive(Debug, Clone)]
struct SensorGeometry {
    /// Unnormalized share of muscle k's tension seen by cell j.
    cell_muscle_weight: [[f64; NUM_MUSCLES]; NUM_LOADCELLS],
    cell_weight_sum: [f64; NUM_LOADCELLS],
    /// Per-cell linear pose sensitivity.
    cell_pose_gain: [[f64; 3]; NUM_LOADCELLS],
    /// Tendon stretch per unit pose, per muscle.
    tension_pose_gain: [[f64; 3]; NUM_MUSCLES],
    /// Pose velocity per unit differential tension.
    steer: [[f64; NUM_MUSCLES]; 3],
    tension_nominal_n: [f64; NUM_MUSCLES],
    loadcell_total_nominal_n: f64,
}

impl SensorGeometry {
    fn derive(cfg: &PhysicsConfig) -> Self {
        let mut cell_muscle_weight = [[0.0; NUM_MUSCLES]; NUM_LOADCELLS];
        let mut cell_weight_sum = [0.0; NUM_LOADCELLS];
        let mut cell_pose_gain = [[0.0; 3]; NUM_LOADCELLS];
        let mut tension_pose_gain = [[0.0; 3]; NUM_MUSCLES];
        let mut steer = [[0.0; NUM_MUSCLES]; 3];

        for j in 0..NUM_LOADCELLS {
            let theta = 2.0 * PI * j as f64 / NUM_LOADCELLS as f64;
            let alt = if j % 2 == 0 { 1.0 } else { -1.0 };
            for (k, w) in cell_muscle_weight[j].iter_mut().enumerate() {
                let phi = 2.0 * PI * k as f64 / NUM_MUSCLES as f64;
                *w = 1.0 + 0.8 * (theta - phi).cos();
                cell_weight_sum[j] += *w;
            }
            cell_pose_gain[j] = [
                cfg.pose_sensitivity * theta.cos(),
                cfg.pose_sensitivity * theta.sin(),
                cfg.rotation_sensitivity * alt,
            ];
        }
        let mut tension_nominal_n = [0.0; NUM_MUSCLES];
        for k in 0..NUM_MUSCLES {
            let phi = 2.0 * PI * k as f64 / NUM_MUSCLES as f64;
            let alt = if k % 2 == 0 { 1.0 } else { -1.0 };
            tension_pose_gain[k] = [
                cfg.tension_pose_mm * phi.cos(),
                cfg.tension_pose_mm * phi.sin(),
                cfg.tension_pose_mm * 0.3 * alt,
            ];
            steer[0][k] = cfg.steer_gain * phi.cos();
            steer[1][k] = cfg.steer_gain * phi.sin();
            steer[2][k] = cfg.steer_gain * 0.5 * alt;
            tension_nominal_n[k] = cfg.nominal_tension_n(k);
        }
        Self {
            cell_muscle_weight,
            cell_weight_sum,
            cell_pose_gain,
            tension_pose_gain,
            steer,
            tension_nominal_n,
            loadcell_total_nominal_n: cfg.loadcell_nominal_n.iter().sum(),
        }
    }
}

/// Noise-free sensor values derived from a plant state.
#[derive(Debug, Clone, Copy)]
struct TrueSensors {
    tensions_n: [f64; NUM_MUSCLES],
    loadcells_n: [f64; NUM_LOADCELLS],
    total_contact_n: f64,
}

pub struct HandSim {
    cfg: PhysicsConfig,
    geom: SensorGeometry,
    state: SimState,
    rng: ChaCha8Rng,
    event_cursor: usize,
    below_timer_s: f64,
    dropped: bool,
    drop_time_s: Option<f64>,
}

impl HandSim {
    /// Start at the nominal grasp: muscles settled on the feedforward
    /// posture, tool pose zero.
    pub fn new(cfg: PhysicsConfig, noise_seed: u64) -> Self {
        let geom = SensorGeometry::derive(&cfg);
        let state = SimState {
            l_actual_mm: cfg.l_target0_mm,
            l_target_mm: cfg.l_target0_mm,
            tool_pose: [0.0; 3],
            anchor: [0.0; 3],
            time_s: 0.0,
        };
        Self {
            cfg,
            geom,
            state,
            rng: ChaCha8Rng::seed_from_u64(noise_seed ^ 0x4a4d_5349_4d00_5eed),
            event_cursor: 0,
            below_timer_s: 0.0,
            dropped: false,
            drop_time_s: None,
        }
    }

    pub fn config(&self) -> &PhysicsConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn dropped(&self) -> bool {
        self.dropped
    }

    pub fn drop_time_s(&self) -> Option<f64> {
        self.drop_time_s
    }

    fn true_sensors(&self) -> TrueSensors {
        let cfg = &self.cfg;
        let geom = &self.geom;
        let pose = &self.state.tool_pose;
        let pose_sq = pose.iter().map(|p| p * p).sum::<f64>();
        let loosen = cfg.pose_loosen_mm * pose_sq;

        let mut tensions = [0.0; NUM_MUSCLES];
        for k in 0..NUM_MUSCLES {
            let pulled: f64 = geom.tension_pose_gain[k]
                .iter()
                .zip(pose)
                .map(|(g, p)| g * p)
                .sum();
            let stretch = cfg.pretension_mm[k] + (cfg.l_target0_mm[k] - self.state.l_actual_mm[k])
                + pulled
                - loosen;
            tensions[k] = (cfg.k_tension_n_mm * stretch).clamp(0.0, cfg.tension_rated_n);
        }

        let quality = if self.dropped {
            0.0
        } else {
            (1.0 - cfg.quality_curvature * pose_sq).max(0.0)
        };
        let mut loadcells = [0.0; NUM_LOADCELLS];
        let mut total = 0.0;
        for j in 0..NUM_LOADCELLS {
            let mut drive = 0.0;
            for k in 0..NUM_MUSCLES {
                drive += geom.cell_muscle_weight[j][k] * (tensions[k] / geom.tension_nominal_n[k]);
            }
            drive /= geom.cell_weight_sum[j];
            let directional: f64 = geom.cell_pose_gain[j]
                .iter()
                .zip(pose)
                .map(|(g, p)| g * p)
                .sum();
            let c = cfg.loadcell_nominal_n[j] * drive * (1.0 + directional);
            loadcells[j] = (c.max(0.0) * quality).min(cfg.loadcell_rated_n);
            total += loadcells[j];
        }
        TrueSensors {
            tensions_n: tensions,
            loadcells_n: loadcells,
            total_contact_n: total,
        }
    }

    /// Advance one 5 Hz control tick under command `u` (delta target muscle
    /// lengths, already clamped) and the given disturbance schedule.
    pub fn step_control_tick(&mut self, u: ControlInput, sched: &DisturbanceSchedule) {
        let cfg = self.cfg.clone();
        for k in 0..NUM_MUSCLES {
            self.state.l_target_mm[k] = cfg.l_target0_mm[k] + u.0[k];
        }
        let h = CONTROL_DT_S / cfg.substeps as f64;
        let servo_alpha = 1.0 - (-h / cfg.tau_servo_s).exp();
        let max_dl = cfg.servo_rate_mm_s * h;

        for _ in 0..cfg.substeps {
            // muscle servos
            for k in 0..NUM_MUSCLES {
                let dl = servo_alpha * (self.state.l_target_mm[k] - self.state.l_actual_mm[k]);
                self.state.l_actual_mm[k] += dl.clamp(-max_dl, max_dl);
            }

            let sensors = self.true_sensors();
            let contact_ratio = sensors.total_contact_n / self.geom.loadcell_total_nominal_n;
            let slip = (1.0 - contact_ratio / cfg.slip_threshold).max(0.0);
            let transfer = cfg.impulse_base_transfer + (1.0 - cfg.impulse_base_transfer) * slip;

            // pose dynamics: elastic re-seating toward the anchor,
            // differential-tension steering, scenario drag; the anchor
            // creeps toward wherever the tool sits
            let mut pose_dot = [0.0; 3];
            for a in 0..3 {
                let offset = self.state.tool_pose[a] - self.state.anchor[a];
                pose_dot[a] -= cfg.k_restore * contact_ratio * offset;
                self.state.anchor[a] += h * cfg.k_anchor * offset;
                for k in 0..NUM_MUSCLES {
                    let dev = sensors.tensions_n[k] / self.geom.tension_nominal_n[k] - 1.0;
                    pose_dot[a] += self.geom.steer[a][k] * dev;
                }
            }
            if sched.drag_coeff != 0.0 {
                let phase = 2.0 * PI * sched.drag_freq_hz * self.state.time_s;
                pose_dot[0] += sched.drag_coeff * phase.sin() * transfer;
                pose_dot[1] += 0.4 * sched.drag_coeff * (0.7 * phase).cos() * transfer;
            }
            for a in 0..3 {
                self.state.tool_pose[a] += h * pose_dot[a];
            }

            let t_new = self.state.time_s + h;
            while self.event_cursor < sched.events.len()
                && sched.events[self.event_cursor].time_s <= t_new
            {
                let ev = &sched.events[self.event_cursor];
                for a in 0..3 {
                    let kick = ev.impulse[a] * transfer;
                    self.state.tool_pose[a] += kick;
                    self.state.anchor[a] += kick * cfg.plastic_frac;
                }
                self.event_cursor += 1;
            }
            for a in 0..3 {
                self.state.tool_pose[a] =
                    self.state.tool_pose[a].clamp(-cfg.pose_cap, cfg.pose_cap);
                self.state.anchor[a] = self.state.anchor[a].clamp(-cfg.pose_cap, cfg.pose_cap);
            }
            self.state.time_s = t_new;

            // drop detection runs on noise-free contact
            if !self.dropped {
                let total = self.true_sensors().total_contact_n;
                if total < cfg.drop_contact_frac * self.geom.loadcell_total_nominal_n {
                    self.below_timer_s += h;
                    if self.below_timer_s >= cfg.drop_hold_s {
                        self.dropped = true;
                        self.drop_time_s = Some(self.state.time_s);
                    }
                } else {
                    self.below_timer_s = 0.0;
                }
            }
        }
    }

    /// Read the raw sensors at a control tick, with configured noise.
    pub fn read_sensors(&mut self) -> RawSensors {
        let sensors = self.true_sensors();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = RawSensors {
            muscle_lengths_mm: self.state.l_actual_mm,
            tensions_n: sensors.tensions_n,
            loadcells_n: sensors.loadcells_n,
        };
        if self.cfg.sigma_l_mm > 0.0 {
            for l in &mut out.muscle_lengths_mm {
                *l += self.cfg.sigma_l_mm * normal.sample(&mut self.rng);
            }
        }
        if self.cfg.sensor_noise_frac > 0.0 {
            for f in &mut out.tensions_n {
                *f = (*f * (1.0 + self.cfg.sensor_noise_frac * normal.sample(&mut self.rng)))
                    .clamp(0.0, self.cfg.tension_rated_n);
            }
            for c in &mut out.loadcells_n {
                *c = (*c * (1.0 + self.cfg.sensor_noise_frac * normal.sample(&mut self.rng)))
                    .clamp(0.0, self.cfg.loadcell_rated_n);
            }
        }
        out
    }
}
