//! Shared vocabulary types and the fixed raw-to-model unit scalings.
//!
//! Flattening orders are fixed here and relied on everywhere else:
//! contact state is `(tensions, loadcells)`, control state is
//! `(lengths, velocities)`, and sequences are time-major. The network input
//! layout, dataset windowing, and CSV schemas all assume these orders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Muscles directly driving the fingers.
pub const NUM_MUSCLES: usize = 4;
/// Contact loadcells in the fingertips and palm.
pub const NUM_LOADCELLS: usize = 9;
/// Contact state dimension: tensions then loadcells.
pub const SENSOR_DIM: usize = NUM_MUSCLES + NUM_LOADCELLS;
/// Control state dimension: lengths then length velocities.
pub const CONTROL_STATE_DIM: usize = 2 * NUM_MUSCLES;
/// Prediction horizon in control ticks.
pub const HORIZON: usize = 10;
/// Control loop rate.
pub const CONTROL_RATE_HZ: f64 = 5.0;
/// Control tick length in seconds.
pub const CONTROL_DT_S: f64 = 1.0 / CONTROL_RATE_HZ;

/// Lower bound on a control input component, in mm.
pub const U_MIN_MM: f64 = -5.0;
/// Upper bound on a control input component, in mm.
pub const U_MAX_MM: f64 = 20.0;

/// Muscle lengths enter the model as mm / 10.
pub const LENGTH_SCALE_MM: f64 = 10.0;
/// Loadcell readings enter the model as N / 10.
pub const LOADCELL_SCALE_N: f64 = 10.0;
/// Muscle tensions enter the model as N / 200.
pub const TENSION_SCALE_N: f64 = 200.0;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("negative value in {what} (sensors saturate at zero)")]
    Negative { what: &'static str },
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("control input component {value} outside [{min}, {max}] mm")]
    OutOfBounds { value: f64, min: f64, max: f64 },
}

/// Contact state `s` in model units: four muscle tensions and nine loadcells.
///
/// Components are nonnegative; the physical sensors read zero once contact is
/// lost and only grow in the direction of stronger contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorState {
    pub tensions: [f64; NUM_MUSCLES],
    pub loadcells: [f64; NUM_LOADCELLS],
}

impl SensorState {
    pub fn new(
        tensions: [f64; NUM_MUSCLES],
        loadcells: [f64; NUM_LOADCELLS],
    ) -> Result<Self, TypeError> {
        for v in tensions.iter().chain(loadcells.iter()) {
            if !v.is_finite() {
                return Err(TypeError::NonFinite {
                    what: "sensor state",
                });
            }
            if *v < 0.0 {
                return Err(TypeError::Negative {
                    what: "sensor state",
                });
            }
        }
        Ok(Self {
            tensions,
            loadcells,
        })
    }

    /// Build from raw sensor units (tensions in N, loadcells in N).
    pub fn from_raw(
        tensions_n: &[f64; NUM_MUSCLES],
        loadcells_n: &[f64; NUM_LOADCELLS],
    ) -> Result<Self, TypeError> {
        let mut tensions = [0.0; NUM_MUSCLES];
        let mut loadcells = [0.0; NUM_LOADCELLS];
        for (dst, src) in tensions.iter_mut().zip(tensions_n) {
            *dst = src / TENSION_SCALE_N;
        }
        for (dst, src) in loadcells.iter_mut().zip(loadcells_n) {
            *dst = src / LOADCELL_SCALE_N;
        }
        Self::new(tensions, loadcells)
    }

    pub fn zero() -> Self {
        Self {
            tensions: [0.0; NUM_MUSCLES],
            loadcells: [0.0; NUM_LOADCELLS],
        }
    }

    /// Flatten as (tensions, loadcells).
    pub fn flatten(&self) -> [f64; SENSOR_DIM] {
        let mut out = [0.0; SENSOR_DIM];
        out[..NUM_MUSCLES].copy_from_slice(&self.tensions);
        out[NUM_MUSCLES..].copy_from_slice(&self.loadcells);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, TypeError> {
        if flat.len() != SENSOR_DIM {
            return Err(TypeError::Dimension {
                what: "sensor state",
                expected: SENSOR_DIM,
                got: flat.len(),
            });
        }
        let mut tensions = [0.0; NUM_MUSCLES];
        let mut loadcells = [0.0; NUM_LOADCELLS];
        tensions.copy_from_slice(&flat[..NUM_MUSCLES]);
        loadcells.copy_from_slice(&flat[NUM_MUSCLES..]);
        Self::new(tensions, loadcells)
    }
}

/// Control state `i` in model units: muscle lengths and their per-tick
/// velocities. Both are scaled by the length scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub lengths: [f64; NUM_MUSCLES],
    pub velocities: [f64; NUM_MUSCLES],
}

impl ControlState {
    /// Build from raw units: lengths in mm, velocities in mm per control tick.
    ///
    /// The velocity estimator is a first-order backward difference over one
    /// tick; both components use the same scaling.
    pub fn from_raw(
        lengths_mm: &[f64; NUM_MUSCLES],
        velocities_mm_per_tick: &[f64; NUM_MUSCLES],
    ) -> Result<Self, TypeError> {
        let mut lengths = [0.0; NUM_MUSCLES];
        let mut velocities = [0.0; NUM_MUSCLES];
        for k in 0..NUM_MUSCLES {
            if !lengths_mm[k].is_finite() || !velocities_mm_per_tick[k].is_finite() {
                return Err(TypeError::NonFinite {
                    what: "control state",
                });
            }
            lengths[k] = lengths_mm[k] / LENGTH_SCALE_MM;
            velocities[k] = velocities_mm_per_tick[k] / LENGTH_SCALE_MM;
        }
        Ok(Self {
            lengths,
            velocities,
        })
    }

    /// Flatten as (lengths, velocities).
    pub fn flatten(&self) -> [f64; CONTROL_STATE_DIM] {
        let mut out = [0.0; CONTROL_STATE_DIM];
        out[..NUM_MUSCLES].copy_from_slice(&self.lengths);
        out[NUM_MUSCLES..].copy_from_slice(&self.velocities);
        out
    }
}

/// Control input `u`: per-muscle target-length deltas from the feedforward
/// grasp posture, in raw mm. Scaled by the length scaling before entering
/// the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub [f64; NUM_MUSCLES]);

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput([0.0; NUM_MUSCLES]);

    /// Componentwise clamp to the actuation bounds. Idempotent.
    pub fn clamp(&self) -> ControlInput {
        let mut out = self.0;
        for v in &mut out {
            *v = v.clamp(U_MIN_MM, U_MAX_MM);
        }
        ControlInput(out)
    }

    pub fn in_bounds(&self) -> bool {
        self.0.iter().all(|v| (U_MIN_MM..=U_MAX_MM).contains(v))
    }

    /// Model-unit view (mm / 10).
    pub fn scaled(&self) -> [f64; NUM_MUSCLES] {
        let mut out = self.0;
        for v in &mut out {
            *v /= LENGTH_SCALE_MM;
        }
        out
    }

    pub fn from_scaled(scaled: &[f64]) -> Result<Self, TypeError> {
        if scaled.len() != NUM_MUSCLES {
            return Err(TypeError::Dimension {
                what: "control input",
                expected: NUM_MUSCLES,
                got: scaled.len(),
            });
        }
        let mut out = [0.0; NUM_MUSCLES];
        for (dst, s) in out.iter_mut().zip(scaled) {
            *dst = s * LENGTH_SCALE_MM;
        }
        Ok(ControlInput(out))
    }
}

/// An ordered control-input sequence covering one prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    inputs: Vec<ControlInput>,
}

impl ControlSequence {
    /// Validates length and per-component bounds.
    pub fn new(inputs: Vec<ControlInput>, horizon: usize) -> Result<Self, TypeError> {
        if inputs.len() != horizon {
            return Err(TypeError::Dimension {
                what: "control sequence",
                expected: horizon,
                got: inputs.len(),
            });
        }
        for u in &inputs {
            if let Some(v) = u.0.iter().find(|v| !(U_MIN_MM..=U_MAX_MM).contains(v)) {
                return Err(TypeError::OutOfBounds {
                    value: *v,
                    min: U_MIN_MM,
                    max: U_MAX_MM,
                });
            }
        }
        Ok(Self { inputs })
    }

    pub fn zero(horizon: usize) -> Self {
        Self {
            inputs: vec![ControlInput::ZERO; horizon],
        }
    }

    pub fn inputs(&self) -> &[ControlInput] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Time-major flattening in model units.
    pub fn to_scaled_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.inputs.len() * NUM_MUSCLES);
        for u in &self.inputs {
            out.extend_from_slice(&u.scaled());
        }
        out
    }

    pub fn from_scaled_flat(flat: &[f64], horizon: usize) -> Result<Self, TypeError> {
        if flat.len() != horizon * NUM_MUSCLES {
            return Err(TypeError::Dimension {
                what: "control sequence",
                expected: horizon * NUM_MUSCLES,
                got: flat.len(),
            });
        }
        let inputs = flat
            .chunks_exact(NUM_MUSCLES)
            .map(ControlInput::from_scaled)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(inputs, horizon)
    }
}

/// An ordered contact-state sequence covering one prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSequence {
    states: Vec<SensorState>,
}

impl SensorSequence {
    pub fn new(states: Vec<SensorState>, horizon: usize) -> Result<Self, TypeError> {
        if states.len() != horizon {
            return Err(TypeError::Dimension {
                what: "sensor sequence",
                expected: horizon,
                got: states.len(),
            });
        }
        Ok(Self { states })
    }

    /// The setpoint sequence: the same state replicated over the horizon.
    pub fn replicate(state: SensorState, horizon: usize) -> Self {
        Self {
            states: vec![state; horizon],
        }
    }

    pub fn states(&self) -> &[SensorState] {
        &self.states
    }

    /// Time-major flattening; each state flattens as (tensions, loadcells).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.states.len() * SENSOR_DIM);
        for s in &self.states {
            out.extend_from_slice(&s.flatten());
        }
        out
    }
}

/// Scale one muscle length (mm), loadcell reading (N), and tension (N) into
/// model units. Rejects non-finite inputs.
pub fn scale_to_model(raw_l: f64, raw_c: f64, raw_f: f64) -> Result<(f64, f64, f64), TypeError> {
    if !raw_l.is_finite() || !raw_c.is_finite() || !raw_f.is_finite() {
        return Err(TypeError::NonFinite {
            what: "raw reading",
        });
    }
    Ok((
        raw_l / LENGTH_SCALE_MM,
        raw_c / LOADCELL_SCALE_N,
        raw_f / TENSION_SCALE_N,
    ))
}

/// Inverse of [`scale_to_model`].
pub fn unscale_from_model(l: f64, c: f64, f: f64) -> Result<(f64, f64, f64), TypeError> {
    if !l.is_finite() || !c.is_finite() || !f.is_finite() {
        return Err(TypeError::NonFinite {
            what: "model value",
        });
    }
    Ok((l * LENGTH_SCALE_MM, c * LOADCELL_SCALE_N, f * TENSION_SCALE_N))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scaling_matches_fixed_ratios() {
        let (l, c, f) = scale_to_model(15.0, 0.0, 200.0).unwrap();
        assert_eq!(l, 1.5);
        assert_eq!(c, 0.0);
        assert_eq!(f, 1.0);
    }

    #[test]
    fn scaling_rejects_non_finite() {
        assert!(scale_to_model(f64::NAN, 0.0, 0.0).is_err());
        assert!(scale_to_model(0.0, f64::INFINITY, 0.0).is_err());
        assert!(unscale_from_model(0.0, 0.0, f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn clamp_componentwise() {
        let u = ControlInput([25.0, 0.0, 0.0, 0.0]).clamp();
        assert_eq!(u.0, [20.0, 0.0, 0.0, 0.0]);

        let interior = ControlInput([0.0; 4]).clamp();
        assert_eq!(interior.0, [0.0; 4]);

        let mixed = ControlInput([-7.0, 3.0, 21.0, -5.0]).clamp();
        assert_eq!(mixed.0, [-5.0, 3.0, 20.0, -5.0]);
    }

    #[test]
    fn sensor_state_dimensions_and_order() {
        let s = SensorState::new([1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0])
            .unwrap();
        let flat = s.flatten();
        assert_eq!(flat.len(), 13);
        // tensions first, loadcells after
        assert_eq!(flat[0], 1.0);
        assert_eq!(flat[3], 4.0);
        assert_eq!(flat[4], 5.0);
        assert_eq!(flat[12], 13.0);
        assert_eq!(SensorState::from_flat(&flat).unwrap(), s);
    }

    #[test]
    fn sensor_state_rejects_negative() {
        let err = SensorState::new([-0.1, 0.0, 0.0, 0.0], [0.0; 9]).unwrap_err();
        assert!(matches!(err, TypeError::Negative { .. }));
    }

    #[test]
    fn control_state_flatten_order() {
        let i = ControlState::from_raw(&[10.0, 20.0, 30.0, 40.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let flat = i.flatten();
        assert_eq!(flat.len(), 8);
        assert_eq!(flat[0], 1.0); // 10 mm -> 1.0 model units
        assert_eq!(flat[4], 0.1); // 1 mm/tick -> 0.1
    }

    #[test]
    fn control_sequence_validates_length_and_bounds() {
        assert!(ControlSequence::new(vec![ControlInput::ZERO; 9], HORIZON).is_err());
        let bad = vec![ControlInput([21.0, 0.0, 0.0, 0.0]); HORIZON];
        assert!(ControlSequence::new(bad, HORIZON).is_err());
        let ok = ControlSequence::zero(HORIZON);
        assert_eq!(ok.to_scaled_flat().len(), NUM_MUSCLES * HORIZON);
    }

    #[test]
    fn sensor_sequence_flat_dimension() {
        let seq = SensorSequence::replicate(SensorState::zero(), HORIZON);
        assert_eq!(seq.flatten().len(), 130);
    }

    #[test]
    fn control_sequence_scaled_round_trip() {
        let inputs: Vec<ControlInput> = (0..HORIZON)
            .map(|t| ControlInput([t as f64 - 5.0, 0.5 * t as f64, 1.0, 19.0]))
            .map(|u| u.clamp())
            .collect();
        let seq = ControlSequence::new(inputs, HORIZON).unwrap();
        let rt = ControlSequence::from_scaled_flat(&seq.to_scaled_flat(), HORIZON).unwrap();
        assert_eq!(seq, rt);
    }

    proptest! {
        #[test]
        fn scale_round_trip(l in -1e6f64..1e6, c in 0f64..1e6, f in 0f64..1e6) {
            let (sl, sc, sf) = scale_to_model(l, c, f).unwrap();
            let (rl, rc, rf) = unscale_from_model(sl, sc, sf).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
            prop_assert!(rel(l, rl) < 1e-12);
            prop_assert!(rel(c, rc) < 1e-12);
            prop_assert!(rel(f, rf) < 1e-12);
        }

        #[test]
        fn clamp_idempotent(a in -100f64..100.0, b in -100f64..100.0,
                            c in -100f64..100.0, d in -100f64..100.0) {
            let u = ControlInput([a, b, c, d]);
            let once = u.clamp();
            prop_assert!(once.in_bounds());
            prop_assert_eq!(once.clamp(), once);
        }
    }
}
