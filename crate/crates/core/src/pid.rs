//! Discrete steering-strength controller.
//!
//! The controller regulates the redundancy probability reported by the chunk
//! classifier toward `p_target` by adjusting the steering strength `alpha`.
//! It is the implementation-level form of a textbook PID law:
//!
//! ```text
//! e     = p_red - p_target
//! if e > epsilon_margin:
//!     I     = clip(I + ki * e, -i_max, i_max)
//!     D     = kd * (e - e_prev) + (1 - kd) * D
//!     alpha = clip(alpha + kp * e + I + D, 0, alpha_max)
//! e_prev = e
//! ```
//!
//! Compared to the idealized form (`I = ki * sum(e)`, `D = kd * (e - e_prev)`)
//! the integral is clamped for anti-windup and the derivative is an
//! exponentially smoothed difference with `kd` acting as the mixing weight.
//! The order I, then D, then alpha matters: alpha sees the freshly clamped I.
//!
//! Updates only fire while the error exceeds the margin, so alpha never
//! decreases through the proportional path. It can only shrink through a
//! negative smoothed derivative on an engaged step, which makes the
//! controller close to a ratchet in practice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Controller constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    /// Derivative smoothing weight in `[0, 1]`.
    pub kd: f64,
    pub p_target: f64,
    pub alpha_max: f64,
    pub i_max: f64,
    pub epsilon_margin: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: 0.01,
            ki: 0.0005,
            kd: 0.005,
            p_target: 0.3,
            alpha_max: 0.40,
            i_max: 0.20,
            epsilon_margin: 0.20,
        }
    }
}

impl PidGains {
    pub fn new(
        kp: f64,
        ki: f64,
        kd: f64,
        p_target: f64,
        alpha_max: f64,
        i_max: f64,
        epsilon_margin: f64,
    ) -> Result<Self> {
        let gains = PidGains {
            kp,
            ki,
            kd,
            p_target,
            alpha_max,
            i_max,
            epsilon_margin,
        };
        gains.validate()?;
        Ok(gains)
    }

    /// Same gains with the steering ceiling forced to zero.
    pub fn disabled(&self) -> Self {
        PidGains {
            alpha_max: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("kp", self.kp),
            ("ki", self.ki),
            ("kd", self.kd),
            ("p_target", self.p_target),
            ("alpha_max", self.alpha_max),
            ("i_max", self.i_max),
            ("epsilon_margin", self.epsilon_margin),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid("pid gains", format!("{name} is not finite")));
        }
        if !(0.0..=1.0).contains(&self.p_target) {
            return Err(Error::invalid("pid gains", "p_target must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.kd) {
            return Err(Error::invalid("pid gains", "kd must lie in [0, 1]"));
        }
        for (name, v) in [
            ("alpha_max", self.alpha_max),
            ("i_max", self.i_max),
            ("epsilon_margin", self.epsilon_margin),
        ] {
            if v < 0.0 {
                return Err(Error::invalid("pid gains", format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Mutable loop state carried between updates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub alpha: f64,
    pub integral: f64,
    pub derivative: f64,
    pub e_prev: f64,
}

impl PidState {
    pub fn init() -> Self {
        PidState::default()
    }

    pub fn reset(&mut self) {
        *self = PidState::init();
    }
}

/// Every term computed by one [`update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidUpdateTrace {
    pub error: f64,
    pub p_term: f64,
    pub i_term: f64,
    pub d_term: f64,
    /// The error exceeded `epsilon_margin`, so I, D and alpha were updated.
    pub engaged: bool,
    pub alpha_after: f64,
}

pub fn init_state() -> PidState {
    PidState::init()
}

pub fn reset(_state: PidState) -> PidState {
    PidState::init()
}

fn check_probability(name: &'static str, p: f64) -> Result<()> {
    if !p.is_finite() {
        return Err(Error::invalid(name, format!("{p} is not finite")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(name, format!("{p} is outside [0, 1]")));
    }
    Ok(())
}

pub fn compute_error(p_red: f64, p_target: f64) -> Result<f64> {
    check_probability("p_red", p_red)?;
    check_probability("p_target", p_target)?;
    Ok(p_red - p_target)
}

/// One controller step driven by the classifier output `p_red`.
///
/// `e_prev` is refreshed on every call, including steps where the error
/// stays inside the margin and nothing else moves.
pub fn update(state: &PidState, gains: &PidGains, p_red: f64) -> Result<(PidState, PidUpdateTrace)> {
    gains.validate()?;
    let error = compute_error(p_red, gains.p_target)?;
    let p_term = gains.kp * error;

    let mut next = *state;
    let engaged = error > gains.epsilon_margin;
    if engaged {
        next.integral = (state.integral + gains.ki * error).clamp(-gains.i_max, gains.i_max);
        next.derivative = gains.kd * (error - state.e_prev) + (1.0 - gains.kd) * state.derivative;
        next.alpha = (state.alpha + p_term + next.integral + next.derivative).clamp(0.0, gains.alpha_max);
    }
    next.e_prev = error;

    let trace = PidUpdateTrace {
        error,
        p_term,
        i_term: next.integral,
        d_term: next.derivative,
        engaged,
        alpha_after: next.alpha,
    };
    Ok((next, trace))
}

/// Owning wrapper that threads [`PidState`] through successive updates.
#[derive(Debug, Clone)]
pub struct PidController {
    gains: PidGains,
    state: PidState,
}

impl PidController {
    pub fn new(gains: PidGains) -> Result<Self> {
        gains.validate()?;
        Ok(PidController {
            gains,
            state: PidState::init(),
        })
    }

    pub fn gains(&self) -> &PidGains {
        &self.gains
    }

    pub fn state(&self) -> &PidState {
        &self.state
    }

    pub fn alpha(&self) -> f64 {
        self.state.alpha
    }

    pub fn update(&mut self, p_red: f64) -> Result<PidUpdateTrace> {
        let (next, trace) = update(&self.state, &self.gains, p_red)?;
        self.state = next;
        Ok(trace)
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }
}
