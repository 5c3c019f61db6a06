//! Adaptive redundancy control.
//!
//! The controller owns the redundancy count `r` (encoded blocks beyond `k`;
//! the redundancy ratio is `r/k`) and its lower bound `r_lb`, and adjusts
//! both from one signal: the previous round's communication time. It starts
//! high (cold start), walks `r` down one block per quiet round, and on a
//! fluctuation — current time exceeding `lambda` times the previous one —
//! doubles `r`, raises the lower bound, and keeps doubling while each
//! following round still shows a strong improvement.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RedundancyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ColdStart,
    Steady,
    Recovering,
}

/// Controller state. `r` always stays within `[r_lb, r_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyState {
    pub r: u32,
    pub r_lb: u32,
    pub r_max: u32,
    /// Previous round's communication time; unset until the first update.
    pub t_last: Option<f64>,
    pub lambda: f64,
    pub phase: Phase,
    /// Consecutive rounds without a fluctuation.
    pub stable_rounds: u32,
    /// Stable rounds required before the lower bound decays by one.
    pub stability_window: u32,
}

/// Tuning knobs with the stock defaults: 100% initial redundancy, lower
/// bound a quarter of `k`, cap at twice `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    pub r_init: u32,
    pub r_lb_init: u32,
    pub lambda: f64,
    pub r_max: u32,
    pub stability_window: u32,
}

impl ControllerParams {
    pub fn defaults(k: usize) -> ControllerParams {
        let k = k as u32;
        ControllerParams {
            r_init: k,
            r_lb_init: k.div_ceil(4),
            lambda: 1.1,
            r_max: 2 * k,
            stability_window: 5,
        }
    }
}

/// Builds the initial state in the cold-start phase.
pub fn controller_init(params: &ControllerParams) -> Result<RedundancyState, RedundancyError> {
    if params.lambda <= 1.0 {
        return Err(RedundancyError::InvalidConfig(format!(
            "lambda must be > 1, got {}",
            params.lambda
        )));
    }
    if params.r_lb_init > params.r_init {
        return Err(RedundancyError::InvalidConfig(format!(
            "r_lb_init {} exceeds r_init {}",
            params.r_lb_init, params.r_init
        )));
    }
    if params.r_init > params.r_max {
        return Err(RedundancyError::InvalidConfig(format!(
            "r_init {} exceeds r_max {}",
            params.r_init, params.r_max
        )));
    }
    if params.stability_window == 0 {
        return Err(RedundancyError::InvalidConfig(
            "stability_window must be >= 1".into(),
        ));
    }
    Ok(RedundancyState {
        r: params.r_init,
        r_lb: params.r_lb_init,
        r_max: params.r_max,
        t_last: None,
        lambda: params.lambda,
        phase: Phase::ColdStart,
        stable_rounds: 0,
        stability_window: params.stability_window,
    })
}

/// Feeds one round's communication time into the controller.
pub fn controller_update(state: &RedundancyState, t_cur: f64) -> RedundancyState {
    assert!(t_cur > 0.0, "t_cur must be positive");
    let mut next = state.clone();
    let Some(t_last) = state.t_last else {
        // First observation: just record it.
        next.t_last = Some(t_cur);
        next.phase = Phase::Steady;
        return next;
    };
    match state.phase {
        Phase::ColdStart | Phase::Steady => {
            if t_cur <= state.lambda * t_last {
                // Quiet round: shed one block, and after a full stability
                // window also relax the lower bound.
                next.r = next.r.saturating_sub(1).max(next.r_lb);
                next.stable_rounds += 1;
                if next.stable_rounds >= next.stability_window {
                    next.r_lb = next.r_lb.saturating_sub(1);
                    next.stable_rounds = 0;
                }
            } else {
                // Fluctuation: double up and raise the floor; at least one
                // path got worse.
                next.r = if next.r == 0 { 1 } else { 2 * next.r }.min(next.r_max);
                next.r_lb = (next.r_lb * 2).max(next.r_lb + 1).min(next.r_max);
                next.r = next.r.max(next.r_lb);
                next.phase = Phase::Recovering;
                next.stable_rounds = 0;
            }
        }
        Phase::Recovering => {
            if t_cur < t_last / state.lambda {
                // Still a clear improvement: keep raising r.
                next.r = if next.r == 0 { 1 } else { 2 * next.r }.min(next.r_max);
            } else {
                next.phase = Phase::Steady;
            }
        }
    }
    next.t_last = Some(t_cur);
    debug_assert!(next.r_lb <= next.r && next.r <= next.r_max);
    next
}
