//! Wall-clock pacing and the delay model for performance measurement.
//!
//! Block A measures a delay through block B in units of A's cycles. With
//! ideal clocks the measurement is `N * F_A_sim / F_B_sim`. In a
//! distributed run, bridge latency and inter-process communication time
//! inflate it:
//!
//! ```text
//! N_actual = N * F_A_wall / F_B_wall
//!          + 2 * T_comm * F_A_wall
//!          + (N_RX + N_TX) * (1 + F_A_wall / F_B_wall)
//! ```

use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PerfError {
    #[error("invalid parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
}

/// Inputs to the delay model. Rates are in Hz, `t_comm` in seconds, latencies
/// and `n` in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfParams {
    pub f_a_sim: f64,
    pub f_b_sim: f64,
    pub f_a_wall: f64,
    pub f_b_wall: f64,
    pub t_comm: f64,
    pub n_rx: u32,
    pub n_tx: u32,
    pub n: f64,
}

impl PerfParams {
    /// Ideal clocks: wall rates equal simulated rates and bridges are free.
    pub fn ideal(n: f64, f_a: f64, f_b: f64) -> Self {
        PerfParams {
            f_a_sim: f_a,
            f_b_sim: f_b,
            f_a_wall: f_a,
            f_b_wall: f_b,
            t_comm: 0.0,
            n_rx: 0,
            n_tx: 0,
            n,
        }
    }

    fn check_sim(&self) -> Result<(), PerfError> {
        positive("f_a_sim", self.f_a_sim)?;
        positive("f_b_sim", self.f_b_sim)?;
        nonnegative("n", self.n)
    }

    fn check_wall(&self) -> Result<(), PerfError> {
        positive("f_a_wall", self.f_a_wall)?;
        positive("f_b_wall", self.f_b_wall)?;
        nonnegative("t_comm", self.t_comm)?;
        nonnegative("n", self.n)
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), PerfError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PerfError::InvalidParam { name, value })
    }
}

fn nonnegative(name: &'static str, value: f64) -> Result<(), PerfError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PerfError::InvalidParam { name, value })
    }
}

/// `N * F_A_sim / F_B_sim`.
pub fn ideal_delay(p: &PerfParams) -> Result<f64, PerfError> {
    p.check_sim()?;
    Ok(p.n * p.f_a_sim / p.f_b_sim)
}

/// The measured delay including wall-clock skew, communication time, and
/// bridge latency.
pub fn actual_delay(p: &PerfParams) -> Result<f64, PerfError> {
    p.check_wall()?;
    let ratio = p.f_a_wall / p.f_b_wall;
    let bridges = f64::from(p.n_rx) + f64::from(p.n_tx);
    // Operation order must match ideal_delay for exact agreement.
    Ok(p.n * p.f_a_wall / p.f_b_wall + 2.0 * p.t_comm * p.f_a_wall + bridges * (1.0 + ratio))
}

/// An upper bound that the measuring block's wall rate must stay well below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateBound {
    Bounded(f64),
    Unbounded,
}

/// `n_ideal / (2 * t_comm)`; free communication leaves the rate unbounded.
pub fn wall_rate_bound(n_ideal: f64, t_comm: f64) -> Result<RateBound, PerfError> {
    nonnegative("n_ideal", n_ideal)?;
    nonnegative("t_comm", t_comm)?;
    if t_comm == 0.0 {
        return Ok(RateBound::Unbounded);
    }
    Ok(RateBound::Bounded(n_ideal / (2.0 * t_comm)))
}

/// The target for `F_A_wall / F_B_wall`: `F_A_sim / F_B_sim`.
pub fn required_wall_ratio(p: &PerfParams) -> Result<f64, PerfError> {
    positive("f_a_sim", p.f_a_sim)?;
    positive("f_b_sim", p.f_b_sim)?;
    Ok(p.f_a_sim / p.f_b_sim)
}

/// Measured delays below this many cycles are dominated by bridge latency.
pub const MIN_USEFUL_DELAY: f64 = 24.0;

/// Logs a warning when `n_ideal` is too small to measure reliably.
pub fn warn_if_short(n_ideal: f64) -> bool {
    if n_ideal < MIN_USEFUL_DELAY {
        log::warn!(
            "ideal delay of {n_ideal} cycles is below {MIN_USEFUL_DELAY}; bridge latency will dominate the measurement"
        );
        true
    } else {
        false
    }
}

/// Schedule positions further behind than this are forgiven.
pub const MAX_CATCH_UP: u32 = 100;

/// Absolute-deadline pacer: each `pace` call waits for the next deadline,
/// which advances by one period per call.
#[derive(Debug, Clone)]
pub struct RateLimiter {
    period: Duration,
    next_deadline: Instant,
}

impl RateLimiter {
    /// # Panics
    ///
    /// Panics unless `max_rate_hz` is positive and finite.
    pub fn new(max_rate_hz: f64) -> Self {
        assert!(
            max_rate_hz > 0.0 && max_rate_hz.is_finite(),
            "max rate must be positive, got {max_rate_hz}"
        );
        set_timer_slack();
        let period = Duration::from_secs_f64(1.0 / max_rate_hz);
        RateLimiter {
            period,
            next_deadline: Instant::now() + period,
        }
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn max_rate_hz(&self) -> f64 {
        1.0 / self.period.as_secs_f64()
    }

    pub fn pace(&mut self) {
        let now = Instant::now();
        if now > self.next_deadline + self.period * MAX_CATCH_UP {
            self.next_deadline = now + self.period;
            return;
        }
        sleep_until(self.next_deadline);
        self.next_deadline += self.period;
    }
}

// Coarse sleep, then spin out the remainder: kernel sleeps overshoot by tens
// of microseconds, which matters at 10 kHz and above.
const SPIN_MARGIN: Duration = Duration::from_micros(60);

fn sleep_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN_MARGIN {
            thread::sleep(left - SPIN_MARGIN);
        } else {
            thread::yield_now();
        }
    }
}

/// Requests 1 ns timer slack for the calling thread.
#[cfg(target_os = "linux")]
pub fn set_timer_slack() {
    // SAFETY: PR_SET_TIMERSLACK takes a plain integer and touches no memory.
    unsafe {
        libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0);
    }
}

#[cfg(not(target_os = "linux"))]
pub fn set_timer_slack() {}
