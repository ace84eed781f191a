//! Integer-nanosecond timestamps.
//!
//! Dataset clocks (EuRoC uses nanoseconds since the epoch) exceed the exact
//! integer range of an `f64` at nanosecond resolution, so sample times are
//! kept as `i64` nanoseconds and only differences are converted to seconds.

use std::fmt;
use std::ops::Sub;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

const NANOS_PER_SEC: i64 = 1_000_000_000;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_nanos(ns: i64) -> Self {
        Timestamp(ns)
    }

    /// Rounds to the nearest nanosecond.
    pub fn from_secs_f64(s: f64) -> Self {
        Timestamp((s * NANOS_PER_SEC as f64).round() as i64)
    }

    pub const fn nanos(self) -> i64 {
        self.0
    }

    pub fn secs_f64(self) -> f64 {
        let whole = self.0.div_euclid(NANOS_PER_SEC);
        let frac = self.0.rem_euclid(NANOS_PER_SEC);
        whole as f64 + frac as f64 * 1e-9
    }

    /// Seconds elapsed since `earlier`, exact to f64 rounding of the difference.
    pub fn seconds_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 * 1e-9
    }

    pub fn offset_secs(self, dt: f64) -> Self {
        Timestamp(self.0 + (dt * NANOS_PER_SEC as f64).round() as i64)
    }
}

impl Sub for Timestamp {
    type Output = f64;

    fn sub(self, rhs: Timestamp) -> f64 {
        self.seconds_since(rhs)
    }
}

/// Formats as decimal seconds with all nine fractional digits.
impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0.div_euclid(NANOS_PER_SEC);
        let frac = self.0.rem_euclid(NANOS_PER_SEC);
        if whole < 0 && frac != 0 {
            // -0.5 s is whole = -1, frac = 5e8
            let ns = -self.0;
            write!(f, "-{}.{:09}", ns / NANOS_PER_SEC, ns % NANOS_PER_SEC)
        } else {
            write!(f, "{}.{:09}", whole, frac)
        }
    }
}

/// Parses decimal seconds ("12.5", "1403636579.758555392", "-0.25", "3e-3").
/// Plain decimal notation is parsed digit-exactly; exponent notation goes
/// through `f64`.
impl FromStr for Timestamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || Error::Data(format!("invalid timestamp '{s}'"));
        if s.contains(['e', 'E']) {
            let v: f64 = s.parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            return Ok(Timestamp::from_secs_f64(v));
        }
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (whole, frac) = body.split_once('.').unwrap_or((body, ""));
        if whole.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let whole_ns = if whole.is_empty() {
            0
        } else {
            whole
                .parse::<i64>()
                .ok()
                .and_then(|w| w.checked_mul(NANOS_PER_SEC))
                .ok_or_else(bad)?
        };
        let mut frac_ns: i64 = 0;
        for (i, c) in frac.chars().enumerate() {
            let d = c as i64 - '0' as i64;
            if i < 9 {
                frac_ns = frac_ns * 10 + d;
            } else if i == 9 {
                // round half up on the tenth digit
                if d >= 5 {
                    frac_ns += 1;
                }
                break;
            }
        }
        for _ in frac.len().min(9)..9 {
            frac_ns *= 10;
        }
        let total = whole_ns.checked_add(frac_ns).ok_or_else(bad)?;
        Ok(Timestamp(if neg { -total } else { total }))
    }
}
