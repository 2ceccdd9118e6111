//! Duration literals and the experiment clock.
//!
//! All engine time is kept in integer milliseconds since the Unix epoch.
//! The simulated backend runs on a virtual clock anchored to a fixed epoch
//! so that two runs of the same experiment produce identical timestamps.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Epoch base for virtual clocks, milliseconds. Fixed so simulated runs are
/// reproducible timestamp-for-timestamp.
pub const VIRTUAL_EPOCH_MS: u64 = 1_600_000_000_000;

/// A duration parsed from an experiment file.
///
/// The accepted grammar is `<integer><unit>` with unit one of `ms`, `s`,
/// `m`, `h`, or a bare integer meaning seconds. Compound forms like
/// `1h30m` are rejected. Stored as exact milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DurationSpec {
    millis: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid duration {text:?}: {reason}")]
pub struct DurationFormatError {
    pub text: String,
    pub reason: &'static str,
}

impl DurationSpec {
    pub const ZERO: DurationSpec = DurationSpec { millis: 0 };

    pub const fn from_millis(millis: u64) -> Self {
        DurationSpec { millis }
    }

    pub const fn from_secs(secs: u64) -> Self {
        DurationSpec {
            millis: secs * 1000,
        }
    }

    pub fn as_millis(&self) -> u64 {
        self.millis
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.millis as f64 / 1000.0
    }

    pub fn is_zero(&self) -> bool {
        self.millis == 0
    }

    /// Canonical text form: whole seconds render as `Ns`, anything finer
    /// as `Nms`. Parsing the canonical form yields the same duration.
    pub fn canonical(&self) -> String {
        if self.millis.is_multiple_of(1000) {
            format!("{}s", self.millis / 1000)
        } else {
            format!("{}ms", self.millis)
        }
    }
}

/// Parse a duration literal into exact milliseconds.
pub fn parse_duration(text: &str) -> Result<DurationSpec, DurationFormatError> {
    let err = |reason| DurationFormatError {
        text: text.to_string(),
        reason,
    };
    let digits_end = text.bytes().take_while(|b| b.is_ascii_digit()).count();
    if digits_end == 0 {
        return Err(err("expected leading integer"));
    }
    let value: u64 = text[..digits_end]
        .parse()
        .map_err(|_| err("integer out of range"))?;
    let unit = &text[digits_end..];
    let factor = match unit {
        "ms" => 1,
        "s" | "" => 1000,
        "m" => 60_000,
        "h" => 3_600_000,
        _ => return Err(err("unknown unit (expected ms, s, m or h)")),
    };
    let millis = value
        .checked_mul(factor)
        .ok_or_else(|| err("duration overflows"))?;
    Ok(DurationSpec { millis })
}

impl fmt::Display for DurationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl Serialize for DurationSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for DurationSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DurationVisitor;

        impl Visitor<'_> for DurationVisitor {
            type Value = DurationSpec;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a duration like \"240s\", \"10m\" or a bare integer of seconds")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<DurationSpec, E> {
                v.checked_mul(1000)
                    .map(DurationSpec::from_millis)
                    .ok_or_else(|| E::custom("duration overflows"))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<DurationSpec, E> {
                if v < 0 {
                    return Err(E::custom("duration must be non-negative"));
                }
                self.visit_u64(v as u64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<DurationSpec, E> {
                parse_duration(v).map_err(E::custom)
            }
        }

        deserializer.deserialize_any(DurationVisitor)
    }
}

/// The experiment clock. Everything that needs "now" during a run reads it
/// from here; the simulated backend substitutes a virtual clock.
pub trait Clock: Send + Sync {
    /// Current time, epoch milliseconds.
    fn now_ms(&self) -> u64;
    /// Block (or virtually jump) until the given epoch instant.
    fn advance_to(&self, target_ms: u64);
}

/// Virtual clock: time moves only when the engine advances it.
#[derive(Debug)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn starting_at(epoch_ms: u64) -> Arc<Self> {
        Arc::new(VirtualClock {
            now: AtomicU64::new(epoch_ms),
        })
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn advance_to(&self, target_ms: u64) {
        self.now.fetch_max(target_ms, Ordering::SeqCst);
    }
}

/// Wall clock backed by the system time.
#[derive(Debug, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn advance_to(&self, target_ms: u64) {
        let now = self.now_ms();
        if target_ms > now {
            std::thread::sleep(std::time::Duration::from_millis(target_ms - now));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_literals() {
        assert_eq!(
            parse_duration("240s").unwrap(),
            DurationSpec::from_secs(240)
        );
        assert_eq!(parse_duration("10m").unwrap(), DurationSpec::from_secs(600));
        assert_eq!(parse_duration("0s").unwrap(), DurationSpec::ZERO);
        assert_eq!(parse_duration("600").unwrap(), DurationSpec::from_secs(600));
        assert_eq!(
            parse_duration("1500ms").unwrap(),
            DurationSpec::from_millis(1500)
        );
        assert_eq!(parse_duration("2h").unwrap(), DurationSpec::from_secs(7200));
    }

    #[test]
    fn rejects_everything_off_grammar() {
        for bad in [
            "",
            "s",
            "1h30m",
            "240 s",
            "-5s",
            "+5s",
            "1.5s",
            "5d",
            "ms",
            "99999999999999999999s",
        ] {
            assert!(parse_duration(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn canonical_form_round_trips() {
        for d in [0u64, 1, 999, 1000, 1500, 600_000, 3_600_000] {
            let spec = DurationSpec::from_millis(d);
            assert_eq!(parse_duration(&spec.canonical()).unwrap(), spec);
        }
    }

    #[test]
    fn virtual_clock_is_monotone() {
        let clock = VirtualClock::starting_at(VIRTUAL_EPOCH_MS);
        clock.advance_to(VIRTUAL_EPOCH_MS + 500);
        assert_eq!(clock.now_ms(), VIRTUAL_EPOCH_MS + 500);
        clock.advance_to(VIRTUAL_EPOCH_MS + 100);
        assert_eq!(clock.now_ms(), VIRTUAL_EPOCH_MS + 500);
    }
}
