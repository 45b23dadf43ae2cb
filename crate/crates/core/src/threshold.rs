//! Conformal thresholds with an explicit `+inf` sentinel.
//!
//! A threshold is either a finite score value or the sentinel produced when a
//! calibration set is too small for the requested coverage. The sentinel
//! admits every label downstream. NaN and `-inf` are never representable.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Textual encoding of the sentinel on the wire and in reports.
pub const SENTINEL_TEXT: &str = "inf";

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub const INFINITE: Threshold = Threshold(f64::INFINITY);

    /// Accepts any finite value or `+inf`.
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::validation("threshold is NaN"));
        }
        if value == f64::NEG_INFINITY {
            return Err(Error::validation("threshold is -inf"));
        }
        Ok(Threshold(value))
    }

    pub fn finite(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::validation(format!("threshold {value} is not finite")));
        }
        Ok(Threshold(value))
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The finite value, or `None` for the sentinel.
    pub fn as_finite(self) -> Option<f64> {
        if self.is_infinite() {
            None
        } else {
            Some(self.0)
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str(SENTINEL_TEXT)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_infinite() {
            serializer.serialize_str(SENTINEL_TEXT)
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ThresholdVisitor;

        impl Visitor<'_> for ThresholdVisitor {
            type Value = Threshold;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a finite number or the string \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Threshold, E> {
                Threshold::finite(v).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Threshold, E> {
                Ok(Threshold(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Threshold, E> {
                Ok(Threshold(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Threshold, E> {
                if v == SENTINEL_TEXT {
                    Ok(Threshold::INFINITE)
                } else {
                    Err(E::custom(format!("unexpected threshold string {v:?}")))
                }
            }
        }

        deserializer.deserialize_any(ThresholdVisitor)
    }
}
