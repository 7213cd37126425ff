use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};
use std::fmt;

/// A real interval `[lo, hi]` or `(lo, hi)`; openness is decided by the
/// context that produces it. Endpoints may be infinite.
///
/// Serializes as a two-element array. Infinite endpoints are written as
/// `null` (`null` in the first slot is `-inf`, in the second `+inf`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains_open(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    pub fn contains_closed(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    /// Distance from `x` to the closed interval.
    pub fn distance(&self, x: f64) -> f64 {
        if x < self.lo {
            self.lo - x
        } else if x > self.hi {
            x - self.hi
        } else {
            0.0
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(2)?;
        tup.serialize_element(&finite_or_none(self.lo))?;
        tup.serialize_element(&finite_or_none(self.hi))?;
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct IntervalVisitor;

        impl<'de> Visitor<'de> for IntervalVisitor {
            type Value = Interval;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a pair [lo, hi] with null for infinite endpoints")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Interval, A::Error> {
                let lo: Option<f64> =
                    seq.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let hi: Option<f64> =
                    seq.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(Interval { lo: lo.unwrap_or(f64::NEG_INFINITY), hi: hi.unwrap_or(f64::INFINITY) })
            }
        }

        deserializer.deserialize_tuple(2, IntervalVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_endpoints_round_trip_through_null() {
        let iv = Interval::new(f64::NEG_INFINITY, 2.5);
        let s = serde_json::to_string(&iv).unwrap();
        assert_eq!(s, "[null,2.5]");
        let back: Interval = serde_json::from_str(&s).unwrap();
        assert_eq!(back, iv);

        let right: Interval = serde_json::from_str("[3.0,null]").unwrap();
        assert_eq!(right.hi, f64::INFINITY);
    }

    #[test]
    fn distance_is_zero_inside() {
        let iv = Interval::new(1.0, 3.0);
        assert_eq!(iv.distance(2.0), 0.0);
        assert_eq!(iv.distance(0.5), 0.5);
        assert_eq!(iv.distance(4.0), 1.0);
    }
}
