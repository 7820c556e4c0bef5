//! UTC instants at millisecond resolution.

use alloc::string::{String, ToString};
use core::fmt;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Milliseconds since the Unix epoch, UTC.
///
/// Serializes as ISO 8601 with millisecond precision and a `Z` suffix, which
/// is also the canonical form used inside record digests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }

    /// `YYYY-MM-DDTHH:MM:SS.sssZ`.
    pub fn to_iso(self) -> String {
        match DateTime::<Utc>::from_timestamp_millis(self.0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Millis, true),
            None => self.0.to_string(),
        }
    }

    /// Accepts RFC 3339 with any offset, a naive `YYYY-MM-DDTHH:MM:SS[.f]`
    /// (read as UTC), or a bare `YYYY-MM-DD` (midnight UTC).
    pub fn parse_iso(text: &str) -> Option<Self> {
        if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
            return Some(Timestamp(dt.timestamp_millis()));
        }
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S%.f") {
            return Some(Timestamp(dt.and_utc().timestamp_millis()));
        }
        if let Ok(d) = NaiveDate::parse_from_str(text, "%Y-%m-%d") {
            return Some(Timestamp(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp_millis()));
        }
        None
    }

    /// Parses with an explicit strftime-style format. Formats without a time
    /// component are read as midnight UTC; formats with an offset honour it.
    pub fn parse_with_format(text: &str, fmt: &str) -> Option<Self> {
        if let Ok(dt) = DateTime::parse_from_str(text, fmt) {
            return Some(Timestamp(dt.timestamp_millis()));
        }
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(Timestamp(dt.and_utc().timestamp_millis()));
        }
        if let Ok(d) = NaiveDate::parse_from_str(text, fmt) {
            return Some(Timestamp(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp_millis()));
        }
        None
    }

    /// Whole days since the epoch, rounding toward negative infinity.
    pub fn day_number(self) -> i64 {
        self.0.div_euclid(86_400_000)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Timestamp::parse_iso(&text).ok_or_else(|| serde::de::Error::custom("expected an ISO 8601 timestamp"))
    }
}
