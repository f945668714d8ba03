//! Dotted software versions and the half-open version ranges used by
//! vulnerability preconditions.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A dotted numeric version with 1 to 4 segments.
///
/// Comparison is segment-wise with missing segments treated as zero, so
/// `"1.2"` and `"1.2.0"` compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version {
    segments: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid version {0:?}: expected 1-4 dot-separated non-negative integers")]
pub struct InvalidVersion(pub String);

impl Version {
    pub fn new(segments: Vec<u32>) -> Result<Self, InvalidVersion> {
        if segments.is_empty() || segments.len() > 4 {
            return Err(InvalidVersion(format!("{segments:?}")));
        }
        Ok(Version { segments })
    }

    pub fn segments(&self) -> &[u32] {
        &self.segments
    }

    fn segment_or_zero(&self, i: usize) -> u32 {
        self.segments.get(i).copied().unwrap_or(0)
    }
}

impl FromStr for Version {
    type Err = InvalidVersion;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.is_empty() || parts.len() > 4 {
            return Err(InvalidVersion(s.to_string()));
        }
        let mut segments = Vec::with_capacity(parts.len());
        for part in parts {
            // Reject signs and whitespace that u32::from_str would accept via "+".
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(InvalidVersion(s.to_string()));
            }
            segments.push(part.parse().map_err(|_| InvalidVersion(s.to_string()))?);
        }
        Ok(Version { segments })
    }
}

impl TryFrom<String> for Version {
    type Error = InvalidVersion;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Version> for String {
    fn from(v: Version) -> String {
        v.to_string()
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for seg in &self.segments {
            if !first {
                write!(f, ".")?;
            }
            write!(f, "{seg}")?;
            first = false;
        }
        Ok(())
    }
}

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Version {}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        let len = self.segments.len().max(other.segments.len());
        for i in 0..len {
            match self.segment_or_zero(i).cmp(&other.segment_or_zero(i)) {
                Ordering::Equal => continue,
                non_eq => return non_eq,
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One half-open interval `[min, max)`. A missing bound is unbounded on
/// that side, matching the "fixed in version X" style of CVE advisories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VersionInterval {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<Version>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<Version>,
}

impl VersionInterval {
    pub fn contains(&self, v: &Version) -> bool {
        self.min.as_ref().is_none_or(|lo| v >= lo) && self.max.as_ref().is_none_or(|hi| v < hi)
    }
}

/// A finite union of half-open intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionRange {
    intervals: Vec<VersionInterval>,
}

impl VersionRange {
    pub fn new(intervals: Vec<VersionInterval>) -> Self {
        VersionRange { intervals }
    }

    /// Matches every version.
    pub fn any() -> Self {
        VersionRange {
            intervals: vec![VersionInterval { min: None, max: None }],
        }
    }

    /// `[0, max)`.
    pub fn below(max: Version) -> Self {
        VersionRange {
            intervals: vec![VersionInterval { min: None, max: Some(max) }],
        }
    }

    /// `[min, max)`.
    pub fn between(min: Version, max: Version) -> Self {
        VersionRange {
            intervals: vec![VersionInterval { min: Some(min), max: Some(max) }],
        }
    }

    pub fn union(mut self, other: VersionRange) -> Self {
        self.intervals.extend(other.intervals);
        self
    }

    pub fn contains(&self, v: &Version) -> bool {
        self.intervals.iter().any(|i| i.contains(v))
    }
}

impl fmt::Display for VersionRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.intervals.is_empty() {
            return write!(f, "(empty)");
        }
        for (i, interval) in self.intervals.iter().enumerate() {
            if i > 0 {
                write!(f, " or ")?;
            }
            match &interval.min {
                Some(lo) => write!(f, "[{lo}, ")?,
                None => write!(f, "[0, ")?,
            }
            match &interval.max {
                Some(hi) => write!(f, "{hi})")?,
                None => write!(f, "*)")?,
            }
        }
        Ok(())
    }
}
