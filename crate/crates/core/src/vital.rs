//! Vital-sign readings, per-patient threshold policies and classification.
//!
//! Classification is pure: the same reading and policy always yield the same
//! status, so the alert stream can be rebuilt offline from stored readings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Readings above this are transmission garbage, not clinical values.
pub const VALUE_CEILING: i64 = 400;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VitalError {
    #[error("unknown vital kind `{0}`")]
    UnknownVitalKind(String),
    #[error("malformed reading: {0}")]
    MalformedReading(String),
    #[error("invalid bounds for {kind}: low {low} must be below high {high}")]
    InvalidBounds {
        kind: VitalKind,
        low: i64,
        high: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VitalKind {
    HeartRate,
    SystolicBP,
    DiastolicBP,
}

impl VitalKind {
    pub const ALL: [VitalKind; 3] = [
        VitalKind::HeartRate,
        VitalKind::SystolicBP,
        VitalKind::DiastolicBP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VitalKind::HeartRate => "HeartRate",
            VitalKind::SystolicBP => "SystolicBP",
            VitalKind::DiastolicBP => "DiastolicBP",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            VitalKind::HeartRate => "bpm",
            VitalKind::SystolicBP | VitalKind::DiastolicBP => "mmHg",
        }
    }

    /// Short slug used in simulated device identifiers.
    pub fn slug(self) -> &'static str {
        match self {
            VitalKind::HeartRate => "hr",
            VitalKind::SystolicBP => "sys",
            VitalKind::DiastolicBP => "dia",
        }
    }
}

impl fmt::Display for VitalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VitalKind {
    type Err = VitalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VitalKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.slug() == s)
            .ok_or_else(|| VitalError::UnknownVitalKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitalReading {
    pub patient_id: String,
    pub device_id: String,
    pub kind: VitalKind,
    pub value: i64,
    pub taken_at: DateTime<Utc>,
    pub seq: u64,
}

impl VitalReading {
    /// Rejects values outside `[0, VALUE_CEILING]`.
    pub fn validate(&self) -> Result<(), VitalError> {
        if self.value < 0 {
            return Err(VitalError::MalformedReading(format!(
                "{} value {} is negative",
                self.kind, self.value
            )));
        }
        if self.value > VALUE_CEILING {
            return Err(VitalError::MalformedReading(format!(
                "{} value {} exceeds ceiling {VALUE_CEILING}",
                self.kind, self.value
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: i64,
    pub high: i64,
    pub unit: String,
}

impl Bounds {
    pub fn new(kind: VitalKind, low: i64, high: i64) -> Result<Self, VitalError> {
        if low >= high {
            return Err(VitalError::InvalidBounds { kind, low, high });
        }
        Ok(Self {
            low,
            high,
            unit: kind.unit().to_string(),
        })
    }
}

/// Clinic defaults. Heart rate carries the bpm pair and systolic pressure the
/// 100/160 mmHg pair; the units decide which pair belongs to which parameter.
pub fn default_policy(kind: VitalKind) -> Bounds {
    let (low, high) = match kind {
        VitalKind::HeartRate => (50, 100),
        VitalKind::SystolicBP => (100, 160),
        VitalKind::DiastolicBP => (60, 95),
    };
    Bounds {
        low,
        high,
        unit: kind.unit().to_string(),
    }
}

/// String-keyed variant for callers holding an unparsed kind name.
pub fn default_policy_named(kind: &str) -> Result<Bounds, VitalError> {
    Ok(default_policy(kind.parse()?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub patient_id: String,
    pub bounds: BTreeMap<VitalKind, Bounds>,
    pub updated_by: String,
    pub updated_at: DateTime<Utc>,
    /// Monotonic per patient; 0 is the implicit default policy.
    #[serde(default)]
    pub version: u64,
}

impl ThresholdPolicy {
    /// The implicit policy every patient starts with.
    pub fn defaults(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            bounds: BTreeMap::new(),
            updated_by: "system".to_string(),
            updated_at: Utc.timestamp_millis_opt(0).unwrap(),
            version: 0,
        }
    }

    pub fn bounds_for(&self, kind: VitalKind) -> Bounds {
        self.bounds
            .get(&kind)
            .cloned()
            .unwrap_or_else(|| default_policy(kind))
    }

    /// Every kind, with defaults filled in.
    pub fn effective(&self) -> BTreeMap<VitalKind, Bounds> {
        VitalKind::ALL
            .into_iter()
            .map(|k| (k, self.bounds_for(k)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), VitalError> {
        for (kind, b) in &self.bounds {
            if b.low >= b.high {
                return Err(VitalError::InvalidBounds {
                    kind: *kind,
                    low: b.low,
                    high: b.high,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Normal,
    BelowLow,
    AboveHigh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub status: Status,
    pub bound_crossed: Option<i64>,
    pub policy_version: DateTime<Utc>,
}

impl Classification {
    pub fn is_normal(&self) -> bool {
        self.status == Status::Normal
    }
}

/// Bounds are inclusive-normal: a value equal to `low` or `high` is Normal.
pub fn classify(
    reading: &VitalReading,
    policy: &ThresholdPolicy,
) -> Result<Classification, VitalError> {
    reading.validate()?;
    let b = policy.bounds_for(reading.kind);
    let (status, bound_crossed) = if reading.value < b.low {
        (Status::BelowLow, Some(b.low))
    } else if reading.value > b.high {
        (Status::AboveHigh, Some(b.high))
    } else {
        (Status::Normal, None)
    };
    Ok(Classification {
        status,
        bound_crossed,
        policy_version: policy.updated_at,
    })
}
