use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LabError;
use crate::synthgen::{Diagnosis, Subject};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Binary,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "auroc")]
    Auroc,
    #[serde(rename = "r2")]
    RSquared,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Auroc => "auroc",
            MetricKind::RSquared => "r2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    AdVsCn,
    MciVsCn,
    AdVsMci,
    #[serde(rename = "conv_2y")]
    Conv2y,
    #[serde(rename = "conv_3y")]
    Conv3y,
    #[serde(rename = "conv_5y")]
    Conv5y,
    Amyloid,
    AgeRegression,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 8] = [
        ProbeTask::AdVsCn,
        ProbeTask::MciVsCn,
        ProbeTask::AdVsMci,
        ProbeTask::Conv2y,
        ProbeTask::Conv3y,
        ProbeTask::Conv5y,
        ProbeTask::Amyloid,
        ProbeTask::AgeRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::AdVsCn => "ad_vs_cn",
            ProbeTask::MciVsCn => "mci_vs_cn",
            ProbeTask::AdVsMci => "ad_vs_mci",
            ProbeTask::Conv2y => "conv_2y",
            ProbeTask::Conv3y => "conv_3y",
            ProbeTask::Conv5y => "conv_5y",
            ProbeTask::Amyloid => "amyloid",
            ProbeTask::AgeRegression => "age_regression",
        }
    }

    pub fn kind(self) -> ProbeKind {
        match self {
            ProbeTask::AgeRegression => ProbeKind::Regression,
            _ => ProbeKind::Binary,
        }
    }

    pub fn metric(self) -> MetricKind {
        match self.kind() {
            ProbeKind::Binary => MetricKind::Auroc,
            ProbeKind::Regression => MetricKind::RSquared,
        }
    }

    /// Label for `s`, or `None` when the subject is outside the task's
    /// population. Conversion tasks cover subjects not yet diagnosed AD; age
    /// regression covers CN subjects only.
    pub fn label(self, s: &Subject) -> Option<f64> {
        let flag = |b: bool| Some(if b { 1.0 } else { 0.0 });
        let conv = |t: usize| {
            if s.diagnosis == Diagnosis::AD {
                None
            } else {
                flag(s.converted[t])
            }
        };
        match (self, s.diagnosis) {
            (ProbeTask::AdVsCn, Diagnosis::AD) => Some(1.0),
            (ProbeTask::AdVsCn, Diagnosis::CN) => Some(0.0),
            (ProbeTask::MciVsCn, Diagnosis::MCI) => Some(1.0),
            (ProbeTask::MciVsCn, Diagnosis::CN) => Some(0.0),
            (ProbeTask::AdVsMci, Diagnosis::AD) => Some(1.0),
            (ProbeTask::AdVsMci, Diagnosis::MCI) => Some(0.0),
            (ProbeTask::Conv2y, _) => conv(0),
            (ProbeTask::Conv3y, _) => conv(1),
            (ProbeTask::Conv5y, _) => conv(2),
            (ProbeTask::Amyloid, _) => flag(s.amyloid),
            (ProbeTask::AgeRegression, Diagnosis::CN) => Some(s.age),
            _ => None,
        }
    }

    /// Indices of eligible subjects with their labels.
    pub fn select(self, subjects: &[Subject]) -> (Vec<usize>, Vec<f64>) {
        subjects
            .iter()
            .enumerate()
            .filter_map(|(i, s)| self.label(s).map(|y| (i, y)))
            .unzip()
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeTask {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self, LabError> {
        ProbeTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ProbeTask::ALL.iter().map(|t| t.name()).collect();
                LabError::invalid(format!(
                    "unknown task {s:?}; valid tasks: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(d: Diagnosis, converted: [bool; 3]) -> Subject {
        Subject {
            id: "S".into(),
            age: 60.0,
            sex: 0,
            stage: 0.0,
            hidden: 0.0,
            diagnosis: d,
            amyloid: true,
            converted,
        }
    }

    #[test]
    fn populations_follow_task() {
        let cn = subject(Diagnosis::CN, [false, false, true]);
        let ad = subject(Diagnosis::AD, [true; 3]);
        assert_eq!(ProbeTask::AdVsCn.label(&cn), Some(0.0));
        assert_eq!(ProbeTask::AdVsMci.label(&cn), None);
        assert_eq!(ProbeTask::Conv5y.label(&cn), Some(1.0));
        assert_eq!(ProbeTask::Conv5y.label(&ad), None);
        assert_eq!(ProbeTask::AgeRegression.label(&cn), Some(60.0));
        assert_eq!(ProbeTask::AgeRegression.label(&ad), None);
    }

    #[test]
    fn names_round_trip() {
        for t in ProbeTask::ALL {
            assert_eq!(t.name().parse::<ProbeTask>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        let err = "brain_age".parse::<ProbeTask>().unwrap_err().to_string();
        assert!(err.contains("amyloid") && err.contains("conv_3y"), "{err}");
    }
}
