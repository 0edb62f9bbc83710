//! Run traces: one record per objective evaluation (or duel).

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Left,
    Right,
}

/// Mode-specific fields appended to a trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepDetail {
    Instruction {
        instruction: String,
    },
    MultiObjective {
        objectives: Vec<f64>,
        weights: Vec<f64>,
    },
    Duel {
        left: Vec<f64>,
        right: Vec<f64>,
        winner: Winner,
    },
    Federated {
        agent: usize,
        round: usize,
    },
    Plain {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iter: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub incumbent: f64,
    /// `None` for points from the initial design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub af: Option<AcquisitionKind>,
    pub elapsed_ms: u64,
    #[serde(flatten)]
    pub detail: StepDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub seed: u64,
    pub config: serde_json::Value,
    pub steps: Vec<TraceStep>,
}

impl RunTrace {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            seed,
            config,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn incumbent(&self) -> Option<f64> {
        self.steps.last().map(|s| s.incumbent)
    }

    /// First step attaining the best observed value.
    pub fn best_step(&self) -> Option<&TraceStep> {
        self.steps
            .iter()
            .fold(None, |best: Option<&TraceStep>, s| match best {
                Some(b) if b.value >= s.value => Some(b),
                _ => Some(s),
            })
    }

    /// Equality on everything except wall-clock timings.
    pub fn same_path(&self, other: &RunTrace) -> bool {
        self.seed == other.seed
            && self.config == other.config
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                let mut b = b.clone();
                b.elapsed_ms = a.elapsed_ms;
                *a == b
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_shape() {
        let s = TraceStep {
            iter: 3,
            point: vec![0.5, 1.0],
            value: -0.25,
            incumbent: -0.1,
            af: Some(AcquisitionKind::ExpectedImprovement),
            elapsed_ms: 0,
            detail: StepDetail::Plain {},
        };
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"iter":3,"point":[0.5,1.0],"value":-0.25,"incumbent":-0.1,"af":"ei","elapsed_ms":0}"#
        );
        let back: TraceStep = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);

        let duel = TraceStep {
            detail: StepDetail::Duel {
                left: vec![0.1],
                right: vec![0.2],
                winner: Winner::Right,
            },
            af: None,
            ..s
        };
        let line = serde_json::to_string(&duel).unwrap();
        assert!(line.ends_with(r#""left":[0.1],"right":[0.2],"winner":"right"}"#), "{line}");
        assert_eq!(serde_json::from_str::<TraceStep>(&line).unwrap(), duel);
    }
}
