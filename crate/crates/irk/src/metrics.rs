use std::collections::BTreeMap;

use irk_core::eval::EvalReport;
use irk_core::instruct::TaskKind;
use irk_core::train::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{IrkError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub task: TaskKind,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub triplets: usize,
    pub skipped_anchors: usize,
    /// Seconds since the run started.
    pub wall_time: f64,
}

/// Per-step training records followed by the final evaluation reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalReport>,
}

impl MetricsLog {
    /// Appends a step; steps must be strictly increasing.
    pub fn push(&mut self, rec: StepRecord, wall_time: f64) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(IrkError::Config(format!(
                    "metrics step {} does not follow {}",
                    rec.step, last.step
                )));
            }
        }
        self.steps.push(StepLog {
            step: rec.step,
            task: rec.task,
            lr: rec.lr,
            loss: rec.loss,
            terms: rec.terms,
            triplets: rec.triplets,
            skipped_anchors: rec.skipped_anchors,
            wall_time,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> StepRecord {
        StepRecord {
            step,
            task: TaskKind::Trad,
            lr: 1e-3,
            loss: 0.1 * step as f64,
            terms: BTreeMap::from([("tri".to_string(), 0.3)]),
            triplets: 4,
            skipped_anchors: 0,
        }
    }

    #[test]
    fn steps_must_increase() {
        let mut log = MetricsLog::default();
        log.push(rec(0), 0.0).unwrap();
        log.push(rec(3), 0.1).unwrap();
        assert!(log.push(rec(3), 0.2).is_err());
        assert!(log.push(rec(1), 0.2).is_err());
        let text = serde_json::to_string(&log).unwrap();
        assert_eq!(serde_json::from_str::<MetricsLog>(&text).unwrap(), log);
    }
}
