//! Run metrics: JSON-lines event log plus a final report emitted as JSON
//! and as a one-row CSV summary (columns: Task-IL, Class-IL, FLOPs).
//! Nothing here records wall-clock time — identical runs must produce
//! byte-identical files.

use crate::error::HiclError;
use crate::flops::FlopsReport;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One evaluation-time event, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsEvent {
    TaskTrained {
        task_id: usize,
        phase1_steps: usize,
        phase2_steps: usize,
        final_phase1_loss: f64,
    },
    Evaluation {
        after_task: usize,
        eval_task: usize,
        task_il: f64,
        class_il: f64,
    },
    Routing {
        after_task: usize,
        accuracy: f64,
    },
}

/// Final cross-task summary for one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub n_tasks: usize,
    /// Row t: Task-IL accuracy on tasks 0..=t measured after training task t.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub task_il_per_task: Vec<f64>,
    pub class_il_per_task: Vec<f64>,
    pub mean_task_il: f64,
    pub mean_class_il: f64,
    pub routing_accuracy: f64,
    /// Per task: max accuracy it ever reached minus its final accuracy.
    pub forgetting_per_task: Vec<f64>,
    pub mean_forgetting: f64,
    pub flops: FlopsReport,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HiclError::Data(e.to_string()))
    }

    /// One-row summary table.
    pub fn to_csv(&self) -> String {
        format!(
            "task_il,class_il,routing_accuracy,forgetting,flops_conditional,flops_dense\n{},{},{},{},{},{}\n",
            self.mean_task_il,
            self.mean_class_il,
            self.routing_accuracy,
            self.mean_forgetting,
            self.flops.conditional_total,
            self.flops.dense_total
        )
    }

    /// Per-task detail table.
    pub fn to_detail_csv(&self) -> String {
        let mut out = String::from("task,task_il,class_il,forgetting\n");
        for t in 0..self.n_tasks {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t, self.task_il_per_task[t], self.class_il_per_task[t], self.forgetting_per_task[t]
            ));
        }
        out
    }
}

/// Forgetting per task from an accuracy matrix: max over time − final.
pub fn forgetting_from_matrix(matrix: &[Vec<f64>]) -> Vec<f64> {
    let n = matrix.len();
    (0..n)
        .map(|t| {
            let peak = matrix
                .iter()
                .skip(t)
                .map(|row| row[t])
                .fold(f64::NEG_INFINITY, f64::max);
            let last = matrix[n - 1][t];
            peak - last
        })
        .collect()
}

pub fn write_events(path: &Path, events: &[MetricsEvent]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).map_err(|err| HiclError::Data(err.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| HiclError::io(path.display().to_string(), e))
}

pub fn read_events(path: &Path) -> Result<Vec<MetricsEvent>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HiclError::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HiclError::Data(format!("{l}: {e}"))))
        .collect()
}
