use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::protocol::{ClientId, Role};
use crate::relay::TrafficReport;

pub const REPORT_FILE: &str = "run_report.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Success,
    Failed { step: usize, reason: String },
}

impl RunStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, RunStatus::Success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub app: String,
    pub seconds: f64,
    pub output_dir: PathBuf,
    pub succeeded: bool,
}

/// Outcome of one client's workflow run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workflow_id: String,
    pub client_id: ClientId,
    pub role: Role,
    pub status: RunStatus,
    pub steps: Vec<StepReport>,
    pub total_seconds: f64,
    /// Relay counters, available once the coordinator closed the workflow.
    pub traffic: Option<TrafficReport>,
}

impl RunReport {
    pub fn final_output(&self) -> Option<&Path> {
        match self.status {
            RunStatus::Success => self.steps.last().map(|s| s.output_dir.as_path()),
            RunStatus::Failed { .. } => None,
        }
    }

    pub fn save(&self, run_dir: &Path) -> std::io::Result<()> {
        std::fs::write(run_dir.join(REPORT_FILE), serde_json::to_vec_pretty(self).expect("report serializes"))
    }

    pub fn load(run_dir: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(run_dir.join(REPORT_FILE))?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let status = match &self.status {
            RunStatus::Success => "success".to_string(),
            RunStatus::Failed { step, reason } => format!("failed at step {step}: {reason}"),
        };
        let _ = writeln!(out, "workflow {} on {} ({}): {status}", self.workflow_id, self.client_id, self.role);
        let _ = writeln!(out, "{:<6} {:<28} {:>10}  ok", "step", "app", "seconds");
        for s in &self.steps {
            let _ = writeln!(out, "{:<6} {:<28} {:>10.3}  {}", s.index, s.app, s.seconds, if s.succeeded { "yes" } else { "no" });
        }
        let _ = writeln!(out, "total {:.3} s", self.total_seconds);
        if let Some(traffic) = &self.traffic {
            let _ = writeln!(out, "{:<16} {:>14} {:>14} {:>10} {:>10}", "client", "bytes_out", "bytes_in", "frames_out", "frames_in");
            for (id, t) in traffic {
                let _ = writeln!(
                    out,
                    "{:<16} {:>14} {:>14} {:>10} {:>10}",
                    id.as_str(),
                    t.bytes_out,
                    t.bytes_in,
                    t.frames_out,
                    t.frames_in
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            workflow_id: "wf".into(),
            client_id: "a".into(),
            role: Role::Coordinator,
            status: RunStatus::Failed { step: 1, reason: "boom".into() },
            steps: vec![StepReport { index: 0, app: "x".into(), seconds: 0.5, output_dir: "o".into(), succeeded: true }],
            total_seconds: 1.0,
            traffic: None,
        };
        report.save(dir.path()).unwrap();
        assert_eq!(RunReport::load(dir.path()).unwrap(), report);
        assert!(report.to_table().contains("failed at step 1: boom"));
        assert!(report.final_output().is_none());
    }
}
