//! Edit jobs and their forward-only state machine.

use rotdrag_core::engine::PhaseTiming;
use rotdrag_core::{AngleRad, RunMetadata, StepReport, StopReason};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Cancelled)
    }

    /// Position along Queued -> Running -> terminal.
    pub fn rank(self) -> u8 {
        match self {
            Self::Queued => 0,
            Self::Running => 1,
            Self::Done | Self::Failed | Self::Cancelled => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransitionError {
    #[error("job cannot go from {from:?} to {to:?}")]
    Illegal { from: JobState, to: JobState },
    #[error("job is {0:?}, not running")]
    NotRunning(JobState),
    #[error("step {got} received, expected {expected}")]
    StepGap { expected: usize, got: usize },
}

/// What a finished run produced, besides the image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobOutcome {
    pub stop_reason: StopReason,
    pub steps: usize,
    pub mean_final_distance: f64,
    /// Per handle, distance to its target after the last step.
    pub final_distances: Vec<f64>,
    pub final_angles: Vec<AngleRad>,
    pub timing: PhaseTiming,
    pub metadata: RunMetadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub session_id: String,
    pub state: JobState,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub trajectory: Vec<StepReport>,
    /// Blob digest of the result PNG once Done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<JobOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

pub(crate) fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl JobRecord {
    pub fn new(id: impl Into<String>, session_id: impl Into<String>) -> Self {
        let now = now_ms();
        Self {
            id: id.into(),
            session_id: session_id.into(),
            state: JobState::Queued,
            created_at_ms: now,
            updated_at_ms: now,
            trajectory: Vec::new(),
            result: None,
            outcome: None,
            failure: None,
        }
    }

    fn move_to(&mut self, to: JobState) -> Result<(), TransitionError> {
        let legal = match (self.state, to) {
            (JobState::Queued, JobState::Running | JobState::Cancelled | JobState::Failed) => true,
            (JobState::Running, s) => s.is_terminal(),
            _ => false,
        };
        if !legal {
            return Err(TransitionError::Illegal {
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.updated_at_ms = now_ms();
        Ok(())
    }

    pub fn start(&mut self) -> Result<(), TransitionError> {
        self.move_to(JobState::Running)
    }

    /// Appends a step report; steps must arrive as 0, 1, 2, ...
    pub fn record_step(&mut self, report: StepReport) -> Result<(), TransitionError> {
        if self.state != JobState::Running {
            return Err(TransitionError::NotRunning(self.state));
        }
        let expected = self.trajectory.len();
        if report.step != expected {
            return Err(TransitionError::StepGap {
                expected,
                got: report.step,
            });
        }
        self.trajectory.push(report);
        Ok(())
    }

    pub fn finish(&mut self, result: String, outcome: JobOutcome) -> Result<(), TransitionError> {
        if self.state != JobState::Running {
            return Err(TransitionError::Illegal {
                from: self.state,
                to: JobState::Done,
            });
        }
        self.move_to(JobState::Done)?;
        self.result = Some(result);
        self.outcome = Some(outcome);
        Ok(())
    }

    pub fn fail(&mut self, message: impl Into<String>) -> Result<(), TransitionError> {
        self.move_to(JobState::Failed)?;
        self.failure = Some(message.into());
        Ok(())
    }

    pub fn cancel(&mut self) -> Result<(), TransitionError> {
        self.move_to(JobState::Cancelled)
    }
}

/// One line of a progress stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgressRecord {
    Step(StepReport),
    End {
        state: JobState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stop_reason: Option<StopReason>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
    },
}

impl ProgressRecord {
    pub fn end_of(job: &JobRecord) -> Self {
        Self::End {
            state: job.state,
            stop_reason: job.outcome.as_ref().map(|o| o.stop_reason),
            failure: job.failure.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("progress records serialize");
        s.push('\n');
        s
    }
}
