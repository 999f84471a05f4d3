use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::DecomposeMode;
use crate::analysis::{Category, PromptAnalysis};
use crate::layout::{LayoutEdit, SceneLayout};
use crate::policy::{Answer, Phase, PlanningMode, PolicyConfig, SessionState, ToolStep};
use crate::tools::{FaultInjector, ToolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// PNG image.
    Image,
    /// Layout rendered as a condition image (PNG).
    Condition,
    /// Packed binary mask.
    Mask,
    /// Attention-bias grid.
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// File name under the session's artifact directory.
    pub name: String,
    pub kind: ArtifactKind,
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Feedback {
    LayoutDiff { edits: Vec<LayoutEdit> },
    PlanOverride { steps: Vec<ToolStep> },
    VerificationOverride {
        pass: bool,
        #[serde(default)]
        objects: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryKind {
    Note { message: String },
    ToolCall {
        kind: ToolKind,
        step: String,
        ok: bool,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    /// Points at `state.log[seq]`.
    Transition { seq: usize, from: Phase, to: Phase },
    Feedback { feedback: Feedback },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub at: String,
    #[serde(flatten)]
    pub kind: HistoryKind,
}

/// Which mock faults a new session renders with.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultPlan {
    /// Faults from the engine configuration.
    #[default]
    Config,
    None,
    Explicit { faults: FaultInjector },
    /// Corrupts the color of the first object that names one.
    FirstColored,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub seed: Option<u64>,
    pub decompose: Option<DecomposeMode>,
    pub planning_mode: Option<PlanningMode>,
    pub category: Option<Category>,
    pub self_correction: Option<bool>,
    pub faults: FaultPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSession {
    pub id: String,
    pub prompt: String,
    pub created_at: String,
    pub seed: u64,
    /// `llm`, `rules` or `fallback`.
    pub decompose_path: String,
    /// `llm`, `planner` or `human`.
    pub layout_source: String,
    pub analysis: PromptAnalysis,
    pub layout: SceneLayout,
    /// Set when no layout could be planned; the session then waits for one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_error: Option<String>,
    pub planning_mode: PlanningMode,
    pub policy: PolicyConfig,
    pub faults: FaultInjector,
    pub state: SessionState,
    pub artifacts: Vec<ArtifactRecord>,
    /// Object index to concept image artifact names.
    pub concept_images: BTreeMap<usize, Vec<String>>,
    pub current_image: Option<String>,
    pub last_answers: Vec<Answer>,
    pub history: Vec<HistoryEntry>,
}

impl PipelineSession {
    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn artifact(&self, name: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            prompt: self.prompt.clone(),
            created_at: self.created_at.clone(),
            phase: self.state.phase,
            category: self.analysis.category,
            edit_round: self.state.edit_round,
            reason: self.state.reason.clone(),
            final_image: self.current_image.clone(),
        }
    }

    pub(crate) fn note(&mut self, message: impl Into<String>) {
        self.push(HistoryKind::Note { message: message.into() });
    }

    pub(crate) fn push(&mut self, kind: HistoryKind) {
        self.history.push(HistoryEntry { at: chrono::Utc::now().to_rfc3339(), kind });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub prompt: String,
    pub created_at: String,
    pub phase: Phase,
    pub category: Category,
    pub edit_round: u32,
    pub reason: Option<String>,
    pub final_image: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionFilter {
    pub phase: Option<Phase>,
    /// Only sessions waiting for a human.
    pub awaiting_feedback: bool,
}

impl SessionFilter {
    pub fn matches(&self, s: &SessionSummary) -> bool {
        self.phase.is_none_or(|p| p == s.phase) && (!self.awaiting_feedback || s.phase == Phase::AwaitingFeedback)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ArtifactKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub session_id: String,
    pub prompt: String,
    pub phase: Phase,
    pub final_image: Option<String>,
    pub files: Vec<ManifestFile>,
}
