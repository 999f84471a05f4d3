//! Tool routing and the verify/edit/feedback state machine.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::analysis::{Category, PromptAnalysis};
use crate::error::{Error, Result};
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    New,
    Decomposed,
    LaidOut,
    ConceptImagesReady,
    Composed,
    Verified,
    NeedsEdit,
    AwaitingFeedback,
    Done,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 10] = [
        Phase::New,
        Phase::Decomposed,
        Phase::LaidOut,
        Phase::ConceptImagesReady,
        Phase::Composed,
        Phase::Verified,
        Phase::NeedsEdit,
        Phase::AwaitingFeedback,
        Phase::Done,
        Phase::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }

    /// Phases in which a composed image exists.
    pub fn has_image(self) -> bool {
        matches!(self, Phase::Composed | Phase::Verified | Phase::NeedsEdit)
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::New => "new",
            Phase::Decomposed => "decomposed",
            Phase::LaidOut => "laid_out",
            Phase::ConceptImagesReady => "concept_images_ready",
            Phase::Composed => "composed",
            Phase::Verified => "verified",
            Phase::NeedsEdit => "needs_edit",
            Phase::AwaitingFeedback => "awaiting_feedback",
            Phase::Done => "done",
            Phase::Failed => "failed",
        }
    }

    pub fn from_name(name: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(name))
    }
}

/// The declared transition graph. Terminal phases have no exits.
pub fn edge_allowed(from: Phase, to: Phase) -> bool {
    use Phase::*;
    if from.is_terminal() {
        return false;
    }
    match (from, to) {
        (_, Failed) => true,
        (AwaitingFeedback, AwaitingFeedback) => false,
        (_, AwaitingFeedback) => true,
        (AwaitingFeedback, New) => false,
        (AwaitingFeedback, _) => true,
        (New, Decomposed) | (New, LaidOut) | (Decomposed, LaidOut) => true,
        (LaidOut | ConceptImagesReady | Composed | Verified | NeedsEdit, LaidOut) => true,
        (LaidOut | ConceptImagesReady | Composed | Verified, ConceptImagesReady) => true,
        (LaidOut | ConceptImagesReady | Composed | Verified | NeedsEdit, Composed) => true,
        (Composed, Verified) => true,
        (Composed | Verified, NeedsEdit) => true,
        (Composed | Verified | NeedsEdit, Done) => true,
        _ => false,
    }
}

pub fn transition_graph() -> Vec<(Phase, Phase)> {
    let mut edges = Vec::new();
    for from in Phase::ALL {
        for to in Phase::ALL {
            if edge_allowed(from, to) {
                edges.push((from, to));
            }
        }
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub object: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum ToolStep {
    GenerateConceptImages { objects: Vec<usize>, images_per_concept: u32 },
    Customize,
    LayoutToImage,
    TextToImage,
    Verify { questions: Vec<Question> },
    LocalEdit { objects: Vec<usize> },
    RequestHumanFeedback { reason: String },
}

impl ToolStep {
    pub fn name(&self) -> &'static str {
        match self {
            ToolStep::GenerateConceptImages { .. } => "generate_concept_images",
            ToolStep::Customize => "customize",
            ToolStep::LayoutToImage => "layout_to_image",
            ToolStep::TextToImage => "text_to_image",
            ToolStep::Verify { .. } => "verify",
            ToolStep::LocalEdit { .. } => "local_edit",
            ToolStep::RequestHumanFeedback { .. } => "request_human_feedback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolPlan {
    pub steps: Vec<ToolStep>,
}

impl ToolPlan {
    /// Step names, for golden tables and logs.
    pub fn shape(&self) -> Vec<&'static str> {
        self.steps.iter().map(ToolStep::name).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub max_edit_rounds: u32,
    pub images_per_concept: u32,
    /// Follow failed verification with local edits.
    pub self_correction: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { max_edit_rounds: 2, images_per_concept: 4, self_correction: true }
    }
}

/// One yes/no question per (object, attribute), plus a count question for
/// objects with more than one instance.
pub fn build_verification_questions(analysis: &PromptAnalysis) -> Vec<Question> {
    let mut out = Vec::new();
    for (i, obj) in analysis.objects.iter().enumerate() {
        for attr in &obj.attributes {
            out.push(Question {
                object: i,
                text: format!("Is the {} in the image {}?", obj.noun, attr.value),
            });
        }
        if obj.count > 1 {
            out.push(Question {
                object: i,
                text: format!(
                    "Are there {} {} in the image?",
                    obj.count,
                    vocab::pluralize_noun(&obj.noun)
                ),
            });
        }
    }
    out
}

/// Routes a classified analysis to one of the four plan shapes.
pub fn make_plan(analysis: &PromptAnalysis, config: &PolicyConfig) -> ToolPlan {
    let concepts = || ToolStep::GenerateConceptImages {
        objects: (0..analysis.objects.len()).collect(),
        images_per_concept: config.images_per_concept,
    };
    let verify = || ToolStep::Verify { questions: build_verification_questions(analysis) };
    let steps = match analysis.category {
        Category::AttributeOnly => vec![concepts(), ToolStep::Customize, verify()],
        Category::RelationOnly => vec![ToolStep::LayoutToImage, verify()],
        Category::Both => vec![concepts(), ToolStep::LayoutToImage, verify()],
        Category::Simple => vec![ToolStep::TextToImage],
    };
    ToolPlan { steps }
}

/// Single-tool plans used for ablations; none of them verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningMode {
    #[default]
    Agent,
    CustomizationOnly,
    LayoutOnly,
    TextOnly,
}

pub fn plan_for_mode(analysis: &PromptAnalysis, mode: PlanningMode, config: &PolicyConfig) -> ToolPlan {
    let concepts = ToolStep::GenerateConceptImages {
        objects: (0..analysis.objects.len()).collect(),
        images_per_concept: config.images_per_concept,
    };
    match mode {
        PlanningMode::Agent => make_plan(analysis, config),
        PlanningMode::CustomizationOnly => ToolPlan { steps: vec![concepts, ToolStep::Customize] },
        PlanningMode::LayoutOnly => ToolPlan { steps: vec![ToolStep::LayoutToImage] },
        PlanningMode::TextOnly => ToolPlan { steps: vec![ToolStep::TextToImage] },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub object: usize,
    pub question: String,
    pub yes: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerificationResult {
    Answers { answers: Vec<Answer> },
    Unavailable { message: String },
}

impl VerificationResult {
    pub fn failing_objects(&self) -> Vec<usize> {
        match self {
            VerificationResult::Answers { answers } => answers
                .iter()
                .filter(|a| !a.yes)
                .map(|a| a.object)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            VerificationResult::Unavailable { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Accept the image. Failures may remain when self-correction is off.
    Done,
    LocalEdit { objects: Vec<usize> },
    RequestHumanFeedback { reason: String },
}

pub const REASON_EXHAUSTED: &str = "verification exhausted";
pub const REASON_VERIFIER: &str = "verifier unavailable";

/// Decides what follows a verification.
pub fn next_action(state: &SessionState, verification: &VerificationResult) -> Result<Action> {
    if !matches!(state.phase, Phase::Composed | Phase::Verified | Phase::NeedsEdit) {
        return Err(Error::IllegalTransition {
            from: state.phase,
            reason: "verification outside a composed image".into(),
        });
    }
    if let VerificationResult::Unavailable { .. } = verification {
        return Ok(Action::RequestHumanFeedback { reason: REASON_VERIFIER.into() });
    }
    let failing = verification.failing_objects();
    if failing.is_empty() || !state.self_correction {
        Ok(Action::Done)
    } else if state.edit_round < state.max_edit_rounds {
        Ok(Action::LocalEdit { objects: failing })
    } else {
        Ok(Action::RequestHumanFeedback { reason: REASON_EXHAUSTED.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum VerificationOverride {
    Pass,
    Fail { objects: Vec<usize> },
}

/// State-machine inputs. The audit log stores these, so replaying the log
/// on a fresh state reproduces the final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Decomposed { path: String },
    LaidOut { source: String },
    /// The step under the cursor ran to completion.
    StepCompleted,
    Verification { result: VerificationResult },
    /// Cursor reached the end of the plan.
    Finished,
    FeedbackRequested { reason: String },
    /// Human layout edit; composition restarts from `plan`.
    LayoutRevised { plan: ToolPlan },
    PlanOverride { steps: Vec<ToolStep> },
    VerificationOverride { verdict: VerificationOverride },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub seq: usize,
    pub from: Phase,
    pub to: Phase,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub plan: ToolPlan,
    /// Index of the next step to run.
    pub cursor: usize,
    pub edit_round: u32,
    pub max_edit_rounds: u32,
    pub self_correction: bool,
    /// Concept images have been generated for the current layout.
    pub concepts_ready: bool,
    /// Phase to resume after feedback.
    pub resume_phase: Option<Phase>,
    pub reason: Option<String>,
    /// Failing objects of the latest verification.
    pub failures: Vec<usize>,
    pub log: Vec<Transition>,
}

impl SessionState {
    pub fn new(plan: ToolPlan, config: &PolicyConfig) -> Self {
        Self {
            phase: Phase::New,
            plan,
            cursor: 0,
            edit_round: 0,
            max_edit_rounds: config.max_edit_rounds,
            self_correction: config.self_correction,
            concepts_ready: false,
            resume_phase: None,
            reason: None,
            failures: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn current_step(&self) -> Option<&ToolStep> {
        self.plan.steps.get(self.cursor)
    }

    fn illegal(&self, reason: impl Into<String>) -> Error {
        Error::IllegalTransition { from: self.phase, reason: reason.into() }
    }

    fn invalid(reason: impl Into<String>) -> Error {
        Error::InvalidFeedback(reason.into())
    }

    /// Applies one event, enforcing the transition graph. On error the state
    /// is unchanged.
    pub fn apply(&mut self, event: Event) -> Result<Phase> {
        if self.phase.is_terminal() {
            return Err(self.illegal("session is terminal"));
        }
        let mut next = self.clone();
        let to = next.step(&event)?;
        if !edge_allowed(self.phase, to) {
            return Err(self.illegal(format!("no edge to {}", to.name())));
        }
        next.log.push(Transition { seq: self.log.len(), from: self.phase, to, event });
        next.phase = to;
        *self = next;
        Ok(to)
    }

    fn step(&mut self, event: &Event) -> Result<Phase> {
        match event {
            Event::Decomposed { .. } => match self.phase {
                Phase::New => Ok(Phase::Decomposed),
                _ => Err(self.illegal("already decomposed")),
            },
            Event::LaidOut { .. } => match self.phase {
                Phase::Decomposed => Ok(Phase::LaidOut),
                _ => Err(self.illegal("layout already planned")),
            },
            Event::StepCompleted => {
                let step = self.current_step().cloned().ok_or_else(|| self.illegal("no step to complete"))?;
                let to = match step {
                    ToolStep::GenerateConceptImages { .. } => {
                        self.concepts_ready = true;
                        Phase::ConceptImagesReady
                    }
                    ToolStep::Customize if !self.concepts_ready => {
                        return Err(self.illegal("customize before concept images"))
                    }
                    ToolStep::Customize | ToolStep::LayoutToImage | ToolStep::TextToImage => Phase::Composed,
                    ToolStep::LocalEdit { .. } if self.phase != Phase::NeedsEdit => {
                        return Err(self.illegal("local edit without failed verification"))
                    }
                    ToolStep::LocalEdit { .. } => Phase::Composed,
                    ToolStep::Verify { .. } => {
                        return Err(self.illegal("verify completes through a verification event"))
                    }
                    ToolStep::RequestHumanFeedback { reason } => {
                        self.reason = Some(reason);
                        self.resume_phase = Some(self.phase);
                        self.cursor += 1;
                        return Ok(Phase::AwaitingFeedback);
                    }
                };
                self.cursor += 1;
                Ok(to)
            }
            Event::Verification { result } => {
                if !matches!(self.current_step(), Some(ToolStep::Verify { .. })) {
                    return Err(self.illegal("cursor is not on a verify step"));
                }
                if self.phase != Phase::Composed {
                    return Err(self.illegal("nothing composed to verify"));
                }
                let questions = match self.current_step() {
                    Some(ToolStep::Verify { questions }) => questions.clone(),
                    _ => unreachable!(),
                };
                self.failures = result.failing_objects();
                match next_action(self, result)? {
                    Action::Done if self.failures.is_empty() => {
                        self.cursor += 1;
                        Ok(Phase::Verified)
                    }
                    // Self-correction off: accept with failures.
                    Action::Done => {
                        self.cursor = self.plan.steps.len();
                        Ok(Phase::Done)
                    }
                    Action::LocalEdit { objects } => {
                        self.edit_round += 1;
                        let at = self.cursor + 1;
                        self.plan.steps.splice(
                            at..at,
                            [ToolStep::LocalEdit { objects }, ToolStep::Verify { questions }],
                        );
                        self.cursor += 1;
                        Ok(Phase::NeedsEdit)
                    }
                    Action::RequestHumanFeedback { reason } => {
                        self.reason = Some(reason);
                        self.resume_phase = Some(self.phase);
                        Ok(Phase::AwaitingFeedback)
                    }
                }
            }
            Event::Finished => {
                if self.cursor < self.plan.steps.len() {
                    return Err(self.illegal("plan has remaining steps"));
                }
                if self.phase.has_image() {
                    Ok(Phase::Done)
                } else {
                    Err(self.illegal("plan ended without an image"))
                }
            }
            Event::FeedbackRequested { reason } => {
                self.reason = Some(reason.clone());
                self.resume_phase = Some(self.phase);
                Ok(Phase::AwaitingFeedback)
            }
            Event::LayoutRevised { plan } => {
                self.plan = plan.clone();
                self.cursor = 0;
                self.edit_round = 0;
                self.concepts_ready = false;
                self.failures.clear();
                self.resume_phase = None;
                self.reason = None;
                Ok(Phase::LaidOut)
            }
            Event::PlanOverride { steps } => {
                let resume = self.effective_phase();
                let mut cursor_steps = self.plan.steps[..self.cursor.min(self.plan.steps.len())].to_vec();
                check_override(resume, self.concepts_ready, steps)?;
                cursor_steps.extend(steps.iter().cloned());
                self.plan.steps = cursor_steps;
                self.resume_phase = None;
                self.reason = None;
                Ok(resume)
            }
            Event::VerificationOverride { verdict } => {
                let resume = self.effective_phase();
                if !resume.has_image() {
                    return Err(Self::invalid(format!(
                        "no image to judge in phase {}",
                        resume.name()
                    )));
                }
                self.resume_phase = None;
                self.reason = None;
                match verdict {
                    VerificationOverride::Pass => {
                        self.failures.clear();
                        self.cursor = self.plan.steps.len();
                        Ok(Phase::Done)
                    }
                    VerificationOverride::Fail { objects } => {
                        if objects.is_empty() {
                            return Err(Self::invalid("failing override names no objects"));
                        }
                        let questions = self
                            .plan
                            .steps
                            .iter()
                            .rev()
                            .find_map(|s| match s {
                                ToolStep::Verify { questions } => Some(questions.clone()),
                                _ => None,
                            })
                            .unwrap_or_default();
                        // A human-requested edit opens a fresh round budget.
                        self.edit_round = 1;
                        self.failures = objects.clone();
                        let at = self.cursor.min(self.plan.steps.len());
                        self.plan.steps.truncate(at);
                        self.plan.steps.push(ToolStep::LocalEdit { objects: objects.clone() });
                        self.plan.steps.push(ToolStep::Verify { questions });
                        self.cursor = at;
                        Ok(Phase::NeedsEdit)
                    }
                }
            }
            Event::Failed { reason } => {
                self.reason = Some(reason.clone());
                Ok(Phase::Failed)
            }
        }
    }

    /// The phase feedback applies to: the pre-feedback phase while waiting.
    fn effective_phase(&self) -> Phase {
        match self.phase {
            Phase::AwaitingFeedback => self.resume_phase.unwrap_or(Phase::LaidOut),
            p => p,
        }
    }

    /// Rebuilds a state from its log on top of a fresh initial state.
    pub fn replay(initial: &SessionState, log: &[Transition]) -> Result<SessionState> {
        let mut state = initial.clone();
        for t in log {
            let to = state.apply(t.event.clone())?;
            if to != t.to {
                return Err(Error::InvalidInput(format!(
                    "replay diverged at transition {}: {} vs {}",
                    t.seq,
                    to.name(),
                    t.to.name()
                )));
            }
        }
        Ok(state)
    }

    /// Upper bound on transitions for a run without feedback.
    pub fn transition_bound(plan_len: usize, max_edit_rounds: u32) -> usize {
        3 + plan_len + 2 * max_edit_rounds as usize
    }
}

/// Simulates an override plan from `phase`, assuming verifications pass.
fn check_override(mut phase: Phase, mut concepts: bool, steps: &[ToolStep]) -> Result<()> {
    let bad = |i: usize, msg: &str| Err(Error::InvalidFeedback(format!("override step {i}: {msg}")));
    for (i, step) in steps.iter().enumerate() {
        phase = match step {
            ToolStep::GenerateConceptImages { objects, .. } => {
                if objects.is_empty() {
                    return bad(i, "no concepts");
                }
                concepts = true;
                Phase::ConceptImagesReady
            }
            ToolStep::Customize if !concepts => return bad(i, "customize needs concept images first"),
            ToolStep::Customize | ToolStep::LayoutToImage | ToolStep::TextToImage => Phase::Composed,
            ToolStep::Verify { .. } if phase != Phase::Composed => {
                return bad(i, "verify needs a freshly composed image")
            }
            ToolStep::Verify { .. } => Phase::Verified,
            ToolStep::LocalEdit { .. } => return bad(i, "local edits are scheduled by verification"),
            ToolStep::RequestHumanFeedback { .. } => return Ok(()),
        };
    }
    if !phase.has_image() {
        return Err(Error::InvalidFeedback("override plan never composes an image".into()));
    }
    Ok(())
}
