//! Session orchestration: decomposition, layout, tool execution through the
//! policy state machine, persistence and human feedback.

mod config;
mod session;
mod store;
pub mod suite;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

pub use config::{DecomposeMode, EndpointOverride, EngineConfig, LexiconPaths, MockConfig, ToolsConfig};
pub use session::{
    ArtifactKind, ArtifactRecord, FaultPlan, Feedback, HistoryEntry, HistoryKind, Manifest, ManifestFile,
    PipelineSession, SessionFilter, SessionOptions, SessionSummary,
};
pub use store::{sha256_hex, write_atomic, SessionStore, ARTIFACT_DIR, SESSION_FILE};

use crate::analysis::{self, PromptAnalysis};
use crate::vocab::AttributeKind;
use crate::error::{Error, Result};
use crate::guidance::{attention_bias_for, box_constraint_regions, edit_guidance_from_mask};
use crate::layout::{self, apply_diff, LayoutDiff, PaletteMode, SceneLayout};
use crate::policy::{
    self, Answer, Event, Phase, SessionState, ToolStep, VerificationOverride, VerificationResult,
};
use crate::tools::{
    self, encode_bias, encode_mask, decode_mask, ConceptImages, FaultInjector, ImageRef, MockTools, ObjectBias,
    ObjectRegion, Payload, ToolClient, ToolEndpoint, ToolKind, ToolRequest, VerifyQuestion,
};
use crate::vocab::Lexicon;

pub struct Engine {
    config: EngineConfig,
    endpoints: Vec<ToolEndpoint>,
    lexicon: Lexicon,
    store: SessionStore,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn new_session_id() -> String {
    format!("{}-{:08x}", chrono::Utc::now().format("%Y%m%dT%H%M%S%3f"), rand::random::<u32>())
}

/// Mixes the session seed with a per-call salt.
fn call_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Errors that end a step by asking a human instead of failing the call.
fn is_tool_error(e: &Error) -> bool {
    matches!(
        e,
        Error::ToolUnavailable { .. }
            | Error::ToolFailed { .. }
            | Error::ZeroAreaAtResolution { .. }
            | Error::EmptyMask
            | Error::MaskSizeMismatch { .. }
            | Error::Codec(_)
    )
}

fn first_image(payload: Payload) -> Result<ImageRef> {
    match payload {
        Payload::Images { mut images } if !images.is_empty() => Ok(images.swap_remove(0)),
        _ => Err(Error::Codec("tool returned no image".into())),
    }
}

/// Rebuilds objects from the entries of an edited layout: counts follow the
/// boxes, unreferenced objects are dropped, new objects come from captions.
fn reconcile_analysis(analysis: &PromptAnalysis, layout: &mut SceneLayout, lexicon: &Lexicon) -> PromptAnalysis {
    let mut refs: Vec<usize> = layout.entries.iter().map(|e| e.object_ref).collect();
    refs.sort_unstable();
    refs.dedup();
    let remap: BTreeMap<usize, usize> = refs.iter().enumerate().map(|(new, old)| (*old, new)).collect();
    let objects: Vec<_> = refs
        .iter()
        .map(|old| {
            let count = layout.entries.iter().filter(|e| e.object_ref == *old).count() as u32;
            let mut obj = match analysis.objects.get(*old) {
                Some(o) => o.clone(),
                None => {
                    let caption = &layout.entries.iter().find(|e| e.object_ref == *old).expect("ref from entries").caption;
                    analysis::object_from_caption(caption)
                }
            };
            obj.count = count;
            obj
        })
        .collect();
    let relations: Vec<_> = analysis
        .relations
        .iter()
        .filter_map(|r| {
            Some(analysis::Relation { subject: *remap.get(&r.subject)?, object: *remap.get(&r.object)?, ..r.clone() })
        })
        .collect();
    for e in &mut layout.entries {
        e.object_ref = remap[&e.object_ref];
    }
    layout.renumber_instances();
    let category = analysis::classify(&objects, &relations, lexicon);
    PromptAnalysis { raw_prompt: analysis.raw_prompt.clone(), objects, relations, category }
}

struct Decomposition {
    analysis: PromptAnalysis,
    layout: Option<SceneLayout>,
    path: &'static str,
    notes: Vec<String>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.check()?;
        let endpoints = config.endpoints()?;
        let lexicon = config.load_lexicon()?;
        let store = SessionStore::open(&config.storage_root)?;
        Ok(Self { config, endpoints, lexicon, store, locks: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// Tool client for a session; the mock suite carries its faults.
    pub fn client_for(&self, faults: &FaultInjector) -> ToolClient {
        let mock = MockTools { faults: faults.clone(), lexicon: self.lexicon.clone(), layout_config: self.config.layout };
        ToolClient::new(self.endpoints.clone(), mock)
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().expect("lock map poisoned");
        map.entry(id.to_string()).or_default().clone()
    }

    fn decompose(&self, prompt: &str, mode: DecomposeMode, client: &ToolClient) -> Result<Decomposition> {
        let rules = || analysis::decompose_rule_based(prompt, &self.lexicon);
        let llm = || -> Result<Decomposition> {
            let request = ToolRequest::Complete { prompt: analysis::build_agent_prompt(prompt, &analysis::default_examples()) };
            let (payload, _) = client.call(&request)?;
            let Payload::Completion { text } = payload else {
                return Err(Error::MalformedResponse("completion payload expected".into()));
            };
            let parsed = analysis::parse_agent_response(&text, self.config.canvas)?;
            let mut a = parsed.analysis;
            a.raw_prompt = prompt.to_string();
            let mut notes = parsed.warnings;
            // The answer format carries no relations; borrow them from the
            // grammar when both readings agree on the objects.
            if let Ok(r) = rules() {
                let phrases = |x: &PromptAnalysis| x.objects.iter().map(|o| o.phrase.to_lowercase()).collect::<Vec<_>>();
                if phrases(&r) == phrases(&a) && !r.relations.is_empty() {
                    a.relations = r.relations;
                    notes.push("relations taken from the rule grammar".into());
                }
            }
            let layout = (!parsed.layout.entries.is_empty()).then_some(parsed.layout);
            Ok(Decomposition { analysis: a, layout, path: "llm", notes })
        };
        let from_rules = |notes: Vec<String>| match rules() {
            Ok(a) => Decomposition { analysis: a, layout: None, path: "rules", notes },
            Err(e) => {
                let mut notes = notes;
                notes.push(format!("rule grammar: {e}"));
                Decomposition { analysis: analysis::fallback_analysis(prompt), layout: None, path: "fallback", notes }
            }
        };
        match mode {
            DecomposeMode::Llm => llm(),
            DecomposeMode::Rules => Ok(from_rules(Vec::new())),
            DecomposeMode::Auto => match llm() {
                Ok(d) => Ok(d),
                Err(e) => Ok(from_rules(vec![format!("llm path failed: {e}")])),
            },
        }
    }

    /// Decomposes the prompt, plans a layout and persists a new session in
    /// phase `New`.
    pub fn create_session(&self, prompt: &str, options: &SessionOptions) -> Result<PipelineSession> {
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        let seed = options.seed.unwrap_or(self.config.seed);
        let mode = options.decompose.unwrap_or(self.config.decompose);
        let config_faults = self.config.faults()?;
        let mut d = self.decompose(prompt, mode, &self.client_for(&config_faults))?;
        if let Some(c) = options.category {
            d.analysis.category = c;
        }
        let faults = match &options.faults {
            FaultPlan::Config => config_faults,
            FaultPlan::None => FaultInjector::none(),
            FaultPlan::Explicit { faults } => faults.clone(),
            FaultPlan::FirstColored => d
                .analysis
                .objects
                .iter()
                .enumerate()
                .find_map(|(i, o)| o.attribute(AttributeKind::Color).map(|c| (i, c)))
                .map(|(i, c)| FaultInjector::color(i, if c == "red" { "blue" } else { "red" }))
                .unwrap_or_default(),
        };
        let (layout, layout_source, layout_error) = match d.layout.take() {
            Some(l) => (l, "llm", None),
            None => match layout::plan_layout(&d.analysis, self.config.canvas, &self.config.layout, seed) {
                Ok(l) => (l, "planner", None),
                Err(Error::LayoutInfeasible(msg)) => (SceneLayout::new(self.config.canvas), "none", Some(msg)),
                Err(e) => return Err(e),
            },
        };
        let mut policy_cfg = self.config.policy;
        if let Some(sc) = options.self_correction {
            policy_cfg.self_correction = sc;
        }
        let planning_mode = options.planning_mode.unwrap_or(self.config.planning_mode);
        let plan = policy::plan_for_mode(&d.analysis, planning_mode, &policy_cfg);
        let mut session = PipelineSession {
            id: new_session_id(),
            prompt: prompt.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            seed,
            decompose_path: d.path.to_string(),
            layout_source: layout_source.to_string(),
            analysis: d.analysis,
            layout,
            layout_error,
            planning_mode,
            policy: policy_cfg,
            faults,
            state: SessionState::new(plan, &policy_cfg),
            artifacts: Vec::new(),
            concept_images: BTreeMap::new(),
            current_image: None,
            last_answers: Vec::new(),
            history: Vec::new(),
        };
        session.note(format!("decomposed via {}", d.path));
        for n in d.notes {
            session.note(n);
        }
        self.store.save(&session)?;
        tracing::info!(id = %session.id, category = %session.analysis.category, "session created");
        Ok(session)
    }

    pub fn get_session(&self, id: &str) -> Result<PipelineSession> {
        self.store.load(id)
    }

    pub fn list_sessions(&self, filter: &SessionFilter) -> Result<Vec<SessionSummary>> {
        let mut out = Vec::new();
        for id in self.store.list()? {
            let s = self.store.load(&id)?.summary();
            if filter.matches(&s) {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn artifact_bytes(&self, id: &str, name: &str) -> Result<Vec<u8>> {
        let s = self.store.load(id)?;
        if s.artifact(name).is_none() {
            return Err(Error::ArtifactNotFound { session: id.into(), name: name.into() });
        }
        self.store.read_artifact(id, name)
    }

    /// Runs steps until the session is terminal or waits for feedback.
    pub fn advance(&self, id: &str) -> Result<PipelineSession> {
        let mut s = self.store.load(id)?;
        if s.phase().is_terminal() || s.phase() == Phase::AwaitingFeedback {
            return Err(Error::IllegalTransition { from: s.phase(), reason: "nothing to advance".into() });
        }
        let bound = 4 * SessionState::transition_bound(s.state.plan.steps.len(), s.policy.max_edit_rounds) + 8;
        for _ in 0..bound {
            s = self.advance_one(id)?;
            if s.phase().is_terminal() || s.phase() == Phase::AwaitingFeedback {
                return Ok(s);
            }
        }
        Err(Error::IllegalTransition { from: s.phase(), reason: "step bound exceeded".into() })
    }

    /// Runs exactly one transition under the session lock and persists it.
    pub fn advance_one(&self, id: &str) -> Result<PipelineSession> {
        let lock = self.lock(id);
        let _guard = lock.lock().expect("session lock poisoned");
        let mut s = self.store.load(id)?;
        let event = self.next_event(&mut s)?;
        self.apply(&mut s, event)?;
        self.store.save(&s)?;
        Ok(s)
    }

    fn apply(&self, s: &mut PipelineSession, event: Event) -> Result<Phase> {
        let from = s.state.phase;
        let to = s.state.apply(event)?;
        let seq = s.state.log.len() - 1;
        s.push(HistoryKind::Transition { seq, from, to });
        tracing::debug!(id = %s.id, from = from.name(), to = to.name(), "transition");
        Ok(to)
    }

    fn next_event(&self, s: &mut PipelineSession) -> Result<Event> {
        match s.phase() {
            Phase::New => return Ok(Event::Decomposed { path: s.decompose_path.clone() }),
            Phase::Decomposed => {
                return Ok(match &s.layout_error {
                    Some(msg) => Event::FeedbackRequested { reason: format!("layout infeasible: {msg}") },
                    None => Event::LaidOut { source: s.layout_source.clone() },
                })
            }
            Phase::AwaitingFeedback => {
                return Err(Error::IllegalTransition { from: Phase::AwaitingFeedback, reason: "waiting for feedback".into() })
            }
            p if p.is_terminal() => {
                return Err(Error::IllegalTransition { from: p, reason: "session is terminal".into() })
            }
            _ => {}
        }
        let Some(step) = s.state.current_step().cloned() else {
            return Ok(if s.phase().has_image() {
                Event::Finished
            } else {
                Event::Failed { reason: "plan ended without an image".into() }
            });
        };
        let client = self.client_for(&s.faults);
        let result = match &step {
            ToolStep::Verify { questions } => return self.run_verify(s, questions, &client),
            ToolStep::RequestHumanFeedback { .. } => return Ok(Event::StepCompleted),
            ToolStep::GenerateConceptImages { objects, images_per_concept } => {
                self.run_concepts(s, objects, *images_per_concept, &client)
            }
            ToolStep::Customize => self.run_customize(s, &client),
            ToolStep::LayoutToImage => self.run_layout_to_image(s, &client),
            ToolStep::TextToImage => self.run_text_to_image(s, &client),
            ToolStep::LocalEdit { objects } => self.run_local_edit(s, objects, &client),
        };
        match result {
            Ok(()) => Ok(Event::StepCompleted),
            Err(e) if is_tool_error(&e) => {
                Ok(Event::FeedbackRequested { reason: format!("{} failed: {e}", step.name()) })
            }
            Err(e) => Err(e),
        }
    }

    fn call(&self, s: &mut PipelineSession, client: &ToolClient, step: &str, request: &ToolRequest) -> Result<Payload> {
        let kind = request.kind();
        match client.call(request) {
            Ok((payload, warnings)) => {
                s.push(HistoryKind::ToolCall { kind, step: step.into(), ok: true, warnings, error: None });
                Ok(payload)
            }
            Err(e) => {
                s.push(HistoryKind::ToolCall { kind, step: step.into(), ok: false, warnings: Vec::new(), error: Some(e.to_string()) });
                Err(e)
            }
        }
    }

    /// Stores an artifact under a name derived from its position, so a rerun
    /// of an interrupted step overwrites rather than orphans files.
    fn store_artifact(
        &self,
        s: &mut PipelineSession,
        stem: &str,
        ext: &str,
        kind: ArtifactKind,
        object: Option<usize>,
        bytes: &[u8],
    ) -> Result<String> {
        let name = format!("{:03}-{stem}.{ext}", s.artifacts.len());
        let sha256 = self.store.write_artifact(&s.id, &name, bytes)?;
        let step = s.state.current_step().map(|st| st.name()).unwrap_or("none").to_string();
        s.artifacts.push(ArtifactRecord { name: name.clone(), kind, step, object, sha256 });
        Ok(name)
    }

    fn image_ref(&self, s: &PipelineSession, name: &str) -> Result<ImageRef> {
        if self.config.share_filesystem {
            let path = self.store.artifact_path(&s.id, name)?;
            Ok(ImageRef::Path { path: std::fs::canonicalize(&path).unwrap_or(path) })
        } else {
            Ok(ImageRef::from_png_bytes(&self.store.read_artifact(&s.id, name)?))
        }
    }

    fn current_image_ref(&self, s: &PipelineSession) -> Result<ImageRef> {
        let name = s.current_image.as_deref().ok_or_else(|| Error::IllegalTransition {
            from: s.phase(),
            reason: "no current image".into(),
        })?;
        self.image_ref(s, name)
    }

    fn salt(s: &PipelineSession, k: u64) -> u64 {
        (s.state.cursor as u64) << 20 | (u64::from(s.state.edit_round) << 16) | k
    }

    fn run_concepts(&self, s: &mut PipelineSession, objects: &[usize], per: u32, client: &ToolClient) -> Result<()> {
        let canvas = s.layout.canvas;
        let mut jobs = Vec::new();
        for &o in objects {
            let obj = s.analysis.objects.get(o).ok_or_else(|| Error::InvalidInput(format!("no object {o}")))?;
            // One centered box so a layout-aware generator draws the concept alone.
            let bbox = layout::BBox::new(canvas.width / 5, canvas.height / 5, canvas.width * 3 / 5, canvas.height * 3 / 5);
            let caption = analysis::object_from_caption(&obj.phrase);
            let mut meta = SceneLayout::new(canvas);
            meta.entries.push(layout::LayoutEntry { object_ref: o, instance: 0, caption: caption.phrase.clone(), bbox });
            for k in 0..per {
                jobs.push((o, ToolRequest::TextToImage {
                    prompt: obj.phrase.clone(),
                    seed: call_seed(s.seed, Self::salt(s, o as u64 * 64 + u64::from(k))),
                    layout_meta: Some(meta.clone()),
                }));
            }
        }
        let width = self.config.fanout.max(1);
        let mut results: Vec<Result<(Payload, Vec<String>)>> = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(width) {
            let out: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk.iter().map(|(_, req)| scope.spawn(move || client.call(req))).collect();
                handles.into_iter().map(|h| h.join().expect("tool thread panicked")).collect()
            });
            results.extend(out);
        }
        let mut names: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for ((o, _), result) in jobs.iter().zip(results) {
            let (payload, warnings) = match result {
                Ok(r) => r,
                Err(e) => {
                    s.push(HistoryKind::ToolCall { kind: ToolKind::TextToImage, step: "generate_concept_images".into(), ok: false, warnings: Vec::new(), error: Some(e.to_string()) });
                    return Err(e);
                }
            };
            s.push(HistoryKind::ToolCall { kind: ToolKind::TextToImage, step: "generate_concept_images".into(), ok: true, warnings, error: None });
            let bytes = first_image(payload)?.png_bytes()?;
            let name = self.store_artifact(s, &format!("concept-o{o}"), "png", ArtifactKind::Image, Some(*o), &bytes)?;
            names.entry(*o).or_default().push(name);
        }
        s.concept_images.extend(names);
        Ok(())
    }

    fn set_image(&self, s: &mut PipelineSession, stem: &str, payload: Payload) -> Result<()> {
        let bytes = first_image(payload)?.png_bytes()?;
        let name = self.store_artifact(s, stem, "png", ArtifactKind::Image, None, &bytes)?;
        s.current_image = Some(name);
        Ok(())
    }

    fn run_customize(&self, s: &mut PipelineSession, client: &ToolClient) -> Result<()> {
        let canvas = s.layout.canvas;
        let condition = layout::rasterize(&s.layout, PaletteMode::Noun);
        let condition_bytes = tools::encode_png(&condition)?;
        self.store_artifact(s, "condition", "png", ArtifactKind::Condition, None, &condition_bytes)?;
        let mut biases = Vec::new();
        for e in s.layout.entries.clone() {
            let spans = s.analysis.object_spans(e.object_ref);
            match attention_bias_for(&e.bbox, canvas, &self.config.guidance, &spans) {
                Ok(bias) => {
                    let bytes = bias.to_bytes();
                    self.store_artifact(s, &format!("bias-o{}-i{}", e.object_ref, e.instance), "gdb", ArtifactKind::Bias, Some(e.object_ref), &bytes)?;
                    biases.push(ObjectBias { object: e.object_ref, bias: encode_bias(&bias) });
                }
                Err(Error::ZeroAreaAtResolution { .. }) => {
                    s.note(format!("box for {:?} covers no latent cell; no attention bias", e.caption))
                }
                Err(err) => return Err(err),
            }
        }
        let mut concepts = Vec::new();
        for (o, names) in s.concept_images.clone() {
            let phrase = s.analysis.objects.get(o).map(|x| x.phrase.clone()).unwrap_or_default();
            let images = names.iter().map(|n| self.image_ref(s, n)).collect::<Result<Vec<_>>>()?;
            concepts.push(ConceptImages { object: o, phrase, images });
        }
        let request = ToolRequest::Customize {
            prompt: s.prompt.clone(),
            concepts,
            layout: s.layout.clone(),
            biases,
            condition: ImageRef::from_png_bytes(&condition_bytes),
            seed: call_seed(s.seed, Self::salt(s, 0)),
        };
        let payload = self.call(s, client, "customize", &request)?;
        self.set_image(s, "composed", payload)
    }

    fn run_layout_to_image(&self, s: &mut PipelineSession, client: &ToolClient) -> Result<()> {
        let (gw, gh) = self.config.guidance.grid_for(s.layout.canvas)?;
        let regions = box_constraint_regions(&s.layout, gw, gh)
            .objects
            .iter()
            .map(|r| ObjectRegion { object: r.object, inner: encode_mask(&r.inner), outer: encode_mask(&r.outer) })
            .collect();
        let request = ToolRequest::LayoutToImage {
            prompt: s.prompt.clone(),
            layout: s.layout.clone(),
            regions,
            seed: call_seed(s.seed, Self::salt(s, 0)),
        };
        let payload = self.call(s, client, "layout_to_image", &request)?;
        self.set_image(s, "composed", payload)
    }

    fn run_text_to_image(&self, s: &mut PipelineSession, client: &ToolClient) -> Result<()> {
        let request = ToolRequest::TextToImage {
            prompt: s.prompt.clone(),
            seed: call_seed(s.seed, Self::salt(s, 0)),
            layout_meta: Some(s.layout.clone()),
        };
        let payload = self.call(s, client, "text_to_image", &request)?;
        self.set_image(s, "composed", payload)
    }

    fn run_local_edit(&self, s: &mut PipelineSession, objects: &[usize], client: &ToolClient) -> Result<()> {
        let canvas = s.layout.canvas;
        let mut image = self.current_image_ref(s)?;
        for &o in objects {
            let spans = s.analysis.object_spans(o);
            let references = s
                .concept_images
                .get(&o)
                .cloned()
                .unwrap_or_default()
                .iter()
                .map(|n| self.image_ref(s, n))
                .collect::<Result<Vec<_>>>()?;
            let entries: Vec<_> = s.layout.entries_for(o).map(|(_, e)| e.clone()).collect();
            for e in entries {
                let seg = ToolRequest::Segment {
                    image: image.clone(),
                    caption: e.caption.clone(),
                    box_hint: Some(e.bbox),
                    layout_meta: Some(s.layout.clone()),
                };
                let Payload::Mask { mask } = self.call(s, client, "local_edit", &seg)? else {
                    return Err(Error::Codec("segment returned no mask".into()));
                };
                let decoded = decode_mask(&mask)?;
                self.store_artifact(s, &format!("mask-o{o}-i{}", e.instance), "gdm", ArtifactKind::Mask, Some(o), &decoded.to_bytes())?;
                let bias = edit_guidance_from_mask(&decoded, canvas, &self.config.guidance, &spans)?;
                self.store_artifact(s, &format!("edit-bias-o{o}-i{}", e.instance), "gdb", ArtifactKind::Bias, Some(o), &bias.to_bytes())?;
                let edit = ToolRequest::LocalEdit {
                    image: image.clone(),
                    mask,
                    references: references.clone(),
                    target: e.caption.clone(),
                    bias: encode_bias(&bias),
                    seed: call_seed(s.seed, Self::salt(s, o as u64 * 64 + u64::from(e.instance))),
                };
                let payload = self.call(s, client, "local_edit", &edit)?;
                image = first_image(payload)?;
            }
        }
        let bytes = image.png_bytes()?;
        let name = self.store_artifact(s, "edited", "png", ArtifactKind::Image, None, &bytes)?;
        s.current_image = Some(name);
        Ok(())
    }

    fn run_verify(&self, s: &mut PipelineSession, questions: &[policy::Question], client: &ToolClient) -> Result<Event> {
        let request = ToolRequest::Verify {
            image: self.current_image_ref(s)?,
            questions: questions.iter().map(|q| VerifyQuestion { text: q.text.clone(), object: Some(q.object) }).collect(),
            layout_meta: Some(s.layout.clone()),
        };
        let result = match self.call(s, client, "verify", &request) {
            Ok(Payload::Answers { answers }) if answers.len() == questions.len() => {
                let answers: Vec<Answer> = questions
                    .iter()
                    .zip(answers)
                    .map(|(q, a)| Answer { object: q.object, question: q.text.clone(), yes: a.yes, confidence: a.confidence })
                    .collect();
                s.last_answers = answers.clone();
                VerificationResult::Answers { answers }
            }
            Ok(_) => VerificationResult::Unavailable { message: "answer count does not match questions".into() },
            Err(e) if is_tool_error(&e) => VerificationResult::Unavailable { message: e.to_string() },
            Err(e) => return Err(e),
        };
        Ok(Event::Verification { result })
    }

    /// Applies human feedback. Layout diffs restart composition on the edited
    /// layout; overrides act on the current plan.
    pub fn submit_feedback(&self, id: &str, feedback: Feedback) -> Result<PipelineSession> {
        let lock = self.lock(id);
        let _guard = lock.lock().expect("session lock poisoned");
        let mut s = self.store.load(id)?;
        if s.phase().is_terminal() {
            return Err(Error::InvalidFeedback(format!("session is {}", s.phase().name())));
        }
        let event = match &feedback {
            Feedback::LayoutDiff { edits } => {
                let diff = LayoutDiff::new(edits.clone());
                let (mut layout, report) = apply_diff(&s.layout, &diff, &self.config.layout).map_err(|e| match e {
                    Error::InvalidDiffIndex { .. } => Error::InvalidFeedback(e.to_string()),
                    e => e,
                })?;
                if layout.entries.is_empty() {
                    return Err(Error::InvalidFeedback("layout would have no boxes".into()));
                }
                let analysis = reconcile_analysis(&s.analysis, &mut layout, &self.lexicon);
                if !report.is_clean() {
                    s.note(format!("edited layout has {} violation(s)", report.violations.len()));
                }
                let plan = policy::plan_for_mode(&analysis, s.planning_mode, &s.policy);
                s.analysis = analysis;
                s.layout = layout;
                s.layout_error = None;
                s.layout_source = "human".into();
                s.concept_images.clear();
                s.current_image = None;
                Event::LayoutRevised { plan }
            }
            Feedback::PlanOverride { steps } => {
                let questions = policy::build_verification_questions(&s.analysis);
                let steps = steps
                    .iter()
                    .map(|st| match st {
                        ToolStep::Verify { questions: q } if q.is_empty() => ToolStep::Verify { questions: questions.clone() },
                        other => other.clone(),
                    })
                    .collect();
                Event::PlanOverride { steps }
            }
            Feedback::VerificationOverride { pass: true, .. } => Event::VerificationOverride { verdict: VerificationOverride::Pass },
            Feedback::VerificationOverride { pass: false, objects } => {
                if let Some(bad) = objects.iter().find(|o| **o >= s.analysis.objects.len()) {
                    return Err(Error::InvalidFeedback(format!("no object {bad}")));
                }
                Event::VerificationOverride { verdict: VerificationOverride::Fail { objects: objects.clone() } }
            }
        };
        s.push(HistoryKind::Feedback { feedback });
        self.apply(&mut s, event).map_err(|e| match e {
            Error::IllegalTransition { from, reason } => Error::InvalidFeedback(format!("{reason} (phase {})", from.name())),
            e => e,
        })?;
        self.store.save(&s)?;
        Ok(s)
    }

    /// Copies the session record, layout and artifacts into `out_dir` and
    /// writes a manifest with their hashes.
    pub fn export_artifacts(&self, id: &str, out_dir: &Path) -> Result<Manifest> {
        let s = self.store.load(id)?;
        std::fs::create_dir_all(out_dir.join(ARTIFACT_DIR))?;
        let mut files = Vec::new();
        let mut put = |rel: String, bytes: &[u8], kind: Option<ArtifactKind>, step: Option<String>| -> Result<()> {
            write_atomic(&out_dir.join(&rel), bytes)?;
            files.push(ManifestFile { path: rel, sha256: sha256_hex(bytes), kind, step });
            Ok(())
        };
        put(SESSION_FILE.into(), pretty_json(&s).as_bytes(), None, None)?;
        put("analysis.json".into(), pretty_json(&s.analysis).as_bytes(), None, None)?;
        put("layout.txt".into(), s.layout.to_text().as_bytes(), None, None)?;
        for a in &s.artifacts {
            let bytes = self.store.read_artifact(id, &a.name)?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(Error::StorageFailure(format!("artifact {} does not match its recorded hash", a.name)));
            }
            put(format!("{ARTIFACT_DIR}/{}", a.name), &bytes, Some(a.kind), Some(a.step.clone()))?;
        }
        let manifest = Manifest {
            session_id: s.id.clone(),
            prompt: s.prompt.clone(),
            phase: s.phase(),
            final_image: s.current_image.clone(),
            files,
        };
        write_atomic(&out_dir.join("manifest.json"), pretty_json(&manifest).as_bytes())?;
        Ok(manifest)
    }
}

fn pretty_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("record serializes")
}
