//! Batch evaluation over a prompt list.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{write_atomic, Engine, FaultPlan, PipelineSession, SessionOptions};
use crate::analysis::PromptAnalysis;
use crate::error::{Error, Result};
use crate::eval::{
    self, AttributeTally, Detection, EvalReport, PromptRow, RelationScore, SuitePrompt,
};
use crate::layout::SceneLayout;
use crate::policy::{Phase, PlanningMode};
use crate::tools::{decode_png, ImageRef, Payload, ToolRequest, VerifyQuestion};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteOptions {
    pub planning_mode: Option<PlanningMode>,
    pub self_correction: Option<bool>,
    /// Corrupt one color attribute per prompt in the mock renders.
    pub inject_color_fault: bool,
}

struct Scored {
    row: PromptRow,
    detections: Vec<Detection>,
    layout: SceneLayout,
    tally: AttributeTally,
    relations: RelationScore,
}

/// Attribute questions only; count questions are not attributes.
fn attribute_questions(analysis: &PromptAnalysis) -> Vec<VerifyQuestion> {
    analysis
        .objects
        .iter()
        .enumerate()
        .flat_map(|(i, o)| {
            o.attributes.iter().map(move |a| VerifyQuestion {
                text: format!("Is the {} in the image {}?", o.noun, a.value),
                object: Some(i),
            })
        })
        .collect()
}

fn run_to_rest(engine: &Engine, id: &str) -> Result<PipelineSession> {
    let s = engine.get_session(id)?;
    if s.phase().is_terminal() || s.phase() == Phase::AwaitingFeedback {
        return Ok(s);
    }
    engine.advance(id)
}

fn score_prompt(engine: &Engine, index: usize, p: &SuitePrompt, opts: &SuiteOptions, out_dir: Option<&Path>) -> Result<Scored> {
    let options = SessionOptions {
        category: p.category,
        planning_mode: opts.planning_mode,
        self_correction: opts.self_correction,
        faults: if opts.inject_color_fault { FaultPlan::FirstColored } else { FaultPlan::None },
        ..SessionOptions::default()
    };
    let created = engine.create_session(&p.prompt, &options)?;
    let mut row = PromptRow {
        index,
        prompt: p.prompt.clone(),
        category: Some(created.analysis.category),
        phase: String::new(),
        edit_rounds: 0,
        attribute_yes: 0,
        attribute_total: 0,
        spatial_satisfied: 0,
        spatial_total: 0,
        non_spatial: 0,
        ground_truth_boxes: created.layout.entries.len(),
        detections: 0,
        error: None,
    };
    let s = run_to_rest(engine, &created.id)?;
    row.phase = s.phase().name().to_string();
    row.edit_rounds = s.state.edit_round;
    let name = s
        .current_image
        .clone()
        .ok_or_else(|| Error::InvalidInput(format!("session ended in {} without an image", s.phase().name())))?;
    let png = engine.store().read_artifact(&s.id, &name)?;
    let img = decode_png(&png)?;

    // Scoring uses a fault-free verifier on the final image.
    let questions = attribute_questions(&s.analysis);
    let mut tally = AttributeTally { yes: 0, total: questions.len() };
    if !questions.is_empty() {
        let client = engine.client_for(&Default::default());
        let request = ToolRequest::Verify {
            image: ImageRef::from_png_bytes(&png),
            questions,
            layout_meta: Some(s.layout.clone()),
        };
        match client.call(&request)? {
            (Payload::Answers { answers }, _) => tally.yes = answers.iter().filter(|a| a.yes).count(),
            _ => return Err(Error::Codec("verifier returned no answers".into())),
        }
    }
    let detections = eval::detect_rectangles(&img, &eval::color_vocabulary(&s.layout));
    let relations = eval::relation_score(&detections, &s.analysis, &engine.config().layout);
    row.attribute_yes = tally.yes;
    row.attribute_total = tally.total;
    row.spatial_satisfied = relations.satisfied;
    row.spatial_total = relations.spatial;
    row.non_spatial = relations.non_spatial;
    row.detections = detections.len();
    row.ground_truth_boxes = s.layout.entries.len();

    if let Some(dir) = out_dir {
        let pdir = dir.join("prompts").join(format!("{index:03}"));
        write_atomic(&pdir.join("final.png"), &png)?;
        write_atomic(&pdir.join("layout.txt"), s.layout.to_text().as_bytes())?;
        let analysis = serde_json::to_string_pretty(&s.analysis).map_err(|e| Error::Codec(e.to_string()))?;
        write_atomic(&pdir.join("analysis.json"), analysis.as_bytes())?;
    }
    Ok(Scored { row, detections, layout: s.layout, tally, relations })
}

/// Runs every prompt to completion and aggregates the metrics. Prompts that
/// fail are reported in their row and left out of the aggregates.
pub fn run_suite(engine: &Engine, prompts: &[SuitePrompt], opts: &SuiteOptions, out_dir: Option<&Path>) -> Result<EvalReport> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<Scored, PromptRow>>>> =
        Mutex::new((0..prompts.len()).map(|_| None).collect());
    let workers = engine.config().fanout.clamp(1, prompts.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = prompts.get(i) else { break };
                let r = score_prompt(engine, i, p, opts, out_dir).map_err(|e| {
                    tracing::warn!(index = i, error = %e, "suite prompt failed");
                    PromptRow {
                        index: i,
                        prompt: p.prompt.clone(),
                        category: p.category,
                        phase: "error".into(),
                        edit_rounds: 0,
                        attribute_yes: 0,
                        attribute_total: 0,
                        spatial_satisfied: 0,
                        spatial_total: 0,
                        non_spatial: 0,
                        ground_truth_boxes: 0,
                        detections: 0,
                        error: Some(e.to_string()),
                    }
                });
                results.lock().expect("results poisoned")[i] = Some(r);
            });
        }
    });
    let results: Vec<_> = results.into_inner().expect("results poisoned").into_iter().map(|r| r.expect("every prompt ran")).collect();

    let mut rows = Vec::new();
    let mut tallies = Vec::new();
    let mut relations = RelationScore::default();
    let mut pairs: Vec<(&[Detection], &SceneLayout)> = Vec::new();
    let mut failed = 0;
    for r in &results {
        match r {
            Ok(s) => {
                rows.push(s.row.clone());
                tallies.push(s.tally);
                relations.add(s.relations);
                pairs.push((&s.detections, &s.layout));
            }
            Err(row) => {
                failed += 1;
                rows.push(row.clone());
            }
        }
    }
    let ap = eval::average_precision_multi(&pairs);
    let report = EvalReport {
        prompts: prompts.len(),
        failed,
        ap: ap.ap,
        ap50: ap.ap50,
        ap75: ap.ap75,
        attribute_accuracy: eval::attribute_accuracy(&tallies),
        relation_accuracy: relations.accuracy(),
        spatial_relations: relations.spatial,
        non_spatial_relations: relations.non_spatial,
        rows,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
        write_atomic(&dir.join("report.csv"), report.to_csv()?.as_bytes())?;
    }
    Ok(report)
}
