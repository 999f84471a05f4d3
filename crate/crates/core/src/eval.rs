//! Detection-style layout fidelity (IoU, AP sweep), attribute and relation
//! accuracy, and the suite report format.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::analysis::{Category, PromptAnalysis, RelationKind};
use crate::layout::{relation_satisfied, BBox, LayoutConfig, LayoutEntry, SceneLayout};
use crate::tools::mock::{Appearance, BACKGROUND};
use crate::vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub bbox: BBox,
    pub score: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// IoU as an exact `(intersection, union)` pair of pixel counts.
pub fn iou_exact(a: &BBox, b: &BBox) -> (u64, u64) {
    a.overlap_areas(b)
}

/// IoU thresholds in percent: 50, 55, ..., 95.
pub const AP_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApScores {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

fn meets(a: &BBox, b: &BBox, threshold_pct: u32) -> bool {
    let (inter, union) = a.overlap_areas(b);
    union > 0 && inter * 100 >= u64::from(threshold_pct) * union
}

/// AP at one threshold over several images, pooling detections into a
/// single ranked list.
///
/// Detections are ranked by score (ties by image, then input order) and
/// matched greedily to the unmatched same-label ground-truth box with the
/// highest IoU at or above the threshold. The PR curve is integrated with
/// all-point interpolation. No ground truth gives 0.
pub fn average_precision_at(images: &[(&[Detection], &SceneLayout)], threshold_pct: u32) -> f64 {
    let gt: Vec<Vec<(String, BBox)>> = images
        .iter()
        .map(|(_, layout)| {
            layout.entries.iter().map(|e| (vocab::normalize_label(&e.caption), e.bbox)).collect()
        })
        .collect();
    let npos: usize = gt.iter().map(Vec::len).sum();
    if npos == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, usize, &Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (dets, _))| dets.iter().enumerate().map(move |(k, d)| (i, k, d)))
        .collect();
    ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (img, _, det) in &ranked {
        let label = vocab::normalize_label(&det.label);
        let best = gt[*img]
            .iter()
            .enumerate()
            .filter(|(j, (l, b))| !used[*img][*j] && *l == label && meets(&det.bbox, b, threshold_pct))
            .max_by(|(j1, (_, b1)), (j2, (_, b2))| {
                let (i1, u1) = det.bbox.overlap_areas(b1);
                let (i2, u2) = det.bbox.overlap_areas(b2);
                // Compare i1/u1 with i2/u2 exactly; earlier index wins ties.
                (u128::from(i1) * u128::from(u2)).cmp(&(u128::from(i2) * u128::from(u1))).then(j2.cmp(j1))
            })
            .map(|(j, _)| j);
        if let Some(j) = best {
            used[*img][j] = true;
        }
        tp_flags.push(best.is_some());
    }
    pr_area(&tp_flags, npos)
}

/// All-point interpolated area under the PR curve of a ranked TP/FP list.
pub fn pr_area(tp_flags: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, hit) in tp_flags.iter().enumerate() {
        tp += usize::from(*hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        area += (r - prev_recall) * p;
        prev_recall = *r;
    }
    area
}

pub fn average_precision_multi(images: &[(&[Detection], &SceneLayout)]) -> ApScores {
    let per: Vec<f64> = AP_THRESHOLDS.iter().map(|t| average_precision_at(images, *t)).collect();
    ApScores {
        ap: per.iter().sum::<f64>() / per.len() as f64,
        ap50: per[0],
        ap75: per[5],
    }
}

pub fn average_precision(detections: &[Detection], ground_truth: &SceneLayout) -> ApScores {
    average_precision_multi(&[(detections, ground_truth)])
}

/// Per-prompt yes counts over attribute questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeTally {
    pub yes: usize,
    pub total: usize,
}

/// Mean over prompts of the per-prompt yes fraction. Prompts without
/// attribute questions are skipped; with none at all the accuracy is 1.
pub fn attribute_accuracy(tallies: &[AttributeTally]) -> f64 {
    let scored: Vec<f64> =
        tallies.iter().filter(|t| t.total > 0).map(|t| t.yes as f64 / t.total as f64).collect();
    if scored.is_empty() {
        1.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelationScore {
    pub satisfied: usize,
    pub spatial: usize,
    /// Non-spatial relations seen; geometry cannot score them.
    pub non_spatial: usize,
}

impl RelationScore {
    /// Satisfied fraction of spatial relations; 1 when there are none.
    pub fn accuracy(&self) -> f64 {
        if self.spatial == 0 {
            1.0
        } else {
            self.satisfied as f64 / self.spatial as f64
        }
    }

    pub fn add(&mut self, other: RelationScore) {
        self.satisfied += other.satisfied;
        self.spatial += other.spatial;
        self.non_spatial += other.non_spatial;
    }
}

/// Scores the analysis relations against detected boxes. Detections are
/// assigned to objects by normalized noun.
pub fn relation_score(detections: &[Detection], analysis: &PromptAnalysis, config: &LayoutConfig) -> RelationScore {
    let mut layout = SceneLayout::default();
    for d in detections {
        let label = vocab::normalize_label(&d.label);
        if let Some(object) = analysis.objects.iter().position(|o| vocab::normalize_label(&o.noun) == label) {
            layout.entries.push(LayoutEntry { object_ref: object, instance: 0, caption: d.label.clone(), bbox: d.bbox });
        }
    }
    let mut score = RelationScore::default();
    for r in &analysis.relations {
        match r.kind {
            RelationKind::Spatial(_) => {
                score.spatial += 1;
                score.satisfied += usize::from(relation_satisfied(&layout, r, config));
            }
            RelationKind::NonSpatial(_) => score.non_spatial += 1,
        }
    }
    score
}

/// Pooled relation accuracy over images.
pub fn relation_accuracy(detections_per_image: &[Vec<Detection>], analyses: &[PromptAnalysis], config: &LayoutConfig) -> RelationScore {
    let mut total = RelationScore::default();
    for (dets, analysis) in detections_per_image.iter().zip(analyses) {
        total.add(relation_score(dets, analysis, config));
    }
    total
}

/// Fill color to label map for the rectangle detector, from a layout's
/// mock appearance. The first entry wins when two nouns share a color.
pub fn color_vocabulary(layout: &SceneLayout) -> Vec<([u8; 3], String)> {
    let mut vocab_out: Vec<([u8; 3], String)> = Vec::new();
    for e in &layout.entries {
        let fill = Appearance::from_caption(&e.caption, &mut Vec::new()).fill;
        if !vocab_out.iter().any(|(c, _)| *c == fill) {
            vocab_out.push((fill, vocab::normalize_label(&e.caption)));
        }
    }
    vocab_out
}

/// Minimum pixels/bbox-area ratio for a component to count as an object.
const MIN_FILL_RATIO: f64 = 0.2;

/// Detector stub for flat mock renders: 8-connected components of each
/// vocabulary color, reported by bounding box with the fill ratio as score.
pub fn detect_rectangles(img: &RgbImage, vocabulary: &[([u8; 3], String)]) -> Vec<Detection> {
    let labels: HashMap<[u8; 3], &str> = vocabulary.iter().map(|(c, l)| (*c, l.as_str())).collect();
    let (w, h) = img.dimensions();
    let mut seen = vec![false; (w as usize) * (h as usize)];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let idx0 = (y0 * w + x0) as usize;
            let color = img.get_pixel(x0, y0).0;
            if seen[idx0] || color == BACKGROUND {
                continue;
            }
            let Some(label) = labels.get(&color) else {
                seen[idx0] = true;
                continue;
            };
            let (mut minx, mut miny, mut maxx, mut maxy, mut n) = (x0, y0, x0, y0, 0u64);
            seen[idx0] = true;
            stack.push((x0, y0));
            while let Some((x, y)) = stack.pop() {
                n += 1;
                minx = minx.min(x);
                maxx = maxx.max(x);
                miny = miny.min(y);
                maxy = maxy.max(y);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                        if nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h) {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let idx = (ny * w + nx) as usize;
                        if !seen[idx] && img.get_pixel(nx, ny).0 == color {
                            seen[idx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            let bbox = BBox::new(minx, miny, maxx - minx + 1, maxy - miny + 1);
            let ratio = n as f64 / bbox.area() as f64;
            if ratio >= MIN_FILL_RATIO {
                out.push(Detection { label: (*label).to_string(), bbox, score: ratio });
            }
        }
    }
    out
}

/// One line of a suite prompt file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuitePrompt {
    pub prompt: String,
    pub category: Option<Category>,
}

/// Parses a prompt file: one prompt per line with an optional tab-separated
/// category. Blank lines and `#` comments are skipped.
pub fn parse_prompt_file(text: &str) -> crate::Result<Vec<SuitePrompt>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (prompt, category) = match line.split_once('\t') {
            Some((p, c)) => {
                let c = c.trim();
                let category = Category::from_label(c)
                    .or_else(|| Category::from_label(&c.replace('_', "-")))
                    .ok_or_else(|| crate::Error::InvalidInput(format!("line {}: unknown category {c:?}", n + 1)))?;
                (p, Some(category))
            }
            None => (line, None),
        };
        out.push(SuitePrompt { prompt: prompt.trim().to_string(), category });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub index: usize,
    pub prompt: String,
    pub category: Option<Category>,
    pub phase: String,
    pub edit_rounds: u32,
    pub attribute_yes: usize,
    pub attribute_total: usize,
    pub spatial_satisfied: usize,
    pub spatial_total: usize,
    pub non_spatial: usize,
    pub ground_truth_boxes: usize,
    pub detections: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub failed: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub attribute_accuracy: f64,
    pub relation_accuracy: f64,
    pub spatial_relations: usize,
    pub non_spatial_relations: usize,
    pub rows: Vec<PromptRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> crate::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index", "prompt", "category", "phase", "edit_rounds", "attribute_yes", "attribute_total",
            "spatial_satisfied", "spatial_total", "non_spatial", "ground_truth_boxes", "detections", "error",
        ])
        .map_err(|e| crate::Error::Codec(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.prompt.clone(),
                r.category.map(|c| c.label().to_string()).unwrap_or_default(),
                r.phase.clone(),
                r.edit_rounds.to_string(),
                r.attribute_yes.to_string(),
                r.attribute_total.to_string(),
                r.spatial_satisfied.to_string(),
                r.spatial_total.to_string(),
                r.non_spatial.to_string(),
                r.ground_truth_boxes.to_string(),
                r.detections.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| crate::Error::Codec(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Codec(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| crate::Error::Codec(e.to_string()))
    }
}
