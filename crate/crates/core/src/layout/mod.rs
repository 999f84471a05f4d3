//! Scene layouts: captioned boxes on a fixed canvas.

mod planner;
mod raster;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::{Relation, RelationKind, SpatialRelation};
use crate::error::{Error, Result};

pub use planner::{plan_layout, size_class, SizeClass};
pub use raster::{palette_color, rasterize, ConditionImage, PaletteMode, PALETTE};

pub const DEFAULT_CANVAS_SIDE: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { width: DEFAULT_CANVAS_SIDE, height: DEFAULT_CANVAS_SIDE }
    }
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }
}

/// Axis-aligned box in pixels: top-left corner plus width and height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.w)
    }

    pub fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.h)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    /// Twice the center x, kept integral.
    pub fn center_x2(&self) -> u64 {
        2 * u64::from(self.x) + u64::from(self.w)
    }

    pub fn center_y2(&self) -> u64 {
        2 * u64::from(self.y) + u64::from(self.h)
    }

    pub fn intersection(&self, other: &BBox) -> u64 {
        let ix = self.right().min(other.right()).saturating_sub(u64::from(self.x.max(other.x)));
        let iy = self.bottom().min(other.bottom()).saturating_sub(u64::from(self.y.max(other.y)));
        ix * iy
    }

    /// Intersection and union pixel areas.
    pub fn overlap_areas(&self, other: &BBox) -> (u64, u64) {
        let inter = self.intersection(other);
        (inter, self.area() + other.area() - inter)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (inter, union) = self.overlap_areas(other);
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Chebyshev gap between the two boxes; zero when they touch or overlap.
    pub fn gap(&self, other: &BBox) -> u64 {
        let gx = u64::from(self.x.max(other.x)).saturating_sub(self.right().min(other.right()));
        let gy = u64::from(self.y.max(other.y)).saturating_sub(self.bottom().min(other.bottom()));
        gx.max(gy)
    }

    pub fn horizontal_overlap(&self, other: &BBox) -> u64 {
        self.right().min(other.right()).saturating_sub(u64::from(self.x.max(other.x)))
    }

    pub fn fits(&self, canvas: Canvas) -> bool {
        self.right() <= u64::from(canvas.width) && self.bottom() <= u64::from(canvas.height)
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= f64::from(self.x)
            && px < self.right() as f64
            && py >= f64::from(self.y)
            && py < self.bottom() as f64
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    /// Index into the analysis object list.
    pub object_ref: usize,
    pub instance: u32,
    pub caption: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneLayout {
    pub canvas: Canvas,
    pub entries: Vec<LayoutEntry>,
}

impl SceneLayout {
    pub fn new(canvas: Canvas) -> Self {
        Self { canvas, entries: Vec::new() }
    }

    pub fn entries_for(&self, object: usize) -> impl Iterator<Item = (usize, &LayoutEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.object_ref == object)
    }

    /// Renumbers instance indices by order of appearance per object.
    pub fn renumber_instances(&mut self) {
        let mut seen: Vec<u32> = Vec::new();
        for entry in &mut self.entries {
            if seen.len() <= entry.object_ref {
                seen.resize(entry.object_ref + 1, 0);
            }
            entry.instance = seen[entry.object_ref];
            seen[entry.object_ref] += 1;
        }
    }

    /// Serializes to the line format: a `canvas W H` header followed by one
    /// `caption | instance | x y w h` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("canvas {} {}\n", self.canvas.width, self.canvas.height);
        for e in &self.entries {
            out.push_str(&format!(
                "{} | {} | {} {} {} {}\n",
                e.caption, e.instance, e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h
            ));
        }
        out
    }

    /// Parses the line format. Object references are assigned by first
    /// appearance of each caption.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty layout file".into()))?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        let canvas = match dims.as_slice() {
            ["canvas", w, h] => Canvas::new(parse_u32(w)?, parse_u32(h)?),
            _ => return Err(Error::InvalidInput(format!("bad canvas header: {header:?}"))),
        };
        let mut layout = SceneLayout::new(canvas);
        let mut captions: Vec<String> = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split('|').map(str::trim).collect();
            let [caption, instance, coords] = parts.as_slice() else {
                return Err(Error::InvalidInput(format!("bad layout line: {line:?}")));
            };
            if caption.is_empty() {
                return Err(Error::InvalidInput(format!("empty caption: {line:?}")));
            }
            let nums = coords.split_whitespace().map(parse_u32).collect::<Result<Vec<_>>>()?;
            let [x, y, w, h] = nums.as_slice() else {
                return Err(Error::InvalidInput(format!("expected x y w h: {line:?}")));
            };
            let object_ref = match captions.iter().position(|c| c == caption) {
                Some(i) => i,
                None => {
                    captions.push((*caption).to_string());
                    captions.len() - 1
                }
            };
            layout.entries.push(LayoutEntry {
                object_ref,
                instance: parse_u32(instance)?,
                caption: (*caption).to_string(),
                bbox: BBox::new(*x, *y, *w, *h),
            });
        }
        Ok(layout)
    }
}

fn parse_u32(s: &str) -> Result<u32> {
    s.parse().map_err(|_| Error::InvalidInput(format!("not a non-negative integer: {s:?}")))
}

/// Geometric thresholds for validation and relation predicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Maximum IoU tolerated between two boxes.
    pub overlap_threshold: f64,
    /// Slack (px) for the "rests on top of" contact test.
    pub contact_epsilon: u32,
    /// Maximum edge gap (px) for "next to".
    pub near_delta: u32,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self { overlap_threshold: 0.1, contact_epsilon: 10, near_delta: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Violation {
    OutOfBounds { entry: usize },
    NonPositiveSize { entry: usize },
    Overlap { i: usize, j: usize, iou: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(layout: &SceneLayout, config: &LayoutConfig) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, e) in layout.entries.iter().enumerate() {
        if e.bbox.w == 0 || e.bbox.h == 0 {
            violations.push(Violation::NonPositiveSize { entry: i });
        }
        if !e.bbox.fits(layout.canvas) {
            violations.push(Violation::OutOfBounds { entry: i });
        }
    }
    for i in 0..layout.entries.len() {
        for j in i + 1..layout.entries.len() {
            let iou = layout.entries[i].bbox.iou(&layout.entries[j].bbox);
            if iou > config.overlap_threshold {
                violations.push(Violation::Overlap { i, j, iou });
            }
        }
    }
    ValidationReport { violations }
}

/// Pairwise predicate for one spatial relation between two boxes.
pub fn spatial_holds(
    kind: SpatialRelation,
    subject: &BBox,
    object: &BBox,
    config: &LayoutConfig,
) -> bool {
    match kind {
        SpatialRelation::Left => subject.center_x2() < object.center_x2(),
        SpatialRelation::Right => subject.center_x2() > object.center_x2(),
        SpatialRelation::Above => subject.center_y2() < object.center_y2(),
        SpatialRelation::Below => subject.center_y2() > object.center_y2(),
        SpatialRelation::OnTop => {
            let eps = u64::from(config.contact_epsilon);
            let bottom = subject.bottom();
            let top = u64::from(object.y);
            // Bottom edge must land in the upper half of the object, with slack.
            bottom + eps >= top
                && 2 * bottom <= 2 * top + u64::from(object.h) + 2 * eps
                && subject.horizontal_overlap(object) > 0
        }
        SpatialRelation::NextTo => {
            subject.intersection(object) == 0 && subject.gap(object) <= u64::from(config.near_delta)
        }
    }
}

/// Whether the layout satisfies a relation.
///
/// Directional relations must hold for every subject/object instance pair;
/// `on_top` and `next_to` need each subject instance to hold against some
/// object instance. Non-spatial relations always hold, and a relation whose
/// objects have no entries does not.
pub fn relation_satisfied(layout: &SceneLayout, relation: &Relation, config: &LayoutConfig) -> bool {
    let RelationKind::Spatial(kind) = &relation.kind else {
        return true;
    };
    let subjects: Vec<&BBox> = layout.entries_for(relation.subject).map(|(_, e)| &e.bbox).collect();
    let objects: Vec<&BBox> = layout.entries_for(relation.object).map(|(_, e)| &e.bbox).collect();
    if subjects.is_empty() || objects.is_empty() {
        return false;
    }
    match kind {
        SpatialRelation::OnTop | SpatialRelation::NextTo => subjects
            .iter()
            .all(|s| objects.iter().any(|o| spatial_holds(*kind, s, o, config))),
        _ => subjects
            .iter()
            .all(|s| objects.iter().all(|o| spatial_holds(*kind, s, o, config))),
    }
}

/// One human edit to a layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayoutEdit {
    /// Inserts an entry (appended when `at` is absent). Without an explicit
    /// `object_ref` the entry joins the object whose caption matches, or a
    /// new object.
    Add {
        caption: String,
        bbox: BBox,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        object_ref: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<usize>,
    },
    Remove { index: usize },
    Move { index: usize, x: u32, y: u32 },
    Resize { index: usize, w: u32, h: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayoutDiff {
    pub edits: Vec<LayoutEdit>,
}

impl LayoutDiff {
    pub fn new(edits: Vec<LayoutEdit>) -> Self {
        Self { edits }
    }

    /// The diff that undoes `self` when applied to the result of applying
    /// `self` to `base`.
    pub fn inverse(&self, base: &SceneLayout) -> Result<LayoutDiff> {
        let mut current = base.clone();
        let mut undo = Vec::with_capacity(self.edits.len());
        for (i, edit) in self.edits.iter().enumerate() {
            let inv = match edit {
                LayoutEdit::Add { at, .. } => {
                    LayoutEdit::Remove { index: at.unwrap_or(current.entries.len()) }
                }
                LayoutEdit::Remove { index } => {
                    let e = entry_at(&current, *index, i)?;
                    LayoutEdit::Add {
                        caption: e.caption.clone(),
                        bbox: e.bbox,
                        object_ref: Some(e.object_ref),
                        at: Some(*index),
                    }
                }
                LayoutEdit::Move { index, .. } => {
                    let b = entry_at(&current, *index, i)?.bbox;
                    LayoutEdit::Move { index: *index, x: b.x, y: b.y }
                }
                LayoutEdit::Resize { index, .. } => {
                    let b = entry_at(&current, *index, i)?.bbox;
                    LayoutEdit::Resize { index: *index, w: b.w, h: b.h }
                }
            };
            apply_edit(&mut current, edit, i)?;
            undo.push(inv);
        }
        undo.reverse();
        Ok(LayoutDiff { edits: undo })
    }
}

fn entry_at(layout: &SceneLayout, index: usize, edit: usize) -> Result<&LayoutEntry> {
    layout
        .entries
        .get(index)
        .ok_or(Error::InvalidDiffIndex { edit, index, len: layout.entries.len() })
}

fn apply_edit(layout: &mut SceneLayout, edit: &LayoutEdit, edit_no: usize) -> Result<()> {
    let len = layout.entries.len();
    match edit {
        LayoutEdit::Add { caption, bbox, object_ref, at } => {
            let at = at.unwrap_or(len);
            if at > len {
                return Err(Error::InvalidDiffIndex { edit: edit_no, index: at, len });
            }
            let object_ref = object_ref.unwrap_or_else(|| {
                layout
                    .entries
                    .iter()
                    .find(|e| e.caption == *caption)
                    .map(|e| e.object_ref)
                    .unwrap_or_else(|| {
                        layout.entries.iter().map(|e| e.object_ref + 1).max().unwrap_or(0)
                    })
            });
            layout.entries.insert(
                at,
                LayoutEntry { object_ref, instance: 0, caption: caption.clone(), bbox: *bbox },
            );
        }
        LayoutEdit::Remove { index } => {
            entry_at(layout, *index, edit_no)?;
            layout.entries.remove(*index);
        }
        LayoutEdit::Move { index, x, y } => {
            entry_at(layout, *index, edit_no)?;
            let b = &mut layout.entries[*index].bbox;
            b.x = *x;
            b.y = *y;
        }
        LayoutEdit::Resize { index, w, h } => {
            entry_at(layout, *index, edit_no)?;
            let b = &mut layout.entries[*index].bbox;
            b.w = *w;
            b.h = *h;
        }
    }
    layout.renumber_instances();
    Ok(())
}

/// Applies the edits in order and re-validates the result. Human edits are
/// never clamped; overlaps and out-of-bounds boxes show up in the report.
pub fn apply_diff(
    layout: &SceneLayout,
    diff: &LayoutDiff,
    config: &LayoutConfig,
) -> Result<(SceneLayout, ValidationReport)> {
    let mut out = layout.clone();
    for (i, edit) in diff.edits.iter().enumerate() {
        apply_edit(&mut out, edit, i)?;
    }
    let report = validate(&out, config);
    Ok((out, report))
}
