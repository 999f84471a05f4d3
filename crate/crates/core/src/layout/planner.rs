use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{relation_satisfied, spatial_holds, validate, BBox, Canvas, LayoutConfig, LayoutEntry, SceneLayout};
use crate::analysis::{PromptAnalysis, RelationKind, SpatialRelation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Box side as a fraction of the shorter canvas side.
    pub fn side_range(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (0.10, 0.20),
            SizeClass::Medium => (0.25, 0.45),
            SizeClass::Large => (0.45, 0.70),
        }
    }
}

const SMALL_NOUNS: &[&str] = &[
    "apple", "ball", "banana", "bell", "belt", "bird", "book", "bottle", "bowl", "butterfly",
    "cake", "candle", "cell phone", "clock", "coffee cup", "collar", "cookie", "cup", "donut",
    "egg", "glass", "glasses", "hat", "hot dog", "key", "knife", "lemon", "mouse", "mug",
    "orange", "pen", "pencil", "phone", "remote", "ring", "sandwich", "shoe", "spoon", "fork",
    "tea cup", "tennis ball", "toy", "watch", "wine glass", "flower", "frog", "leaf", "tomato",
    "strawberry", "cherry", "scissors", "toothbrush", "wallet", "vase", "candle", "plate",
    "soccer ball", "computer mouse", "book", "backpack",
];

const LARGE_NOUNS: &[&str] = &[
    "airplane", "bear", "bed", "boat", "building", "bus", "car", "couch", "cow", "desk",
    "elephant", "fire truck", "giraffe", "horse", "house", "mountain", "piano", "refrigerator",
    "rug", "school bus", "sofa", "table", "dining table", "train", "tree", "truck", "wardrobe",
    "bridge", "castle", "tower", "ship", "camel", "bookshelf", "fence", "carpet", "window",
    "mirror", "sink", "bench", "park bench",
];

/// Coarse size prior for a head noun; unknown nouns are medium.
pub fn size_class(noun: &str) -> SizeClass {
    let noun = noun.to_lowercase();
    if SMALL_NOUNS.contains(&noun.as_str()) {
        SizeClass::Small
    } else if LARGE_NOUNS.contains(&noun.as_str()) {
        SizeClass::Large
    } else {
        SizeClass::Medium
    }
}

const MIN_GAP: u32 = 2;
const MIN_SIDE: u32 = 4;
const CANDIDATES_PER_BOX: usize = 64;
const ATTEMPTS_PER_LEVEL: usize = 40;
const SHRINK_LEVELS: u32 = 3;
const SHRINK_FACTOR: f64 = 0.9;

struct Instance {
    object: usize,
    caption: String,
    /// Unscaled target size.
    size: (f64, f64),
}

/// Places one box per object instance so that the layout validates clean and
/// every spatial relation holds.
///
/// Deterministic in `(analysis, canvas, config, seed)`. When the analysis has
/// no spatial relation the boxes run left to right in object order.
pub fn plan_layout(
    analysis: &PromptAnalysis,
    canvas: Canvas,
    config: &LayoutConfig,
    seed: u64,
) -> Result<SceneLayout> {
    if analysis.objects.is_empty() {
        return Err(Error::LayoutInfeasible("analysis has no objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = placement_order(analysis);
    let n: usize = analysis.instance_count();
    let columns = !analysis.has_spatial_relations();

    let side = f64::from(canvas.width.min(canvas.height));
    let cap_w = if columns {
        f64::from(canvas.width) / n as f64 - f64::from(2 * MIN_GAP)
    } else {
        0.9 * f64::from(canvas.width) / (n as f64).sqrt().ceil()
    };
    let cap_h = if columns {
        0.9 * f64::from(canvas.height)
    } else {
        0.9 * f64::from(canvas.height) / (n as f64).sqrt().ceil()
    };

    let mut instances = Vec::with_capacity(n);
    for &object in &order {
        let obj = &analysis.objects[object];
        let (lo, hi) = size_class(&obj.noun).side_range();
        for _ in 0..obj.count {
            let s = side * rng.random_range(lo..=hi);
            let aspect = rng.random_range(-0.25f64..=0.25).exp();
            let w = (s * aspect).min(cap_w);
            let h = (s / aspect).min(cap_h);
            instances.push(Instance { object, caption: obj.phrase.clone(), size: (w, h) });
        }
    }

    for level in 0..=SHRINK_LEVELS {
        let scale = SHRINK_FACTOR.powi(level as i32);
        for _ in 0..ATTEMPTS_PER_LEVEL {
            let placed = if columns {
                place_columns(&instances, canvas, scale, &mut rng)
            } else {
                place_search(analysis, &instances, canvas, config, scale, &mut rng)
            };
            let Some(boxes) = placed else { continue };
            let layout = assemble(canvas, &instances, &boxes);
            if validate(&layout, config).is_clean()
                && analysis.relations.iter().all(|r| relation_satisfied(&layout, r, config))
            {
                tracing::debug!(level, "layout planned");
                return Ok(layout);
            }
        }
    }
    Err(Error::LayoutInfeasible(format!(
        "no placement for {n} boxes after {} shrink steps",
        SHRINK_LEVELS
    )))
}

/// Entries are ordered by object index, instances in order.
fn assemble(canvas: Canvas, instances: &[Instance], boxes: &[BBox]) -> SceneLayout {
    let mut pairs: Vec<(usize, usize)> =
        instances.iter().enumerate().map(|(k, inst)| (inst.object, k)).collect();
    pairs.sort();
    let mut layout = SceneLayout::new(canvas);
    for (_, k) in pairs {
        layout.entries.push(LayoutEntry {
            object_ref: instances[k].object,
            instance: 0,
            caption: instances[k].caption.clone(),
            bbox: boxes[k],
        });
    }
    layout.renumber_instances();
    layout
}

/// Objects that anchor an `on_top` or `next_to` relation are placed before
/// their subjects.
fn placement_order(analysis: &PromptAnalysis) -> Vec<usize> {
    let n = analysis.objects.len();
    let mut depth = vec![0usize; n];
    for _ in 0..n {
        for r in &analysis.relations {
            if matches!(
                r.kind,
                RelationKind::Spatial(SpatialRelation::OnTop | SpatialRelation::NextTo)
            ) && r.subject < n
                && r.object < n
                && depth[r.subject] <= depth[r.object]
            {
                depth[r.subject] = (depth[r.object] + 1).min(n);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (depth[i], i));
    order
}

fn scaled(inst: &Instance, scale: f64) -> (u32, u32) {
    let w = (inst.size.0 * scale).floor().max(f64::from(MIN_SIDE)) as u32;
    let h = (inst.size.1 * scale).floor().max(f64::from(MIN_SIDE)) as u32;
    (w, h)
}

fn place_columns(
    instances: &[Instance],
    canvas: Canvas,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<BBox>> {
    let n = instances.len() as u32;
    let col = canvas.width / n;
    if col < MIN_SIDE + 2 * MIN_GAP {
        return None;
    }
    // Instances are already in object order when there are no anchors.
    let mut boxes = Vec::with_capacity(instances.len());
    for (k, inst) in instances.iter().enumerate() {
        let (w, h) = scaled(inst, scale);
        let w = w.min(col - 2 * MIN_GAP);
        let h = h.min(canvas.height);
        let x0 = k as u32 * col + MIN_GAP / 2;
        let x1 = (k as u32 + 1) * col - w - MIN_GAP / 2;
        let x = rng.random_range(x0..=x1.max(x0));
        let y = rng.random_range(0..=canvas.height - h);
        boxes.push(BBox::new(x, y, w, h));
    }
    Some(boxes)
}

fn place_search(
    analysis: &PromptAnalysis,
    instances: &[Instance],
    canvas: Canvas,
    config: &LayoutConfig,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<BBox>> {
    let mut placed: Vec<(usize, BBox)> = Vec::with_capacity(instances.len());
    for inst in instances {
        let (w, h) = scaled(inst, scale);
        if w > canvas.width || h > canvas.height {
            return None;
        }
        let anchors: Vec<(SpatialRelation, BBox)> = analysis
            .relations
            .iter()
            .filter(|r| r.subject == inst.object)
            .filter_map(|r| match r.kind {
                RelationKind::Spatial(k @ (SpatialRelation::OnTop | SpatialRelation::NextTo)) => {
                    Some((k, r.object))
                }
                _ => None,
            })
            .flat_map(|(k, obj)| {
                placed.iter().filter(move |(o, _)| *o == obj).map(move |(_, b)| (k, *b))
            })
            .collect();

        let found = (0..CANDIDATES_PER_BOX).find_map(|_| {
            let candidate = if anchors.is_empty() {
                uniform(canvas, w, h, rng)
            } else {
                let (kind, anchor) = anchors[rng.random_range(0..anchors.len())];
                anchored(kind, &anchor, canvas, config, w, h, rng)?
            };
            let clear = placed.iter().all(|(_, b)| candidate.gap(b) >= u64::from(MIN_GAP));
            (clear && consistent(analysis, &placed, inst.object, &candidate, config))
                .then_some(candidate)
        })?;
        placed.push((inst.object, found));
    }
    Some(placed.into_iter().map(|(_, b)| b).collect())
}

fn uniform(canvas: Canvas, w: u32, h: u32, rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..=canvas.width - w);
    let y = rng.random_range(0..=canvas.height - h);
    BBox::new(x, y, w, h)
}

fn anchored(
    kind: SpatialRelation,
    anchor: &BBox,
    canvas: Canvas,
    config: &LayoutConfig,
    w: u32,
    h: u32,
    rng: &mut ChaCha8Rng,
) -> Option<BBox> {
    let (ax, ay, aw, ah) = (i64::from(anchor.x), i64::from(anchor.y), i64::from(anchor.w), i64::from(anchor.h));
    let (wi, hi) = (i64::from(w), i64::from(h));
    let (x, y) = match kind {
        SpatialRelation::OnTop => {
            // Resting just above the anchor, overlapping it horizontally.
            let x = rng.random_range(ax - wi + 1..=ax + aw - 1);
            (x, ay - hi - i64::from(MIN_GAP))
        }
        _ => {
            let gap = rng.random_range(i64::from(MIN_GAP)..=i64::from(config.near_delta.max(MIN_GAP)));
            let x = if rng.random_bool(0.5) { ax - wi - gap } else { ax + aw + gap };
            let y = rng.random_range(ay - hi / 2..=ay + ah - hi / 2);
            (x, y)
        }
    };
    let x = x.clamp(0, i64::from(canvas.width) - wi);
    if y < 0 || y + hi > i64::from(canvas.height) {
        return None;
    }
    Some(BBox::new(x as u32, y as u32, w, h))
}

/// Checks the relations decidable from the boxes placed so far.
fn consistent(
    analysis: &PromptAnalysis,
    placed: &[(usize, BBox)],
    object: usize,
    candidate: &BBox,
    config: &LayoutConfig,
) -> bool {
    analysis.relations.iter().all(|r| {
        let RelationKind::Spatial(kind) = r.kind else { return true };
        let others = |idx: usize| placed.iter().filter(move |(o, _)| *o == idx).map(|(_, b)| b);
        match kind {
            SpatialRelation::OnTop | SpatialRelation::NextTo => {
                if r.subject != object {
                    return true;
                }
                let mut anchors = others(r.object).peekable();
                anchors.peek().is_none() || anchors.any(|b| spatial_holds(kind, candidate, b, config))
            }
            _ => {
                let as_subject =
                    r.subject != object || others(r.object).all(|b| spatial_holds(kind, candidate, b, config));
                let as_object =
                    r.object != object || others(r.subject).all(|b| spatial_holds(kind, b, candidate, config));
                as_subject && as_object
            }
        }
    })
}
