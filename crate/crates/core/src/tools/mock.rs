//! Deterministic stand-ins for the generation, verification, segmentation
//! and completion tools. Mock renders draw each layout entry as a flat
//! primitive so the mock verifier can answer exactly.

use std::collections::{BTreeMap, HashMap};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{decode_mask, encode_mask, ImageRef, Payload, ToolAnswer, ToolRequest, ToolResponse, VerifyQuestion};
use crate::analysis::{self, AttributedObject};
use crate::guidance::Mask;
use crate::layout::{self, palette_color, BBox, Canvas, LayoutConfig, SceneLayout};
use crate::vocab::{self, AttributeKind, Lexicon};

/// Mid-gray canvas background of mock renders.
pub const BACKGROUND: [u8; 3] = [120, 120, 120];

const NAMED_COLORS: &[(&str, [u8; 3])] = &[
    ("black", [0, 0, 0]),
    ("silver", [192, 192, 192]),
    ("gray", [128, 128, 128]),
    ("white", [255, 255, 255]),
    ("maroon", [128, 0, 0]),
    ("red", [255, 0, 0]),
    ("purple", [128, 0, 128]),
    ("fuchsia", [255, 0, 255]),
    ("green", [0, 128, 0]),
    ("lime", [0, 255, 0]),
    ("olive", [128, 128, 0]),
    ("yellow", [255, 255, 0]),
    ("navy", [0, 0, 128]),
    ("blue", [0, 0, 255]),
    ("teal", [0, 128, 128]),
    ("aqua", [0, 255, 255]),
    ("brown", [165, 42, 42]),
    ("gold", [255, 215, 0]),
];

const ALIASES: &[(&str, &str)] = &[("grey", "gray"), ("golden", "gold")];

pub fn named_color(name: &str) -> Option<[u8; 3]> {
    let name = name.trim().to_lowercase();
    let name = ALIASES.iter().find(|(a, _)| *a == name).map_or(name.as_str(), |(_, c)| c);
    NAMED_COLORS.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
}

pub fn named_color_value(rgb: [u8; 3]) -> Option<&'static str> {
    NAMED_COLORS.iter().find(|(_, v)| *v == rgb).map(|(n, _)| *n)
}

pub fn color_names() -> impl Iterator<Item = &'static str> {
    NAMED_COLORS.iter().map(|(n, _)| *n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Rectangle,
    Ellipse,
    Triangle,
}

pub fn primitive_for(shape: &str) -> Primitive {
    match shape {
        "oval" | "round" | "circular" | "elliptical" | "spherical" => Primitive::Ellipse,
        "triangular" => Primitive::Triangle,
        _ => Primitive::Rectangle,
    }
}

/// Diagonal hatch period for a texture word, 4 to 7 px.
pub fn texture_period(texture: &str) -> u32 {
    4 + texture.bytes().map(u32::from).sum::<u32>() % 4
}

pub fn hatch_color(fill: [u8; 3]) -> [u8; 3] {
    let luma = u32::from(fill[0]) * 299 + u32::from(fill[1]) * 587 + u32::from(fill[2]) * 114;
    if luma >= 128_000 {
        fill.map(|c| (u32::from(c) * 55 / 100) as u8)
    } else {
        fill.map(|c| c + ((255 - u32::from(c)) * 45 / 100) as u8)
    }
}

/// How one object is drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Appearance {
    pub fill: [u8; 3],
    pub primitive: Primitive,
    pub hatch_period: Option<u32>,
}

impl Appearance {
    pub fn of(object: &AttributedObject, warnings: &mut Vec<String>) -> Self {
        let fill = match object.attribute(AttributeKind::Color) {
            Some(c) => named_color(c).unwrap_or_else(|| {
                warnings.push(format!("unknown color name {c:?}, drawing gray"));
                named_color("gray").expect("gray is named")
            }),
            None => palette_color(&object.phrase),
        };
        Self {
            fill,
            primitive: object.attribute(AttributeKind::Shape).map_or(Primitive::Rectangle, primitive_for),
            hatch_period: object.attribute(AttributeKind::Texture).map(texture_period),
        }
    }

    pub fn from_caption(caption: &str, warnings: &mut Vec<String>) -> Self {
        Self::of(&analysis::object_from_caption(caption), warnings)
    }

    fn covers(&self, bbox: &BBox, px: u32, py: u32) -> bool {
        let (fx, fy) = (f64::from(px) + 0.5, f64::from(py) + 0.5);
        let (w, h) = (f64::from(bbox.w), f64::from(bbox.h));
        let cx = f64::from(bbox.x) + w / 2.0;
        match self.primitive {
            Primitive::Rectangle => true,
            Primitive::Ellipse => {
                let cy = f64::from(bbox.y) + h / 2.0;
                let (dx, dy) = ((fx - cx) / (w / 2.0), (fy - cy) / (h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            Primitive::Triangle => {
                let t = (fy - f64::from(bbox.y)) / h;
                (fx - cx).abs() <= t * w / 2.0
            }
        }
    }

    fn color_at(&self, px: u32, py: u32) -> [u8; 3] {
        match self.hatch_period {
            Some(p) if (px + py).is_multiple_of(p) => hatch_color(self.fill),
            _ => self.fill,
        }
    }

    /// Draws into `img`, touching only pixels accepted by `keep`.
    pub fn draw(&self, img: &mut RgbImage, bbox: &BBox, keep: impl Fn(u32, u32) -> bool) {
        let x1 = (bbox.right() as u32).min(img.width());
        let y1 = (bbox.bottom() as u32).min(img.height());
        for py in bbox.y.min(y1)..y1 {
            for px in bbox.x.min(x1)..x1 {
                if keep(px, py) && self.covers(bbox, px, py) {
                    img.put_pixel(px, py, Rgb(self.color_at(px, py)));
                }
            }
        }
    }
}

/// Per-object color corruption applied by the mock generators.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FaultInjector {
    /// Object index to color name.
    #[serde(default)]
    pub colors: BTreeMap<usize, String>,
}

impl FaultInjector {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn color(object: usize, color: &str) -> Self {
        Self { colors: BTreeMap::from([(object, color.to_string())]) }
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// The corrupted fill, never equal to the true one.
    fn corrupt(&self, object: usize, fill: [u8; 3]) -> Option<[u8; 3]> {
        let wanted = named_color(self.colors.get(&object)?)?;
        if wanted != fill {
            return Some(wanted);
        }
        NAMED_COLORS.iter().map(|(_, v)| *v).find(|v| *v != fill)
    }
}

/// Renders a layout: background, then each entry in order.
pub fn render_layout(layout: &SceneLayout, faults: &FaultInjector) -> (RgbImage, Vec<String>) {
    let mut warnings = Vec::new();
    let mut img = RgbImage::from_pixel(layout.canvas.width, layout.canvas.height, Rgb(BACKGROUND));
    for entry in &layout.entries {
        let mut look = Appearance::from_caption(&entry.caption, &mut warnings);
        if let Some(bad) = faults.corrupt(entry.object_ref, look.fill) {
            look.fill = bad;
        }
        look.draw(&mut img, &entry.bbox, |_, _| true);
    }
    (img, warnings)
}

#[derive(Debug, Clone, Default)]
pub struct MockTools {
    pub faults: FaultInjector,
    pub lexicon: Lexicon,
    pub layout_config: LayoutConfig,
}

impl MockTools {
    pub fn with_faults(faults: FaultInjector) -> Self {
        Self { faults, ..Self::default() }
    }

    pub fn handle(&self, request: &ToolRequest) -> ToolResponse {
        if let Err(e) = request.check() {
            let code = match e {
                crate::error::Error::EmptyMask => "empty_mask",
                _ => "bad_request",
            };
            return ToolResponse::error(code, e.to_string());
        }
        match self.handle_inner(request) {
            Ok(r) => r,
            Err(e) => ToolResponse::error("bad_request", e.to_string()),
        }
    }

    fn handle_inner(&self, request: &ToolRequest) -> crate::error::Result<ToolResponse> {
        Ok(match request {
            ToolRequest::TextToImage { layout_meta, .. } => match layout_meta {
                Some(layout) => self.render(layout)?,
                None => {
                    let canvas = Canvas::default();
                    let img = RgbImage::from_pixel(canvas.width, canvas.height, Rgb(BACKGROUND));
                    let mut r = images(vec![ImageRef::from_image(&img)?]);
                    if let ToolResponse::Ok { warnings, .. } = &mut r {
                        warnings.push("no layout metadata; rendered background only".into());
                    }
                    r
                }
            },
            ToolRequest::Customize { layout, .. } | ToolRequest::LayoutToImage { layout, .. } => {
                self.render(layout)?
            }
            ToolRequest::Verify { image, questions, layout_meta } => {
                let img = image.load()?;
                let answers = match layout_meta {
                    Some(layout) => mock_verify(&img, questions, layout),
                    None => questions.iter().map(|_| ToolAnswer { yes: false, confidence: 0.0 }).collect(),
                };
                ToolResponse::ok(Payload::Answers { answers })
            }
            ToolRequest::Segment { caption, box_hint, layout_meta, .. } => {
                let Some(layout) = layout_meta else {
                    return Ok(ToolResponse::error("no_match", "segment needs layout metadata"));
                };
                match mock_segment(layout, caption, box_hint.as_ref()) {
                    Some(mask) => ToolResponse::ok(Payload::Mask { mask: encode_mask(&mask) }),
                    None => ToolResponse::error("no_match", format!("no object matches {caption:?}")),
                }
            }
            ToolRequest::LocalEdit { image, mask, target, .. } => {
                let img = image.load()?;
                let mask = decode_mask(mask)?;
                if (mask.width, mask.height) != img.dimensions() {
                    return Ok(ToolResponse::error(
                        "mask_size",
                        format!("mask {}x{} does not match image {:?}", mask.width, mask.height, img.dimensions()),
                    ));
                }
                let mut warnings = Vec::new();
                let out = mock_edit(&img, &mask, target, &mut warnings);
                ToolResponse::Ok {
                    payload: Payload::Images { images: vec![ImageRef::from_image(&out)?] },
                    warnings,
                }
            }
            ToolRequest::Complete { prompt } => match self.complete(prompt) {
                Ok(text) => ToolResponse::ok(Payload::Completion { text }),
                Err(e) => ToolResponse::error("unparseable", e.to_string()),
            },
        })
    }

    fn render(&self, layout: &SceneLayout) -> crate::error::Result<ToolResponse> {
        let (img, warnings) = render_layout(layout, &self.faults);
        Ok(ToolResponse::Ok { payload: Payload::Images { images: vec![ImageRef::from_image(&img)?] }, warnings })
    }

    /// Answers an agent prompt with the rule grammar and the planner.
    fn complete(&self, prompt: &str) -> crate::error::Result<String> {
        let caption = prompt
            .lines()
            .rev()
            .find_map(|l| l.trim().strip_prefix("Caption:"))
            .unwrap_or(prompt)
            .trim();
        let analysis = analysis::decompose_rule_based(caption, &self.lexicon)
            .unwrap_or_else(|_| analysis::fallback_analysis(caption));
        let layout = layout::plan_layout(&analysis, Canvas::default(), &self.layout_config, 0)?;
        Ok(analysis::format_answer(analysis.category, &layout))
    }
}

fn images(images: Vec<ImageRef>) -> ToolResponse {
    ToolResponse::ok(Payload::Images { images })
}

enum Query<'a> {
    Attribute { noun: &'a str, value: &'a str },
    Count { n: u32, noun: String },
}

fn parse_question(text: &str) -> Option<Query<'_>> {
    let text = text.trim().strip_suffix('?')?;
    if let Some(rest) = text.strip_prefix("Is the ") {
        let (noun, value) = rest.split_once(" in the image ")?;
        return Some(Query::Attribute { noun: noun.trim(), value: value.trim() });
    }
    let rest = text.strip_prefix("Are there ")?.strip_suffix(" in the image")?;
    let (n, plural) = rest.split_once(' ')?;
    let n = vocab::quantity(n)?;
    Some(Query::Count { n, noun: vocab::normalize_label(plural) })
}

fn matching_boxes(layout: &SceneLayout, object: Option<usize>, noun: &str) -> Vec<BBox> {
    let noun = vocab::normalize_label(noun);
    layout
        .entries
        .iter()
        .filter(|e| match object {
            Some(o) => e.object_ref == o,
            None => vocab::normalize_label(&e.caption) == noun,
        })
        .map(|e| e.bbox)
        .collect()
}

/// Most frequent non-background color inside a box, with its pixel count.
fn dominant(img: &RgbImage, bbox: &BBox) -> Option<([u8; 3], u64)> {
    let mut hist: HashMap<[u8; 3], u64> = HashMap::new();
    let x1 = (bbox.right() as u32).min(img.width());
    let y1 = (bbox.bottom() as u32).min(img.height());
    for y in bbox.y.min(y1)..y1 {
        for x in bbox.x.min(x1)..x1 {
            let p = img.get_pixel(x, y).0;
            if p != BACKGROUND {
                *hist.entry(p).or_insert(0) += 1;
            }
        }
    }
    // Ties break toward the smaller color value so answers are deterministic.
    hist.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
}

fn pixels_in<'a>(img: &'a RgbImage, bbox: &BBox) -> impl Iterator<Item = (u32, u32, [u8; 3])> + 'a {
    let x1 = (bbox.right() as u32).min(img.width());
    let y1 = (bbox.bottom() as u32).min(img.height());
    let (x0, y0) = (bbox.x.min(x1), bbox.y.min(y1));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y, img.get_pixel(x, y).0)))
}

fn classify_primitive(img: &RgbImage, bbox: &BBox, fill: [u8; 3]) -> Primitive {
    let hatch = hatch_color(fill);
    let covered = pixels_in(img, bbox).filter(|(_, _, p)| *p == fill || *p == hatch).count();
    let frac = covered as f64 / bbox.area().max(1) as f64;
    if frac >= 0.93 {
        Primitive::Rectangle
    } else if frac >= 0.64 {
        Primitive::Ellipse
    } else {
        Primitive::Triangle
    }
}

fn has_hatch(img: &RgbImage, bbox: &BBox, fill: [u8; 3], period: u32) -> bool {
    let hatch = hatch_color(fill);
    let (mut on, mut on_hatch, mut off_hatch) = (0u64, 0u64, 0u64);
    for (x, y, p) in pixels_in(img, bbox) {
        if p != fill && p != hatch {
            continue;
        }
        let on_line = (x + y) % period == 0;
        on += u64::from(on_line);
        on_hatch += u64::from(on_line && p == hatch);
        off_hatch += u64::from(!on_line && p == hatch);
    }
    on > 0 && on_hatch * 10 >= on * 9 && off_hatch * 20 <= on_hatch
}

fn answer_attribute(img: &RgbImage, boxes: &[BBox], value: &str) -> ToolAnswer {
    let no = ToolAnswer { yes: false, confidence: 0.0 };
    if boxes.is_empty() {
        return no;
    }
    let mut confidence: f64 = 1.0;
    for b in boxes {
        let Some((fill, count)) = dominant(img, b) else { return no };
        let ok = match vocab::attribute_kind(value) {
            AttributeKind::Color => {
                let expected = named_color(value).or_else(|| named_color("gray"));
                confidence = confidence.min(count as f64 / b.area().max(1) as f64);
                Some(fill) == expected
            }
            AttributeKind::Shape => classify_primitive(img, b, fill) == primitive_for(value),
            AttributeKind::Texture => has_hatch(img, b, fill, texture_period(value)),
            AttributeKind::Other => {
                confidence = 0.5;
                true
            }
        };
        if !ok {
            return ToolAnswer { yes: false, confidence: 1.0 };
        }
    }
    ToolAnswer { yes: true, confidence }
}

/// Answers yes/no questions exactly on mock renders, using layout metadata
/// to find the objects.
pub fn mock_verify(img: &RgbImage, questions: &[VerifyQuestion], layout: &SceneLayout) -> Vec<ToolAnswer> {
    questions
        .iter()
        .map(|q| match parse_question(&q.text) {
            Some(Query::Attribute { noun, value }) => {
                answer_attribute(img, &matching_boxes(layout, q.object, noun), value)
            }
            Some(Query::Count { n, noun }) => {
                let found = matching_boxes(layout, q.object, &noun).len();
                ToolAnswer { yes: found == n as usize, confidence: 1.0 }
            }
            None => ToolAnswer { yes: false, confidence: 0.0 },
        })
        .collect()
}

/// Exact box mask of the entry named by `caption`; a box hint picks among
/// instances by IoU.
pub fn mock_segment(layout: &SceneLayout, caption: &str, box_hint: Option<&BBox>) -> Option<Mask> {
    let wanted = caption.trim().to_lowercase();
    let noun = vocab::normalize_label(caption);
    let candidates: Vec<&BBox> = layout
        .entries
        .iter()
        .filter(|e| e.caption.to_lowercase() == wanted || vocab::normalize_label(&e.caption) == noun)
        .map(|e| &e.bbox)
        .collect();
    let chosen = match box_hint {
        Some(hint) => candidates
            .iter()
            .copied()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.iou(hint).total_cmp(&b.iou(hint)).then(j.cmp(i)))
            .map(|(_, b)| b),
        None => candidates.first().copied(),
    }?;
    Some(Mask::from_box(chosen, layout.canvas))
}

/// Repaints the masked region with the target phrase; pixels outside the
/// mask are untouched.
pub fn mock_edit(img: &RgbImage, mask: &Mask, target: &str, warnings: &mut Vec<String>) -> RgbImage {
    let mut out = img.clone();
    let Some(region) = mask.bounding_box() else { return out };
    for y in region.y..region.bottom() as u32 {
        for x in region.x..region.right() as u32 {
            if mask.get(x, y) {
                out.put_pixel(x, y, Rgb(BACKGROUND));
            }
        }
    }
    Appearance::from_caption(target, warnings).draw(&mut out, &region, |x, y| mask.get(x, y));
    out
}
