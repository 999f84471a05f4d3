//! Conditioning artifacts for the generation tools: cross-attention bias
//! grids, region masks and concept-embedding averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BBox, Canvas, SceneLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub alpha_plus: f32,
    pub alpha_minus: f32,
    pub latent_downsample: u32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { alpha_plus: 2.5, alpha_minus: -10000.0, latent_downsample: 8 }
    }
}

impl GuidanceConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha_plus > 0.0 && self.alpha_minus < 0.0) {
            return Err(Error::Config(format!(
                "alpha_plus ({}) must be positive and alpha_minus ({}) negative",
                self.alpha_plus, self.alpha_minus
            )));
        }
        if self.latent_downsample == 0 {
            return Err(Error::Config("latent_downsample must be positive".into()));
        }
        Ok(())
    }

    /// Latent grid size for a canvas; the canvas must be a multiple of the
    /// downsample factor.
    pub fn grid_for(&self, canvas: Canvas) -> Result<(u32, u32)> {
        self.check()?;
        let ds = self.latent_downsample;
        if !canvas.width.is_multiple_of(ds) || !canvas.height.is_multiple_of(ds) || canvas.width == 0 || canvas.height == 0 {
            return Err(Error::InvalidInput(format!(
                "canvas {}x{} is not a multiple of downsample {ds}",
                canvas.width, canvas.height
            )));
        }
        Ok((canvas.width / ds, canvas.height / ds))
    }
}

/// Binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

const MASK_MAGIC: &[u8; 4] = b"GDM1";
const BIAS_MAGIC: &[u8; 4] = b"GDB1";

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width as usize) * (height as usize)] }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Mask {
        Mask { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Pixel-exact mask of a box on a canvas.
    pub fn from_box(bbox: &BBox, canvas: Canvas) -> Mask {
        let mut m = Mask::new(canvas.width, canvas.height);
        let x1 = (bbox.right() as u32).min(canvas.width);
        let y1 = (bbox.bottom() as u32).min(canvas.height);
        for y in bbox.y.min(y1)..y1 {
            for x in bbox.x.min(x1)..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != u32::MAX).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// 1-bit bitmap: magic, u32 LE width and height, then rows packed MSB
    /// first, padded to whole bytes at the end only.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.bits.len().div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (k, bit) in chunk.iter().enumerate() {
                if *bit {
                    byte |= 0x80 >> k;
                }
            }
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Mask> {
        let mut r = Reader::new(bytes);
        r.magic(MASK_MAGIC)?;
        let width = r.u32()?;
        let height = r.u32()?;
        let n = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| Error::Codec("mask dimensions overflow".into()))?;
        let packed = r.take(n.div_ceil(8))?;
        r.finish()?;
        let bits = (0..n).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Mask { width, height, bits })
    }
}

/// Cells of a `grid_w` x `grid_h` grid whose centers fall inside the box.
pub fn box_cells(bbox: &BBox, canvas: Canvas, grid_w: u32, grid_h: u32) -> Mask {
    // Cell i has center (i + 1/2) * W / grid_w; compare in integers.
    let inside = |i: u32, start: u32, len: u32, side: u32, n: u32| {
        let c = u64::from(2 * i + 1) * u64::from(side);
        let lo = 2 * u64::from(start) * u64::from(n);
        let hi = 2 * (u64::from(start) + u64::from(len)) * u64::from(n);
        lo <= c && c < hi
    };
    let mut m = Mask::new(grid_w, grid_h);
    for gy in 0..grid_h {
        if !inside(gy, bbox.y, bbox.h, canvas.height, grid_h) {
            continue;
        }
        for gx in 0..grid_w {
            if inside(gx, bbox.x, bbox.w, canvas.width, grid_w) {
                m.set(gx, gy, true);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub start: u32,
    pub end: u32,
}

/// Additive cross-attention bias for a set of prompt character spans that
/// share one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBias {
    pub width: u32,
    pub height: u32,
    pub downsample: u32,
    pub alpha_plus: f32,
    pub alpha_minus: f32,
    /// Denoising steps the bias applies to; `None` means all steps.
    pub step_range: Option<StepRange>,
    /// Character ranges `[start, end)` into the prompt.
    pub spans: Vec<(u32, u32)>,
    pub cells: Vec<f32>,
}

impl AttentionBias {
    fn from_mask(mask: &Mask, config: &GuidanceConfig, spans: &[(usize, usize)]) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            downsample: config.latent_downsample,
            alpha_plus: config.alpha_plus,
            alpha_minus: config.alpha_minus,
            step_range: None,
            spans: spans.iter().map(|&(a, b)| (a as u32, b as u32)).collect(),
            cells: mask
                .bits
                .iter()
                .map(|b| if *b { config.alpha_plus } else { config.alpha_minus })
                .collect(),
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.cells[(y * self.width + x) as usize]
    }

    pub fn foreground(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.cells.iter().map(|c| *c == self.alpha_plus).collect(),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == self.alpha_plus).count()
    }

    /// Header (magic, u32 width, height, downsample, f32 alpha_plus,
    /// alpha_minus, u8 step-range flag with optional u32 start/end, u32 span
    /// count and u32 pairs) then f32 cells row-major, all little endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.spans.len() + 4 * self.cells.len());
        out.extend_from_slice(BIAS_MAGIC);
        for v in [self.width, self.height, self.downsample] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.alpha_plus.to_le_bytes());
        out.extend_from_slice(&self.alpha_minus.to_le_bytes());
        match self.step_range {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.start.to_le_bytes());
                out.extend_from_slice(&r.end.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.spans.len() as u32).to_le_bytes());
        for (a, b) in &self.spans {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        for c in &self.cells {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(BIAS_MAGIC)?;
        let width = r.u32()?;
        let height = r.u32()?;
        let downsample = r.u32()?;
        let alpha_plus = r.f32()?;
        let alpha_minus = r.f32()?;
        let step_range = match r.take(1)?[0] {
            0 => None,
            1 => Some(StepRange { start: r.u32()?, end: r.u32()? }),
            f => return Err(Error::Codec(format!("bad step-range flag {f}"))),
        };
        let n_spans = r.u32()? as usize;
        let mut spans = Vec::with_capacity(n_spans.min(1024));
        for _ in 0..n_spans {
            spans.push((r.u32()?, r.u32()?));
        }
        let n = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| Error::Codec("grid dimensions overflow".into()))?;
        let mut cells = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            cells.push(r.f32()?);
        }
        r.finish()?;
        Ok(Self { width, height, downsample, alpha_plus, alpha_minus, step_range, spans, cells })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Codec("truncated artifact".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Codec(format!("expected {} header", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Codec(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Bias grid for one box: alpha_plus on cells whose centers fall inside the
/// downscaled box, alpha_minus elsewhere.
pub fn attention_bias_for(
    bbox: &BBox,
    canvas: Canvas,
    config: &GuidanceConfig,
    spans: &[(usize, usize)],
) -> Result<AttentionBias> {
    if !bbox.fits(canvas) {
        return Err(Error::InvalidInput(format!("box {bbox} exceeds canvas")));
    }
    let (gw, gh) = config.grid_for(canvas)?;
    let mask = box_cells(bbox, canvas, gw, gh);
    if mask.is_empty() {
        return Err(Error::ZeroAreaAtResolution { width: gw, height: gh });
    }
    Ok(AttentionBias::from_mask(&mask, config, spans))
}

/// Bias grid from a pixel mask: a cell is foreground when at least half of
/// its pixels are set.
pub fn edit_guidance_from_mask(
    mask: &Mask,
    canvas: Canvas,
    config: &GuidanceConfig,
    spans: &[(usize, usize)],
) -> Result<AttentionBias> {
    if (mask.width, mask.height) != (canvas.width, canvas.height) {
        return Err(Error::MaskSizeMismatch {
            got_w: mask.width,
            got_h: mask.height,
            want_w: canvas.width,
            want_h: canvas.height,
        });
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (gw, gh) = config.grid_for(canvas)?;
    let ds = config.latent_downsample;
    let mut grid = Mask::new(gw, gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut covered = 0u64;
            for y in gy * ds..(gy + 1) * ds {
                for x in gx * ds..(gx + 1) * ds {
                    covered += u64::from(mask.get(x, y));
                }
            }
            grid.set(gx, gy, 2 * covered >= u64::from(ds) * u64::from(ds));
        }
    }
    Ok(AttentionBias::from_mask(&grid, config, spans))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRegions {
    pub object: usize,
    pub inner: Mask,
    pub outer: Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMasks {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectRegions>,
}

/// Per-object inner (union of its boxes) and outer masks at the requested
/// grid resolution.
pub fn box_constraint_regions(layout: &SceneLayout, width: u32, height: u32) -> RegionMasks {
    let mut objects: Vec<ObjectRegions> = Vec::new();
    for entry in &layout.entries {
        let cells = box_cells(&entry.bbox, layout.canvas, width, height);
        match objects.iter_mut().find(|o| o.object == entry.object_ref) {
            Some(o) => o.inner = o.inner.or(&cells),
            None => objects.push(ObjectRegions {
                object: entry.object_ref,
                inner: cells,
                outer: Mask::new(width, height),
            }),
        }
    }
    for o in &mut objects {
        o.outer = o.inner.complement();
    }
    objects.sort_by_key(|o| o.object);
    RegionMasks { width, height, objects }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!("entry {i} is not finite")));
        }
        Ok(Self { values })
    }
}

/// Element-wise mean with compensated summation.
pub fn average_embeddings(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = vectors.first().ok_or(Error::EmptyInput)?;
    let len = first.values.len();
    if len == 0 {
        return Err(Error::InvalidEmbedding("empty vector".into()));
    }
    for v in vectors {
        if v.values.len() != len {
            return Err(Error::LengthMismatch { expected: len, found: v.values.len() });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite entry".into()));
        }
    }
    let n = vectors.len() as f64;
    let values = (0..len)
        .map(|i| {
            // Neumaier summation keeps the result independent of input order
            // to within one rounding.
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for v in vectors {
                let x = v.values[i];
                let t = sum + x;
                if sum.abs() >= x.abs() {
                    comp += (sum - t) + x;
                } else {
                    comp += (x - t) + sum;
                }
                sum = t;
            }
            (sum + comp) / n
        })
        .collect();
    Ok(EmbeddingVector { values })
}
