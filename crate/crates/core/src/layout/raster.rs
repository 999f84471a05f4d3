use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::SceneLayout;
use crate::vocab;

/// Layout condition image: black background, one filled rectangle per entry.
pub type ConditionImage = RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteMode {
    /// Color keyed by the caption's head noun.
    #[default]
    Noun,
    /// Color keyed by entry position.
    Entry,
}

/// Fill colors for condition images and uncolored mock objects. None of them
/// is black, the mock background, or a named color.
pub const PALETTE: [[u8; 3]; 24] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 120],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [120, 0, 10],
    [170, 255, 195],
    [128, 128, 10],
    [255, 215, 180],
    [0, 0, 118],
    [200, 200, 200],
    [90, 60, 200],
    [20, 90, 40],
    [200, 80, 120],
    [100, 200, 160],
];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable palette color for a caption, keyed by its normalized head noun.
pub fn palette_color(caption: &str) -> [u8; 3] {
    let noun = vocab::normalize_label(caption);
    PALETTE[(fnv1a(noun.as_bytes()) % PALETTE.len() as u64) as usize]
}

pub fn rasterize(layout: &SceneLayout, mode: PaletteMode) -> ConditionImage {
    let mut img = RgbImage::new(layout.canvas.width, layout.canvas.height);
    for (i, entry) in layout.entries.iter().enumerate() {
        let color = match mode {
            PaletteMode::Noun => palette_color(&entry.caption),
            PaletteMode::Entry => PALETTE[i % PALETTE.len()],
        };
        let b = entry.bbox;
        let x1 = (b.right() as u32).min(layout.canvas.width);
        let y1 = (b.bottom() as u32).min(layout.canvas.height);
        for y in b.y.min(y1)..y1 {
            for x in b.x.min(x1)..x1 {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    img
}
