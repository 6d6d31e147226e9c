//! Procedural diptychs: a product on a plain backdrop (left) and the same
//! product placed next to a person proxy in a scene (right).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::hsv_to_rgb;
use crate::error::{contract, Result};
use crate::image::{pad_then_resize, BBox, Image};
use crate::spectral::{sobel_seam, DEFAULT_BAND};
use crate::vocab::{CATEGORIES, COLORS, PATTERNS};

/// Side of one square panel of a generated diptych.
pub const PANEL: usize = 64;
/// Side of the square working images.
pub const WORKING: usize = 32;
/// Value written into the masked region of `I_h` (mid-gray on the 8-bit grid).
pub const MASK_FILL: f32 = 128.0 / 255.0;

const GRAIN: f32 = 0.012;
/// Probability that the scene renders a differently colored product.
const HUE_SWAP_PROB: f64 = 0.12;
const OCR_CHAR_ERROR: f64 = 0.01;
const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiptychMeta {
    pub seed: u64,
    pub category: String,
    pub color: String,
    pub pattern: String,
    pub hue_deg: f32,
    /// Hue of the product actually rendered in the scene.
    pub scene_hue_deg: f32,
    /// Product box in working-resolution scene coordinates.
    pub bbox: BBox,
    /// Product box in diptych coordinates, left panel.
    pub product_box: BBox,
    /// Product box in diptych coordinates, right panel.
    pub scene_box: BBox,
    /// First column of the right panel.
    pub seam: usize,
    pub label_text: String,
    /// Label text as read from the product panel (with simulated read errors).
    pub ocr_product: String,
    /// Label text as read from the scene panel.
    pub ocr_scene: String,
}

impl DiptychMeta {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} next to a person",
            self.color, self.pattern, self.category
        )
    }

    pub fn hue_bin(&self) -> usize {
        (self.hue_deg / 30.0) as usize % 12
    }
}

#[derive(Clone, Debug)]
pub struct Diptych {
    pub image: Image,
    pub seam: usize,
    pub meta: DiptychMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Bottle,
    Box,
    Can,
    Tube,
    Bag,
}

impl Category {
    const ALL: [Category; 5] = [
        Category::Bottle,
        Category::Box,
        Category::Can,
        Category::Tube,
        Category::Bag,
    ];

    fn name(self) -> &'static str {
        CATEGORIES[self as usize]
    }

    /// Whether the normalized point `(u, v)` in `[0, 1)²` is on the product.
    /// Every silhouette touches all four sides of its box.
    fn covers(self, u: f32, v: f32) -> bool {
        match self {
            Category::Box | Category::Can => true,
            Category::Bottle => v >= 0.3 || (0.35..0.65).contains(&u),
            Category::Tube => (u - 0.5).abs() <= 0.3 + 0.2 * v,
            Category::Bag => {
                v >= 0.25 || {
                    let r = ((u - 0.5).powi(2) + ((v - 0.25) * 2.0).powi(2)).sqrt();
                    (r - 0.3).abs() < 0.1
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Striped,
    Checkered,
    Dotted,
    Diagonal,
    Wavy,
}

impl Pattern {
    const ALL: [Pattern; 5] = [
        Pattern::Striped,
        Pattern::Checkered,
        Pattern::Dotted,
        Pattern::Diagonal,
        Pattern::Wavy,
    ];

    /// Pattern intensity at normalized `(u, v)` with `k` cycles across the box.
    fn on(self, u: f32, v: f32, k: f32) -> bool {
        let (a, b) = (u * k, v * k);
        match self {
            Pattern::Striped => a.fract() < 0.5,
            Pattern::Checkered => (a.floor() + b.floor()) as i64 % 2 == 0,
            Pattern::Dotted => (a.fract() - 0.5).powi(2) + (b.fract() - 0.5).powi(2) < 0.09,
            Pattern::Diagonal => (a + b).fract() < 0.5,
            Pattern::Wavy => (b + 0.25 * (a * std::f32::consts::TAU).sin()).fract() < 0.5,
        }
    }
}

/// Everything needed to paint one product instance.
struct Product {
    category: Category,
    pattern: Pattern,
    cycles: f32,
    base: [f32; 3],
    ink: [f32; 3],
    text: Vec<u8>,
}

impl Product {
    fn recolored(&self, hue: f32) -> Product {
        Product {
            base: hsv_to_rgb(hue, 0.75, 0.85),
            ink: hsv_to_rgb(hue, 0.9, 0.45),
            text: self.text.clone(),
            ..*self
        }
    }

    /// Color at normalized `(u, v)`, `None` off the silhouette.
    fn color(&self, u: f32, v: f32) -> Option<[f32; 3]> {
        if !self.category.covers(u, v) {
            return None;
        }
        // label band carrying glyph strokes
        if (0.45..0.7).contains(&v) && (0.12..0.88).contains(&u) {
            let lu = (u - 0.12) / 0.76;
            let lv = (v - 0.45) / 0.25;
            let n = self.text.len().max(1) as f32;
            let cell = ((lu * n) as usize).min(self.text.len().saturating_sub(1));
            let cu = (lu * n).fract();
            let gx = ((cu * 4.0) as u32).min(3);
            let gy = ((lv * 6.0) as u32).min(5);
            let lit = gx < 3 && gy < 5 && (glyph(self.text[cell]) >> (gy * 3 + gx)) & 1 != 0;
            return Some(if lit {
                [0.08, 0.08, 0.1]
            } else {
                [0.95, 0.95, 0.92]
            });
        }
        let rim = self.category == Category::Can && !(0.08..0.92).contains(&v);
        if rim {
            return Some([0.7, 0.7, 0.72]);
        }
        Some(if self.pattern.on(u, v, self.cycles) {
            self.ink
        } else {
            self.base
        })
    }

    fn paint(&self, img: &mut Image, b: BBox) {
        let (w, h) = (b.width() as f32, b.height() as f32);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let u = (x - b.x0) as f32 / w + 0.5 / w;
                let v = (y - b.y0) as f32 / h + 0.5 / h;
                if let Some(rgb) = self.color(u, v) {
                    (0..3).for_each(|c| img.set(x, y, c, rgb[c]));
                }
            }
        }
    }
}

/// 3×5 glyph bitmap derived from the character code; never blank.
fn glyph(ch: u8) -> u32 {
    let bits = (ch as u32).wrapping_mul(2_654_435_761) >> 9 & 0x7fff;
    bits | 0b010_000_000_000_010
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=5);
    (0..len)
        .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char)
        .collect()
}

fn misread(text: &str, rng: &mut ChaCha8Rng) -> String {
    text.chars()
        .map(|c| {
            if c != ' ' && rng.gen_bool(OCR_CHAR_ERROR) {
                LETTERS[rng.gen_range(0..LETTERS.len())] as char
            } else {
                c
            }
        })
        .collect()
}

/// Product box in working coordinates with area ratio spread over
/// roughly `[0.03, 0.66]`, kept clear of the panel's left quarter.
fn sample_bbox(rng: &mut ChaCha8Rng) -> BBox {
    let ratio: f64 = rng.gen_range(0.03..0.66);
    let aspect: f64 = rng.gen_range(0.7..2.0);
    let area = ratio * (WORKING * WORKING) as f64;
    let w = ((area / aspect).sqrt().round() as usize).clamp(3, 24);
    let h = ((area / w as f64).round() as usize).clamp(3, 30);
    let x0 = rng.gen_range(8..=WORKING - w);
    let y0 = rng.gen_range(0..=WORKING - h);
    BBox {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

fn scale_box(b: BBox, s: usize, dx: usize) -> BBox {
    BBox {
        x0: b.x0 * s + dx,
        y0: b.y0 * s,
        x1: b.x1 * s + dx,
        y1: b.y1 * s,
    }
}

fn fill_rect(img: &mut Image, x0: isize, y0: isize, x1: isize, y1: isize, rgb: [f32; 3]) {
    for y in y0.max(0)..y1.min(img.height() as isize) {
        for x in x0.max(0)..x1.min(img.width() as isize) {
            (0..3).for_each(|c| img.set(x as usize, y as usize, c, rgb[c]));
        }
    }
}

fn draw_person(
    img: &mut Image,
    cx: isize,
    x_off: isize,
    skin: [f32; 3],
    shirt: [f32; 3],
    legs: [f32; 3],
) {
    let cx = cx + x_off;
    for y in 12..24isize {
        for x in cx - 6..=cx + 6 {
            if (x - cx).pow(2) + (y - 18).pow(2) <= 25 && x >= 0 && (x as usize) < img.width() {
                (0..3).for_each(|c| img.set(x as usize, y as usize, c, skin[c]));
            }
        }
    }
    fill_rect(img, cx - 7, 24, cx + 8, 50, shirt);
    fill_rect(img, cx - 6, 50, cx - 1, 64, legs);
    fill_rect(img, cx + 1, 50, cx + 6, 64, legs);
}

/// Deterministic diptych for `seed`; the seam is always at `W / 2`.
pub fn gen_diptych(seed: u64) -> Diptych {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let category = Category::ALL[rng.gen_range(0..Category::ALL.len())];
    let pattern = Pattern::ALL[rng.gen_range(0..Pattern::ALL.len())];
    let color_idx = rng.gen_range(0..COLORS.len());
    let hue = color_idx as f32 * 30.0;
    let label_text = format!("{} {}", random_word(&mut rng), random_word(&mut rng));
    let product = Product {
        category,
        pattern,
        cycles: rng.gen_range(3..=6) as f32,
        base: [0.0; 3],
        ink: [0.0; 3],
        text: label_text.bytes().filter(|b| *b != b' ').collect(),
    }
    .recolored(hue);
    let scene_hue = if rng.gen_bool(HUE_SWAP_PROB) {
        (hue + rng.gen_range(4..=8) as f32 * 30.0) % 360.0
    } else {
        hue
    };

    let width = 2 * PANEL;
    let mut img = Image::filled(width, PANEL, 3, 0.0);
    // left: near-white backdrop with the product centered in columns 8..48
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.88..0.97));
    fill_rect(&mut img, 0, 0, PANEL as isize, PANEL as isize, tint);
    let bbox = sample_bbox(&mut rng);
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    let fit = (40.0 / bw).min(52.0 / bh);
    let (lw, lh) = ((bw * fit).round() as usize, (bh * fit).round() as usize);
    let product_box = BBox {
        x0: 28 - lw / 2,
        y0: 32 - lh / 2,
        x1: 28 - lw / 2 + lw,
        y1: 32 - lh / 2 + lh,
    };
    product.paint(&mut img, product_box);

    // right: dark vertical gradient, a person proxy, then the product
    let top: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.4));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    for y in 0..PANEL {
        let a = y as f32 / (PANEL - 1) as f32;
        let rgb: [f32; 3] = std::array::from_fn(|c| top[c] * (1.0 - a) + bottom[c] * a);
        fill_rect(
            &mut img,
            PANEL as isize,
            y as isize,
            width as isize,
            y as isize + 1,
            rgb,
        );
    }
    let skin = hsv_to_rgb(
        rng.gen_range(15.0..35.0),
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.55..0.9),
    );
    let shirt = hsv_to_rgb(rng.gen_range(0.0..360.0), 0.5, rng.gen_range(0.35..0.7));
    let legs = hsv_to_rgb(rng.gen_range(200.0..240.0), 0.4, rng.gen_range(0.2..0.4));
    let person_x = rng.gen_range(22..=56);
    draw_person(&mut img, person_x, PANEL as isize, skin, shirt, legs);
    let scene_box = scale_box(bbox, PANEL / WORKING, PANEL);
    product.recolored(scene_hue).paint(&mut img, scene_box);

    // sensor grain, then a one-pixel blended border column at the seam
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-GRAIN..GRAIN)).clamp(0.0, 1.0);
    }
    for y in 0..PANEL {
        for c in 0..3 {
            let blend = 0.5 * (img.get(PANEL - 1, y, c) + img.get(PANEL + 1, y, c));
            img.set(PANEL, y, c, blend);
        }
    }

    let ocr_product = misread(&label_text, &mut rng);
    let ocr_scene = misread(&label_text, &mut rng);
    let meta = DiptychMeta {
        seed,
        category: category.name().to_string(),
        color: COLORS[color_idx].to_string(),
        pattern: PATTERNS[pattern as usize].to_string(),
        hue_deg: hue,
        scene_hue_deg: scene_hue,
        bbox,
        product_box,
        scene_box,
        seam: PANEL,
        label_text,
        ocr_product,
        ocr_scene,
    };
    Diptych {
        image: img,
        seam: PANEL,
        meta,
    }
}

/// Panels of a diptych at working resolution.
#[derive(Clone, Debug)]
pub struct SplitPanels {
    pub product: Image,
    pub scene: Image,
    pub seam: usize,
    /// `(offset_x, offset_y, scale)` from panel pixels to working pixels.
    pub product_map: (f64, f64, f64),
    pub scene_map: (f64, f64, f64),
}

/// Splits at the detected seam and pads-then-resizes both panels to
/// `size × size`, filling padding with [`MASK_FILL`].
pub fn split_diptych(img: &Image, size: usize) -> Result<SplitPanels> {
    let seam = sobel_seam(img, DEFAULT_BAND)?;
    let left = img.crop(0, 0, seam, img.height())?;
    let right = img.crop(seam, 0, img.width() - seam, img.height())?;
    let (product, product_map) = pad_then_resize(&left, size, size, MASK_FILL)?;
    let (scene, scene_map) = pad_then_resize(&right, size, size, MASK_FILL)?;
    Ok(SplitPanels {
        product: product.quantized(),
        scene: scene.quantized(),
        seam,
        product_map,
        scene_map,
    })
}

/// Maps a panel-space box through `(offset_x, offset_y, scale)`, rounding
/// outward and clipping to `size`.
pub fn map_box(b: BBox, map: (f64, f64, f64), size: usize) -> Result<BBox> {
    let (ox, oy, s) = map;
    let lo = |v: usize, o: f64| ((v as f64 * s + o + 1e-9).floor().max(0.0) as usize).min(size);
    let hi = |v: usize, o: f64| ((v as f64 * s + o - 1e-9).ceil().max(0.0) as usize).min(size);
    let out = BBox {
        x0: lo(b.x0, ox),
        y0: lo(b.y0, oy),
        x1: hi(b.x1, ox),
        y1: hi(b.y1, oy),
    };
    if out.area() == 0 {
        return contract(format!("box {b:?} vanishes after mapping"));
    }
    Ok(out)
}

/// Shifts a diptych-space box into the panel starting at column `start`.
pub fn to_panel(b: BBox, start: usize) -> Result<BBox> {
    if b.x0 < start {
        return contract(format!("box {b:?} crosses the split at column {start}"));
    }
    Ok(BBox {
        x0: b.x0 - start,
        x1: b.x1 - start,
        ..b
    })
}
