use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DomainStyle;
use super::Schema;
use crate::error::{Error, Result};

pub const MAX_TYPES: usize = 4;
pub const MAX_VARIANTS: usize = 3;
pub const MAX_MAKES: usize = GLYPHS.len();

/// Canonical frame edge length; geometry below is given in these units.
const CANON: f64 = 32.0;
const EMBLEM: usize = 5;

/// One vehicle to render. `model` is derived through the schema bijection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub color: usize,
    pub body_type: usize,
    pub make: usize,
    pub variant: usize,
    /// Translation in pixels, each within ±2.
    pub shift: (f64, f64),
    /// Uniform scale within [0.85, 1.15].
    pub scale: f64,
    /// Per-channel fill jitter within ±8.
    pub color_jitter: [i8; 3],
    /// Seed for background and sensor noise.
    pub noise_seed: u64,
}

impl VehicleSpec {
    /// Draws pose, jitter and noise seed from `rng`; the ids do not influence the draws.
    pub fn sample(color: usize, body_type: usize, make: usize, variant: usize, rng: &mut impl Rng) -> Self {
        Self {
            color,
            body_type,
            make,
            variant,
            shift: (rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)),
            scale: rng.gen_range(0.85..=1.15),
            color_jitter: [rng.gen_range(-8..=8), rng.gen_range(-8..=8), rng.gen_range(-8..=8)],
            noise_seed: rng.gen(),
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let check = |what, id, limit| if id < limit { Ok(()) } else { Err(Error::OutOfRange { what, id, limit }) };
        check("color", self.color, schema.colors)?;
        check("type", self.body_type, schema.types)?;
        check("make", self.make, schema.makes)?;
        check("variant", self.variant, schema.variants)?;
        if self.shift.0.abs() > 2.0 || self.shift.1.abs() > 2.0 || !(0.85..=1.15).contains(&self.scale) {
            return Err(Error::Config(format!("pose out of range: shift {:?}, scale {}", self.shift, self.scale)));
        }
        if self.color_jitter.iter().any(|j| j.abs() > 8) {
            return Err(Error::Config(format!("color jitter {:?} exceeds ±8", self.color_jitter)));
        }
        Ok(())
    }
}

/// Inclusive-exclusive pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Where things landed in a rendered image.
#[derive(Clone, Debug)]
pub struct RenderInfo {
    /// Pixels showing body fill (not trim, emblem or wheels).
    pub body: Vec<bool>,
    pub emblem: PixelBox,
}

/// Base fill for a color id: evenly spaced hues at saturation 0.8, value 200/255.
pub fn base_color(color: usize, colors: usize) -> [f64; 3] {
    let hue = 360.0 * color as f64 / colors as f64;
    let (v, s) = (200.0, 0.8);
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (hue / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple; `None` for grays.
pub fn hue_of(rgb: [f64; 3]) -> Option<f64> {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    let d = max - min;
    if d <= 1e-9 {
        return None;
    }
    let [r, g, b] = rgb;
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(h)
}

type Poly = &'static [(f64, f64)];

/// Body polygons per type family, canonical coordinates.
fn silhouette(body_type: usize) -> &'static [Poly] {
    const SEDAN: &[Poly] = &[
        &[(5.0, 15.0), (27.0, 15.0), (27.0, 22.0), (5.0, 22.0)],
        &[(10.0, 10.0), (21.0, 10.0), (24.0, 15.0), (7.0, 15.0)],
    ];
    const SUV: &[Poly] = &[&[(6.0, 9.0), (24.0, 9.0), (27.0, 13.0), (27.0, 22.0), (6.0, 22.0)]];
    const PICKUP: &[Poly] = &[
        &[(5.0, 9.0), (14.0, 9.0), (16.0, 13.0), (16.0, 22.0), (5.0, 22.0)],
        &[(16.0, 16.0), (28.0, 16.0), (28.0, 22.0), (16.0, 22.0)],
    ];
    const HATCH: &[Poly] = &[
        &[(9.0, 11.0), (20.0, 11.0), (26.0, 16.0), (26.0, 22.0), (6.0, 22.0), (6.0, 14.0)],
    ];
    [SEDAN, SUV, PICKUP, HATCH][body_type]
}

/// Top-left emblem anchor per type family, canonical coordinates.
fn emblem_anchor(body_type: usize) -> (f64, f64) {
    [(19.5, 16.0), (13.5, 11.5), (9.5, 10.0), (15.5, 15.0)][body_type]
}

const WHEELS: [(f64, f64); 2] = [(10.0, 22.5), (22.0, 22.5)];
const WHEEL_RADIUS: f64 = 2.6;

/// 5×5 emblem bitmaps, row-major, `#` is a dark cell.
const GLYPHS: [&str; 12] = [
    "##### #...# #...# #...# #####",
    "#...# .#.#. ..#.. .#.#. #...#",
    "..#.. ..#.. ##### ..#.. ..#..",
    ".###. .###. .###. .###. .###.",
    "##### ..... ..... ..... #####",
    "#.... .#... ..#.. ...#. ....#",
    "#.#.# .#.#. #.#.# .#.#. #.#.#",
    "..... .###. .###. .###. .....",
    "##### ..#.. ..#.. ..#.. ..#..",
    "#.... #.... #.... #.... #####",
    "#...# #...# ##### #...# #...#",
    "..... ..... ##### ..... .....",
];

fn glyph_bit(make: usize, row: usize, col: usize) -> bool {
    GLYPHS[make].split(' ').nth(row).and_then(|r| r.as_bytes().get(col)) == Some(&b'#')
}

fn point_in_poly(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Trim block at the front of the body, canonical coordinates: dark, light, or
/// dark over light. Returns the trim gray level.
fn trim_level(variant: usize, c: (f64, f64)) -> Option<f64> {
    const DARK: f64 = 40.0;
    const LIGHT: f64 = 215.0;
    let (x, y) = c;
    if !(6.0..9.5).contains(&x) || !(15.5..19.5).contains(&y) {
        return None;
    }
    Some(match variant {
        0 => DARK,
        1 => LIGHT,
        _ if y < 17.5 => DARK,
        _ => LIGHT,
    })
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn render_vehicle(spec: &VehicleSpec, schema: &Schema, size: usize, style: &DomainStyle) -> Result<RgbImage> {
    render_vehicle_with_info(spec, schema, size, style).map(|(img, _)| img)
}

/// Renders `spec` deterministically: same inputs, same bytes.
pub fn render_vehicle_with_info(
    spec: &VehicleSpec,
    schema: &Schema,
    size: usize,
    style: &DomainStyle,
) -> Result<(RgbImage, RenderInfo)> {
    spec.validate(schema)?;
    if size < 16 {
        return Err(Error::Config(format!("image size {size} below 16")));
    }
    let unit = size as f64 / CANON;
    let center = size as f64 / 2.0;
    let to_canon = |px: f64, py: f64| {
        let cx = (px - spec.shift.0 - center) / spec.scale / unit + CANON / 2.0;
        let cy = (py - spec.shift.1 - center) / spec.scale / unit + CANON / 2.0;
        (cx, cy)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let base = base_color(spec.color, schema.colors);
    let fill: [f64; 3] = std::array::from_fn(|i| (base[i] + spec.color_jitter[i] as f64) * style.brightness);
    let polys = silhouette(spec.body_type);

    let mut img = RgbImage::new(size as u32, size as u32);
    let mut body = vec![false; size * size];
    for py in 0..size {
        for px in 0..size {
            let c = to_canon(px as f64 + 0.5, py as f64 + 0.5);
            let bg = style.background as f64 + rng.gen_range(-(style.noise as f64)..=style.noise as f64);
            let mut rgb = [bg * style.brightness; 3];
            let on_wheel = WHEELS.iter().any(|&(wx, wy)| (c.0 - wx).powi(2) + (c.1 - wy).powi(2) <= WHEEL_RADIUS.powi(2));
            if polys.iter().any(|poly| point_in_poly(c, poly)) {
                if let Some(level) = trim_level(spec.variant, c) {
                    rgb = [level * style.brightness; 3];
                } else {
                    rgb = fill;
                    body[py * size + px] = true;
                }
            }
            if on_wheel {
                rgb = [28.0 * style.brightness; 3];
                body[py * size + px] = false;
            }
            let grain = style.grain as f64;
            let out: [u8; 3] = std::array::from_fn(|i| clamp_u8(rgb[i] + rng.gen_range(-grain..=grain)));
            img.put_pixel(px as u32, py as u32, Rgb(out));
        }
    }

    // Emblem: fixed 5×5 pixels at the transformed type anchor.
    let (ax, ay) = emblem_anchor(spec.body_type);
    let ex = ((ax - CANON / 2.0) * unit * spec.scale + center + spec.shift.0).round() as usize;
    let ey = ((ay - CANON / 2.0) * unit * spec.scale + center + spec.shift.1).round() as usize;
    let emblem = PixelBox { x0: ex, y0: ey, x1: (ex + EMBLEM).min(size), y1: (ey + EMBLEM).min(size) };
    for row in 0..EMBLEM {
        for col in 0..EMBLEM {
            let (x, y) = (ex + col, ey + row);
            if x >= size || y >= size {
                continue;
            }
            let v = if glyph_bit(spec.make, row, col) { 15.0 } else { 240.0 } * style.brightness;
            img.put_pixel(x as u32, y as u32, Rgb([clamp_u8(v); 3]));
            body[y * size + x] = false;
        }
    }
    Ok((img, RenderInfo { body, emblem }))
}
