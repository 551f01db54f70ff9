use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-time perturbations for team members.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub flip: bool,
    pub erase: bool,
    pub crop: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip: true, erase: true, crop: true }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, erase: false, crop: false };

    pub fn apply(&self, image: &RgbImage, rng: &mut impl Rng) -> RgbImage {
        let mut out = image.clone();
        if self.flip && rng.gen_bool(0.5) {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if self.crop {
            out = shifted_crop(&out, rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        }
        if self.erase && rng.gen_bool(0.5) {
            erase(&mut out, rng);
        }
        out
    }
}

/// Crop of the edge-padded image offset by `(dx, dy)`; same size as the input.
fn shifted_crop(image: &RgbImage, dx: i32, dy: i32) -> RgbImage {
    let (w, h) = (image.width() as i32, image.height() as i32);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let sx = (x as i32 + dx).clamp(0, w - 1);
        let sy = (y as i32 + dy).clamp(0, h - 1);
        *image.get_pixel(sx as u32, sy as u32)
    })
}

/// Replaces a random rectangle with uniform noise.
fn erase(image: &mut RgbImage, rng: &mut impl Rng) {
    let (w, h) = (image.width(), image.height());
    let ew = rng.gen_range((w / 8).max(1)..=w / 3);
    let eh = rng.gen_range((h / 8).max(1)..=h / 3);
    let x0 = rng.gen_range(0..=w - ew);
    let y0 = rng.gen_range(0..=h - eh);
    for y in y0..y0 + eh {
        for x in x0..x0 + ew {
            image.put_pixel(x, y, Rgb([rng.gen(), rng.gen(), rng.gen()]));
        }
    }
}
