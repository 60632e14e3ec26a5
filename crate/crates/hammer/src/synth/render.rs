//! Deterministic rendering of the synthetic news world.
//!
//! Semantics are painted, not learned: identity is the face hue, emotion is
//! the mouth curve, scene is the background stripe frequency. Each of these
//! has a closed-form inverse in `decode`, which is what makes ground-truth
//! tests possible.

use crate::types::{BBox, Image};

use super::WorldSpec;

/// Background gray level at column `x` for a given scene: a vertical stripe
/// pattern whose spatial frequency identifies the scene.
pub fn background_value(spec: &WorldSpec, scene: usize, x: usize) -> f64 {
    let freq = scene_frequency(scene);
    let phase = 2.0 * std::f64::consts::PI * freq * (x as f64 + 0.5) / spec.image_size as f64;
    BG_BASE + BG_AMP * phase.sin()
}

/// Stripe frequency (cycles per image width) for a scene index.
pub fn scene_frequency(scene: usize) -> f64 {
    (scene + 2) as f64
}

pub const BG_BASE: f64 = 0.55;
pub const BG_AMP: f64 = 0.12;
/// Gray level of the mouth glyph.
pub const MOUTH_VALUE: f64 = 0.08;

/// One rendered face: a hue-filled disc with a mouth-curve glyph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FacePatch {
    /// Disc center in pixels.
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
    pub identity: usize,
    /// true = positive emotion (smile), false = negative (frown).
    pub positive: bool,
}

impl FacePatch {
    /// Tight pixel box around the disc, normalized to [0,1].
    pub fn bbox(&self, image_size: usize) -> BBox {
        let s = image_size as f64;
        BBox::new(
            (self.cx - self.radius) as f64 / s,
            (self.cy - self.radius) as f64 / s,
            (self.cx + self.radius + 1) as f64 / s,
            (self.cy + self.radius + 1) as f64 / s,
        )
    }
}

/// Full latent description of one image.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub scene: usize,
    /// faces[0] is the subject: the strictly largest face.
    pub faces: Vec<FacePatch>,
}

/// Saturated RGB for an identity hue. Hues are evenly spaced on the wheel so
/// nearest-hue decoding has maximal margin.
pub fn identity_rgb(spec: &WorldSpec, identity: usize) -> [f64; 3] {
    let hue = identity_hue(spec, identity);
    hsv_to_rgb(hue, 1.0, 1.0)
}

pub fn identity_hue(spec: &WorldSpec, identity: usize) -> f64 {
    identity as f64 / spec.n_identities as f64
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Pixels of the mouth glyph for a face: a thick parabola bending down for
/// a smile and up for a frown. Pixels are clipped to an interior radius so
/// a saturated ring of the disc always survives around the glyph, keeping
/// the face one connected component.
pub fn mouth_pixels(face: &FacePatch) -> Vec<(usize, usize)> {
    let r = face.radius as f64;
    let half_width = (0.55 * r).round() as i64;
    let base = (0.12 * r).round() as i64;
    let depth = (0.32 * r).round().max(2.0);
    let thickness = ((r / 3.5).round() as i64).max(3);
    let max_dist2 = (r - 2.2) * (r - 2.2);

    let mut out = Vec::new();
    for dx in -half_width..=half_width {
        let u = dx as f64 / half_width.max(1) as f64;
        // smile: middle of the curve sits lower (larger y) than the ends
        let offset = if face.positive { depth * (1.0 - u * u) } else { depth * u * u };
        let yc = face.cy as i64 + base + offset.round() as i64;
        for t in 0..thickness {
            let y = yc + t - thickness / 2;
            let x = face.cx as i64 + dx;
            let dy = y - face.cy as i64;
            if y >= 0 && x >= 0 && ((dx * dx + dy * dy) as f64) <= max_dist2 {
                out.push((y as usize, x as usize));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn draw_face(spec: &WorldSpec, image: &mut Image, face: &FacePatch) {
    let rgb = identity_rgb(spec, face.identity);
    let r = face.radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let y = face.cy as i64 + dy;
                let x = face.cx as i64 + dx;
                if y >= 0 && x >= 0 && (y as usize) < image.height && (x as usize) < image.width {
                    image.set_pixel(y as usize, x as usize, rgb);
                }
            }
        }
    }
    let mouth = [MOUTH_VALUE; 3];
    for (y, x) in mouth_pixels(face) {
        if y < image.height && x < image.width {
            image.set_pixel(y, x, mouth);
        }
    }
}

pub fn render(spec: &WorldSpec, scene: &SceneSpec) -> Image {
    let s = spec.image_size;
    let mut image = Image::new(s, s);
    for x in 0..s {
        let v = background_value(spec, scene.scene, x);
        for y in 0..s {
            image.set_pixel(y, x, [v, v, v]);
        }
    }
    for face in &scene.faces {
        draw_face(spec, &mut image, face);
    }
    image
}
