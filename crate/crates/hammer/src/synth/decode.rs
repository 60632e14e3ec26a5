//! Brute-force image decoder: recovers faces (position, identity hue,
//! mouth polarity) and the background scene from pixels alone.
//!
//! On clean renders the recovery is exact, which the manipulation operators
//! rely on; on perturbed images it is statistically robust, which the
//! cross-modal consistency tests rely on.

use crate::types::Image;

use super::render::scene_frequency;
use super::WorldSpec;

/// Minimum saturation for a pixel to count as face material.
const FACE_SATURATION: f64 = 0.35;
/// Components smaller than this are noise, not faces.
const MIN_FACE_PIXELS: usize = 25;

#[derive(Clone, Debug)]
pub struct DetectedFace {
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
    pub identity: usize,
    pub positive: bool,
    pub pixel_count: usize,
    /// Inclusive pixel extent (x_min, y_min, x_max, y_max).
    pub extent: (usize, usize, usize, usize),
    /// Pixel coordinates (row, col) of the component.
    pub pixels: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct DecodedScene {
    /// Sorted by pixel count, largest first.
    pub faces: Vec<DetectedFace>,
    pub scene: usize,
}

impl DecodedScene {
    pub fn largest(&self) -> &DetectedFace {
        &self.faces[0]
    }
}

fn saturation_value(rgb: [f64; 3]) -> (f64, f64) {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
    (sat, max)
}

fn hue_of(rgb: [f64; 3]) -> f64 {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == rgb[0] {
        ((rgb[1] - rgb[2]) / d).rem_euclid(6.0)
    } else if max == rgb[1] {
        (rgb[2] - rgb[0]) / d + 2.0
    } else {
        (rgb[0] - rgb[1]) / d + 4.0
    };
    h / 6.0
}

/// Decode every face and the scene. Returns None when no face is found.
pub fn decode_image(spec: &WorldSpec, image: &Image) -> Option<DecodedScene> {
    let h = image.height;
    let w = image.width;

    // face mask by saturation
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sat, _) = saturation_value(image.pixel(y, x));
            mask[y * w + x] = sat > FACE_SATURATION;
        }
    }

    // 4-connected components
    let mut comp = vec![usize::MAX; h * w];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for start in 0..h * w {
        if !mask[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut pixels = Vec::new();
        let mut queue = vec![start];
        comp[start] = id;
        while let Some(p) = queue.pop() {
            let (y, x) = (p / w, p % w);
            pixels.push((y, x));
            let mut push = |ny: usize, nx: usize| {
                let q = ny * w + nx;
                if mask[q] && comp[q] == usize::MAX {
                    comp[q] = id;
                    queue.push(q);
                }
            };
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < h {
                push(y + 1, x);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < w {
                push(y, x + 1);
            }
        }
        components.push(pixels);
    }
    components.retain(|c| c.len() >= MIN_FACE_PIXELS);
    if components.is_empty() {
        return None;
    }

    let mut faces: Vec<DetectedFace> = components
        .into_iter()
        .map(|pixels| analyze_component(spec, image, pixels))
        .collect();
    faces.sort_by(|a, b| b.pixel_count.cmp(&a.pixel_count));

    let scene = decode_scene(spec, image, &faces);
    Some(DecodedScene { faces, scene })
}

fn analyze_component(spec: &WorldSpec, image: &Image, pixels: Vec<(usize, usize)>) -> DetectedFace {
    let mut x_min = usize::MAX;
    let mut x_max = 0;
    let mut y_min = usize::MAX;
    let mut y_max = 0;
    for &(y, x) in &pixels {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let cx = (x_min + x_max) / 2;
    let cy = (y_min + y_max) / 2;
    let radius = (x_max - x_min) / 2;

    // saturation-weighted circular mean of hue, snapped to the palette
    let (mut sum_cos, mut sum_sin) = (0.0, 0.0);
    for &(y, x) in &pixels {
        let rgb = image.pixel(y, x);
        let (sat, _) = saturation_value(rgb);
        let angle = hue_of(rgb) * std::f64::consts::TAU;
        sum_cos += sat * angle.cos();
        sum_sin += sat * angle.sin();
    }
    let mean_hue = sum_sin.atan2(sum_cos).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
    let identity = (0..spec.n_identities)
        .min_by(|&a, &b| {
            let da = hue_distance(mean_hue, super::render::identity_hue(spec, a));
            let db = hue_distance(mean_hue, super::render::identity_hue(spec, b));
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();

    let positive = decode_polarity(image, cx, cy, radius, y_min, y_max, x_min, x_max);

    DetectedFace {
        cx,
        cy,
        radius,
        identity,
        positive,
        pixel_count: pixels.len(),
        extent: (x_min, y_min, x_max, y_max),
        pixels,
    }
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Mouth polarity from geometry: collect the darkest pixels near the disc
/// center and compare the vertical position of the curve's middle against
/// its ends. A smile bends down (larger y in the middle).
fn decode_polarity(
    image: &Image,
    cx: usize,
    cy: usize,
    radius: usize,
    y_min: usize,
    y_max: usize,
    x_min: usize,
    x_max: usize,
) -> bool {
    let r = radius.max(1) as f64;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            if (dx * dx + dy * dy).sqrt() > 0.92 * r {
                continue;
            }
            let (_, value) = saturation_value(image.pixel(y, x));
            candidates.push((value, y, x));
        }
    }
    if candidates.is_empty() {
        return true;
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let k = ((2.5 * r) as usize).clamp(9, candidates.len());
    let dark = &candidates[..k];

    let mx_min = dark.iter().map(|d| d.2).min().unwrap();
    let mx_max = dark.iter().map(|d| d.2).max().unwrap();
    let span = (mx_max - mx_min).max(1) as f64;
    let (mut mid_sum, mut mid_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for &(_, y, x) in dark {
        let u = (x - mx_min) as f64 / span;
        if (0.3333..=0.6667).contains(&u) {
            mid_sum += y as f64;
            mid_n += 1;
        } else {
            out_sum += y as f64;
            out_n += 1;
        }
    }
    if mid_n == 0 || out_n == 0 {
        return true;
    }
    mid_sum / mid_n as f64 > out_sum / out_n as f64
}

/// Scene from the background stripe frequency: project the column-mean
/// profile of non-face pixels onto each candidate frequency (quadrature,
/// so the result is phase-insensitive) and take the argmax.
fn decode_scene(spec: &WorldSpec, image: &Image, faces: &[DetectedFace]) -> usize {
    let s = spec.image_size;
    let mut in_face = vec![false; s * s];
    for f in faces {
        let (x_min, y_min, x_max, y_max) = f.extent;
        for y in y_min.saturating_sub(2)..=(y_max + 2).min(s - 1) {
            for x in x_min.saturating_sub(2)..=(x_max + 2).min(s - 1) {
                in_face[y * s + x] = true;
            }
        }
    }

    let mut profile = vec![0.0f64; s];
    let mut counts = vec![0usize; s];
    for x in 0..s {
        for y in 0..s {
            if !in_face[y * s + x] {
                let (_, v) = saturation_value(image.pixel(y, x));
                profile[x] += v;
                counts[x] += 1;
            }
        }
    }

    let used: Vec<usize> = (0..s).filter(|&x| counts[x] > 0).collect();
    let mean: f64 =
        used.iter().map(|&x| profile[x] / counts[x] as f64).sum::<f64>() / used.len().max(1) as f64;

    let mut best = (0usize, f64::NEG_INFINITY);
    for scene in 0..spec.n_scenes {
        let freq = scene_frequency(scene);
        let (mut c, mut q) = (0.0, 0.0);
        for &x in &used {
            let v = profile[x] / counts[x] as f64 - mean;
            let angle = std::f64::consts::TAU * freq * (x as f64 + 0.5) / s as f64;
            c += v * angle.cos();
            q += v * angle.sin();
        }
        let energy = c * c + q * q;
        if energy > best.1 {
            best = (scene, energy);
        }
    }
    best.0
}
