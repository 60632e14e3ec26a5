//! Image perturbations applied to half of the generated pool: additive
//! noise, box blur, intensity quantization, and down-up resampling.
//! Annotations are never touched.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::types::Image;

pub fn gaussian_noise(image: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = image.clone();
    for v in &mut out.data {
        *v += dist.sample(rng);
    }
    out
}

/// Box blur with replicate padding at the borders.
pub fn box_blur(image: &Image, k: usize) -> Image {
    assert!(k % 2 == 1, "kernel must be odd");
    let half = (k / 2) as i64;
    let mut out = Image::new(image.height, image.width);
    let norm = 1.0 / (k * k) as f64;
    for y in 0..image.height {
        for x in 0..image.width {
            let mut acc = [0.0f64; 3];
            for dy in -half..=half {
                for dx in -half..=half {
                    let sy = (y as i64 + dy).clamp(0, image.height as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, image.width as i64 - 1) as usize;
                    let p = image.pixel(sy, sx);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                }
            }
            out.set_pixel(y, x, [acc[0] * norm, acc[1] * norm, acc[2] * norm]);
        }
    }
    out
}

/// Snap intensities to `levels` evenly spaced values in [0,1].
pub fn quantize_levels(image: &Image, levels: usize) -> Image {
    assert!(levels >= 2);
    let steps = (levels - 1) as f64;
    let mut out = image.clone();
    for v in &mut out.data {
        *v = (*v * steps).round() / steps;
    }
    out
}

/// Halve the resolution by 2x2 averaging, then upsample back with nearest
/// neighbor. Odd dimensions are left untouched.
pub fn down_up(image: &Image) -> Image {
    if image.height % 2 != 0 || image.width % 2 != 0 {
        return image.clone();
    }
    let mut out = Image::new(image.height, image.width);
    for y in (0..image.height).step_by(2) {
        for x in (0..image.width).step_by(2) {
            let mut acc = [0.0f64; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = image.pixel(y + dy, x + dx);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                }
            }
            let avg = [acc[0] / 4.0, acc[1] / 4.0, acc[2] / 4.0];
            for dy in 0..2 {
                for dx in 0..2 {
                    out.set_pixel(y + dy, x + dx, avg);
                }
            }
        }
    }
    out
}

fn clip01(image: &mut Image) {
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Apply one or two randomly chosen perturbations with seeded parameters.
pub fn perturb(image: &Image, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = [0usize, 1, 2, 3];
    ops.shuffle(&mut rng);
    let n = rng.gen_range(1..=2usize);
    let mut out = image.clone();
    for &op in ops.iter().take(n) {
        out = match op {
            0 => {
                let sigma = rng.gen_range(0.01..=0.05);
                gaussian_noise(&out, sigma, &mut rng)
            }
            1 => {
                let k = if rng.gen_bool(0.5) { 3 } else { 5 };
                box_blur(&out, k)
            }
            2 => {
                let levels = rng.gen_range(16..=64usize);
                quantize_levels(&out, levels)
            }
            _ => down_up(&out),
        };
    }
    clip01(&mut out);
    out
}

/// Mean absolute 4-neighbor Laplacian: a simple high-frequency energy proxy.
pub fn laplacian_energy(image: &Image) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 1..image.height - 1 {
        for x in 1..image.width - 1 {
            for c in 0..3 {
                let lap = 4.0 * image.get(y, x, c)
                    - image.get(y - 1, x, c)
                    - image.get(y + 1, x, c)
                    - image.get(y, x - 1, c)
                    - image.get(y, x + 1, c);
                total += lap.abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render::{render, FacePatch, SceneSpec};
    use crate::synth::WorldSpec;

    fn sample_image() -> Image {
        let spec = WorldSpec::default();
        let scene = SceneSpec {
            scene: 3,
            faces: vec![FacePatch { cx: 30, cy: 30, radius: 10, identity: 1, positive: true }],
        };
        render(&spec, &scene)
    }

    #[test]
    fn quantize_256_is_identity_on_u8_grid() {
        let mut img = sample_image();
        img.quantize_u8();
        let q = quantize_levels(&img, 256);
        assert_eq!(q, img);
    }

    #[test]
    fn perturb_output_stays_in_unit_range() {
        let img = sample_image();
        for seed in 0..40 {
            let p = perturb(&img, seed);
            assert!(p.data.iter().all(|v| (0.0..=1.0).contains(v)), "seed {seed}");
        }
    }

    #[test]
    fn blur_reduces_high_frequency_energy() {
        // Oracle: mean absolute Laplacian must drop under any box blur.
        let img = sample_image();
        let base = laplacian_energy(&img);
        for k in [3, 5] {
            let blurred = box_blur(&img, k);
            let e = laplacian_energy(&blurred);
            assert!(e < base, "k={k}: {e} !< {base}");
        }
    }

    #[test]
    fn perturb_is_deterministic_in_seed() {
        let img = sample_image();
        assert_eq!(perturb(&img, 9), perturb(&img, 9));
    }
}
