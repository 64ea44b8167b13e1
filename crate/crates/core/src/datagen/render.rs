use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetRecord, ImageSource};
use crate::error::{Error, Result};
use crate::netcore::Tensor;
use crate::scalar::Scalar;

/// Renders a scene: a noisy shaded backdrop with a few grey distractor
/// patches, and each annotated object as a striped rectangle whose hue and
/// stripe direction depend on its class.
pub fn render_synthetic(record: &DatasetRecord, num_classes: usize, seed: u64) -> RgbImage {
    let (w, h) = (record.width, record.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let mut px: Vec<[f64; 3]> = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            px.push(std::array::from_fn(|c| {
                base[c] + gx[c] * fx + gy[c] * fy + rng.random_range(-0.08..0.08)
            }));
        }
    }
    let fill = |px: &mut Vec<[f64; 3]>, x0: u32, y0: u32, x1: u32, y1: u32, f: &mut dyn FnMut(u32, u32, &mut [f64; 3])| {
        for y in y0.min(h)..y1.min(h) {
            for x in x0.min(w)..x1.min(w) {
                f(x, y, &mut px[(y * w + x) as usize]);
            }
        }
    };
    for _ in 0..2 {
        let sw = rng.random_range(w / 20 + 1..=w / 5 + 1);
        let sh = rng.random_range(h / 20 + 1..=h / 5 + 1);
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let g = rng.random_range(-0.12..0.12);
        fill(&mut px, x0, y0, x0 + sw, y0 + sh, &mut |_, _, p| {
            let m = (p[0] + p[1] + p[2]) / 3.0 + g;
            *p = [m; 3];
        });
    }
    for (ann, gt) in record.annotations.iter().zip(&record.ground_truths) {
        let color = class_color(gt.class_id, num_classes);
        let gain = rng.random_range(0.85..1.1);
        let vertical = gt.class_id % 2 == 1;
        let [ax0, ay0, ax1, ay1] = ann.corners;
        let (x0, y0) = (ax0.floor().max(0.0) as u32, ay0.floor().max(0.0) as u32);
        let (x1, y1) = (ax1.ceil().max(0.0) as u32, ay1.ceil().max(0.0) as u32);
        let mut noise = ChaCha8Rng::seed_from_u64(rng.random());
        fill(&mut px, x0, y0, x1, y1, &mut |x, y, p| {
            let border = x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1;
            let phase = if vertical { x } else { y };
            let stripe = if (phase / 2) % 2 == 0 { 0.12 } else { -0.12 };
            for c in 0..3 {
                let v = color[c] * gain + stripe + noise.random_range(-0.05..0.05);
                p[c] = if border { v * 0.5 } else { v };
            }
        });
    }
    let mut img = RgbImage::new(w, h);
    for (i, p) in px.iter().enumerate() {
        let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        img.put_pixel(i as u32 % w, i as u32 / w, Rgb(q));
    }
    img
}

/// Saturated colour spread evenly around the hue circle by class.
fn class_color(class_id: usize, num_classes: usize) -> [f64; 3] {
    let hue = 6.0 * class_id as f64 / num_classes.max(1) as f64;
    let (s, v) = (0.75, 0.8);
    let c = s * v;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Pixels of a record: decoded from disk or rendered.
pub fn load_image(record: &DatasetRecord, base_dir: &Path, num_classes: usize) -> Result<RgbImage> {
    match &record.source {
        ImageSource::Synthetic { seed } => Ok(render_synthetic(record, num_classes, *seed)),
        ImageSource::Path(p) => {
            let path = base_dir.join(p);
            let img = image::open(&path).map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(img.to_rgb8())
        }
    }
}

/// `[3, size, size]` tensor with values in `[0, 1]`, resampled when the
/// image is not already `size × size`. Row 0 is the top of the image.
pub fn image_tensor<T: Scalar>(img: &RgbImage, size: usize) -> Tensor<T> {
    let s = size as u32;
    let resized;
    let img = if img.width() == s && img.height() == s {
        img
    } else {
        resized = image::imageops::resize(img, s, s, FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = T::lit(p.0[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("shape")
}
