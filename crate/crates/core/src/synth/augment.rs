use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameSample;
use crate::boxes::BBox;

/// Colour jitter, resize about the image centre and horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Maximum relative change of brightness, contrast and saturation.
    pub jitter: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter: 0.2,
            scale_min: 0.8,
            scale_max: 1.2,
            flip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            jitter: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip_prob: 1.0,
            ..Self::identity()
        }
    }
}

fn jitter(img: &RgbImage, b: f64, c: f64, s: f64) -> RgbImage {
    let n = (img.width() * img.height()) as f64;
    let mean = img
        .pixels()
        .map(|p| (p.0[0] as f64 * 0.299 + p.0[1] as f64 * 0.587 + p.0[2] as f64 * 0.114) / 255.0)
        .sum::<f64>()
        / n;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let rgb = p.0.map(|v| v as f64 / 255.0 * b);
        let grey = rgb[0] * 0.299 + rgb[1] * 0.587 + rgb[2] * 0.114;
        p.0 = rgb.map(|v| {
            let v = grey + (v - grey) * s;
            let v = mean + (v - mean) * c;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
    }
    out
}

/// Content scaled by `s` about the centre; nearest-neighbour sampling, border filled with edge pixels.
fn resize_about_centre(img: &RgbImage, s: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    RgbImage::from_fn(w, h, |x, y| {
        let sx = (x as f64 + 0.5 - cx) / s + cx;
        let sy = (y as f64 + 0.5 - cy) / s + cy;
        let ix = (sx.floor() as i64).clamp(0, w as i64 - 1) as u32;
        let iy = (sy.floor() as i64).clamp(0, h as i64 - 1) as u32;
        *img.get_pixel(ix, iy)
    })
}

fn hflip(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| *img.get_pixel(w - 1 - x, y))
}

/// Applies one random draw of `policy` consistently to every view's image,
/// boxes and camera. The point cloud is left untouched.
pub fn augment(sample: &FrameSample, policy: &AugmentPolicy, seed: u64) -> FrameSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = policy.jitter;
    let (b, c, s) = if j > 0.0 {
        (rng.gen_range(1.0 - j..=1.0 + j), rng.gen_range(1.0 - j..=1.0 + j), rng.gen_range(1.0 - j..=1.0 + j))
    } else {
        (1.0, 1.0, 1.0)
    };
    let scale = if policy.scale_max > policy.scale_min {
        rng.gen_range(policy.scale_min..=policy.scale_max)
    } else {
        policy.scale_min
    };
    let flip = policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob.min(1.0));

    let mut out = sample.clone();
    for (view, img) in out.images.iter_mut() {
        let mut im = if j > 0.0 { jitter(img, b, c, s) } else { img.clone() };
        let cam = out.cameras.get_mut(view).expect("camera for every view");
        let (h, w) = cam.image_size;
        if scale != 1.0 {
            im = resize_about_centre(&im, scale);
            let (tx, ty) = ((1.0 - scale) * w as f64 / 2.0, (1.0 - scale) * h as f64 / 2.0);
            *cam = cam.compose_pixel_transform([[scale, 0.0, tx], [0.0, scale, ty], [0.0, 0.0, 1.0]]);
        }
        if flip {
            im = hflip(&im);
            *cam = cam.compose_pixel_transform([[-1.0, 0.0, w as f64], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        }
        *img = im;
    }
    if scale != 1.0 || flip {
        let map = |b: BBox| -> Option<BBox> {
            let mut b = b;
            if scale != 1.0 {
                let f = |v: f64| scale * (v - 0.5) + 0.5;
                b = BBox::new(f(b.x1), f(b.y1), f(b.x2), f(b.y2)).clamped();
            }
            if flip {
                b = b.hflip();
            }
            let b = b.rounded6();
            (b.width() > 0.0 && b.height() > 0.0).then_some(b)
        };
        out.graph.retain_boxes(map);
    }
    out
}
