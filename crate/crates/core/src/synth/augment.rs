//! Training-time image augmentation: pad-and-crop, horizontal flip and
//! random erasing.

use alloc::vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub crop: bool,
    pub flip: bool,
    pub erase: bool,
    pub pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop: true,
            flip: true,
            erase: true,
            pad: 4,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            crop: false,
            flip: false,
            erase: false,
            ..Self::default()
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip: true,
            ..Self::none()
        }
    }
}

fn dims(img: &Tensor<f32>) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

/// Zero-pads by `pad` on every side, then crops back to the original size at
/// a random offset.
pub fn pad_crop<R: Rng + ?Sized>(img: &Tensor<f32>, pad: usize, rng: &mut R) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let d = img.data();
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[ch * h * w + y * w + x] = d[ch * h * w + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new([c, h, w], out).expect("same shape")
}

pub fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let d = img.data();
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = d[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new([c, h, w], out).expect("same shape")
}

/// Fills one random rectangle with the per-channel image mean. Returns the
/// rectangle `(y0, x0, height, width)` or `None` when no rectangle of the
/// drawn size fits after 100 attempts.
pub fn erase<R: Rng + ?Sized>(
    img: &mut Tensor<f32>,
    area: (f64, f64),
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    let (c, h, w) = dims(img);
    let total = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(area.0..=area.1) * total;
        let log_r = rng.random_range(libm::log(0.3)..=libm::log(1.0 / 0.3));
        let aspect = libm::exp(log_r);
        let eh = libm::round(libm::sqrt(target * aspect)) as usize;
        let ew = libm::round(libm::sqrt(target / aspect)) as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let a = (eh * ew) as f64 / total;
        if a < area.0 || a > area.1 {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        let plane = h * w;
        let d = img.data_mut();
        for ch in 0..c {
            let mean = d[ch * plane..(ch + 1) * plane].iter().sum::<f32>() / plane as f32;
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    d[ch * plane + y * w + x] = mean;
                }
            }
        }
        return Some((y0, x0, eh, ew));
    }
    None
}

pub fn augment<R: Rng + ?Sized>(img: &Tensor<f32>, rng: &mut R, policy: &AugmentPolicy) -> Tensor<f32> {
    let mut out = img.clone();
    if policy.crop {
        out = pad_crop(&out, policy.pad, rng);
    }
    if policy.flip && rng.random_bool(policy.flip_prob.clamp(0.0, 1.0)) {
        out = flip_horizontal(&out);
    }
    if policy.erase && rng.random_bool(policy.erase_prob.clamp(0.0, 1.0)) {
        erase(&mut out, policy.erase_area, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor<f32> {
        Tensor::from_fn([3, 8, 6], |i| (i % 17) as f32 / 17.0)
    }

    #[test]
    fn empty_policy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img(), &mut rng, &AugmentPolicy::none()), img());
    }

    #[test]
    fn flip_is_an_involution() {
        assert_eq!(flip_horizontal(&flip_horizontal(&img())), img());
    }

    #[test]
    fn erase_one_rectangle_of_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Tensor::from_fn([1, 40, 20], |i| ((i * 7919) % 101) as f32 / 101.0);
        let mean = base.data().iter().sum::<f32>() / 800.0;
        let mut e = base.clone();
        let (y0, x0, eh, ew) = erase(&mut e, (0.02, 0.2), &mut rng).unwrap();
        let frac = (eh * ew) as f64 / 800.0;
        assert!((0.02..=0.2).contains(&frac));
        for y in 0..40 {
            for x in 0..20 {
                let inside = (y0..y0 + eh).contains(&y) && (x0..x0 + ew).contains(&x);
                let v = e.data()[y * 20 + x];
                if inside {
                    assert_eq!(v, mean);
                } else {
                    assert_eq!(v, base.data()[y * 20 + x]);
                }
            }
        }
    }
}
