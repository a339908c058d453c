//! Block-composed person renders.
//!
//! The canvas is an 8 × 4 grid of cells. Row 0 is hair. The two middle
//! columns of rows 2–4 hold the coat and rows 5–6 the lower garment; every
//! other cell is skin whose shade is set by the identity's biometric code
//! (left/right cells of a row share a shade, so the code is mirror
//! symmetric).

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{IdentitySpec, Modality, Outfit};
use crate::instruct::attributes::COLORS;
use crate::tensor::Tensor;

pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 4;
/// Biometric code length.
pub const CODE_LEN: usize = 9;

pub const COAT_STYLES: [&str; 4] = ["jacket", "shirt", "sweater", "t-shirt"];
pub const LOWER_STYLES: [&str; 3] = ["trousers", "shorts trousers", "skirt"];
pub const HAIR: [&str; 3] = ["black hair", "white hair", "yellow hair"];

const HAIR_RGB: [[f32; 3]; 3] = [[0.10, 0.08, 0.07], [0.90, 0.90, 0.88], [0.85, 0.75, 0.30]];
const SKIN: [f32; 3] = [0.80, 0.62, 0.50];
const BARE_LEG: [f32; 3] = [0.64, 0.50, 0.40];
const TEMPLATE_BACKGROUND: f32 = 0.5;

pub fn color_rgb(index: usize) -> [f32; 3] {
    match COLORS[index] {
        "black" => [0.10, 0.10, 0.10],
        "blue" => [0.15, 0.25, 0.80],
        "gray" => [0.50, 0.50, 0.50],
        "green" => [0.15, 0.65, 0.20],
        "purple" => [0.55, 0.20, 0.65],
        "red" => [0.85, 0.15, 0.15],
        "white" => [0.92, 0.92, 0.92],
        _ => [0.90, 0.85, 0.15],
    }
}

/// Pixel rectangle `(y0, y1, x0, x1)` covered by clothes.
pub fn clothes_box(h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (ch, cw) = (h / GRID_ROWS, w / GRID_COLS);
    (2 * ch, 7 * ch, cw, 3 * cw)
}

pub fn in_clothes(y: usize, x: usize, h: usize, w: usize) -> bool {
    let (y0, y1, x0, x1) = clothes_box(h, w);
    (y0..y1).contains(&y) && (x0..x1).contains(&x)
}

/// Code index of a skin cell, `None` for hair and clothes cells.
pub fn code_unit(row: usize, col: usize) -> Option<usize> {
    match (row, col) {
        (0, _) => None,
        (r, 0) | (r, 3) => Some(r - 1),
        (1, _) => Some(7),
        (7, _) => Some(8),
        _ => None,
    }
}

/// Colour of a clothes pixel at `(y, x)` relative to the clothes box of
/// height `bh` and width `bw`.
fn clothes_pixel(o: &Outfit, y: usize, x: usize, bh: usize, bw: usize) -> [f32; 3] {
    let coat_h = bh * 3 / 5;
    if y < coat_h {
        let c = color_rgb(o.coat_color);
        let k = match COAT_STYLES[o.coat_style] {
            "jacket" if x * 8 >= bw * 7 / 2 && x * 8 < bw * 9 / 2 => 0.5,
            "sweater" if (y / 3) % 2 == 1 => 0.75,
            _ => 1.0,
        };
        let lift = COAT_STYLES[o.coat_style] == "t-shirt" && y < coat_h / 6;
        return c.map(|v| if lift { 0.6 * v + 0.4 } else { v * k });
    }
    let ly = y - coat_h;
    let lh = bh - coat_h;
    let covered = match LOWER_STYLES[o.lower_style] {
        "shorts trousers" => ly < lh / 2,
        "skirt" => ly < lh * 3 / 4,
        _ => true,
    };
    if covered {
        color_rgb(o.trousers_color)
    } else {
        BARE_LEG
    }
}

/// Per-camera contrast, brightness and channel gains.
fn camera_jitter(camera: usize) -> (f32, f32, [f32; 3]) {
    let frac = |v: f64| (v - libm::floor(v)) as f32;
    let c = (camera + 1) as f64;
    let contrast = 0.85 + 0.3 * frac(c * 0.618_034);
    let brightness = -0.08 + 0.16 * frac(c * 0.414_214);
    let gains = [
        1.0 + 0.08 * (frac(c * 0.302_775) - 0.5),
        1.0 + 0.08 * (frac(c * 0.732_051) - 0.5),
        1.0 + 0.08 * (frac(c * 0.236_068) - 0.5),
    ];
    (contrast, brightness, gains)
}

/// Renders one sample as `3 × h × w` with values in `[0, 1]`.
pub fn render(
    identity: &IdentitySpec,
    outfit: &Outfit,
    camera: usize,
    modality: Modality,
    noise_seed: u64,
    noise_std: f32,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    let (ch, cw) = (h / GRID_ROWS, w / GRID_COLS);
    let (y0, y1, x0, x1) = clothes_box(h, w);
    let (contrast, brightness, gains) = camera_jitter(camera);
    let mut clean = alloc::vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = if in_clothes(y, x, h, w) {
                clothes_pixel(outfit, y - y0, x - x0, y1 - y0, x1 - x0)
            } else {
                match code_unit(y / ch, x / cw) {
                    None => HAIR_RGB[identity.hair],
                    Some(u) => {
                        let s = 0.35 + 0.65 * identity.code[u];
                        SKIN.map(|v| v * s)
                    }
                }
            };
            for c in 0..3 {
                let v = ((rgb[c] - 0.5) * contrast + 0.5 + brightness) * gains[c];
                clean[c * h * w + y * w + x] = v;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0f32, noise_std.max(0.0)).expect("finite std");
    let mut out = clean;
    match modality {
        Modality::Visible => {
            for v in out.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Modality::Infrared => {
            let plane = h * w;
            for i in 0..plane {
                let m = (out[i] + out[plane + i] + out[2 * plane + i]) / 3.0;
                let v = (m + noise.sample(&mut rng)).clamp(0.0, 1.0);
                for c in 0..3 {
                    out[c * plane + i] = v;
                }
            }
        }
    }
    Tensor::new([3, h, w], out).expect("render shape")
}

/// Nearest-neighbour resize of a `c × h × w` image.
pub fn resize_nearest(img: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let sy = (y * h) / oh;
            for x in 0..ow {
                let sx = (x * w) / ow;
                out.push(d[ch * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::new([c, oh, ow], out).expect("resize shape")
}

/// The clothes box of a rendered image, resized to `th × tw`.
pub fn crop_clothes(img: &Tensor<f32>, th: usize, tw: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (y0, y1, x0, x1) = clothes_box(h, w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * (y1 - y0) * (x1 - x0));
    for ch in 0..c {
        for y in y0..y1 {
            out.extend_from_slice(&d[ch * h * w + y * w + x0..ch * h * w + y * w + x1]);
        }
    }
    let boxed = Tensor::new([c, y1 - y0, x1 - x0], out).expect("crop shape");
    resize_nearest(&boxed, th, tw)
}

/// Canonical clothes image of an outfit: the clothes box of a clean render
/// on a neutral background, resized to `th × tw`.
pub fn outfit_template(outfit: &Outfit, h: usize, w: usize, th: usize, tw: usize) -> Tensor<f32> {
    let (y0, y1, x0, x1) = clothes_box(h, w);
    let (bh, bw) = (y1 - y0, x1 - x0);
    let mut out = alloc::vec![TEMPLATE_BACKGROUND; 3 * bh * bw];
    for y in 0..bh {
        for x in 0..bw {
            let rgb = clothes_pixel(outfit, y, x, bh, bw);
            for c in 0..3 {
                out[c * bh * bw + y * bw + x] = rgb[c];
            }
        }
    }
    let boxed = Tensor::new([3, bh, bw], out).expect("template shape");
    resize_nearest(&boxed, th, tw)
}

/// Mean absolute pixel difference helper used by tests and diagnostics.
pub fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    let n = a.numel() as f32;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f32>()
        / n
}
