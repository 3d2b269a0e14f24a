use super::EvalError;
use crate::toyworld::ToyImage;

/// Input degradations for the robustness table. Uniform quantization
/// stands in for JPEG compression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    None,
    Quantize(u32),
    Blur(f64),
    ResizeHalf,
}

pub const ROBUSTNESS_SET: [Perturbation; 5] = [
    Perturbation::Quantize(16),
    Perturbation::Quantize(8),
    Perturbation::Blur(1.0),
    Perturbation::Blur(2.0),
    Perturbation::ResizeHalf,
];

impl Perturbation {
    pub fn name(&self) -> String {
        match self {
            Perturbation::None => "none".into(),
            Perturbation::Quantize(q) => format!("quantQ{q}"),
            Perturbation::Blur(s) => format!("blur{s:.1}"),
            Perturbation::ResizeHalf => "resize0.5".into(),
        }
    }
}

pub fn perturb(image: &ToyImage, p: Perturbation) -> Result<ToyImage, EvalError> {
    match p {
        Perturbation::None => Ok(image.clone()),
        Perturbation::Quantize(q) => Ok(quantize(image, q)),
        Perturbation::Blur(sigma) => Ok(gaussian_blur(image, sigma)),
        Perturbation::ResizeHalf => resize_half(image),
    }
}

/// Snap to `Q` evenly spaced levels on `[−1, 1]`.
pub fn quantize(image: &ToyImage, q: u32) -> ToyImage {
    let steps = (q.max(2) - 1) as f64;
    image.map(|x| -1.0 + 2.0 * ((x + 1.0) / 2.0 * steps).round() / steps)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable per-channel blur with reflect padding.
pub fn gaussian_blur(image: &ToyImage, sigma: f64) -> ToyImage {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut tmp = image.clone();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = (-r..=r)
                    .map(|d| k[(d + r) as usize] * image.get(ch, i, reflect(j as isize + d, w)))
                    .sum();
                tmp.set(ch, i, j, v);
            }
        }
    }
    let mut out = tmp.clone();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = (-r..=r)
                    .map(|d| k[(d + r) as usize] * tmp.get(ch, reflect(i as isize + d, h), j))
                    .sum();
                out.set(ch, i, j, v);
            }
        }
    }
    out
}

/// 2×2 average pool, then nearest-neighbour upsample to the original size.
pub fn resize_half(image: &ToyImage) -> Result<ToyImage, EvalError> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if h % 2 == 1 || w % 2 == 1 {
        return Err(EvalError::OddSize(h, w));
    }
    let mut out = image.clone();
    for ch in 0..c {
        for bi in (0..h).step_by(2) {
            for bj in (0..w).step_by(2) {
                let avg = (image.get(ch, bi, bj)
                    + image.get(ch, bi, bj + 1)
                    + image.get(ch, bi + 1, bj)
                    + image.get(ch, bi + 1, bj + 1))
                    / 4.0;
                for (i, j) in [(bi, bj), (bi, bj + 1), (bi + 1, bj), (bi + 1, bj + 1)] {
                    out.set(ch, i, j, avg);
                }
            }
        }
    }
    Ok(out)
}
