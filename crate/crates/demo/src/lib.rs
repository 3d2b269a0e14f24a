//! WebAssembly bindings for the static demo page in `www/`.

use genshield_core::evalharness::{perturb, Perturbation};
use genshield_core::inference::timestep_grid;
use genshield_core::toyworld::{
    gen_clean, inject_artifact, render_diagnosis, vocab, ArtifactSpec, Category, GridConfig, Magnitude, Region,
    ToyImage,
};
use wasm_bindgen::prelude::*;

/// Interleaved RGBA bytes, one pixel per grid site.
fn rgba(image: &ToyImage) -> Vec<u8> {
    let byte = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(image.height() * image.width() * 4);
    for i in 0..image.height() {
        for j in 0..image.width() {
            for c in 0..3 {
                out.push(byte(image.get(c.min(image.channels() - 1), i, j)));
            }
            out.push(255);
        }
    }
    out
}

fn grid() -> GridConfig {
    GridConfig::default()
}

#[wasm_bindgen]
pub fn grid_width() -> usize {
    grid().width
}

#[wasm_bindgen]
pub fn grid_height() -> usize {
    grid().height
}

#[wasm_bindgen]
pub struct Injection {
    clean: Vec<u8>,
    corrupted: Vec<u8>,
    diagnosis: String,
}

#[wasm_bindgen]
impl Injection {
    #[wasm_bindgen(getter)]
    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn corrupted(&self) -> Vec<u8> {
        self.corrupted.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn diagnosis(&self) -> String {
        self.diagnosis.clone()
    }
}

/// Render a clean image and the same image with one artifact injected.
/// Category, region and magnitude use their vocabulary words.
#[wasm_bindgen]
pub fn inject(seed: u64, category: &str, region: &str, magnitude: &str) -> Result<Injection, JsError> {
    let spec = ArtifactSpec {
        category: Category::from_word(category).ok_or_else(|| JsError::new("unknown category"))?,
        region: Region::from_word(region).ok_or_else(|| JsError::new("unknown region"))?,
        magnitude: Magnitude::from_word(magnitude).ok_or_else(|| JsError::new("unknown magnitude"))?,
        seed: seed.wrapping_add(1),
    };
    let clean = gen_clean(seed, grid());
    let (corrupted, _) = inject_artifact(&clean, &spec).map_err(|e| JsError::new(&e.to_string()))?;
    let diagnosis = vocab()
        .detokenize(&render_diagnosis(&spec))
        .map_err(|e| JsError::new(&e.to_string()))?;
    Ok(Injection {
        clean: rgba(&clean),
        corrupted: rgba(&corrupted),
        diagnosis,
    })
}

fn parse_perturbation(name: &str) -> Option<Perturbation> {
    match name {
        "none" => Some(Perturbation::None),
        "quantQ16" => Some(Perturbation::Quantize(16)),
        "quantQ8" => Some(Perturbation::Quantize(8)),
        "blur1.0" => Some(Perturbation::Blur(1.0)),
        "blur2.0" => Some(Perturbation::Blur(2.0)),
        "resize0.5" => Some(Perturbation::ResizeHalf),
        _ => None,
    }
}

/// Apply one robustness perturbation to a clean image.
#[wasm_bindgen]
pub fn perturbed(seed: u64, name: &str) -> Result<Vec<u8>, JsError> {
    let p = parse_perturbation(name).ok_or_else(|| JsError::new("unknown perturbation"))?;
    let img = perturb(&gen_clean(seed, grid()), p).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(rgba(&img))
}

/// The `n + 1` Euler grid points after the timestep shift.
#[wasm_bindgen]
pub fn schedule(n_steps: usize, shift: f64) -> Vec<f64> {
    timestep_grid(n_steps, shift)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_have_pixel_layout() {
        let inj = inject(3, "physics", "top_left", "high").unwrap();
        assert_eq!(inj.clean.len(), 64 * 4);
        assert_ne!(inj.clean, inj.corrupted);
        assert!(inj.diagnosis.contains("physics"));
        assert_eq!(perturbed(3, "none").unwrap(), inj.clean);
        assert_eq!(schedule(2, 4.0), vec![0.0, 0.8, 1.0]);
        assert!(parse_perturbation("jpeg").is_none());
    }
}
