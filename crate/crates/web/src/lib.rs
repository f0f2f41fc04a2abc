//! WebAssembly bindings for the static demo page in `www/`.

mod session;

pub use session::Session;
use wasm_bindgen::prelude::*;

/// Seeds are `u32` so that JavaScript can pass plain numbers.
#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Demo, JsError> {
        Ok(Demo {
            inner: Session::new(seed.into(), size).map_err(|e| JsError::new(&e))?,
        })
    }

    pub fn width(&self) -> usize {
        self.inner.size().1
    }

    pub fn height(&self) -> usize {
        self.inner.size().0
    }

    pub fn augment(&mut self, seed: u32) -> Result<(), JsError> {
        self.inner.augment(seed.into()).map_err(|e| JsError::new(&e))
    }

    pub fn reset(&mut self) {
        self.inner.reset();
    }

    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<String, JsError> {
        self.inner.load_checkpoint(bytes).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = randomModel)]
    pub fn random_model(&mut self, kind: &str, base_width: usize, seed: u32) -> Result<String, JsError> {
        self.inner.random_model(kind, base_width, seed.into()).map_err(|e| JsError::new(&e))
    }

    /// RGBA pixels, row-major, ready for `ImageData`.
    pub fn image(&self) -> Vec<u8> {
        self.inner.image_rgba()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.inner.mask_rgba()
    }

    pub fn prediction(&self) -> Result<Vec<u8>, JsError> {
        self.inner.prediction_rgba().map_err(|e| JsError::new(&e))
    }

    pub fn uncertainty(&self, samples: usize, seed: u32) -> Result<Vec<u8>, JsError> {
        self.inner.uncertainty_rgba(samples, seed.into()).map_err(|e| JsError::new(&e))
    }

    pub fn saliency(&self, target: &str) -> Result<Vec<u8>, JsError> {
        self.inner.saliency_rgba(target).map_err(|e| JsError::new(&e))
    }
}
