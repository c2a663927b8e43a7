//! WebAssembly bindings for the single-page demo in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

use crate::demo::{to_rgba, Demo};

fn js(e: evtex_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct DemoHandle {
    inner: Demo,
}

#[wasm_bindgen]
impl DemoHandle {
    #[wasm_bindgen(constructor)]
    pub fn new() -> DemoHandle {
        DemoHandle { inner: Demo::new() }
    }

    #[wasm_bindgen(getter)]
    pub fn sensor_size(&self) -> usize {
        demo::SENSOR
    }

    #[wasm_bindgen(getter)]
    pub fn texture_size(&self) -> usize {
        demo::TEXTURE
    }

    /// RGBA bytes of a freshly sampled, binarized texture (`temperature <= 0` is hard).
    pub fn texture_preview(&mut self, seed: u32, temperature: f64, spread: f64) -> Result<Vec<u8>, JsError> {
        let t = self.inner.texture_preview(seed as u64, temperature, spread).map_err(js)?;
        Ok(to_rgba(&t.pixels))
    }

    /// RGBA event image of the current texture moving along `trajectory`.
    pub fn simulate(&mut self, scene_seed: u32, trajectory: &str, stripes: bool) -> Result<Vec<u8>, JsError> {
        let img = self.inner.simulate(scene_seed as u64, trajectory, stripes).map_err(js)?;
        Ok(to_rgba(&img))
    }

    #[wasm_bindgen(getter)]
    pub fn event_count(&self) -> f64 {
        self.inner.event_count() as f64
    }

    /// Loads EVDT detector bytes and returns their hash.
    pub fn load_detector(&mut self, bytes: &[u8]) -> Result<String, JsError> {
        self.inner.load_detector(bytes).map_err(js)
    }

    /// Flat `[x0, y0, x1, y1, conf]` records for the last simulated scene.
    pub fn detect(&self, threshold: f64) -> Result<Vec<f64>, JsError> {
        self.inner.detect(threshold).map(|(boxes, _)| boxes).map_err(js)
    }

    /// RGBA event image of the last scene with detection boxes drawn.
    pub fn detect_overlay(&self, threshold: f64) -> Result<Vec<u8>, JsError> {
        self.inner.detect(threshold).map(|(_, img)| to_rgba(&img)).map_err(js)
    }
}

impl Default for DemoHandle {
    fn default() -> Self {
        Self::new()
    }
}
