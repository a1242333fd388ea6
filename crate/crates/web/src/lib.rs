//! wasm-bindgen bindings for the demo page in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name in
//! [`demo`], which is what the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// A rendered scene ready for a canvas.
#[wasm_bindgen]
pub struct SceneView(demo::SceneView);

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.0.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.0.height
    }

    /// `width * height * 4` bytes, suitable for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }

    /// Flattened `[x1, y1, x2, y2]` per object.
    pub fn boxes(&self) -> Vec<f64> {
        self.0.boxes.clone()
    }

    pub fn classes(&self) -> Vec<u32> {
        self.0.classes.clone()
    }
}

#[wasm_bindgen]
pub fn render_scene(seed: u32, split: &str, id: u32, unshifted: bool) -> Result<SceneView, JsError> {
    demo::render_scene(seed.into(), split, id, unshifted).map(SceneView).map_err(js)
}

#[wasm_bindgen]
pub fn iou(a: Vec<f64>, b: Vec<f64>) -> Result<f64, JsError> {
    demo::iou(&a, &b).map_err(js)
}

#[wasm_bindgen]
pub fn gradcheck(seed: u32, trials: u32) -> Result<String, JsError> {
    demo::gradcheck(seed.into(), trials as usize).map_err(js)
}
