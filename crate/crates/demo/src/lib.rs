//! Browser bindings: render synthetic clips and probe how the temporal
//! attention window reacts to frame order.

use vidclip::datagen::{gen_video, make_static_video, ClassSpec, Pattern, Shape, DEFAULT_NOISE};
use vidclip::model::{encode_video, init_params, Embedding, ModelConfig, VideoClip};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn class(shape: &str, pattern: &str) -> Result<ClassSpec, JsValue> {
    let s = Shape::from_word(shape).ok_or_else(|| js(format!("unknown shape {shape:?}")))?;
    let p = Pattern::from_word(pattern).ok_or_else(|| js(format!("unknown pattern {pattern:?}")))?;
    Ok(ClassSpec::new(s, p))
}

fn max_abs_diff(a: &Embedding, b: &Embedding) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Frames of one generated clip, row-major `[frames, 16, 16]`, values in [0, 1].
#[wasm_bindgen]
pub fn render_clip(shape: &str, pattern: &str, seed: u32) -> Result<Vec<f32>, JsValue> {
    let (clip, _) = gen_video(class(shape, pattern)?, seed as u64, DEFAULT_NOISE).map_err(js)?;
    Ok(clip.tensor().data().to_vec())
}

/// Side length of a rendered frame.
#[wasm_bindgen]
pub fn frame_size() -> usize {
    vidclip::datagen::FRAME_SIZE
}

/// Largest coordinate gap between window-1 and window-3 embeddings of a
/// clip that repeats the first frame of a generated video. Stays at float
/// round-off for any weights.
#[wasm_bindgen]
pub fn static_clip_gap(seed: u32) -> Result<f64, JsValue> {
    let params = init_params(&ModelConfig::default(), seed as u64).map_err(js)?;
    let (clip, _) = gen_video(ClassSpec::from_id(seed as usize % 16).map_err(js)?, seed as u64, DEFAULT_NOISE).map_err(js)?;
    let first = vidclip::Tensor::new(vec![clip.height(), clip.width()], clip.frame(0).to_vec()).map_err(js)?;
    let still = make_static_video(&first, clip.frames()).map_err(js)?;
    let a = encode_video(&params, &still, 1).map_err(js)?;
    let b = encode_video(&params, &still, 3).map_err(js)?;
    Ok(max_abs_diff(&a, &b))
}

/// How far the embedding moves when the middle two frames are swapped,
/// for window 1 and window 3: `[gap_w1, gap_w3]`.
#[wasm_bindgen]
pub fn order_sensitivity(shape: &str, pattern: &str, seed: u32) -> Result<Vec<f64>, JsValue> {
    let params = init_params(&ModelConfig::default(), seed as u64).map_err(js)?;
    let (clip, _) = gen_video(class(shape, pattern)?, seed as u64, DEFAULT_NOISE).map_err(js)?;
    let swapped: VideoClip = clip.permuted(&[0, 2, 1, 3]).map_err(js)?;
    [1, 3]
        .into_iter()
        .map(|w| {
            let a = encode_video(&params, &clip, w).map_err(js)?;
            let b = encode_video(&params, &swapped, w).map_err(js)?;
            Ok(max_abs_diff(&a, &b))
        })
        .collect()
}
