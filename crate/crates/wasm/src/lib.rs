//! Browser bindings: super-shape preview, randomized scene rendering with
//! annotation overlays, and the class-probability feedback rule.

use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use wasm_bindgen::prelude::*;

use randstream::adapt::{AdaptPolicy, ClassFeedback, update_class_probs};
use randstream::config::parse_scene;
use randstream::producer::FrameSource;
use randstream::render::{FrameBuffers, RenderOptions, draw_boxes, rasterize};
use randstream::scene::{
    Camera, Instance, InstanceKind, Intrinsics, SceneSpec, SuperShapeParams, supershape_mesh,
};

fn to_rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn intrinsics(width: u32, height: u32) -> Intrinsics {
    Intrinsics {
        focal: width as f64 * 450.0 / 640.0,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

/// Renders one super-shape (12 parameters: m, a, b, n1, n2, n3 for the
/// longitude curve, then the latitude curve) as RGBA.
#[wasm_bindgen]
pub fn supershape_preview(
    params: &[f64],
    resolution: usize,
    width: u32,
    height: u32,
    yaw: f64,
    pitch: f64,
) -> Result<Vec<u8>, JsError> {
    let arr: [f64; 12] = params
        .try_into()
        .map_err(|_| JsError::new("expected 12 super-shape parameters"))?;
    let p = SuperShapeParams::from_array(arr);
    p.validate().map_err(|e| JsError::new(&e.to_string()))?;
    if width < 16 || height < 16 {
        return Err(JsError::new("image must be at least 16x16"));
    }
    let mesh = supershape_mesh(&p, resolution.clamp(4, 128), resolution.clamp(4, 128)).normalized(1.0);
    let inst = Instance {
        id: 0,
        kind: InstanceKind::Object { class_id: 0 },
        mesh: Arc::new(mesh),
        rotation: UnitQuaternion::from_euler_angles(0.0, pitch, yaw),
        translation: Vector3::zeros(),
        albedo: [0.35, 0.65, 0.95],
    };
    let camera = Camera::look_at(Vector3::new(0.0, -4.0, 1.5), Vector3::zeros(), 0.0, intrinsics(width, height));
    let scene = SceneSpec {
        instances: vec![inst],
        light_dir: Vector3::new(0.3, -0.6, 0.75).normalize(),
        camera,
        unresolved_overlaps: 0,
        class_probs: Vec::new(),
    };
    let fb: FrameBuffers = rasterize(&scene, &RenderOptions::default());
    Ok(to_rgba(&fb.color))
}

/// One rendered frame of a randomized scene.
#[wasm_bindgen]
pub struct DemoFrame {
    rgba: Vec<u8>,
    annotations: String,
}

#[wasm_bindgen]
impl DemoFrame {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// One `class x_min y_min x_max y_max visibility` line per object.
    #[wasm_bindgen(getter)]
    pub fn annotations(&self) -> String {
        self.annotations.clone()
    }
}

/// Samples and renders frame `frame` of the stream for `seed`, drawing
/// classes with probabilities `class_probs` (one entry per class).
#[wasm_bindgen]
pub fn render_scene(
    seed: u64,
    frame: u32,
    class_probs: &[f64],
    width: u32,
    height: u32,
    overlay: bool,
) -> Result<DemoFrame, JsError> {
    let k = class_probs.len();
    if k == 0 {
        return Err(JsError::new("need at least one class"));
    }
    let probs = class_probs.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
    let text = format!(
        "classes = {k}\nclass_probs = {probs}\nwidth = {width}\nheight = {height}\nfocal = {}\nmesh_res = 24\nframes_per_scene = 1\n",
        width as f64 * 450.0 / 640.0
    );
    let scene = parse_scene("demo", &text).map_err(|e| JsError::new(&e.to_string()))?;
    let mut source = FrameSource::new(0, &scene, seed).map_err(|e| JsError::new(&e.to_string()))?;
    let mut out = source.render_next();
    for _ in 0..frame {
        out = source.render_next();
    }
    let (_, _, fb, ann) = out;
    let mut rgb = fb.color;
    let boxes: Vec<_> = ann.iter().map(|a| a.bbox).collect();
    let cids: Vec<i64> = ann.iter().map(|a| a.class_id as i64).collect();
    if overlay {
        draw_boxes(&mut rgb, width, height, &boxes, &cids);
    }
    let annotations = ann
        .iter()
        .map(|a| {
            let b = a.bbox;
            format!("{} {} {} {} {} {:.3}", a.class_id, b.x_min, b.y_min, b.x_max, b.y_max, a.visibility)
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(DemoFrame {
        rgba: to_rgba(&rgb),
        annotations,
    })
}

/// Class probabilities for per-class scores in [0, 1].
#[wasm_bindgen]
pub fn adapt_probs(scores: &[f64], temperature: f64, floor: f64) -> Result<Vec<f64>, JsError> {
    let pol = AdaptPolicy {
        temperature,
        floor,
        ..AdaptPolicy::default()
    };
    update_class_probs(&ClassFeedback::new(scores.to_vec(), 0), &pol).map_err(|e| JsError::new(&e.to_string()))
}
