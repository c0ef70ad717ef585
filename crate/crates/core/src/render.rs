//! Off-screen software rasterization and annotation.
//!
//! Triangles are clipped against a near plane, projected with the scene
//! camera and filled with a z-buffer (nearest fragment wins, first drawn wins
//! on exact ties, no back-face culling). Shading is Lambertian with a
//! constant ambient term. Annotations come from the instance-id buffer: a box
//! around each object's visible pixels and a visibility score equal to the
//! visible pixel count over the pixel count of the object rendered alone.

use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::eval::BBox;
use crate::scene::{Camera, Instance, SceneSpec};
use crate::wire::{Message, Tensor, Value, WireError};

const NEAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxMode {
    /// Bounds of the pixels where the object is frontmost.
    Visible,
    /// Bounds of the object's pixels when rendered alone.
    Amodal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub background: [u8; 3],
    pub ambient: f64,
    /// Objects below this visibility are left out of the annotations.
    pub min_visibility: f64,
    pub box_mode: BoxMode,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [40, 40, 40],
            ambient: 0.2,
            min_visibility: 0.05,
            box_mode: BoxMode::Visible,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuffers {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB.
    pub color: Vec<u8>,
    /// Camera-space depth, `+inf` where empty.
    pub depth: Vec<f32>,
    /// Instance id per pixel, -1 where empty.
    pub ids: Vec<i64>,
}

impl FrameBuffers {
    pub fn id_at(&self, x: u32, y: u32) -> i64 {
        self.ids[(y * self.width + x) as usize]
    }
}

/// Screen-space vertex: pixel coordinates, inverse depth and the world
/// normal divided by depth (for perspective-correct interpolation).
#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
    n_over_z: Vector3<f64>,
}

struct ClipVertex {
    pos: Vector3<f64>,
    normal: Vector3<f64>,
}

fn lerp_clip(a: &ClipVertex, b: &ClipVertex) -> ClipVertex {
    let t = (NEAR - a.pos.z) / (b.pos.z - a.pos.z);
    ClipVertex {
        pos: a.pos + (b.pos - a.pos) * t,
        normal: a.normal + (b.normal - a.normal) * t,
    }
}

/// Sutherland-Hodgman against the plane z = NEAR. Returns 0, 3 or 4 vertices.
fn clip_near(tri: [ClipVertex; 3]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = &tri[i];
        let b = &tri[(i + 1) % 3];
        let a_in = a.pos.z >= NEAR;
        let b_in = b.pos.z >= NEAR;
        if a_in {
            out.push(ClipVertex {
                pos: a.pos,
                normal: a.normal,
            });
        }
        if a_in != b_in {
            out.push(lerp_clip(a, b));
        }
    }
    out
}

fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Calls `frag(x, y, depth, normal)` for every pixel centre covered by the
/// instance's triangles.
fn for_each_fragment<F>(cam: &Camera, inst: &Instance, mut frag: F)
where
    F: FnMut(u32, u32, f64, Vector3<f64>),
{
    let k = cam.intrinsics;
    let (w, h) = (k.width as i64, k.height as i64);
    let cam_pts: Vec<Vector3<f64>> = inst.world_vertices().iter().map(|p| cam.to_camera(p)).collect();
    let normals = inst.world_normals();

    for tri in &inst.mesh.indices {
        let [i0, i1, i2] = tri.map(|i| i as usize);
        if cam_pts[i0].z < NEAR && cam_pts[i1].z < NEAR && cam_pts[i2].z < NEAR {
            continue;
        }
        let poly = clip_near([i0, i1, i2].map(|i| ClipVertex {
            pos: cam_pts[i],
            normal: normals[i],
        }));
        if poly.len() < 3 {
            continue;
        }
        let sv: Vec<ScreenVertex> = poly
            .iter()
            .map(|c| {
                let inv_z = 1.0 / c.pos.z;
                ScreenVertex {
                    x: k.focal * c.pos.x * inv_z + k.cx,
                    y: k.focal * c.pos.y * inv_z + k.cy,
                    inv_z,
                    n_over_z: c.normal * inv_z,
                }
            })
            .collect();
        for j in 1..sv.len() - 1 {
            let (a, b, c) = (sv[0], sv[j], sv[j + 1]);
            let area = edge(a.x, a.y, b.x, b.y, c.x, c.y);
            if area.abs() < 1e-12 || !area.is_finite() {
                continue;
            }
            let min_x = a.x.min(b.x).min(c.x);
            let max_x = a.x.max(b.x).max(c.x);
            let min_y = a.y.min(b.y).min(c.y);
            let max_y = a.y.max(b.y).max(c.y);
            let x0 = ((min_x - 0.5).ceil() as i64).max(0);
            let x1 = ((max_x - 0.5).floor() as i64).min(w - 1);
            let y0 = ((min_y - 0.5).ceil() as i64).max(0);
            let y1 = ((max_y - 0.5).floor() as i64).min(h - 1);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let inv_area = 1.0 / area;
            for py in y0..=y1 {
                let fy = py as f64 + 0.5;
                for px in x0..=x1 {
                    let fx = px as f64 + 0.5;
                    let w0 = edge(b.x, b.y, c.x, c.y, fx, fy) * inv_area;
                    let w1 = edge(c.x, c.y, a.x, a.y, fx, fy) * inv_area;
                    let w2 = edge(a.x, a.y, b.x, b.y, fx, fy) * inv_area;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let inv_z = w0 * a.inv_z + w1 * b.inv_z + w2 * c.inv_z;
                    if inv_z <= 0.0 {
                        continue;
                    }
                    let depth = 1.0 / inv_z;
                    let normal = (a.n_over_z * w0 + b.n_over_z * w1 + c.n_over_z * w2) * depth;
                    frag(px as u32, py as u32, depth, normal);
                }
            }
        }
    }
}

fn shade(albedo: [f64; 3], normal: Vector3<f64>, light: &Vector3<f64>, ambient: f64) -> [u8; 3] {
    let n = normal.try_normalize(1e-12).unwrap_or_else(Vector3::zeros);
    let k = ambient + n.dot(light).max(0.0) * (1.0 - ambient);
    albedo.map(|a| (a * k * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn rasterize(scene: &SceneSpec, opts: &RenderOptions) -> FrameBuffers {
    let k = scene.camera.intrinsics;
    let n = (k.width * k.height) as usize;
    let mut color = Vec::with_capacity(n * 3);
    for _ in 0..n {
        color.extend_from_slice(&opts.background);
    }
    let mut depth = vec![f64::INFINITY; n];
    let mut ids = vec![-1i64; n];
    let light = scene
        .light_dir
        .try_normalize(1e-12)
        .unwrap_or_else(Vector3::z);

    for inst in &scene.instances {
        for_each_fragment(&scene.camera, inst, |x, y, z, normal| {
            let idx = (y * k.width + x) as usize;
            if z < depth[idx] {
                depth[idx] = z;
                ids[idx] = inst.id as i64;
                let rgb = shade(inst.albedo, normal, &light, opts.ambient);
                color[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
            }
        });
    }
    FrameBuffers {
        width: k.width,
        height: k.height,
        color,
        depth: depth.into_iter().map(|d| d as f32).collect(),
        ids,
    }
}

/// Pixel mask of `inst` rendered alone with `cam`.
pub fn solo_coverage(cam: &Camera, inst: &Instance) -> Vec<bool> {
    let k = cam.intrinsics;
    let mut mask = vec![false; (k.width * k.height) as usize];
    for_each_fragment(cam, inst, |x, y, _, _| {
        mask[(y * k.width + x) as usize] = true;
    });
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub instance_id: u32,
    pub class_id: u32,
    pub bbox: BBox,
    pub visibility: f64,
    pub visible_pixels: u64,
    pub solo_pixels: u64,
}

#[derive(Debug, Default)]
struct PixelBounds {
    count: u64,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl PixelBounds {
    fn add(&mut self, x: u32, y: u32) {
        if self.count == 0 {
            (self.x0, self.y0, self.x1, self.y1) = (x, y, x, y);
        } else {
            self.x0 = self.x0.min(x);
            self.y0 = self.y0.min(y);
            self.x1 = self.x1.max(x);
            self.y1 = self.y1.max(y);
        }
        self.count += 1;
    }

    /// Box in pixel-edge coordinates: pixel (x, y) spans [x, x+1) x [y, y+1).
    fn bbox(&self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, (self.x1 + 1) as f64, (self.y1 + 1) as f64)
    }
}

/// Boxes, class ids and visibility for every non-occluder instance with at
/// least one solo pixel and visibility at or above `opts.min_visibility`.
pub fn annotate(scene: &SceneSpec, fb: &FrameBuffers, opts: &RenderOptions) -> Vec<ObjectAnnotation> {
    let w = fb.width;
    let mut out = Vec::new();
    for inst in &scene.instances {
        let Some(class_id) = inst.class_id() else {
            continue;
        };
        let mut visible = PixelBounds::default();
        for (i, &id) in fb.ids.iter().enumerate() {
            if id == inst.id as i64 {
                visible.add(i as u32 % w, i as u32 / w);
            }
        }
        let mut solo = PixelBounds::default();
        for (i, &hit) in solo_coverage(&scene.camera, inst).iter().enumerate() {
            if hit {
                solo.add(i as u32 % w, i as u32 / w);
            }
        }
        if solo.count == 0 || visible.count == 0 {
            continue;
        }
        let visibility = (visible.count as f64 / solo.count as f64).min(1.0);
        if visibility < opts.min_visibility {
            continue;
        }
        let bbox = match opts.box_mode {
            BoxMode::Visible => visible.bbox(),
            BoxMode::Amodal => solo.bbox(),
        };
        out.push(ObjectAnnotation {
            instance_id: inst.id,
            class_id,
            bbox,
            visibility,
            visible_pixels: visible.count,
            solo_pixels: solo.count,
        });
    }
    out
}

/// Builds the published frame: `btid`, `frame`, `image` (u8 HxWx3),
/// `bboxes` (f32 nx4), `cids` (i64 n), `vis` (f32 n) and `class_probs`
/// (f32 K, the probabilities the scene was drawn with).
pub fn emit_frame(
    btid: u64,
    frame: u64,
    scene: &SceneSpec,
    fb: &FrameBuffers,
    ann: &[ObjectAnnotation],
) -> Result<Message, WireError> {
    let mut m = Message::with_header(btid, frame);
    m.insert(
        "image",
        Value::Tensor(Tensor::from_u8(vec![fb.height, fb.width, 3], fb.color.clone())?),
    );
    let n = ann.len() as u32;
    let boxes: Vec<f32> = ann
        .iter()
        .flat_map(|a| a.bbox.to_array().map(|v| v as f32))
        .collect();
    m.insert("bboxes", Value::Tensor(Tensor::from_f32(vec![n, 4], &boxes)?));
    let cids: Vec<i64> = ann.iter().map(|a| a.class_id as i64).collect();
    m.insert("cids", Value::Tensor(Tensor::from_i64(vec![n], &cids)?));
    let vis: Vec<f32> = ann.iter().map(|a| a.visibility as f32).collect();
    m.insert("vis", Value::Tensor(Tensor::from_f32(vec![n], &vis)?));
    if !scene.class_probs.is_empty() {
        let p: Vec<f32> = scene.class_probs.iter().map(|&p| p as f32).collect();
        m.insert(
            "class_probs",
            Value::Tensor(Tensor::from_f32(vec![p.len() as u32], &p)?),
        );
    }
    Ok(m)
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame message is missing `{0}`")]
    Missing(&'static str),
    #[error("frame field `{0}` has the wrong type or shape")]
    BadField(&'static str),
}

/// A published frame decoded back into typed fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub btid: u64,
    pub frame: u64,
    pub width: u32,
    pub height: u32,
    pub image: Vec<u8>,
    pub bboxes: Vec<BBox>,
    pub class_ids: Vec<i64>,
    pub visibility: Vec<f32>,
    pub class_probs: Option<Vec<f32>>,
}

impl FrameRecord {
    pub fn from_message(m: &Message) -> Result<Self, FrameError> {
        let btid = m.btid().ok_or(FrameError::Missing("btid"))?;
        let frame = m.frame().ok_or(FrameError::Missing("frame"))?;
        let image = m.tensor("image").ok_or(FrameError::Missing("image"))?;
        let dims = image.dims();
        if image.dtype() != crate::wire::DType::U8 || dims.len() != 3 || dims[2] != 3 {
            return Err(FrameError::BadField("image"));
        }
        let boxes = m
            .tensor("bboxes")
            .ok_or(FrameError::Missing("bboxes"))?
            .to_f32()
            .ok_or(FrameError::BadField("bboxes"))?;
        if boxes.len() % 4 != 0 {
            return Err(FrameError::BadField("bboxes"));
        }
        let class_ids = m
            .tensor("cids")
            .ok_or(FrameError::Missing("cids"))?
            .to_i64()
            .ok_or(FrameError::BadField("cids"))?;
        let visibility = m
            .tensor("vis")
            .ok_or(FrameError::Missing("vis"))?
            .to_f32()
            .ok_or(FrameError::BadField("vis"))?;
        if class_ids.len() * 4 != boxes.len() || visibility.len() != class_ids.len() {
            return Err(FrameError::BadField("cids"));
        }
        Ok(FrameRecord {
            btid,
            frame,
            width: dims[1],
            height: dims[0],
            image: image.data().to_vec(),
            bboxes: boxes
                .chunks_exact(4)
                .map(|b| BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64))
                .collect(),
            class_ids,
            visibility,
            class_probs: m.tensor("class_probs").and_then(Tensor::to_f32),
        })
    }
}

const OVERLAY_COLORS: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 255, 64],
    [64, 128, 255],
    [255, 255, 64],
    [255, 64, 255],
    [64, 255, 255],
];

/// Draws 1 px box outlines in place; boxes are clipped to the image.
pub fn draw_boxes(rgb: &mut [u8], width: u32, height: u32, boxes: &[BBox], class_ids: &[i64]) {
    if width == 0 || height == 0 {
        return;
    }
    for (b, &c) in boxes.iter().zip(class_ids) {
        let b = b.clip(width as f64, height as f64);
        if b.area() <= 0.0 {
            continue;
        }
        let color = OVERLAY_COLORS[c.rem_euclid(OVERLAY_COLORS.len() as i64) as usize];
        let x0 = b.x_min.floor() as u32;
        let y0 = b.y_min.floor() as u32;
        let x1 = (b.x_max.ceil() as u32).saturating_sub(1).min(width - 1);
        let y1 = (b.y_max.ceil() as u32).saturating_sub(1).min(height - 1);
        let mut put = |x: u32, y: u32| {
            let i = ((y * width + x) * 3) as usize;
            rgb[i..i + 3].copy_from_slice(&color);
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
}

pub fn save_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<(), image::ImageError> {
    image::save_buffer(path, rgb, width, height, image::ExtendedColorType::Rgb8)
}
