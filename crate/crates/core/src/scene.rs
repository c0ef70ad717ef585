//! Probabilistic scene composition.
//!
//! Class objects and occluders are super-shapes: two superformula curves
//! (longitude and latitude, six parameters each) combined as a spherical
//! product. A scene draws `objects_per_scene` class instances from the
//! current class probabilities, adds random occluders, randomizes pose,
//! albedo and light, drops everything onto the ground plane and samples a
//! camera on a hemisphere around the origin.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use thiserror::Error;

pub const RADIUS_MIN: f64 = 1e-6;
pub const RADIUS_MAX: f64 = 1e6;
pub const SETTLE_ATTEMPTS: usize = 50;
/// Projection flags a point as behind the camera when its depth is at or below this.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid superformula parameters: {0}")]
    InvalidShape(String),
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
}

/// One superformula curve: `m, a, b, n1, n2, n3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superformula {
    pub m: f64,
    pub a: f64,
    pub b: f64,
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
}

impl Superformula {
    pub const fn new(m: f64, a: f64, b: f64, n1: f64, n2: f64, n3: f64) -> Self {
        Superformula { m, a, b, n1, n2, n3 }
    }

    /// The unit circle, for any `m`.
    pub const fn circle(m: f64) -> Self {
        Superformula::new(m, 1.0, 1.0, 2.0, 2.0, 2.0)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let all = [self.m, self.a, self.b, self.n1, self.n2, self.n3];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::InvalidShape(format!("non-finite value in {self:?}")));
        }
        if self.a == 0.0 || self.b == 0.0 || self.n1 == 0.0 {
            return Err(SceneError::InvalidShape(format!("a, b and n1 must be non-zero in {self:?}")));
        }
        Ok(())
    }

    pub fn radius(&self, theta: f64) -> f64 {
        supershape_radius(theta, self)
    }
}

/// The twelve parameters of a super-shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperShapeParams {
    pub longitude: Superformula,
    pub latitude: Superformula,
}

impl SuperShapeParams {
    pub const SPHERE: SuperShapeParams = SuperShapeParams {
        longitude: Superformula::circle(0.0),
        latitude: Superformula::circle(0.0),
    };

    pub fn from_array(p: [f64; 12]) -> Self {
        SuperShapeParams {
            longitude: Superformula::new(p[0], p[1], p[2], p[3], p[4], p[5]),
            latitude: Superformula::new(p[6], p[7], p[8], p[9], p[10], p[11]),
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        let (l, t) = (self.longitude, self.latitude);
        [l.m, l.a, l.b, l.n1, l.n2, l.n3, t.m, t.a, t.b, t.n1, t.n2, t.n3]
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.longitude.validate()?;
        self.latitude.validate()
    }
}

/// `r(θ) = (|cos(mθ/4)/a|^n2 + |sin(mθ/4)/b|^n3)^(-1/n1)`, clamped to
/// `[RADIUS_MIN, RADIUS_MAX]`.
pub fn supershape_radius(theta: f64, p: &Superformula) -> f64 {
    let t = p.m * theta / 4.0;
    let c = (t.cos() / p.a).abs().powf(p.n2);
    let s = (t.sin() / p.b).abs().powf(p.n3);
    let r = (c + s).powf(-1.0 / p.n1);
    if r.is_nan() {
        RADIUS_MIN
    } else {
        r.clamp(RADIUS_MIN, RADIUS_MAX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub indices: Vec<[u32; 3]>,
    pub normals: Vec<[f32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f32; 3]>, indices: Vec<[u32; 3]>) -> Self {
        let normals = vertex_normals(&vertices, &indices);
        Mesh {
            vertices,
            indices,
            normals,
        }
    }

    /// Largest vertex distance from the mesh origin.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| to_f64(*v).norm())
            .fold(0.0, f64::max)
    }

    /// Uniformly scaled copy; normals are unchanged.
    pub fn scaled(&self, s: f64) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| [(v[0] as f64 * s) as f32, (v[1] as f64 * s) as f32, (v[2] as f64 * s) as f32])
                .collect(),
            indices: self.indices.clone(),
            normals: self.normals.clone(),
        }
    }

    /// Copy scaled so the bounding radius equals `radius`.
    pub fn normalized(&self, radius: f64) -> Mesh {
        let r = self.bounding_radius();
        if r > 0.0 {
            self.scaled(radius / r)
        } else {
            self.clone()
        }
    }
}

fn to_f64(v: [f32; 3]) -> Vector3<f64> {
    Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

fn vertex_normals(vertices: &[[f32; 3]], indices: &[[u32; 3]]) -> Vec<[f32; 3]> {
    let mut acc = vec![Vector3::<f64>::zeros(); vertices.len()];
    for tri in indices {
        let [a, b, c] = tri.map(|i| to_f64(vertices[i as usize]));
        // Area-weighted face normal.
        let n = (b - a).cross(&(c - a));
        for &i in tri {
            acc[i as usize] += n;
        }
    }
    acc.iter()
        .zip(vertices)
        .map(|(n, v)| {
            let n = n
                .try_normalize(1e-12)
                .or_else(|| to_f64(*v).try_normalize(1e-12))
                .unwrap_or_else(Vector3::z);
            [n.x as f32, n.y as f32, n.z as f32]
        })
        .collect()
}

/// Latitude/longitude tessellation of a super-shape with `u` longitude
/// segments and `v` latitude segments (both at least 4). Interior rings are
/// closed around θ and capped with a triangle fan at each pole, giving
/// `u(v-1)+2` vertices and `2u(v-1)` triangles wound counter-clockwise when
/// seen from outside.
pub fn supershape_mesh(p: &SuperShapeParams, u: usize, v: usize) -> Mesh {
    let u = u.max(4);
    let v = v.max(4);
    let point = |theta: f64, phi: f64, cos_phi: f64| {
        let r1 = supershape_radius(theta, &p.longitude);
        let r2 = supershape_radius(phi, &p.latitude);
        [
            (r1 * theta.cos() * r2 * cos_phi) as f32,
            (r1 * theta.sin() * r2 * cos_phi) as f32,
            (r2 * phi.sin()) as f32,
        ]
    };

    let mut vertices = Vec::with_capacity(u * (v - 1) + 2);
    vertices.push(point(0.0, -PI / 2.0, 0.0));
    for j in 1..v {
        let phi = -PI / 2.0 + PI * j as f64 / v as f64;
        for i in 0..u {
            let theta = -PI + TAU * i as f64 / u as f64;
            vertices.push(point(theta, phi, phi.cos()));
        }
    }
    vertices.push(point(0.0, PI / 2.0, 0.0));

    let south = 0u32;
    let north = (u * (v - 1) + 1) as u32;
    let ring = |j: usize, i: usize| (1 + (j - 1) * u + i % u) as u32;

    let mut indices = Vec::with_capacity(2 * u * (v - 1));
    for i in 0..u {
        indices.push([south, ring(1, i + 1), ring(1, i)]);
    }
    for j in 1..v - 1 {
        for i in 0..u {
            let (a, b) = (ring(j, i), ring(j, i + 1));
            let (c, d) = (ring(j + 1, i + 1), ring(j + 1, i));
            indices.push([a, b, c]);
            indices.push([a, c, d]);
        }
    }
    for i in 0..u {
        indices.push([ring(v - 1, i), ring(v - 1, i + 1), north]);
    }
    Mesh::new(vertices, indices)
}

// ---------------------------------------------------------------------------
// Camera

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            focal: 450.0,
            cx: 320.0,
            cy: 256.0,
            width: 640,
            height: 512,
        }
    }
}

/// Pinhole camera. Camera frame: x right, y down, z along the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    /// World-to-camera rotation; rows are the right, down and forward axes.
    pub rotation: Matrix3<f64>,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub in_front: bool,
}

impl Camera {
    /// Camera at `position` looking at `target`, rotated by `roll` radians
    /// about the optical axis. With zero roll the image "up" direction
    /// follows world +z, or world +y when looking straight down or up.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, roll: f64, intrinsics: Intrinsics) -> Self {
        let forward = (target - position)
            .try_normalize(1e-12)
            .unwrap_or_else(|| -Vector3::z());
        let right0 = forward
            .cross(&Vector3::z())
            .try_normalize(1e-9)
            .unwrap_or_else(|| forward.cross(&Vector3::y()).normalize());
        let down0 = forward.cross(&right0);
        let (s, c) = roll.sin_cos();
        let right = right0 * c + down0 * s;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            position,
            rotation,
            intrinsics,
        }
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.position)
    }

    pub fn project(&self, p: &Vector3<f64>) -> PixelProjection {
        project_camera_point(&self.intrinsics, &self.to_camera(p))
    }

    pub fn object_to_pixel(&self, points: &[Vector3<f64>]) -> Vec<PixelProjection> {
        points.iter().map(|p| self.project(p)).collect()
    }
}

pub fn project_camera_point(k: &Intrinsics, pc: &Vector3<f64>) -> PixelProjection {
    PixelProjection {
        u: k.focal * pc.x / pc.z + k.cx,
        v: k.focal * pc.y / pc.z + k.cy,
        in_front: pc.z > MIN_DEPTH,
    }
}

/// Projects world points into `cam`'s image.
pub fn object_to_pixel(cam: &Camera, points: &[Vector3<f64>]) -> Vec<PixelProjection> {
    cam.object_to_pixel(points)
}

// ---------------------------------------------------------------------------
// Scene

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// One preset per class; K = `class_shapes.len()`.
    pub class_shapes: Vec<SuperShapeParams>,
    pub class_probs: Vec<f64>,
    pub objects_per_scene: usize,
    pub occluder_prob: f64,
    pub occluder_m: Range,
    pub occluder_ab: Range,
    pub occluder_n: Range,
    pub occluder_scale: Range,
    /// Bounding radius of class meshes.
    pub object_scale: f64,
    pub placement_radius: f64,
    pub drop_height: Range,
    pub hue: Range,
    pub saturation: Range,
    pub value: Range,
    pub camera_radius: Range,
    pub intrinsics: Intrinsics,
    pub mesh_res: usize,
}

/// Fixed, distinct class presets; classes beyond these are derived by index.
pub fn class_preset(k: usize) -> SuperShapeParams {
    const PRESETS: [[f64; 12]; 6] = [
        // rounded cube
        [4.0, 1.0, 1.0, 10.0, 10.0, 10.0, 4.0, 1.0, 1.0, 10.0, 10.0, 10.0],
        // cylinder
        [0.0, 1.0, 1.0, 2.0, 2.0, 2.0, 4.0, 1.0, 1.0, 40.0, 40.0, 40.0],
        // octahedron
        [4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 4.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        // six-lobed flower
        [6.0, 1.0, 1.0, 1.0, 7.0, 8.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0],
        // hexagonal prism
        [6.0, 1.0, 1.0, 20.0, 20.0, 20.0, 4.0, 1.0, 1.0, 20.0, 20.0, 20.0],
        // five-pointed star
        [5.0, 1.0, 1.0, 0.5, 1.7, 1.7, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0],
    ];
    if let Some(p) = PRESETS.get(k) {
        return SuperShapeParams::from_array(*p);
    }
    let m = (k % 9 + 3) as f64;
    let n = 1.0 + (k % 4) as f64 * 2.0;
    SuperShapeParams::from_array([m, 1.0, 1.0, n, n + 1.0, n + 1.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0])
}

impl SceneConfig {
    pub fn with_classes(k: usize) -> Self {
        let k = k.max(1);
        SceneConfig {
            class_shapes: (0..k).map(class_preset).collect(),
            class_probs: vec![1.0 / k as f64; k],
            ..SceneConfig::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_shapes.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |s: String| Err(SceneError::InvalidConfig(s));
        let k = self.class_shapes.len();
        if k == 0 {
            return bad("at least one class is required".into());
        }
        if self.class_probs.len() != k {
            return bad(format!("class_probs has {} entries for {k} classes", self.class_probs.len()));
        }
        if self.class_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("class_probs must be finite and non-negative".into());
        }
        let sum: f64 = self.class_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("class_probs sums to {sum}"));
        }
        for s in &self.class_shapes {
            s.validate()?;
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return bad("occluder_prob must lie in [0, 1]".into());
        }
        for (name, r) in [
            ("occluder_m", self.occluder_m),
            ("occluder_ab", self.occluder_ab),
            ("occluder_n", self.occluder_n),
            ("occluder_scale", self.occluder_scale),
            ("drop_height", self.drop_height),
            ("hue", self.hue),
            ("saturation", self.saturation),
            ("value", self.value),
            ("camera_radius", self.camera_radius),
        ] {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return bad(format!("{name}: expected lo <= hi, got {}..{}", r.lo, r.hi));
            }
        }
        if self.occluder_ab.lo <= 0.0 || self.occluder_n.lo <= 0.0 {
            return bad("occluder a, b and n ranges must be positive".into());
        }
        if self.camera_radius.lo <= 0.0 {
            return bad("camera_radius must be positive".into());
        }
        let k = &self.intrinsics;
        if k.width < 16 || k.height < 16 {
            return bad("image width and height must be at least 16".into());
        }
        if !(k.focal > 0.0) {
            return bad("focal length must be positive".into());
        }
        if self.placement_radius < 0.0 || self.object_scale <= 0.0 {
            return bad("placement_radius must be >= 0 and object_scale > 0".into());
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            class_shapes: (0..6).map(class_preset).collect(),
            class_probs: vec![1.0 / 6.0; 6],
            objects_per_scene: 6,
            occluder_prob: 0.3,
            occluder_m: Range::new(0.0, 12.0),
            occluder_ab: Range::new(0.5, 2.0),
            occluder_n: Range::new(0.5, 10.0),
            occluder_scale: Range::new(0.5, 1.2),
            object_scale: 1.0,
            placement_radius: 5.0,
            drop_height: Range::new(1.0, 3.0),
            hue: Range::new(0.0, 1.0),
            saturation: Range::new(0.3, 1.0),
            value: Range::new(0.4, 1.0),
            camera_radius: Range::new(11.0, 16.0),
            intrinsics: Intrinsics::default(),
            mesh_res: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Object { class_id: u32 },
    Occluder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub kind: InstanceKind,
    pub mesh: Arc<Mesh>,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub albedo: [f64; 3],
}

impl Instance {
    pub fn class_id(&self) -> Option<u32> {
        match self.kind {
            InstanceKind::Object { class_id } => Some(class_id),
            InstanceKind::Occluder => None,
        }
    }

    pub fn world_vertices(&self) -> Vec<Vector3<f64>> {
        let r = self.rotation.to_rotation_matrix();
        self.mesh
            .vertices
            .iter()
            .map(|v| r * to_f64(*v) + self.translation)
            .collect()
    }

    pub fn world_normals(&self) -> Vec<Vector3<f64>> {
        let r = self.rotation.to_rotation_matrix();
        self.mesh.normals.iter().map(|n| r * to_f64(*n)).collect()
    }

    fn rotated_vertices(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        let r = self.rotation.to_rotation_matrix();
        self.mesh.vertices.iter().map(move |v| r * to_f64(*v))
    }

    pub fn min_z(&self) -> f64 {
        self.world_vertices()
            .iter()
            .map(|v| v.z)
            .fold(f64::INFINITY, f64::min)
    }

    /// Radius of the ground-projected bounding circle around the translation.
    pub fn footprint_radius(&self) -> f64 {
        self.rotated_vertices()
            .map(|v| v.x.hypot(v.y))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub instances: Vec<Instance>,
    /// Unit vector pointing towards the light.
    pub light_dir: Vector3<f64>,
    pub camera: Camera,
    /// Instances that still overlap another footprint after settling.
    pub unresolved_overlaps: usize,
    pub class_probs: Vec<f64>,
}

impl SceneSpec {
    pub fn with_camera(&self, camera: Camera) -> SceneSpec {
        SceneSpec {
            camera,
            ..self.clone()
        }
    }
}

/// Shoemake's subgroup algorithm: uniform over SO(3) from three uniforms.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (s2, c2) = (TAU * u2).sin_cos();
    let (s3, c3) = (TAU * u3).sin_cos();
    // nalgebra's Quaternion::new takes (w, i, j, k).
    UnitQuaternion::new_unchecked(Quaternion::new(b * c3, a * s2, a * c2, b * s3))
}

/// Direction uniform by area over the upper unit hemisphere, z in (0, 1].
pub fn sample_upper_hemisphere<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z = 1.0 - rng.random::<f64>();
    let phi = TAU * rng.random::<f64>();
    let rho = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
}

pub fn sample_camera<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Camera {
    let radius = cfg.camera_radius.sample(rng);
    let dir = sample_upper_hemisphere(rng);
    let roll = TAU * rng.random::<f64>();
    Camera::look_at(dir * radius, Vector3::zeros(), roll, cfg.intrinsics)
}

fn sample_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = TAU * rng.random::<f64>();
    (r * a.cos(), r * a.sin())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Drops every instance onto the ground plane (minimum world z = 0) and
/// resamples horizontal positions in the placement disk until ground
/// footprints are disjoint. After `SETTLE_ATTEMPTS` failures the overlap is
/// kept and counted in `unresolved_overlaps`.
pub fn settle<R: Rng + ?Sized>(mut scene: SceneSpec, rng: &mut R, placement_radius: f64) -> SceneSpec {
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(scene.instances.len());
    let mut unresolved = 0;
    for inst in &mut scene.instances {
        let rho = inst.footprint_radius();
        let overlaps = |x: f64, y: f64, placed: &[(f64, f64, f64)]| {
            placed
                .iter()
                .any(|&(px, py, pr)| (x - px).hypot(y - py) < rho + pr)
        };
        let mut attempts = 0;
        while overlaps(inst.translation.x, inst.translation.y, &placed) {
            if attempts == SETTLE_ATTEMPTS {
                unresolved += 1;
                break;
            }
            let (x, y) = sample_disk(rng, placement_radius);
            inst.translation.x = x;
            inst.translation.y = y;
            attempts += 1;
        }
        placed.push((inst.translation.x, inst.translation.y, rho));

        let lowest = inst
            .rotated_vertices()
            .map(|v| v.z)
            .fold(f64::INFINITY, f64::min);
        if lowest.is_finite() {
            inst.translation.z = -lowest;
        }
    }
    scene.unresolved_overlaps += unresolved;
    scene
}

/// Precomputed class meshes for repeated sampling with one configuration.
pub struct SceneSampler {
    cfg: SceneConfig,
    class_meshes: Vec<Arc<Mesh>>,
    class_dist: WeightedIndex<f64>,
}

impl SceneSampler {
    pub fn new(cfg: SceneConfig) -> Result<Self, SceneError> {
        cfg.validate()?;
        let class_meshes = cfg
            .class_shapes
            .iter()
            .map(|p| Arc::new(supershape_mesh(p, cfg.mesh_res, cfg.mesh_res).normalized(cfg.object_scale)))
            .collect();
        let class_dist = WeightedIndex::new(&cfg.class_probs)
            .map_err(|e| SceneError::InvalidConfig(format!("class_probs: {e}")))?;
        Ok(SceneSampler {
            cfg,
            class_meshes,
            class_dist,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    /// Replaces the class probabilities used for subsequent scenes.
    pub fn set_class_probs(&mut self, probs: &[f64]) -> Result<(), SceneError> {
        if probs.len() != self.cfg.num_classes() {
            return Err(SceneError::InvalidConfig(format!(
                "expected {} class probabilities, got {}",
                self.cfg.num_classes(),
                probs.len()
            )));
        }
        let mut cfg = self.cfg.clone();
        cfg.class_probs = probs.to_vec();
        cfg.validate()?;
        self.class_dist = WeightedIndex::new(&cfg.class_probs)
            .map_err(|e| SceneError::InvalidConfig(format!("class_probs: {e}")))?;
        self.cfg = cfg;
        Ok(())
    }

    fn sample_occluder_shape<R: Rng + ?Sized>(&self, rng: &mut R) -> SuperShapeParams {
        let c = &self.cfg;
        let curve = |rng: &mut R| {
            Superformula::new(
                c.occluder_m.sample(rng),
                c.occluder_ab.sample(rng),
                c.occluder_ab.sample(rng),
                c.occluder_n.sample(rng),
                c.occluder_n.sample(rng),
                c.occluder_n.sample(rng),
            )
        };
        let longitude = curve(rng);
        let latitude = curve(rng);
        SuperShapeParams { longitude, latitude }
    }

    fn place<R: Rng + ?Sized>(&self, rng: &mut R) -> (UnitQuaternion<f64>, Vector3<f64>, [f64; 3]) {
        let c = &self.cfg;
        let (x, y) = sample_disk(rng, c.placement_radius);
        let z = c.drop_height.sample(rng);
        let rotation = sample_rotation(rng);
        let albedo = hsv_to_rgb(c.hue.sample(rng), c.saturation.sample(rng), c.value.sample(rng));
        (rotation, Vector3::new(x, y, z), albedo)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneSpec {
        let c = &self.cfg;
        let mut instances = Vec::new();
        let mut next_id = 0u32;
        for _ in 0..c.objects_per_scene {
            let class_id = self.class_dist.sample(rng);
            let (rotation, translation, albedo) = self.place(rng);
            instances.push(Instance {
                id: next_id,
                kind: InstanceKind::Object {
                    class_id: class_id as u32,
                },
                mesh: Arc::clone(&self.class_meshes[class_id]),
                rotation,
                translation,
                albedo,
            });
            next_id += 1;
            if rng.random::<f64>() < c.occluder_prob {
                let shape = self.sample_occluder_shape(rng);
                let scale = c.occluder_scale.sample(rng);
                let mesh = supershape_mesh(&shape, c.mesh_res, c.mesh_res).normalized(scale);
                let (rotation, translation, albedo) = self.place(rng);
                instances.push(Instance {
                    id: next_id,
                    kind: InstanceKind::Occluder,
                    mesh: Arc::new(mesh),
                    rotation,
                    translation,
                    albedo,
                });
                next_id += 1;
            }
        }
        let light_dir = sample_upper_hemisphere(rng);
        let camera = sample_camera(rng, c);
        let scene = SceneSpec {
            instances,
            light_dir,
            camera,
            unresolved_overlaps: 0,
            class_probs: c.class_probs.clone(),
        };
        settle(scene, rng, c.placement_radius)
    }
}

/// One-shot scene sample; prefer [`SceneSampler`] for streams.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<SceneSpec, SceneError> {
    Ok(SceneSampler::new(cfg.clone())?.sample(rng))
}
