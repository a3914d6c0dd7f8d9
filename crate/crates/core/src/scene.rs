//! Analytic sphere scenes, pinhole cameras and silhouettes.
//!
//! Cameras follow the computer-vision convention: camera space has `+x`
//! right, `+y` down and `+z` along the optical axis, and a point is in front
//! of the camera when its camera-space `z` is positive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NelfError, Result};
use crate::{Mat3, Vec3};

/// Default density inside primitives, in m⁻¹.
pub const DEFAULT_DENSITY_SCALE: f64 = 200.0;

/// Discriminants below this count as a miss.
pub const GRAZING_EPS: f64 = 1e-12;

/// Minimum camera-space depth for a projection to count as in front.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Normalises `direction`; bounds default to `[0, ∞)`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            near: 0.0,
            far: f64::INFINITY,
        }
    }

    pub fn with_bounds(mut self, near: f64, far: f64) -> Self {
        assert!(
            near >= 0.0 && near < far,
            "invalid ray bounds [{near}, {far}]"
        );
        self.near = near;
        self.far = far;
        self
    }

    #[inline]
    pub fn at(&self, u: f64) -> Vec3 {
        self.origin + self.direction * u
    }
}

/// Phong-lobed sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
    pub ks: f64,
    pub exponent: f64,
}

impl Sphere {
    pub fn diffuse(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Self {
        Self {
            center,
            radius,
            albedo,
            ks: 0.0,
            exponent: 1.0,
        }
    }

    #[inline]
    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub primitives: Vec<Sphere>,
    #[serde(default = "default_density_scale")]
    pub density_scale: f64,
}

fn default_density_scale() -> f64 {
    DEFAULT_DENSITY_SCALE
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub point: Vec3,
    pub normal: Vec3,
    pub primitive: usize,
    pub t: f64,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Sphere>) -> Result<Self> {
        let scene = Self {
            primitives,
            density_scale: DEFAULT_DENSITY_SCALE,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            density_scale: DEFAULT_DENSITY_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.primitives.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(NelfError::Contract(format!(
                    "primitive {i}: radius must be positive"
                )));
            }
            if s.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(NelfError::Contract(format!(
                    "primitive {i}: albedo outside [0, 1]"
                )));
            }
            if !(0.0..=1.0).contains(&s.ks) || !(s.exponent >= 1.0) {
                return Err(NelfError::Contract(format!(
                    "primitive {i}: invalid specular lobe"
                )));
            }
        }
        if !(self.density_scale >= 0.0) {
            return Err(NelfError::Contract(
                "density scale must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Radius of the origin-centered sphere enclosing every primitive.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|s| s.center().norm() + s.radius)
            .fold(0.0, f64::max)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let scene: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Nearest intersection with `t` strictly inside `(ray.near, ray.far)`.
/// Ties keep the lowest primitive index.
pub fn intersect(scene: &AnalyticScene, ray: &Ray) -> Option<Hit> {
    let mut best: Option<(f64, usize)> = None;
    for (id, s) in scene.primitives.iter().enumerate() {
        let oc = ray.origin - s.center();
        let b = oc.dot(&ray.direction);
        let c = oc.norm_squared() - s.radius * s.radius;
        let disc = b * b - c;
        if disc < GRAZING_EPS {
            continue;
        }
        let sq = disc.sqrt();
        let t = [-b - sq, -b + sq]
            .into_iter()
            .find(|t| *t > ray.near && *t < ray.far);
        if let Some(t) = t {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, id));
            }
        }
    }
    best.map(|(t, id)| {
        let point = ray.at(t);
        let normal = (point - scene.primitives[id].center()).normalize();
        Hit {
            point,
            normal,
            primitive: id,
            t,
        }
    })
}

/// Whether any primitive blocks the segment `(near, far)` along the ray.
pub fn occluded(scene: &AnalyticScene, ray: &Ray) -> bool {
    scene.primitives.iter().any(|s| {
        let oc = ray.origin - s.center();
        let b = oc.dot(&ray.direction);
        let c = oc.norm_squared() - s.radius * s.radius;
        let disc = b * b - c;
        if disc < GRAZING_EPS {
            return false;
        }
        let sq = disc.sqrt();
        [-b - sq, -b + sq]
            .into_iter()
            .any(|t| t > ray.near && t < ray.far)
    })
}

/// Hard indicator density: `density_scale` strictly inside any primitive.
pub fn density(scene: &AnalyticScene, x: &Vec3) -> f64 {
    let inside = scene
        .primitives
        .iter()
        .any(|s| (x - s.center()).norm_squared() < s.radius * s.radius);
    if inside {
        scene.density_scale
    } else {
        0.0
    }
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation, meters.
    pub translation: Vec3,
}

/// Serialized camera: `R` row-major, `t` in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl TryFrom<CameraJson> for Camera {
    type Error = NelfError;

    fn try_from(j: CameraJson) -> Result<Self> {
        let cam = Camera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            rotation: Mat3::from_row_slice(&j.r),
            translation: Vec3::from(j.t),
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let m = c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            r: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(NelfError::Contract("focal lengths must be positive".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity())
            .abs()
            .max();
        if ortho > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(NelfError::Contract(
                "camera rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with `up` roughly toward image-up.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::z()
    }

    /// Rotation taking camera-frame directions to world directions.
    pub fn camera_to_world(&self) -> crate::RotationOp {
        crate::RotationOp {
            matrix: self.rotation.transpose(),
        }
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn pixel_center(col: usize, row: usize) -> [f64; 2] {
        [col as f64 + 0.5, row as f64 + 0.5]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Pinhole projection to continuous pixel coordinates plus camera-space
/// depth. `None` when the point is not in front of the camera.
pub fn project(cam: &Camera, x: &Vec3) -> Option<([f64; 2], f64)> {
    let p = cam.to_camera(x);
    if p.z <= MIN_DEPTH {
        return None;
    }
    Some((
        [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy],
        p.z,
    ))
}

/// World-space ray through continuous pixel coordinates `pixel`.
pub fn generate_ray(cam: &Camera, pixel: [f64; 2]) -> Ray {
    let d = Vec3::new(
        (pixel[0] - cam.cx) / cam.fx,
        (pixel[1] - cam.cy) / cam.fy,
        1.0,
    );
    Ray::new(cam.position(), cam.rotation.transpose() * d)
}

/// Binary silhouette.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|v| **v != 0).count()
    }

    /// Morphological dilation with a square structuring element.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Mask::new(self.width, self.height);
        let r = radius as isize;
        for row in 0..self.height as isize {
            for col in 0..self.width as isize {
                let mut hit = false;
                'scan: for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row + dr, col + dc);
                        if rr >= 0
                            && cc >= 0
                            && rr < self.height as isize
                            && cc < self.width as isize
                            && self.get(cc as usize, rr as usize) != 0
                        {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
                out.values[(row as usize) * self.width + col as usize] = hit as u8;
            }
        }
        out
    }

    pub fn to_scalar(&self) -> crate::ScalarImage {
        crate::ScalarImage {
            width: self.width,
            height: self.height,
            data: self
                .values
                .iter()
                .map(|&v| if v != 0 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| if v != 0 { 255 } else { 0 })
            .collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::L8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask {
            width: w as usize,
            height: h as usize,
            values: img
                .into_raw()
                .into_iter()
                .map(|v| (v >= 128) as u8)
                .collect(),
        })
    }
}

/// Pixel is 1 iff the ray through its center hits any primitive.
pub fn render_mask(scene: &AnalyticScene, cam: &Camera) -> Mask {
    let mut mask = Mask::new(cam.width, cam.height);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let ray = generate_ray(cam, Camera::pixel_center(col, row));
            mask.values[row * cam.width + col] = intersect(scene, &ray).is_some() as u8;
        }
    }
    mask
}
