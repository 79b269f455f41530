//! Closed-form pinhole ray caster over the fruit sphere and leaf disc.
//!
//! One primary ray per pixel center, right-handed camera frame with +z the
//! optical axis, +x image-right, +y image-down. No lighting or anti-aliasing;
//! labels are exact geometry, color images are a fixed label-to-color map.
//! Every full-image cast bumps a thread-local counter so tests can audit how
//! many renders a controller performed.

use crate::math::{Pose, Vec3};
use crate::scene::SceneInstance;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera intrinsics invalid: {0}")]
    BadIntrinsics(String),
}

/// Pinhole camera: square pixels, horizontal field of view; the vertical
/// field follows from the aspect ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub hfov: f64,
}

impl CameraIntrinsics {
    pub fn new(width: u32, height: u32, hfov: f64) -> Result<Self, RenderError> {
        if width < 8 || height < 8 {
            return Err(RenderError::BadIntrinsics(format!(
                "width and height must be >= 8, got {width}x{height}"
            )));
        }
        if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(RenderError::BadIntrinsics(format!(
                "hfov must lie in (0, pi), got {hfov}"
            )));
        }
        Ok(Self { width, height, hfov })
    }

    /// Focal length in pixels: (width/2) / tan(hfov/2).
    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.hfov / 2.0).tan()
    }

    /// Same frustum sampled `factor` times more finely along each axis.
    pub fn scaled(&self, factor: u32) -> CameraIntrinsics {
        CameraIntrinsics {
            width: self.width * factor,
            height: self.height * factor,
            hfov: self.hfov,
        }
    }
}

/// Default camera: 64×64 with a 90° horizontal field of view. The wide
/// frustum matters: the peripheral probe cameras sit 0.0495 m off-axis and
/// must keep the fruit in view at the stop distance (~0.10 m), otherwise
/// frustum clipping collapses their objective readings and the array's
/// gradient turns against the approach before the fruit-size stop can fire.
impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { width: 64, height: 64, hfov: std::f64::consts::FRAC_PI_2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Background,
    Fruit,
    Leaf,
}

/// Row-major per-pixel class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<Label>,
}

impl LabelImage {
    pub fn label(&self, u: u32, v: u32) -> Label {
        self.labels[(v * self.width + u) as usize]
    }
}

/// Channel-major RGB image, values in [0, 1], row-major within each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ColorImage {
    pub fn value(&self, channel: usize, u: u32, v: u32) -> f32 {
        let plane = (self.width * self.height) as usize;
        self.data[channel * plane + (v * self.width + u) as usize]
    }
}

thread_local! {
    static RENDER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Full-image ray casts on this thread since the last call, then resets.
pub fn take_render_calls() -> u64 {
    RENDER_CALLS.with(|c| c.replace(0))
}

const RAY_EPS: f64 = 1e-9;

/// Leaf disc basis: normal starts along world -x and is yawed about the
/// world vertical; e1/e2 span the disc (horizontal major, vertical minor).
struct LeafFrame {
    normal: Vec3,
    e1: Vec3,
    e2: Vec3,
}

impl LeafFrame {
    fn of(scene: &SceneInstance) -> Self {
        let (s, c) = scene.leaf_yaw.sin_cos();
        LeafFrame {
            normal: Vec3::new(-c, -s, 0.0),
            e1: Vec3::new(-s, c, 0.0),
            e2: Vec3::new(0.0, 0.0, 1.0),
        }
    }
}

/// Nearest positive ray parameter hitting the fruit sphere, if any.
/// Handles origins inside the sphere (returns the exit intersection).
fn hit_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let a = dir.dot(dir);
    let b = 2.0 * dir.dot(oc);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t1 = (-b - sq) / (2.0 * a);
    if t1 > RAY_EPS {
        return Some(t1);
    }
    let t2 = (-b + sq) / (2.0 * a);
    (t2 > RAY_EPS).then_some(t2)
}

fn hit_leaf(origin: Vec3, dir: Vec3, scene: &SceneInstance, frame: &LeafFrame) -> Option<f64> {
    let denom = dir.dot(frame.normal);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (scene.leaf_center - origin).dot(frame.normal) / denom;
    if t <= RAY_EPS {
        return None;
    }
    let q = origin + dir * t - scene.leaf_center;
    let (a, b) = scene.leaf_half_axes;
    let u = q.dot(frame.e1) / a;
    let v = q.dot(frame.e2) / b;
    (u * u + v * v <= 1.0).then_some(t)
}

fn cast(origin: Vec3, dir: Vec3, scene: &SceneInstance, frame: &LeafFrame) -> Label {
    let fruit = hit_sphere(origin, dir, scene.fruit_center, scene.fruit_radius);
    let leaf = hit_leaf(origin, dir, scene, frame);
    match (fruit, leaf) {
        (Some(tf), Some(tl)) => {
            // Leaf wins depth ties.
            if tl <= tf {
                Label::Leaf
            } else {
                Label::Fruit
            }
        }
        (Some(_), None) => Label::Fruit,
        (None, Some(_)) => Label::Leaf,
        (None, None) => Label::Background,
    }
}

fn raycast_labels(scene: &SceneInstance, camera: &Pose, intrinsics: &CameraIntrinsics) -> Vec<Label> {
    RENDER_CALLS.with(|c| c.set(c.get() + 1));
    let w = intrinsics.width;
    let h = intrinsics.height;
    let f_px = intrinsics.focal_px();
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;
    let frame = LeafFrame::of(scene);
    let origin = camera.position;
    let mut labels = Vec::with_capacity((w * h) as usize);
    for v in 0..h {
        let dy = (v as f64 + 0.5 - half_h) / f_px;
        for u in 0..w {
            let dx = (u as f64 + 0.5 - half_w) / f_px;
            let dir = camera.camera_to_world(Vec3::new(dx, dy, 1.0));
            labels.push(cast(origin, dir, scene, &frame));
        }
    }
    labels
}

pub fn render_labels(scene: &SceneInstance, camera: &Pose, intrinsics: &CameraIntrinsics) -> LabelImage {
    LabelImage {
        width: intrinsics.width,
        height: intrinsics.height,
        labels: raycast_labels(scene, camera, intrinsics),
    }
}

fn color_of(labels: &[Label], width: u32, height: u32) -> ColorImage {
    let plane = (width * height) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, label) in labels.iter().enumerate() {
        match label {
            Label::Fruit => data[i] = 1.0,
            Label::Leaf => data[plane + i] = 1.0,
            Label::Background => {}
        }
    }
    ColorImage { width, height, data }
}

/// Label-to-color map: Fruit (1,0,0), Leaf (0,1,0), Background (0,0,0).
pub fn render_color(scene: &SceneInstance, camera: &Pose, intrinsics: &CameraIntrinsics) -> ColorImage {
    let labels = raycast_labels(scene, camera, intrinsics);
    color_of(&labels, intrinsics.width, intrinsics.height)
}

/// Labels and the matching color image from a single counted ray-cast pass.
/// Servo loops use this so the per-step render count stays exactly one for
/// the reference camera.
pub fn render_frame(
    scene: &SceneInstance,
    camera: &Pose,
    intrinsics: &CameraIntrinsics,
) -> (LabelImage, ColorImage) {
    let labels = raycast_labels(scene, camera, intrinsics);
    let color = color_of(&labels, intrinsics.width, intrinsics.height);
    (
        LabelImage { width: intrinsics.width, height: intrinsics.height, labels },
        color,
    )
}

/// Proportion of pixels labeled Fruit.
pub fn fruit_fraction(image: &LabelImage) -> f64 {
    let fruit = image.labels.iter().filter(|&&l| l == Label::Fruit).count();
    fruit as f64 / (image.width as f64 * image.height as f64)
}

/// Mean (u, v) coordinate of Fruit pixels; `None` when the fruit is not
/// visible at all.
pub fn fruit_centroid(image: &LabelImage) -> Option<(f64, f64)> {
    let mut n = 0u64;
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    for v in 0..image.height {
        for u in 0..image.width {
            if image.label(u, v) == Label::Fruit {
                n += 1;
                su += u as f64;
                sv += v as f64;
            }
        }
    }
    (n > 0).then(|| (su / n as f64, sv / n as f64))
}

/// Reference fruit fraction sampled on a `factor`×`factor` subpixel grid per
/// pixel (the pixel centers of the scaled raster). Test oracle; counts as a
/// single render call.
pub fn fruit_fraction_supersampled(
    scene: &SceneInstance,
    camera: &Pose,
    intrinsics: &CameraIntrinsics,
    factor: u32,
) -> f64 {
    fruit_fraction(&render_labels(scene, camera, &intrinsics.scaled(factor)))
}

/// 2x2 block-average downsample, halving both dimensions. Used to shrink
/// rendered frames to the regressor's input size.
pub fn downsample2(image: &ColorImage) -> ColorImage {
    assert!(
        image.width % 2 == 0 && image.height % 2 == 0,
        "downsample2 requires even dimensions, got {}x{}",
        image.width,
        image.height
    );
    let (w, h) = (image.width / 2, image.height / 2);
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for v in 0..h {
            for u in 0..w {
                let sum = image.value(c, 2 * u, 2 * v)
                    + image.value(c, 2 * u + 1, 2 * v)
                    + image.value(c, 2 * u, 2 * v + 1)
                    + image.value(c, 2 * u + 1, 2 * v + 1);
                data[c * plane + (v * w + u) as usize] = sum * 0.25;
            }
        }
    }
    ColorImage { width: w, height: h, data }
}

/// Binary PPM (P6, maxval 255) dump; values rounded half-up. Each comment
/// line is written as a `#` header line.
pub fn write_ppm<W: Write>(image: &ColorImage, comments: &[&str], mut out: W) -> io::Result<()> {
    out.write_all(b"P6\n")?;
    for comment in comments {
        for line in comment.split('\n') {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "{} {}", image.width, image.height)?;
    out.write_all(b"255\n")?;
    let mut row = Vec::with_capacity(3 * image.width as usize);
    for v in 0..image.height {
        row.clear();
        for u in 0..image.width {
            for c in 0..3 {
                let byte = (f64::from(image.value(c, u, v)).clamp(0.0, 1.0) * 255.0).round();
                row.push(byte as u8);
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}
