//! Camera-array visual servoing: objective evaluation over a nine-camera
//! rig, least-squares spatial gradient estimation, centroid-based deadbeat
//! orientation correction, and the gradient-ascent control loop.
//!
//! Objective values fed to the gradient estimator are measured in percent of
//! image area (100 × w1 × fruit fraction), so gradients carry percent-per-
//! meter units and the default stop threshold of 1.5 is meaningful at the
//! working distances of the default scenario.

use crate::math::{Pose, Rotation, Vec3};
use crate::render::{self, CameraIntrinsics, ColorImage};
use crate::scene::{ScenarioConfig, SceneInstance};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Scale between raw fruit fraction and the percent units used for
/// objective values, gradients, and the gradient stop threshold.
pub const OBJECTIVE_PERCENT_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ServoError {
    #[error("camera array spec invalid: {0}")]
    BadArraySpec(String),
    #[error("objective weights invalid: w1={w1}, w2={w2} (must sum to 1, mobility weight must be 0)")]
    BadWeights { w1: f64, w2: f64 },
    #[error("servo config invalid: {0}")]
    BadServoConfig(String),
    #[error("degenerate camera-array geometry: probe directions do not span 3-d space")]
    DegenerateGeometry,
}

/// Peripheral-camera layout: `peripheral_count` cameras on a spherical cap
/// of the given radius at `polar_angle` from the optical axis, equally
/// spaced in azimuth, plus the reference camera at the rig origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraArraySpec {
    pub radius: f64,
    pub peripheral_count: usize,
    pub polar_angle: f64,
}

impl CameraArraySpec {
    pub fn new(radius: f64, peripheral_count: usize, polar_angle: f64) -> Result<Self, ServoError> {
        if !(radius > 0.0) {
            return Err(ServoError::BadArraySpec(format!("radius must be > 0, got {radius}")));
        }
        if peripheral_count < 3 {
            return Err(ServoError::BadArraySpec(format!(
                "need at least 3 peripheral cameras, got {peripheral_count}"
            )));
        }
        let spec = Self { radius, peripheral_count, polar_angle };
        // The offset directions must span 3-d space or gradients are not
        // identifiable; probe the normal matrix the estimator will solve.
        let offsets = array_offsets(&spec);
        let unit: Vec<Vec3> = offsets.iter().map(|o| o.normalized().unwrap()).collect();
        if solve3(normal_matrix(&unit), [0.0, 0.0, 0.0]).is_none() {
            return Err(ServoError::DegenerateGeometry);
        }
        Ok(spec)
    }
}

impl Default for CameraArraySpec {
    fn default() -> Self {
        Self { radius: 0.07, peripheral_count: 8, polar_angle: std::f64::consts::FRAC_PI_4 }
    }
}

/// Objective weights; the mobility term is housed but permanently zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w1: f64,
    pub w2: f64,
}

impl ObjectiveWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self, ServoError> {
        if !(w1.is_finite() && w2.is_finite()) || (w1 + w2 - 1.0).abs() > 1e-9 {
            return Err(ServoError::BadWeights { w1, w2 });
        }
        Ok(Self { w1, w2 })
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.0 }
    }
}

/// Estimated spatial gradient of the objective, camera frame, percent of
/// image per meter, plus the least-squares residual norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub g: Vec3,
    pub residual_norm: f64,
}

/// Control-loop parameters. `grad_stop_threshold` is percent per meter;
/// `fruit_stop_fraction` is a raw fraction in (0, 1]; `max_steps` caps the
/// number of recorded steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    pub step_size: f64,
    pub grad_stop_threshold: f64,
    pub fruit_stop_fraction: f64,
    pub max_steps: usize,
}

impl ServoConfig {
    pub fn new(
        step_size: f64,
        grad_stop_threshold: f64,
        fruit_stop_fraction: f64,
        max_steps: usize,
    ) -> Result<Self, ServoError> {
        if !(step_size > 0.0) {
            return Err(ServoError::BadServoConfig(format!("step_size must be > 0, got {step_size}")));
        }
        if !(grad_stop_threshold >= 0.0) {
            return Err(ServoError::BadServoConfig(format!(
                "grad_stop_threshold must be >= 0, got {grad_stop_threshold}"
            )));
        }
        if !(fruit_stop_fraction > 0.0 && fruit_stop_fraction <= 1.0) {
            return Err(ServoError::BadServoConfig(format!(
                "fruit_stop_fraction must lie in (0, 1], got {fruit_stop_fraction}"
            )));
        }
        if max_steps < 1 {
            return Err(ServoError::BadServoConfig("max_steps must be >= 1".into()));
        }
        Ok(Self { step_size, grad_stop_threshold, fruit_stop_fraction, max_steps })
    }
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self { step_size: 0.01, grad_stop_threshold: 1.5, fruit_stop_fraction: 0.40, max_steps: 200 }
    }
}

/// Everything a servo run needs; `Default` is the documented nominal setup.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub servo: ServoConfig,
    pub array: CameraArraySpec,
    pub weights: ObjectiveWeights,
    pub intrinsics: CameraIntrinsics,
}

/// Controller state between steps. `p` and `last_gradient` are the most
/// recent reference-camera measurement and gradient estimate.
#[derive(Clone, Copy, Debug)]
pub struct ServoState {
    pub k: usize,
    pub pose: Pose,
    pub p: f64,
    pub last_gradient: GradientEstimate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientSmall,
    FruitLarge,
    MaxSteps,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::GradientSmall => "GradientSmall",
            Termination::FruitLarge => "FruitLarge",
            Termination::MaxSteps => "MaxSteps",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Baseline,
    Deep,
}

impl std::fmt::Display for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Controller::Baseline => "baseline",
            Controller::Deep => "deep",
        })
    }
}

/// One recorded control step: the pose the measurement was taken from, the
/// reference-camera fruit fraction and color image, and the gradient that
/// drove (or would have driven) the next move.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub pose: Pose,
    pub p: f64,
    pub gradient: GradientEstimate,
    pub image: ColorImage,
}

#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub controller: Controller,
    pub scene: SceneInstance,
    pub steps: Vec<TrajectoryStep>,
    pub termination: Termination,
}

impl TrajectoryRecord {
    /// Number of position updates performed (recorded steps minus one).
    pub fn moves(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn start_p(&self) -> f64 {
        self.steps.first().expect("trajectory has at least one step").p
    }

    pub fn final_p(&self) -> f64 {
        self.steps.last().expect("trajectory has at least one step").p
    }

    pub fn final_position(&self) -> Vec3 {
        self.steps.last().expect("trajectory has at least one step").pose.position
    }

    /// Plot-ready JSON: controller, scene, termination, and per-step pose,
    /// fruit fraction, and gradient. Images are not included.
    pub fn export_json(&self) -> serde_json::Value {
        let steps: Vec<serde_json::Value> = self
            .steps
            .iter()
            .map(|s| {
                json!({
                    "position": s.pose.position,
                    "orientation": s.pose.orientation,
                    "p": s.p,
                    "gradient": s.gradient.g,
                    "residual_norm": s.gradient.residual_norm,
                })
            })
            .collect();
        json!({
            "controller": self.controller,
            "scene": self.scene,
            "termination": self.termination.to_string(),
            "steps": steps,
        })
    }
}

/// Peripheral camera offsets in the rig (camera) frame: equally spaced in
/// azimuth on a cap at `polar_angle` from the optical axis.
pub fn array_offsets(spec: &CameraArraySpec) -> Vec<Vec3> {
    let (sp, cp) = spec.polar_angle.sin_cos();
    (0..spec.peripheral_count)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.peripheral_count as f64;
            Vec3::new(sp * theta.cos(), sp * theta.sin(), cp) * spec.radius
        })
        .collect()
}

/// World positions of the peripheral cameras for a rig at `rig_pose`.
pub fn peripheral_positions(rig_pose: &Pose, spec: &CameraArraySpec) -> Vec<Vec3> {
    array_offsets(spec)
        .iter()
        .map(|&o| rig_pose.position + rig_pose.camera_to_world(o))
        .collect()
}

/// Objective (w1 × fruit fraction) for the reference camera and each
/// peripheral camera. All cameras share the rig orientation.
pub fn evaluate_objective_array(
    scene: &SceneInstance,
    rig_pose: &Pose,
    spec: &CameraArraySpec,
    weights: &ObjectiveWeights,
    intrinsics: &CameraIntrinsics,
) -> (f64, Vec<f64>) {
    assert_eq!(weights.w2, 0.0, "mobility weight must be zero");
    let f_ref =
        weights.w1 * render::fruit_fraction(&render::render_labels(scene, rig_pose, intrinsics));
    let f_peripheral = evaluate_peripheral_objectives(scene, rig_pose, spec, weights, intrinsics);
    (f_ref, f_peripheral)
}

/// Peripheral objectives only; the servo loop reuses its already-rendered
/// reference frame so each baseline step costs exactly nine renders.
pub fn evaluate_peripheral_objectives(
    scene: &SceneInstance,
    rig_pose: &Pose,
    spec: &CameraArraySpec,
    weights: &ObjectiveWeights,
    intrinsics: &CameraIntrinsics,
) -> Vec<f64> {
    assert_eq!(weights.w2, 0.0, "mobility weight must be zero");
    peripheral_positions(rig_pose, spec)
        .into_iter()
        .map(|position| {
            let cam = Pose { position, orientation: rig_pose.orientation };
            weights.w1 * render::fruit_fraction(&render::render_labels(scene, &cam, intrinsics))
        })
        .collect()
}

/// Evaluate an arbitrary scalar field at the rig's camera positions instead
/// of rendering. Test seam sharing the exact camera placement of
/// [`evaluate_objective_array`].
pub fn evaluate_field<F>(rig_pose: &Pose, spec: &CameraArraySpec, field: F) -> (f64, Vec<f64>)
where
    F: Fn(Vec3) -> f64,
{
    let f_ref = field(rig_pose.position);
    let f_peripheral = peripheral_positions(rig_pose, spec).into_iter().map(field).collect();
    (f_ref, f_peripheral)
}

fn normal_matrix(unit: &[Vec3]) -> [[f64; 3]; 3] {
    let mut a = [[0.0f64; 3]; 3];
    for u in unit {
        let r = u.to_array();
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += r[i] * r[j];
            }
        }
    }
    a
}

/// Solve a 3x3 system by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot collapses (singular within 1e-12).
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..3 {
            let m = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= m * a[col][k];
            }
            b[row] -= m * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Least-squares gradient from probe objectives: solves `D g = d` where row
/// i of D is the unit offset direction and `d_i = (f_i - f_ref) / |offset_i|`.
/// The gradient is expressed in the same (camera) frame as the offsets.
pub fn estimate_gradient(
    f_ref: f64,
    f_peripheral: &[f64],
    offsets: &[Vec3],
) -> Result<GradientEstimate, ServoError> {
    assert_eq!(f_peripheral.len(), offsets.len(), "one objective per probe offset");
    assert!(offsets.len() >= 3, "need at least 3 probes to identify a 3-d gradient");
    let mut rows = Vec::with_capacity(offsets.len());
    let mut d = Vec::with_capacity(offsets.len());
    for (offset, &f) in offsets.iter().zip(f_peripheral) {
        let len = offset.norm();
        let unit = offset.normalized().ok_or(ServoError::DegenerateGeometry)?;
        rows.push(unit);
        d.push((f - f_ref) / len);
    }
    let a = normal_matrix(&rows);
    let mut b = [0.0f64; 3];
    for (u, &di) in rows.iter().zip(&d) {
        b[0] += u.x * di;
        b[1] += u.y * di;
        b[2] += u.z * di;
    }
    let g = solve3(a, b).ok_or(ServoError::DegenerateGeometry)?;
    let g = Vec3::from_array(g);
    let residual_sq: f64 = rows.iter().zip(&d).map(|(u, &di)| (u.dot(g) - di).powi(2)).sum();
    Ok(GradientEstimate { g, residual_norm: residual_sq.sqrt() })
}

/// Deadbeat orientation correction: rotate so the ray through the fruit
/// centroid becomes the optical axis. No centroid (fruit invisible) leaves
/// the pose unchanged; position is never touched.
pub fn orientation_update(
    pose: &Pose,
    centroid: Option<(f64, f64)>,
    intrinsics: &CameraIntrinsics,
) -> Pose {
    let Some((u, v)) = centroid else { return *pose };
    let f_px = intrinsics.focal_px();
    let dir = Vec3::new(
        (u - intrinsics.width as f64 / 2.0) / f_px,
        (v - intrinsics.height as f64 / 2.0) / f_px,
        1.0,
    );
    let arc = Rotation::from_rotation_arc(Vec3::new(0.0, 0.0, 1.0), dir);
    Pose { position: pose.position, orientation: pose.orientation * arc }
}

/// One control transition. Termination is checked before moving, in the
/// order FruitLarge, GradientSmall, MaxSteps, so the trajectory always
/// contains the triggering measurement. Otherwise the pose advances one
/// fixed-length step along the (camera-frame) gradient rotated into the
/// world frame, followed by the centroid orientation correction. The fruit
/// fraction is refreshed by the next step's render, not here.
pub fn servo_step(
    state: &ServoState,
    centroid: Option<(f64, f64)>,
    config: &ServoConfig,
    intrinsics: &CameraIntrinsics,
) -> (ServoState, Option<Termination>) {
    if state.p > config.fruit_stop_fraction {
        return (*state, Some(Termination::FruitLarge));
    }
    let g = state.last_gradient.g;
    // An exactly-zero gradient has no direction to ascend regardless of the
    // configured threshold.
    if g.norm() < config.grad_stop_threshold || g.normalized().is_none() {
        return (*state, Some(Termination::GradientSmall));
    }
    if state.k + 1 >= config.max_steps {
        return (*state, Some(Termination::MaxSteps));
    }
    let dir_world = state.pose.camera_to_world(g.normalized().unwrap());
    let moved = Pose {
        position: state.pose.position + dir_world * config.step_size,
        orientation: state.pose.orientation,
    };
    let next_pose = orientation_update(&moved, centroid, intrinsics);
    (ServoState { k: state.k + 1, pose: next_pose, ..*state }, None)
}

/// Start pose for a servo run: at `position`, optical axis through the
/// scenario's nominal fruit position.
pub fn start_pose(scenario: &ScenarioConfig, position: Vec3) -> Pose {
    Pose::look_at(position, scenario.fruit_position)
}

/// Shared controller loop. Per step: render the reference frame (one counted
/// render), measure fruit fraction and centroid, ask `gradient_for_step` for
/// the gradient (the baseline renders its eight peripherals inside this
/// callback), record the step, then either terminate or move.
pub(crate) fn run_servo_loop<E, F>(
    scene: &SceneInstance,
    sim: &SimConfig,
    start_position: Vec3,
    controller: Controller,
    mut gradient_for_step: F,
) -> Result<TrajectoryRecord, E>
where
    E: From<ServoError>,
    F: FnMut(&SceneInstance, &Pose, f64, &ColorImage) -> Result<GradientEstimate, E>,
{
    let mut pose = start_pose(&sim.scenario, start_position);
    let mut k = 0usize;
    let mut steps = Vec::new();
    loop {
        let (labels, color) = render::render_frame(scene, &pose, &sim.intrinsics);
        let p = render::fruit_fraction(&labels);
        let centroid = render::fruit_centroid(&labels);
        let gradient = gradient_for_step(scene, &pose, p, &color)?;
        steps.push(TrajectoryStep { pose, p, gradient, image: color });
        let state = ServoState { k, pose, p, last_gradient: gradient };
        let (next, termination) = servo_step(&state, centroid, &sim.servo, &sim.intrinsics);
        if let Some(termination) = termination {
            return Ok(TrajectoryRecord { controller, scene: *scene, steps, termination });
        }
        pose = next.pose;
        k = next.k;
    }
}

/// Run the nine-camera baseline controller from the scenario's nominal
/// start position.
pub fn run_baseline(scene: &SceneInstance, sim: &SimConfig) -> Result<TrajectoryRecord, ServoError> {
    run_baseline_from(scene, sim, sim.scenario.initial_ee_position)
}

/// Baseline controller from an arbitrary start position (used by the
/// offset-start evaluation series).
pub fn run_baseline_from(
    scene: &SceneInstance,
    sim: &SimConfig,
    start_position: Vec3,
) -> Result<TrajectoryRecord, ServoError> {
    let offsets = array_offsets(&sim.array);
    run_servo_loop(scene, sim, start_position, Controller::Baseline, |scene, pose, p, _| {
        let f_ref = OBJECTIVE_PERCENT_SCALE * sim.weights.w1 * p;
        let f_peripheral: Vec<f64> =
            evaluate_peripheral_objectives(scene, pose, &sim.array, &sim.weights, &sim.intrinsics)
                .into_iter()
                .map(|f| OBJECTIVE_PERCENT_SCALE * f)
                .collect();
        estimate_gradient(f_ref, &f_peripheral, &offsets)
    })
}
