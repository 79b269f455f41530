//! Randomized occluded-fruit scenes: a fixed fruit sphere plus a leaf disc
//! whose position and yaw are drawn uniformly from configured ranges, and the
//! partial-occlusion eligibility filter applied before a scene is used.

use crate::math::{Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fruit sphere radius in meters (large sweet-pepper scale). Sized so the
/// fruit covers roughly 2% of the default camera's image from the nominal
/// start distance of ~0.36 m, and so the 40% fruit-size stop lies outside
/// the distance band where the probe cameras' frustums start clipping the
/// fruit (which would invert the array's sensed gradient).
pub const FRUIT_RADIUS: f64 = 0.06;
/// Leaf disc half-axes in meters: horizontal major, vertical minor.
pub const LEAF_HALF_AXES: (f64, f64) = (0.06, 0.04);

/// Fraction-of-fruit-pixels floor below which a start view counts as fully
/// occluded, and the fraction of the leaf-free view above which it counts as
/// unoccluded. Both exclude a scene from use.
pub const ELIGIBLE_MIN_FRACTION: f64 = 0.001;
pub const ELIGIBLE_MAX_UNOCCLUDED_RATIO: f64 = 0.9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("interval [{lo}, {hi}] is empty or non-finite")]
    BadInterval { lo: f64, hi: f64 },
}

/// Closed interval `[lo, hi]` with `lo <= hi`, serialized as `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, SceneError> {
        if lo.is_finite() && hi.is_finite() && lo <= hi {
            Ok(Self { lo, hi })
        } else {
            Err(SceneError::BadInterval { lo, hi })
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Uniform draw; a zero-width interval always yields `lo`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.lo + u * (self.hi - self.lo)
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = SceneError;
    fn try_from(a: [f64; 2]) -> Result<Self, SceneError> {
        Interval::new(a[0], a[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Simulation run parameters: fixed positions plus the leaf randomization
/// ranges and the per-component start offset used by evaluation series 2.
///
/// Horizontal leaf offsets are applied along world y and vertical offsets
/// along world z; the camera-to-fruit axis is approximately world x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(rename = "initial_end_effector_position")]
    pub initial_ee_position: Vec3,
    pub fruit_position: Vec3,
    #[serde(rename = "occlusion_reference_position")]
    pub occlusion_reference: Vec3,
    #[serde(rename = "occlusion_random_vert_offset_range")]
    pub vertical_offset_range: Interval,
    #[serde(rename = "occlusion_random_horiz_offset_range")]
    pub horizontal_offset_range: Interval,
    #[serde(rename = "occlusion_random_angle_offset_range")]
    pub angle_offset_range: Interval,
    pub start_offset_range: Interval,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            initial_ee_position: Vec3::new(0.04, 0.59, 0.68),
            fruit_position: Vec3::new(0.4, 0.6, 0.7),
            occlusion_reference: Vec3::new(0.3, 0.55, 0.7),
            vertical_offset_range: Interval { lo: -0.06, hi: 0.06 },
            horizontal_offset_range: Interval { lo: -0.08, hi: 0.08 },
            angle_offset_range: Interval {
                lo: -std::f64::consts::FRAC_PI_2,
                hi: std::f64::consts::FRAC_PI_2,
            },
            start_offset_range: Interval { lo: -0.05, hi: 0.05 },
        }
    }
}

/// One concrete scene: fruit sphere plus leaf disc.
///
/// The leaf is a flat ellipse centered at `leaf_center`, half-axes
/// `leaf_half_axes` (horizontal, vertical), normal along world -x before
/// being yawed by `leaf_yaw` about the world vertical through its center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub fruit_center: Vec3,
    pub fruit_radius: f64,
    pub leaf_center: Vec3,
    pub leaf_half_axes: (f64, f64),
    pub leaf_yaw: f64,
    pub seed: u64,
}

impl SceneInstance {
    /// Copy with the leaf translated 10 km along world -x, far outside any
    /// frustum in the working volume. Used for unoccluded-fraction probes.
    pub fn leaf_removed(&self) -> SceneInstance {
        SceneInstance {
            leaf_center: self.leaf_center + Vec3::new(-1e4, 0.0, 0.0),
            ..*self
        }
    }
}

/// Draw one scene. Pure in `(config, seed)`; draw order is horizontal
/// offset, vertical offset, yaw.
pub fn sample_scene(config: &ScenarioConfig, seed: u64) -> SceneInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horiz = config.horizontal_offset_range.sample(&mut rng);
    let vert = config.vertical_offset_range.sample(&mut rng);
    let yaw = config.angle_offset_range.sample(&mut rng);
    SceneInstance {
        fruit_center: config.fruit_position,
        fruit_radius: FRUIT_RADIUS,
        leaf_center: config.occlusion_reference + Vec3::new(0.0, horiz, vert),
        leaf_half_axes: LEAF_HALF_AXES,
        leaf_yaw: yaw,
        seed,
    }
}

/// Partial-occlusion filter: the start view must show at least
/// [`ELIGIBLE_MIN_FRACTION`] of the image as fruit, and no more than
/// [`ELIGIBLE_MAX_UNOCCLUDED_RATIO`] times the fruit fraction of the same
/// view with the leaf removed.
///
/// `fruit_fraction_of` maps (scene, camera pose) to the rendered fruit
/// fraction; callers curry the renderer and intrinsics into it.
pub fn is_eligible<F>(scene: &SceneInstance, start_pose: &Pose, mut fruit_fraction_of: F) -> bool
where
    F: FnMut(&SceneInstance, &Pose) -> f64,
{
    let p_init = fruit_fraction_of(scene, start_pose);
    if p_init < ELIGIBLE_MIN_FRACTION {
        return false;
    }
    let p_unoccluded = fruit_fraction_of(&scene.leaf_removed(), start_pose);
    p_init <= ELIGIBLE_MAX_UNOCCLUDED_RATIO * p_unoccluded
}
