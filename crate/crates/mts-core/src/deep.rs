//! Single-camera controller: the trained regressor replaces the eight
//! peripheral cameras, so each control step costs one render instead of
//! nine. Everything else — step rule, orientation correction, termination —
//! is shared with the camera-array controller.

use crate::math::Vec3;
use crate::nn::{Model, NnError};
use crate::render::{downsample2, ColorImage};
use crate::scene::SceneInstance;
use crate::servo::{
    run_servo_loop, Controller, GradientEstimate, ServoError, SimConfig, TrajectoryRecord,
    OBJECTIVE_PERCENT_SCALE,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeepError {
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Model(#[from] NnError),
}

/// Regress the camera-frame objective gradient (percent per meter) from a
/// reference-camera image. Images at exactly the model's input size are used
/// directly; images at exactly twice the size are block-averaged down first,
/// matching how training samples are produced from rendered frames (the
/// model applies its stored input normalization itself). The model works in
/// the training targets' fraction-per-meter units; predictions are rescaled
/// to the servo's percent units here. The residual norm is zero: a
/// single-image regression has no probe residuals.
pub fn predict_gradient(model: &Model, image: &ColorImage) -> Result<GradientEstimate, NnError> {
    let (c, h, w) = model.shape.input;
    if c != 3 {
        return Err(NnError::ShapeMismatch(format!(
            "model expects {c} channels, images carry 3"
        )));
    }
    let (iw, ih) = (image.width as usize, image.height as usize);
    let scaled;
    let input = if (iw, ih) == (w, h) {
        image
    } else if (iw, ih) == (2 * w, 2 * h) {
        scaled = downsample2(image);
        &scaled
    } else {
        return Err(NnError::ShapeMismatch(format!(
            "image is {}x{}, model expects {w}x{h} (or exactly twice that)",
            image.width, image.height
        )));
    };
    let out = model.predict(&input.data)?;
    Ok(GradientEstimate {
        g: Vec3::new(f64::from(out[0]), f64::from(out[1]), f64::from(out[2]))
            * OBJECTIVE_PERCENT_SCALE,
        residual_norm: 0.0,
    })
}

/// Run the learned single-camera controller from the scenario's nominal
/// start position.
pub fn run_deep(
    scene: &SceneInstance,
    model: &Model,
    sim: &SimConfig,
) -> Result<TrajectoryRecord, DeepError> {
    run_deep_from(scene, model, sim, sim.scenario.initial_ee_position)
}

/// Learned controller from an arbitrary start position (used by the
/// offset-start evaluation series).
pub fn run_deep_from(
    scene: &SceneInstance,
    model: &Model,
    sim: &SimConfig,
    start_position: Vec3,
) -> Result<TrajectoryRecord, DeepError> {
    run_servo_loop(scene, sim, start_position, Controller::Deep, |_, _, _, color| {
        predict_gradient(model, color).map_err(DeepError::from)
    })
}
