//! Paired evaluation of the learned controller against the camera-array
//! controller. Each trial runs both controllers on the same scene from the
//! same start pose; series 1 starts at the nominal end-effector position,
//! series 2 perturbs each start component by a uniform draw from the
//! scenario's start offset range.
//!
//! Planning (seed-dependent scene rejection) is serial so reports are
//! byte-identical for a given master seed regardless of how trials are later
//! executed; running a planned trial is pure.

use crate::deep::{run_deep_from, DeepError};
use crate::math::{Pose, Vec3};
use crate::nn::{Model, NnError};
use crate::render::{self};
use crate::scene::{is_eligible, sample_scene, SceneInstance};
use crate::servo::{run_baseline_from, start_pose, ServoError, SimConfig, TrajectoryRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no eligible scene for series {series} trial {trial} within {attempts} attempts")]
    NoEligibleScene { series: u32, trial: usize, attempts: usize },
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DeepError> for EvalError {
    fn from(e: DeepError) -> Self {
        match e {
            DeepError::Servo(s) => EvalError::Servo(s),
            DeepError::Model(m) => EvalError::Model(m),
        }
    }
}

/// Series 1 starts every trial at the scenario's nominal position; series 2
/// offsets each start component by an independent uniform draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Series {
    Nominal,
    OffsetStart,
}

impl Series {
    pub fn number(self) -> u32 {
        match self {
            Series::Nominal => 1,
            Series::OffsetStart => 2,
        }
    }

    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(Series::Nominal),
            2 => Some(Series::OffsetStart),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub series: Series,
    pub n_trials: usize,
    pub master_seed: u64,
    /// Cap on scene-seed draws per trial before giving up.
    pub max_attempts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { series: Series::Nominal, n_trials: 12, master_seed: 99, max_attempts: 1000 }
    }
}

/// One planned trial: a scene already vetted as eligible from the planned
/// start position. Running it requires no further random draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub index: usize,
    pub scene_seed: u64,
    pub scene: SceneInstance,
    pub start_position: Vec3,
    /// Scene seeds discarded as ineligible before this one was accepted.
    pub rejected_seeds: u32,
}

/// Paired outcome of one trial. Percent values are objective units
/// (100 x w1 x fruit fraction); deltas are deep minus baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub scene_seed: u64,
    pub start_position: Vec3,
    pub rejected_seeds: u32,
    pub steps_deep: usize,
    pub steps_baseline: usize,
    pub delta_steps: i64,
    pub endpoint_delta_mm: f64,
    pub start_pct: f64,
    pub final_deep_pct: f64,
    pub final_baseline_pct: f64,
    pub delta_final_pct: f64,
    pub term_deep: String,
    pub term_baseline: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn aggregate(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        n += 1;
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    Aggregate { mean: sum / n as f64, min, max }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub series: u32,
    pub master_seed: u64,
    pub n_trials: usize,
    /// Fraction of trials whose controller reached the fruit-fraction stop,
    /// i.e. finished with an occlusion-free close-up view.
    pub deep_fruit_large_fraction: f64,
    pub baseline_fruit_large_fraction: f64,
    pub trials: Vec<TrialResult>,
    /// Per-metric mean/min/max over trials; empty when there are no trials.
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Effective simulation and evaluation configuration, echoed so the
    /// report is self-describing.
    pub config: serde_json::Value,
}

fn fruit_fraction_at(scene: &SceneInstance, pose: &Pose, sim: &SimConfig) -> f64 {
    render::fruit_fraction(&render::render_labels(scene, pose, &sim.intrinsics))
}

/// Draw per-trial start positions and scene seeds from the master seed.
/// Scenes are resampled until eligible from the trial's actual start pose,
/// so offset starts never begin outside the occlusion envelope.
pub fn plan_trials(sim: &SimConfig, config: &EvalConfig) -> Result<Vec<TrialPlan>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    let nominal = sim.scenario.initial_ee_position;
    let mut plans = Vec::with_capacity(config.n_trials);
    for index in 0..config.n_trials {
        let start_position = match config.series {
            Series::Nominal => nominal,
            Series::OffsetStart => {
                let dx = sim.scenario.start_offset_range.sample(&mut rng);
                let dy = sim.scenario.start_offset_range.sample(&mut rng);
                let dz = sim.scenario.start_offset_range.sample(&mut rng);
                nominal + Vec3::new(dx, dy, dz)
            }
        };
        let pose = start_pose(&sim.scenario, start_position);
        let mut rejected_seeds = 0u32;
        let plan = loop {
            if rejected_seeds as usize >= config.max_attempts {
                return Err(EvalError::NoEligibleScene {
                    series: config.series.number(),
                    trial: index,
                    attempts: config.max_attempts,
                });
            }
            let scene_seed: u64 = rng.gen();
            let scene = sample_scene(&sim.scenario, scene_seed);
            if is_eligible(&scene, &pose, |s, p| fruit_fraction_at(s, p, sim)) {
                break TrialPlan { index, scene_seed, scene, start_position, rejected_seeds };
            }
            rejected_seeds += 1;
        };
        plans.push(plan);
    }
    Ok(plans)
}

/// Run both controllers on one planned trial. Pure: identical plans give
/// identical results regardless of execution order.
pub fn run_trial(plan: &TrialPlan, model: &Model, sim: &SimConfig) -> Result<TrialResult, EvalError> {
    let baseline = run_baseline_from(&plan.scene, sim, plan.start_position)?;
    let deep = run_deep_from(&plan.scene, model, sim, plan.start_position)?;
    Ok(pair_result(plan, &deep, &baseline, sim))
}

fn pct(fraction: f64, sim: &SimConfig) -> f64 {
    crate::servo::OBJECTIVE_PERCENT_SCALE * sim.weights.w1 * fraction
}

fn pair_result(
    plan: &TrialPlan,
    deep: &TrajectoryRecord,
    baseline: &TrajectoryRecord,
    sim: &SimConfig,
) -> TrialResult {
    let final_deep_pct = pct(deep.final_p(), sim);
    let final_baseline_pct = pct(baseline.final_p(), sim);
    TrialResult {
        index: plan.index,
        scene_seed: plan.scene_seed,
        start_position: plan.start_position,
        rejected_seeds: plan.rejected_seeds,
        steps_deep: deep.moves(),
        steps_baseline: baseline.moves(),
        delta_steps: deep.moves() as i64 - baseline.moves() as i64,
        endpoint_delta_mm: (deep.final_position() - baseline.final_position()).norm() * 1000.0,
        start_pct: pct(baseline.start_p(), sim),
        final_deep_pct,
        final_baseline_pct,
        delta_final_pct: final_deep_pct - final_baseline_pct,
        term_deep: deep.termination.to_string(),
        term_baseline: baseline.termination.to_string(),
    }
}

/// Build the report from trial results (in plan order).
pub fn assemble_report(
    results: Vec<TrialResult>,
    sim: &SimConfig,
    config: &EvalConfig,
) -> SeriesReport {
    let mut aggregates = BTreeMap::new();
    let mut deep_fruit_large_fraction = 0.0;
    let mut baseline_fruit_large_fraction = 0.0;
    if !results.is_empty() {
        let n = results.len() as f64;
        let metric = |f: fn(&TrialResult) -> f64| results.iter().map(f);
        aggregates.insert("steps_deep".to_string(), aggregate(metric(|t| t.steps_deep as f64)));
        aggregates
            .insert("steps_baseline".to_string(), aggregate(metric(|t| t.steps_baseline as f64)));
        aggregates.insert("delta_steps".to_string(), aggregate(metric(|t| t.delta_steps as f64)));
        aggregates
            .insert("endpoint_delta_mm".to_string(), aggregate(metric(|t| t.endpoint_delta_mm)));
        aggregates.insert("start_pct".to_string(), aggregate(metric(|t| t.start_pct)));
        aggregates.insert("final_deep_pct".to_string(), aggregate(metric(|t| t.final_deep_pct)));
        aggregates
            .insert("final_baseline_pct".to_string(), aggregate(metric(|t| t.final_baseline_pct)));
        aggregates.insert("delta_final_pct".to_string(), aggregate(metric(|t| t.delta_final_pct)));
        aggregates.insert(
            "abs_delta_final_pct".to_string(),
            aggregate(metric(|t| t.delta_final_pct.abs())),
        );
        deep_fruit_large_fraction =
            results.iter().filter(|t| t.term_deep == "FruitLarge").count() as f64 / n;
        baseline_fruit_large_fraction =
            results.iter().filter(|t| t.term_baseline == "FruitLarge").count() as f64 / n;
    }
    SeriesReport {
        series: config.series.number(),
        master_seed: config.master_seed,
        n_trials: results.len(),
        deep_fruit_large_fraction,
        baseline_fruit_large_fraction,
        trials: results,
        aggregates,
        config: json!({ "sim": sim, "eval": config }),
    }
}

/// Plan and run a whole series serially.
pub fn run_series(
    sim: &SimConfig,
    model: &Model,
    config: &EvalConfig,
) -> Result<SeriesReport, EvalError> {
    let plans = plan_trials(sim, config)?;
    let results: Result<Vec<TrialResult>, EvalError> =
        plans.iter().map(|p| run_trial(p, model, sim)).collect();
    Ok(assemble_report(results?, sim, config))
}

/// Pretty JSON with a trailing newline; byte-deterministic for a given
/// report.
pub fn report_json(report: &SeriesReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub const REPORT_CSV_HEADER: &str = "series,seed,steps_deep,delta_steps,endpoint_delta_mm,start_pct,final_deep_pct,delta_final_pct,term_deep,term_baseline";

/// Flat per-trial CSV (header always present, even with zero trials).
pub fn report_csv(report: &SeriesReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for t in &report.trials {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            report.series,
            t.scene_seed,
            t.steps_deep,
            t.delta_steps,
            t.endpoint_delta_mm,
            t.start_pct,
            t.final_deep_pct,
            t.delta_final_pct,
            t.term_deep,
            t.term_baseline
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Model, ModelShape, PARAM_NAMES};
    use crate::scene::ELIGIBLE_MIN_FRACTION;

    fn quick_sim() -> SimConfig {
        let mut sim = SimConfig::default();
        // Keep unit-test servo runs short; full-length runs belong to the
        // acceptance suite.
        sim.servo.max_steps = 4;
        sim
    }

    fn zero_model() -> Model {
        let mut model = Model::new(ModelShape::default(), 1).unwrap();
        for name in PARAM_NAMES {
            model.param_mut(name).data.fill(0.0);
        }
        model
    }

    #[test]
    fn series_numbers_round_trip() {
        assert_eq!(Series::from_number(1), Some(Series::Nominal));
        assert_eq!(Series::from_number(2), Some(Series::OffsetStart));
        assert_eq!(Series::from_number(3), None);
        assert_eq!(Series::OffsetStart.number(), 2);
    }

    #[test]
    fn planning_is_deterministic_and_eligible() {
        let sim = quick_sim();
        let config = EvalConfig { n_trials: 3, master_seed: 5, ..EvalConfig::default() };
        let a = plan_trials(&sim, &config).unwrap();
        let b = plan_trials(&sim, &config).unwrap();
        assert_eq!(a, b);
        let c = plan_trials(&sim, &EvalConfig { master_seed: 6, ..config }).unwrap();
        assert_ne!(a, c);
        for plan in &a {
            assert_eq!(plan.start_position, sim.scenario.initial_ee_position);
            let pose = start_pose(&sim.scenario, plan.start_position);
            assert!(is_eligible(&plan.scene, &pose, |s, p| fruit_fraction_at(s, p, &sim)));
        }
    }

    #[test]
    fn offset_series_perturbs_starts_within_range() {
        let sim = quick_sim();
        let config = EvalConfig {
            series: Series::OffsetStart,
            n_trials: 4,
            master_seed: 11,
            ..EvalConfig::default()
        };
        let plans = plan_trials(&sim, &config).unwrap();
        let nominal = sim.scenario.initial_ee_position;
        let lo = sim.scenario.start_offset_range.lo();
        let hi = sim.scenario.start_offset_range.hi();
        let mut distinct = false;
        for plan in &plans {
            let d = plan.start_position - nominal;
            for c in [d.x, d.y, d.z] {
                assert!(c >= lo && c <= hi, "offset {c} outside [{lo}, {hi}]");
            }
            if d.norm() > 0.0 {
                distinct = true;
            }
            let pose = start_pose(&sim.scenario, plan.start_position);
            let p = fruit_fraction_at(&plan.scene, &pose, &sim);
            assert!(p >= ELIGIBLE_MIN_FRACTION);
        }
        assert!(distinct, "offset starts should differ from nominal");
    }

    #[test]
    fn paired_trials_share_scene_and_start() {
        let sim = quick_sim();
        let config = EvalConfig { n_trials: 2, master_seed: 21, ..EvalConfig::default() };
        let report = run_series(&sim, &zero_model(), &config).unwrap();
        assert_eq!(report.trials.len(), 2);
        for t in &report.trials {
            // The zero model stops immediately with a small gradient.
            assert_eq!(t.steps_deep, 0);
            assert_eq!(t.term_deep, "GradientSmall");
            assert_eq!(t.delta_steps, -(t.steps_baseline as i64));
            assert!(t.start_pct > 0.0);
            assert!((t.final_deep_pct - t.start_pct).abs() < 1e-12);
        }
        assert_eq!(report.series, 1);
        assert!(report.aggregates.contains_key("endpoint_delta_mm"));
        let agg = &report.aggregates["steps_deep"];
        assert_eq!(agg.mean, 0.0);
        assert_eq!(report.deep_fruit_large_fraction, 0.0);
    }

    #[test]
    fn reports_are_byte_deterministic() {
        let sim = quick_sim();
        let config = EvalConfig {
            series: Series::OffsetStart,
            n_trials: 2,
            master_seed: 8,
            ..EvalConfig::default()
        };
        let model = zero_model();
        let r1 = run_series(&sim, &model, &config).unwrap();
        let r2 = run_series(&sim, &model, &config).unwrap();
        assert_eq!(report_json(&r1), report_json(&r2));
        assert_eq!(report_csv(&r1), report_csv(&r2));
        // Planned trials can also be executed out of order and reassembled.
        let plans = plan_trials(&sim, &config).unwrap();
        let mut results: Vec<TrialResult> = plans
            .iter()
            .rev()
            .map(|p| run_trial(p, &model, &sim).unwrap())
            .collect();
        results.reverse();
        let r3 = assemble_report(results, &sim, &config);
        assert_eq!(report_json(&r1), report_json(&r3));
    }

    #[test]
    fn empty_series_yields_header_only_csv_and_no_aggregates() {
        let sim = quick_sim();
        let config = EvalConfig { n_trials: 0, master_seed: 4, ..EvalConfig::default() };
        let report = run_series(&sim, &zero_model(), &config).unwrap();
        assert!(report.trials.is_empty());
        assert!(report.aggregates.is_empty());
        let csv = report_csv(&report);
        assert_eq!(csv, format!("{REPORT_CSV_HEADER}\n"));
    }

    #[test]
    fn aggregates_match_recomputation() {
        let sim = quick_sim();
        let config = EvalConfig { n_trials: 3, master_seed: 31, ..EvalConfig::default() };
        let report = run_series(&sim, &zero_model(), &config).unwrap();
        let mean_endpoint: f64 = report.trials.iter().map(|t| t.endpoint_delta_mm).sum::<f64>()
            / report.trials.len() as f64;
        assert!((report.aggregates["endpoint_delta_mm"].mean - mean_endpoint).abs() < 1e-9);
        let max_steps =
            report.trials.iter().map(|t| t.steps_baseline as f64).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.aggregates["steps_baseline"].max, max_steps);
    }
}
