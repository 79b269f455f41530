//! Training-pair extraction and the on-disk dataset format.
//!
//! Samples pair a downsampled reference-camera image with the camera-frame
//! gradient that drove the controller at that step. The binary format is
//! little-endian throughout: magic "MTSD", u32 version = 1, u32 sample count,
//! u16 channels/height/width, then per record u32 trajectory_id, u32
//! step_index, 3xf32 target, then channel-major f32 image data. A JSON
//! sidecar manifest (`<path>.manifest.json`) records the split membership,
//! seeds, and generation parameters.

use crate::render::{downsample2, ColorImage};
use crate::scene::{is_eligible, sample_scene, SceneInstance};
use crate::servo::{
    run_baseline, start_pose, ServoError, SimConfig, TrajectoryRecord, OBJECTIVE_PERCENT_SCALE,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DATASET_MAGIC: [u8; 4] = *b"MTSD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic {found:?}, expected \"MTSD\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dataset version {found}, expected {DATASET_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("dataset file truncated in header")]
    TruncatedHeader,
    #[error("dataset file truncated in record {index}")]
    TruncatedRecord { index: usize },
    #[error("dataset file has {extra} trailing bytes after the last record")]
    TrailingBytes { extra: usize },
    #[error("image dimensions {got:?} do not match dataset dimensions {expected:?}")]
    DimensionMismatch { expected: (u16, u16, u16), got: (u16, u16, u16) },
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("dataset manifest unreadable: {0}")]
    ManifestRead(String),
    #[error("dataset manifest inconsistent with binary file: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training pair. The image holds raw render values in [0, 1]; input
/// normalization is the model's job (it stores per-channel statistics as
/// metadata). The target is the camera-frame objective gradient in
/// fraction-of-image per meter (the servo's percent-per-meter gradient
/// divided by [`OBJECTIVE_PERCENT_SCALE`]). The O(1) scale keeps the
/// regression well conditioned; the deep controller rescales predictions
/// back to percent units.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ColorImage,
    pub target: [f32; 3],
    pub trajectory_id: u32,
    pub step_index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample per recorded step, images downsampled 2x to the training
/// resolution and gradients rescaled to fraction-of-image per meter. Order
/// is stable: trajectory order, then step order.
pub fn harvest_samples(trajectories: &[TrajectoryRecord]) -> Vec<Sample> {
    let mut samples = Vec::new();
    for (trajectory_id, record) in trajectories.iter().enumerate() {
        for (step_index, step) in record.steps.iter().enumerate() {
            let g = step.gradient.g * (1.0 / OBJECTIVE_PERCENT_SCALE);
            samples.push(Sample {
                image: downsample2(&step.image),
                target: [g.x as f32, g.y as f32, g.z as f32],
                trajectory_id: trajectory_id as u32,
                step_index: step_index as u32,
            });
        }
    }
    samples
}

/// Translate by integer pixel offsets; vacated pixels are zero-filled.
/// Content at (u, v) moves to (u + dx, v + dy).
pub fn translate(image: &ColorImage, dx: i64, dy: i64) -> ColorImage {
    let (w, h) = (image.width as i64, image.height as i64);
    let plane = (image.width * image.height) as usize;
    let mut data = vec![0.0f32; image.data.len()];
    for c in 0..3usize {
        for v in 0..h {
            let sv = v - dy;
            if !(0..h).contains(&sv) {
                continue;
            }
            for u in 0..w {
                let su = u - dx;
                if (0..w).contains(&su) {
                    data[c * plane + (v * w + u) as usize] =
                        image.data[c * plane + (sv * w + su) as usize];
                }
            }
        }
    }
    ColorImage { width: image.width, height: image.height, data }
}

/// Augmentation jitter: shift the image by offsets drawn uniformly from
/// [-max_shift, max_shift] per axis (draw order dx then dy). The target is
/// unchanged; `max_shift = 0` is the identity.
pub fn jitter(sample: &Sample, max_shift: u32, seed: u64) -> Sample {
    if max_shift == 0 {
        return sample.clone();
    }
    let m = max_shift as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.gen_range(-m..=m);
    let dy = rng.gen_range(-m..=m);
    Sample { image: translate(&sample.image, dx, dy), ..sample.clone() }
}

/// Seeded uniform permutation, first round(ratio * N) samples to train.
pub fn split(samples: Vec<Sample>, ratio: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (ratio * samples.len() as f64).round() as usize;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut validation = Vec::with_capacity(slots.len() - n_train);
    for (rank, &i) in order.iter().enumerate() {
        let sample = slots[i].take().expect("each slot moved once");
        if rank < n_train {
            train.push(sample);
        } else {
            validation.push(sample);
        }
    }
    Ok(DatasetSplit { train, validation, split_seed: seed })
}

fn image_dims(sample: &Sample) -> (u16, u16, u16) {
    (3, sample.image.height as u16, sample.image.width as u16)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn members_of(samples: &[Sample]) -> Vec<(u32, u32)> {
    samples.iter().map(|s| (s.trajectory_id, s.step_index)).collect()
}

/// Write the binary dataset plus its JSON sidecar manifest. `generation`
/// is caller-provided provenance (seeds, configuration) embedded verbatim.
pub fn write_dataset(
    split: &DatasetSplit,
    path: &Path,
    generation: &serde_json::Value,
) -> Result<(), DatasetError> {
    let all: Vec<&Sample> = split.train.iter().chain(&split.validation).collect();
    let dims = all.first().map(|s| image_dims(s)).unwrap_or((3, 0, 0));
    for s in &all {
        if image_dims(s) != dims {
            return Err(DatasetError::DimensionMismatch { expected: dims, got: image_dims(s) });
        }
    }
    let (c, h, w) = dims;
    let plane = h as usize * w as usize;
    let mut bytes = Vec::with_capacity(16 + all.len() * (20 + 3 * plane * 4));
    bytes.extend_from_slice(&DATASET_MAGIC);
    bytes.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(all.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&c.to_le_bytes());
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&w.to_le_bytes());
    for s in &all {
        bytes.extend_from_slice(&s.trajectory_id.to_le_bytes());
        bytes.extend_from_slice(&s.step_index.to_le_bytes());
        for t in s.target {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        for v in &s.image.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;

    let manifest = json!({
        "format": "mts-dataset-manifest",
        "version": DATASET_VERSION,
        "image_shape": [c, h, w],
        "split_seed": split.split_seed,
        "train_count": split.train.len(),
        "validation_count": split.validation.len(),
        "train_members": members_of(&split.train),
        "validation_members": members_of(&split.validation),
        "generation": generation,
    });
    let mut mf = std::fs::File::create(manifest_path(path))?;
    mf.write_all(serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    mf.write_all(b"\n")?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(slice)
    }
}

#[derive(Deserialize)]
struct ManifestFile {
    split_seed: u64,
    train_count: usize,
    validation_count: usize,
    train_members: Vec<(u32, u32)>,
    validation_members: Vec<(u32, u32)>,
}

/// Read a dataset written by [`write_dataset`]; the sidecar manifest
/// supplies the train/validation boundary. Round-trips bit-exactly.
pub fn read_dataset(path: &Path) -> Result<DatasetSplit, DatasetError> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    let magic: [u8; 4] = cur.take(4).ok_or(DatasetError::TruncatedHeader)?.try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(cur.take(4).ok_or(DatasetError::TruncatedHeader)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch { found: version });
    }
    let n = u32::from_le_bytes(cur.take(4).ok_or(DatasetError::TruncatedHeader)?.try_into().unwrap()) as usize;
    let mut dims = [0u16; 3];
    for d in &mut dims {
        *d = u16::from_le_bytes(cur.take(2).ok_or(DatasetError::TruncatedHeader)?.try_into().unwrap());
    }
    let [c, h, w] = dims;
    if c != 3 {
        return Err(DatasetError::DimensionMismatch { expected: (3, h, w), got: (c, h, w) });
    }
    let plane = h as usize * w as usize;
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let mut rec = Cursor { bytes: cur.take(20 + 3 * plane * 4).ok_or(DatasetError::TruncatedRecord { index })?, at: 0 };
        let trajectory_id = u32::from_le_bytes(rec.take(4).unwrap().try_into().unwrap());
        let step_index = u32::from_le_bytes(rec.take(4).unwrap().try_into().unwrap());
        let mut target = [0.0f32; 3];
        for t in &mut target {
            *t = f32::from_le_bytes(rec.take(4).unwrap().try_into().unwrap());
        }
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 * plane {
            data.push(f32::from_le_bytes(rec.take(4).unwrap().try_into().unwrap()));
        }
        samples.push(Sample {
            image: ColorImage { width: w as u32, height: h as u32, data },
            target,
            trajectory_id,
            step_index,
        });
    }
    if cur.at != bytes.len() {
        return Err(DatasetError::TrailingBytes { extra: bytes.len() - cur.at });
    }

    let manifest_bytes = std::fs::read(manifest_path(path))
        .map_err(|e| DatasetError::ManifestRead(e.to_string()))?;
    let manifest: ManifestFile = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| DatasetError::ManifestRead(e.to_string()))?;
    if manifest.train_count + manifest.validation_count != samples.len() {
        return Err(DatasetError::ManifestMismatch(format!(
            "manifest counts {}+{} but file holds {} records",
            manifest.train_count,
            manifest.validation_count,
            samples.len()
        )));
    }
    let validation = samples.split_off(manifest.train_count);
    let train = samples;
    if members_of(&train) != manifest.train_members
        || members_of(&validation) != manifest.validation_members
    {
        return Err(DatasetError::ManifestMismatch(
            "manifest membership does not match record order".into(),
        ));
    }
    Ok(DatasetSplit { train, validation, split_seed: manifest.split_seed })
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("no eligible scene found after {attempts} consecutive samples")]
    NoEligibleScene { attempts: usize },
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Dataset-generation parameters (subordinate seeds derive from
/// `master_seed`: scene stream, split, jitter, in that order).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_trajectories: usize,
    pub master_seed: u64,
    pub split_ratio: f64,
    pub jitter_px: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n_trajectories: 55, master_seed: 7, split_ratio: 0.7, jitter_px: 0 }
    }
}

pub struct GenOutcome {
    pub split: DatasetSplit,
    /// Scene seeds of the eligible trajectories, in trajectory order.
    pub trajectory_seeds: Vec<u64>,
    pub rejected_scenes: usize,
    pub step_counts: Vec<usize>,
    /// Provenance block for the dataset manifest.
    pub generation: serde_json::Value,
}

const MAX_CONSECUTIVE_REJECTIONS: usize = 1000;

/// Draw scene seeds from the master stream, keeping those whose start view
/// is partially occluded, until `n` scenes are collected.
pub fn plan_training_scenes(
    sim: &SimConfig,
    n: usize,
    scene_stream_seed: u64,
) -> Result<(Vec<SceneInstance>, usize), GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_stream_seed);
    let pose = start_pose(&sim.scenario, sim.scenario.initial_ee_position);
    let mut scenes = Vec::with_capacity(n);
    let mut rejected = 0usize;
    let mut consecutive = 0usize;
    while scenes.len() < n {
        let seed = rng.gen::<u64>();
        let scene = sample_scene(&sim.scenario, seed);
        let eligible = is_eligible(&scene, &pose, |s, p| {
            crate::render::fruit_fraction(&crate::render::render_labels(s, p, &sim.intrinsics))
        });
        if eligible {
            scenes.push(scene);
            consecutive = 0;
        } else {
            rejected += 1;
            consecutive += 1;
            if consecutive >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(GenError::NoEligibleScene { attempts: consecutive });
            }
        }
    }
    Ok((scenes, rejected))
}

/// Full generation pipeline with a pluggable trajectory runner, so callers
/// may run the (pure, per-scene) baseline trajectories in parallel. Planning,
/// splitting, and jitter seeding stay serial and deterministic.
pub fn generate_dataset_with<F>(sim: &SimConfig, gen: &GenConfig, run_all: F) -> Result<GenOutcome, GenError>
where
    F: FnOnce(&[SceneInstance]) -> Result<Vec<TrajectoryRecord>, ServoError>,
{
    let mut seed_rng = ChaCha8Rng::seed_from_u64(gen.master_seed);
    let scene_stream_seed = seed_rng.gen::<u64>();
    let split_seed = seed_rng.gen::<u64>();
    let jitter_seed = seed_rng.gen::<u64>();

    let (scenes, rejected_scenes) = plan_training_scenes(sim, gen.n_trajectories, scene_stream_seed)?;
    let trajectories = run_all(&scenes)?;
    let step_counts: Vec<usize> = trajectories.iter().map(|t| t.steps.len()).collect();
    let samples = harvest_samples(&trajectories);
    let total = samples.len();
    let mut split = split(samples, gen.split_ratio, split_seed)?;
    if gen.jitter_px > 0 {
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        for sample in &mut split.train {
            let seed = jitter_rng.gen::<u64>();
            *sample = jitter(sample, gen.jitter_px, seed);
        }
    }
    let trajectory_seeds: Vec<u64> = scenes.iter().map(|s| s.seed).collect();
    let generation = json!({
        "sim": sim,
        "gen": gen,
        "derived_seeds": {
            "scene_stream": scene_stream_seed,
            "split": split_seed,
            "jitter": jitter_seed,
        },
        "trajectory_seeds": trajectory_seeds,
        "rejected_scenes": rejected_scenes,
        "step_counts": step_counts,
        "total_samples": total,
        "train_count": split.train.len(),
        "validation_count": split.validation.len(),
    });
    Ok(GenOutcome { split, trajectory_seeds, rejected_scenes, step_counts, generation })
}

/// Serial generation pipeline.
pub fn generate_dataset(sim: &SimConfig, gen: &GenConfig) -> Result<GenOutcome, GenError> {
    generate_dataset_with(sim, gen, |scenes| {
        scenes.iter().map(|scene| run_baseline(scene, sim)).collect()
    })
}
