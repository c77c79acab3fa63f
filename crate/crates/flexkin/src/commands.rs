//! File-level entry points behind the CLI: dataset synthesis, training,
//! evaluation, the camera-perturbation study, BVH export, and track
//! association. The `FLEXKIN_SEED` environment variable overrides the seed
//! of any config it applies to.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{perturb_rig, triangulate, ProjMatrix};
use crate::checkpoint;
use crate::dataset::{generate_dataset, read_dataset, Dataset, DatasetManifest, MotionFile, SynthSpec};
use crate::error::{FlexError, Result};
use crate::metrics::{mpjpe_p1, to_csv, MetricRow};
use crate::net::{FlexModel, FusionConfig};
use crate::skeleton::default_topology;
use crate::synth::{associate_tracks, Skeleton2D};
use crate::train::{evaluate, step_log_csv, train, TrainConfig};

pub const SEED_ENV_VAR: &str = "FLEXKIN_SEED";

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV_VAR).ok().and_then(|s| s.parse().ok())
}

/// Generate a dataset from a synthesis config file.
pub fn synth(config_path: &Path, out: &Path) -> Result<DatasetManifest> {
    let mut spec: SynthSpec = serde_json::from_str(&fs::read_to_string(config_path)?)?;
    if let Some(seed) = env_seed() {
        spec.seed = seed;
    }
    generate_dataset(&spec, out)
}

fn epoch_prefix(prefix: &Path, epoch: usize) -> PathBuf {
    let mut os = prefix.as_os_str().to_owned();
    os.push(format!("_epoch{epoch}"));
    PathBuf::from(os)
}

fn loss_log_path(prefix: &Path) -> PathBuf {
    let mut os = prefix.as_os_str().to_owned();
    os.push(".losses.csv");
    PathBuf::from(os)
}

/// Train from a config file; writes per-epoch checkpoints, the final
/// checkpoint at `out_prefix`, and a per-step loss log CSV.
pub fn train_from_files(
    config_path: &Path,
    data_override: Option<&Path>,
    out_prefix: &Path,
) -> Result<PathBuf> {
    let mut config: TrainConfig = serde_json::from_str(&fs::read_to_string(config_path)?)?;
    if let Some(seed) = env_seed() {
        config.seed = seed;
    }
    let data_path = data_override
        .map(Path::to_path_buf)
        .or_else(|| config.data.clone())
        .ok_or_else(|| {
            FlexError::InvalidConfig("no dataset path (config `data` or --data)".into())
        })?;
    let dataset = read_dataset(&data_path)?;
    let (model, log) = train(&dataset, &config, |epoch, snapshot| {
        checkpoint::save(&epoch_prefix(out_prefix, epoch), snapshot)
    })?;
    checkpoint::save(out_prefix, &model)?;
    fs::write(loss_log_path(out_prefix), step_log_csv(&log))?;
    Ok(loss_log_path(out_prefix))
}

/// Evaluate a checkpoint on a dataset restricted to 1-based view indices.
pub fn eval_to_csv(
    ckpt_prefix: &Path,
    data_path: &Path,
    views_one_based: &[usize],
    out_csv: &Path,
) -> Result<Vec<MetricRow>> {
    let model = checkpoint::load(ckpt_prefix)?;
    let dataset = read_dataset(data_path)?;
    let views = to_zero_based(views_one_based)?;
    let rows = evaluate(&model, &dataset, &views)?;
    fs::write(out_csv, to_csv(&rows))?;
    Ok(rows)
}

fn to_zero_based(views: &[usize]) -> Result<Vec<usize>> {
    views
        .iter()
        .map(|&v| {
            if v == 0 {
                Err(FlexError::InvalidConfig(
                    "view indices are 1-based on the command line".into(),
                ))
            } else {
                Ok(v - 1)
            }
        })
        .collect()
}

/// One row of the perturbation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub sigma_frac: f64,
    pub baseline_mpjpe_mm: f64,
    pub flex_mpjpe_mm: f64,
}

pub const PERTURB_CSV_HEADER: &str = "sigma_frac,baseline_mpjpe_mm,flex_mpjpe_mm";

pub fn perturb_rows_to_csv(rows: &[PerturbRow]) -> String {
    let mut out = String::from(PERTURB_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.sigma_frac, r.baseline_mpjpe_mm, r.flex_mpjpe_mm
        ));
    }
    out
}

pub fn perturb_rows_from_csv(text: &str) -> Result<Vec<PerturbRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(PERTURB_CSV_HEADER) {
        return Err(FlexError::ShapeMismatch("bad perturbation CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != 3 {
                return Err(FlexError::ShapeMismatch("bad perturbation CSV row".into()));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| FlexError::ShapeMismatch(format!("bad number {s:?}")))
            };
            Ok(PerturbRow {
                sigma_frac: parse(cells[0])?,
                baseline_mpjpe_mm: parse(cells[1])?,
                flex_mpjpe_mm: parse(cells[2])?,
            })
        })
        .collect()
}

/// Seed of the perturbation Monte-Carlo draws.
pub const PERTURB_SEED: u64 = 42;
/// Perturbed-rig draws averaged per sequence and sigma.
pub const PERTURB_DRAWS: usize = 2;

/// Camera-sensitivity study: for each sigma, triangulate every joint from
/// the observations using Gaussian-perturbed projection matrices and compare
/// against world-frame ground truth; the network MPJPE (same seeded model,
/// never reading the rig) is recomputed per sigma and is constant across
/// them by construction.
pub fn perturb_study(data_path: &Path, sigmas: &[f64], out_csv: &Path) -> Result<Vec<PerturbRow>> {
    let dataset = read_dataset(data_path)?;
    if dataset.sequences.is_empty() {
        return Err(FlexError::InvalidConfig("empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let baseline = triangulation_mpjpe(&dataset, sigma, si)?;
        let flex = seeded_model_mpjpe(&dataset)?;
        rows.push(PerturbRow {
            sigma_frac: sigma,
            baseline_mpjpe_mm: baseline,
            flex_mpjpe_mm: flex,
        });
    }
    fs::write(out_csv, perturb_rows_to_csv(&rows))?;
    Ok(rows)
}

fn triangulation_mpjpe(dataset: &Dataset, sigma: f64, sigma_index: usize) -> Result<f64> {
    let j_count = dataset.topology.joint_count();
    let mut total = 0.0;
    let mut count = 0.0;
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let frames = seq.motion.frames();
        let views = seq.motion.views();
        // world-frame ground truth out of view 0
        let mut gt_world = vec![0.0; frames * 3 * j_count];
        for t in 0..frames {
            let cam = seq.rig.camera(0, t);
            for j in 0..j_count {
                let w = cam.extrinsics.inverse_transform(seq.gt_positions.pos(t, j, 0));
                gt_world[t * 3 * j_count + 3 * j..t * 3 * j_count + 3 * j + 3]
                    .copy_from_slice(&w);
            }
        }
        for draw in 0..PERTURB_DRAWS {
            let mut rng = ChaCha8Rng::seed_from_u64(
                PERTURB_SEED ^ ((sigma_index as u64) << 40) ^ ((i as u64) << 8) ^ draw as u64,
            );
            let rig = if sigma == 0.0 {
                seq.rig.clone()
            } else {
                perturb_rig(&seq.rig, sigma, &mut rng)
            };
            let mut rec = vec![0.0; frames * 3 * j_count];
            for t in 0..frames {
                let projections: Vec<ProjMatrix> =
                    (0..views).map(|k| rig.camera(k, t).projection()).collect();
                for j in 0..j_count {
                    let obs: Vec<(ProjMatrix, [f64; 2])> = (0..views)
                        .map(|k| (projections[k], seq.observations.uv(t, j, k)))
                        .collect();
                    let p = triangulate(&obs)?;
                    rec[t * 3 * j_count + 3 * j..t * 3 * j_count + 3 * j + 3]
                        .copy_from_slice(&p);
                }
            }
            total += mpjpe_p1(&rec, &gt_world, frames, j_count)?;
            count += 1.0;
        }
    }
    Ok(total / count)
}

fn seeded_model_mpjpe(dataset: &Dataset) -> Result<f64> {
    let fusion = FusionConfig { views: dataset.views(), ..FusionConfig::default() };
    let model = FlexModel::new(fusion, dataset.topology.clone(), PERTURB_SEED)?;
    let views: Vec<usize> = (0..dataset.views()).collect();
    let rows = evaluate(&model, dataset, &views)?;
    Ok(rows.last().expect("aggregate row").mpjpe_mm)
}

/// Export one view of a motion file as BVH.
pub fn export_bvh(motion_path: &Path, view: usize, out: &Path) -> Result<()> {
    let (motion, fps) = MotionFile::load(motion_path)?;
    let text = crate::bvh::write_bvh(&motion, view, fps)?;
    fs::write(out, text)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrackInput {
    frames: Vec<Vec<Skeleton2D>>,
}

#[derive(Serialize, Deserialize)]
struct TrackOutput {
    ids: Vec<Vec<usize>>,
}

/// Assign person IDs over a detections file.
pub fn track(input: &Path, output: &Path) -> Result<()> {
    let doc: TrackInput = serde_json::from_str(&fs::read_to_string(input)?)?;
    let ids = associate_tracks(&doc.frames);
    fs::write(output, serde_json::to_string(&TrackOutput { ids })?)?;
    Ok(())
}

/// The named desk-scale fixture: 200 train + 40 test sequences, T=64, K=4,
/// J=20, static four-camera ring, 1 px observation noise with occlusions.
pub fn standard_desk_spec(train_split: bool) -> SynthSpec {
    SynthSpec {
        n_sequences: if train_split { 200 } else { 40 },
        seed: if train_split { 42 } else { 1042 },
        scene: crate::synth::SceneConfig::default(),
        noise: crate::synth::NoiseModel::default(),
    }
}

/// Training defaults used by the acceptance runs on the desk fixture.
pub fn standard_train_config() -> TrainConfig {
    TrainConfig::default()
}

/// The topology shipped with the binary, exposed for config tooling.
pub fn default_topology_json() -> String {
    default_topology().to_json()
}
