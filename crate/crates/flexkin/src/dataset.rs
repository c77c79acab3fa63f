//! Dataset files: JSON-lines with one record per sequence, plus a manifest.
//! All arrays are flat row-major float64; the orderings are t-major, then
//! joint (or channel), then view:
//!   V, gt_positions: `[T][3J][K]`; Z_r: `[T][K]`;
//!   motion.q: `[T][J-1][4]`; motion.r: `[T][7][K]` (x, y, z, qw, qx, qy, qz);
//!   motion.f: `[T][2]`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{FlexError, Result};
use crate::kinematics::{MotionSequence, Positions3D, Rotations, RootTrajectory};
use crate::skeleton::{BoneLengths, SkeletonTopology};
use crate::synth::{gen_motion, gen_rig, render_observations, MultiView2D, NoiseModel, SceneConfig};

/// Plain serialized form of a motion (topology kept separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionJson {
    pub frames: usize,
    pub views: usize,
    pub s: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub f: Vec<f64>,
}

impl MotionJson {
    pub fn from_motion(motion: &MotionSequence) -> Self {
        Self {
            frames: motion.frames(),
            views: motion.views(),
            s: motion.lengths.distinct.clone(),
            q: motion.rotations.data().to_vec(),
            r: motion.root.data().to_vec(),
            f: motion.contacts.clone(),
        }
    }

    pub fn into_motion(self, topology: &SkeletonTopology) -> Result<MotionSequence> {
        let joints = topology.joint_count() - 1;
        MotionSequence::new(
            topology.clone(),
            BoneLengths::new(self.s)?,
            Rotations::new(self.frames, joints, self.q)?,
            RootTrajectory::new(self.frames, self.views, self.r)?,
            self.f,
        )
    }
}

/// A standalone motion file (used by the BVH exporter).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionFile {
    pub fps: f64,
    pub topology: serde_json::Value,
    pub motion: MotionJson,
}

impl MotionFile {
    pub fn from_motion(motion: &MotionSequence, fps: f64) -> Self {
        Self {
            fps,
            topology: motion.topology.to_value(),
            motion: MotionJson::from_motion(motion),
        }
    }

    pub fn load(path: &Path) -> Result<(MotionSequence, f64)> {
        let doc: MotionFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let topology = SkeletonTopology::from_value(&doc.topology)?;
        Ok((doc.motion.into_motion(&topology)?, doc.fps))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// One JSON line of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRecord {
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub gt_positions: Vec<f64>,
    #[serde(rename = "Z_r")]
    pub z_r: Vec<f64>,
    pub motion: MotionJson,
    pub rig: serde_json::Value,
}

/// Dataset manifest, written next to the JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_sequences: usize,
    pub frames: usize,
    pub views: usize,
    pub joint_count: usize,
    pub scene: SceneConfig,
    pub noise: NoiseModel,
    pub topology: serde_json::Value,
}

/// A fully loaded sequence.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub observations: MultiView2D,
    pub gt_positions: Positions3D,
    pub z_r: Vec<f64>,
    pub motion: MotionSequence,
    pub rig: CameraRig,
}

/// A dataset in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub topology: SkeletonTopology,
    pub sequences: Vec<LoadedSequence>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.motion.frames())
    }

    pub fn views(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.motion.views())
    }
}

pub fn manifest_path(dataset_path: &Path) -> std::path::PathBuf {
    let mut os = dataset_path.as_os_str().to_owned();
    os.push(".manifest.json");
    std::path::PathBuf::from(os)
}

/// Generation settings of one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_sequences: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub noise: NoiseModel,
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate and write a dataset; returns the manifest.
pub fn generate_dataset(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    spec.scene.validate()?;
    spec.noise.validate()?;
    let mut file = std::io::BufWriter::new(fs::File::create(out)?);
    let topology = crate::skeleton::default_topology();
    for i in 0..spec.n_sequences {
        let mut rng = sequence_rng(spec.seed, i);
        let motion = gen_motion(&spec.scene, &mut rng)?;
        let rig = gen_rig(&spec.scene, &mut rng)?;
        let noise = NoiseModel {
            seed: spec.seed ^ ((i as u64) << 17) ^ 0x5bf0_3635,
            ..spec.noise.clone()
        };
        let scene = render_observations(&motion, &rig, &noise)?;
        let record = SequenceRecord {
            v: scene.observations.data().to_vec(),
            gt_positions: scene.gt_positions.data().to_vec(),
            z_r: scene.root_depths.clone(),
            motion: MotionJson::from_motion(&scene.view_motion),
            rig: rig.to_json(),
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    let manifest = DatasetManifest {
        seed: spec.seed,
        n_sequences: spec.n_sequences,
        frames: spec.scene.frames,
        views: spec.scene.views,
        joint_count: topology.joint_count(),
        scene: spec.scene.clone(),
        noise: spec.noise.clone(),
        topology: topology.to_value(),
    };
    fs::write(manifest_path(out), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a dataset written by [`generate_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let topology = SkeletonTopology::from_value(&manifest.topology)?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut sequences = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(&line)?;
        sequences.push(load_record(record, &topology)?);
    }
    if sequences.len() != manifest.n_sequences {
        return Err(FlexError::ShapeMismatch(format!(
            "manifest says {} sequences, file has {}",
            manifest.n_sequences,
            sequences.len()
        )));
    }
    Ok(Dataset { topology, sequences })
}

fn load_record(record: SequenceRecord, topology: &SkeletonTopology) -> Result<LoadedSequence> {
    let motion = record.motion.into_motion(topology)?;
    let frames = motion.frames();
    let views = motion.views();
    let j = topology.joint_count();
    let observations = MultiView2D::new(frames, j, views, record.v)?;
    let gt_positions = Positions3D::new(frames, j, views, record.gt_positions)?;
    if record.z_r.len() != frames * views {
        return Err(FlexError::ShapeMismatch(format!(
            "Z_r has {} values, expected {}",
            record.z_r.len(),
            frames * views
        )));
    }
    let rig = CameraRig::from_json(&record.rig)?;
    if rig.views() != views || rig.frames() != frames {
        return Err(FlexError::ShapeMismatch("rig dims disagree with motion".into()));
    }
    Ok(LoadedSequence {
        observations,
        gt_positions,
        z_r: record.z_r,
        motion,
        rig,
    })
}
