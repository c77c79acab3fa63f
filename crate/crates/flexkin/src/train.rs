//! Training and evaluation: adaptive-moment optimization with an alternating
//! discriminator / generator schedule, and the metric evaluation loop.

use std::path::PathBuf;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LoadedSequence};
use crate::error::{FlexError, Result};
use crate::kinematics::{fk, root_zeroed_positions, temporal_diff, MotionSequence, Positions3D};
use crate::losses::{
    self, foot_contact_loss, foot_label_loss, lsgan_loss, position_loss, root_depth_loss,
    skeleton_loss, total_loss, GanRole, LossParts, LossWeights,
};
use crate::metrics::{accel_error, mpjpe_p1, root_trajectory_error, MetricRow};
use crate::net::{fk_view, FkView, FlexModel, ForwardOutput, FusionConfig, ParamBinding};
use crate::tape::{Gradients, Tape, Tensor, TensorId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer over a masked subset of the parameter store.
pub struct Adam {
    lr: f64,
    t: u64,
    active: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &FlexModel, lr: f64, active: impl Fn(&str) -> bool) -> Self {
        let active: Vec<bool> = model.params.iter().map(|p| active(&p.name)).collect();
        let m = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let v = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self { lr, t: 0, active, m, v }
    }

    pub fn step(&mut self, model: &mut FlexModel, binding: &ParamBinding, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..binding.len() {
            if !self.active[i] {
                continue;
            }
            let Some(g) = grads.get(binding.id(i)) else { continue };
            let values = model.params.values_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for e in 0..values.len() {
                m[e] = ADAM_BETA1 * m[e] + (1.0 - ADAM_BETA1) * g[e];
                v[e] = ADAM_BETA2 * v[e] + (1.0 - ADAM_BETA2) * g[e] * g[e];
                let mh = m[e] / bc1;
                let vh = v[e] / bc2;
                values[e] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn default_one() -> usize {
    1
}

/// Run configuration for `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dataset path; the CLI `--data` flag overrides it.
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub weights: LossWeights,
    /// Discriminator / generator alternation ratio, default 1:1.
    #[serde(default = "default_one")]
    pub d_steps: usize,
    #[serde(default = "default_one")]
    pub g_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            epochs: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 42,
            fusion: FusionConfig::default(),
            weights: LossWeights::default(),
            d_steps: 1,
            g_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || !(self.learning_rate > 0.0)
            || self.d_steps == 0
            || self.g_steps == 0
        {
            return Err(FlexError::InvalidConfig(
                "epochs, batch size, learning rate and step ratios must be positive".into(),
            ));
        }
        self.fusion.validate()?;
        self.weights.validate()
    }
}

/// Scalar loss values of one optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub d_loss: f64,
    pub total: f64,
    pub position: f64,
    pub skeleton: f64,
    pub adversarial: f64,
    pub root_depth: f64,
    pub foot_labels: f64,
    pub foot_contact: f64,
}

pub const STEP_LOG_HEADER: &str =
    "step,epoch,d_loss,total,position,skeleton,adversarial,root_depth,foot_labels,foot_contact";

pub fn step_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(STEP_LOG_HEADER);
    out.push('\n');
    for s in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.step,
            s.epoch,
            s.d_loss,
            s.total,
            s.position,
            s.skeleton,
            s.adversarial,
            s.root_depth,
            s.foot_labels,
            s.foot_contact
        ));
    }
    out
}

/// Temporal difference of one joint's ground-truth rotation stream.
fn real_dq(motion: &MotionSequence, joint: usize) -> Result<Tensor> {
    let frames = motion.frames();
    let mut stream = Vec::with_capacity(frames * 4);
    for t in 0..frames {
        stream.extend_from_slice(&motion.rotations.quat(t, joint));
    }
    Ok(Tensor::new(vec![frames - 1, 4], temporal_diff(&stream, frames)?))
}

fn real_root_dq(motion: &MotionSequence, view: usize) -> Result<Tensor> {
    let frames = motion.frames();
    let mut stream = Vec::with_capacity(frames * 4);
    for t in 0..frames {
        stream.extend_from_slice(&motion.root.rot(t, view));
    }
    Ok(Tensor::new(vec![frames - 1, 4], temporal_diff(&stream, frames)?))
}

/// Rows of joint `joint` (1-based) from a frame-major `[T*(J-1) x 4]` tensor,
/// then the forward difference over time: `[T-1 x 4]`.
fn fake_dq(tape: &mut Tape, q_rows: TensorId, joints: usize, frames: usize, joint: usize) -> TensorId {
    let idx: Vec<usize> = (0..frames).map(|t| t * joints + (joint - 1)).collect();
    let stream = tape.gather_rows(q_rows, idx);
    diff_rows(tape, stream, frames)
}

fn diff_rows(tape: &mut Tape, stream: TensorId, frames: usize) -> TensorId {
    let later = tape.slice_rows(stream, 1, frames);
    let earlier = tape.slice_rows(stream, 0, frames - 1);
    tape.sub(later, earlier)
}

struct SequenceGt {
    zeroed: Positions3D,
}

/// Discriminator phase over one batch: adversarial losses only, generator
/// streams detached.
fn discriminator_step(
    model: &mut FlexModel,
    adam: &mut Adam,
    batch: &[&LoadedSequence],
) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let joints = model.topology.joint_count() - 1;
    let views = model.config.views;
    let mut real_scores: Vec<Vec<TensorId>> = vec![Vec::new(); joints + 1];
    let mut fake_scores: Vec<Vec<TensorId>> = vec![Vec::new(); joints + 1];
    for seq in batch {
        let frames = seq.motion.frames();
        let inputs = model.input_tensors(&mut tape, &seq.observations);
        let fused = model.fuse_q(&mut tape, &binding, &inputs);
        let (q_rows, _pos, r_rot, _foot) = model.encode_q(&mut tape, &binding, fused);
        let q_det = tape.detach(q_rows);
        for joint in 1..=joints {
            let fake = fake_dq(&mut tape, q_det, joints, frames, joint);
            fake_scores[joint].push(model.discriminate(&mut tape, &binding, joint, fake)?);
            let real = tape.constant(real_dq(&seq.motion, joint)?);
            real_scores[joint].push(model.discriminate(&mut tape, &binding, joint, real)?);
        }
        for k in 0..views {
            let detached = tape.detach(r_rot[k]);
            let fake = diff_rows(&mut tape, detached, frames);
            fake_scores[0].push(model.discriminate(&mut tape, &binding, 0, fake)?);
            let gt_view = k.min(seq.motion.views() - 1);
            let real = tape.constant(real_root_dq(&seq.motion, gt_view)?);
            real_scores[0].push(model.discriminate(&mut tape, &binding, 0, real)?);
        }
    }
    let mut loss: Option<TensorId> = None;
    for joint in 0..=joints {
        let term = lsgan_loss(
            &mut tape,
            &real_scores[joint],
            &fake_scores[joint],
            GanRole::Discriminator,
        )?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let loss = loss.expect("at least the root discriminator");
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(FlexError::NonFinite(format!("discriminator loss = {value}")));
    }
    let grads = tape.backward(loss);
    adam.step(model, &binding, &grads);
    Ok(value)
}

/// One sequence's generator-side loss terms.
#[allow(clippy::too_many_arguments)]
fn sequence_losses(
    tape: &mut Tape,
    model: &FlexModel,
    binding: &ParamBinding,
    seq: &LoadedSequence,
    gt: &SequenceGt,
    out: &ForwardOutput,
    fake_q_scores: &mut [Vec<TensorId>],
) -> Result<(TensorId, TensorId, TensorId, TensorId, TensorId)> {
    let frames = seq.motion.frames();
    let views = seq.motion.views();
    let joints = model.topology.joint_count() - 1;
    let j_count = model.topology.joint_count();

    // root-zeroed FK per view for the position loss; the foot-contact loss
    // adds the root trajectory back (a broadcast, cheaper than a second FK)
    let mut zeroed_views = Vec::with_capacity(views);
    let mut full_views = Vec::with_capacity(views);
    for k in 0..views {
        let view = FkView {
            s_distinct: out.s_distinct,
            q_rows: out.q_rows,
            root_rot: out.root_rot[k],
            root_pos: None,
        };
        let zeroed = fk_view(tape, &model.topology, &view);
        let root_tiled = tape.concat_lastdim(&vec![out.root_pos[k]; j_count]);
        full_views.push(tape.add(zeroed, root_tiled));
        zeroed_views.push(zeroed);
    }
    let position = position_loss(tape, &zeroed_views, &gt.zeroed)?;
    let skeleton = skeleton_loss(tape, out.s_distinct, &seq.motion.lengths.distinct)?;
    let root_depth = root_depth_loss(tape, &out.root_pos[..views], &seq.z_r)?;
    let foot_labels = foot_label_loss(tape, out.foot, &seq.motion.contacts)?;
    let foot_contact = foot_contact_loss(tape, &full_views, &model.topology, &seq.motion.contacts)?;

    for joint in 1..=joints {
        let fake = fake_dq(tape, out.q_rows, joints, frames, joint);
        fake_q_scores[joint].push(model.discriminate(tape, binding, joint, fake)?);
    }
    for k in 0..views {
        let fake = diff_rows(tape, out.root_rot[k], frames);
        fake_q_scores[0].push(model.discriminate(tape, binding, 0, fake)?);
    }
    Ok((position, skeleton, root_depth, foot_labels, foot_contact))
}

fn mean_of(tape: &mut Tape, terms: &[TensorId]) -> TensorId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Generator phase over one batch: the full objective.
fn generator_step(
    model: &mut FlexModel,
    adam: &mut Adam,
    batch: &[&LoadedSequence],
    gts: &[&SequenceGt],
    weights: &LossWeights,
) -> Result<StepLog> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let joints = model.topology.joint_count() - 1;
    let mut fake_scores: Vec<Vec<TensorId>> = vec![Vec::new(); joints + 1];
    let mut positions = Vec::new();
    let mut skeletons = Vec::new();
    let mut roots = Vec::new();
    let mut labels = Vec::new();
    let mut contacts = Vec::new();
    for (seq, gt) in batch.iter().zip(gts) {
        let out = model.forward(&mut tape, &binding, &seq.observations, None);
        let (p, s, r, f, fc) =
            sequence_losses(&mut tape, model, &binding, seq, gt, &out, &mut fake_scores)?;
        positions.push(p);
        skeletons.push(s);
        roots.push(r);
        labels.push(f);
        contacts.push(fc);
    }
    let mut gan_joints = Vec::with_capacity(joints);
    for joint in 1..=joints {
        gan_joints.push(lsgan_loss(&mut tape, &[], &fake_scores[joint], GanRole::Generator)?);
    }
    // one generator term per view slot, all through the shared root critic
    let per_view = fake_scores[0].len() / batch.len();
    let mut gan_root = Vec::with_capacity(per_view);
    for k in 0..per_view {
        let scores: Vec<TensorId> = (0..batch.len())
            .map(|b| fake_scores[0][b * per_view + k])
            .collect();
        gan_root.push(lsgan_loss(&mut tape, &[], &scores, GanRole::Generator)?);
    }
    let parts = LossParts {
        position: mean_of(&mut tape, &positions),
        skeleton: mean_of(&mut tape, &skeletons),
        gan_joints,
        gan_root,
        root_depth: mean_of(&mut tape, &roots),
        foot_labels: mean_of(&mut tape, &labels),
        foot_contact: mean_of(&mut tape, &contacts),
    };
    let total = total_loss(&mut tape, &parts, weights)?;
    let adversarial: f64 = parts
        .gan_joints
        .iter()
        .chain(&parts.gan_root)
        .map(|&id| tape.scalar_value(id))
        .sum();
    let log = StepLog {
        step: 0,
        epoch: 0,
        d_loss: f64::NAN,
        total: tape.scalar_value(total),
        position: tape.scalar_value(parts.position),
        skeleton: tape.scalar_value(parts.skeleton),
        adversarial,
        root_depth: tape.scalar_value(parts.root_depth),
        foot_labels: tape.scalar_value(parts.foot_labels),
        foot_contact: tape.scalar_value(parts.foot_contact),
    };
    let grads = tape.backward(total);
    adam.step(model, &binding, &grads);
    Ok(log)
}

/// Train a fresh model on a dataset. `epoch_hook` runs after each epoch with
/// the current model (used for per-epoch checkpoints).
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    mut epoch_hook: impl FnMut(usize, &FlexModel) -> Result<()>,
) -> Result<(FlexModel, Vec<StepLog>)> {
    config.validate()?;
    if dataset.sequences.is_empty() {
        return Err(FlexError::InvalidConfig("empty training dataset".into()));
    }
    let fusion = FusionConfig { views: dataset.views(), ..config.fusion.clone() };
    let mut model = FlexModel::new(fusion, dataset.topology.clone(), config.seed)?;
    let mut adam_d = Adam::new(&model, config.learning_rate, |n| n.starts_with("disc."));
    let mut adam_g = Adam::new(&model, config.learning_rate, |n| !n.starts_with("disc."));

    let gts: Vec<SequenceGt> = dataset
        .sequences
        .iter()
        .map(|s| SequenceGt { zeroed: root_zeroed_positions(&s.gt_positions) })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.sequences.len()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LoadedSequence> =
                chunk.iter().map(|&i| &dataset.sequences[i]).collect();
            let batch_gt: Vec<&SequenceGt> = chunk.iter().map(|&i| &gts[i]).collect();
            let mut d_loss = 0.0;
            for _ in 0..config.d_steps {
                d_loss = discriminator_step(&mut model, &mut adam_d, &batch)?;
            }
            for _ in 0..config.g_steps {
                let mut entry =
                    generator_step(&mut model, &mut adam_g, &batch, &batch_gt, &config.weights)?;
                entry.step = step;
                entry.epoch = epoch;
                entry.d_loss = d_loss;
                log.push(entry);
                step += 1;
            }
        }
        epoch_hook(epoch, &model)?;
    }
    Ok((model, log))
}

/// Metrics of one predicted motion against per-view ground truth.
/// `gt_views[i]` names the ground-truth view matched by prediction view `i`.
pub fn motion_metrics(
    pred: &MotionSequence,
    gt_positions: &Positions3D,
    gt_motion: &MotionSequence,
    gt_views: &[usize],
) -> Result<(f64, f64, f64, f64)> {
    if pred.views() != gt_views.len() {
        return Err(FlexError::ShapeMismatch(format!(
            "{} predicted views vs {} ground-truth indices",
            pred.views(),
            gt_views.len()
        )));
    }
    let pred_positions = fk(pred)?;
    let frames = pred.frames();
    let j_count = pred.topology.joint_count();
    let mut mpjpe = 0.0;
    let mut accel = 0.0;
    let mut scale = 0.0;
    let mut root_err = 0.0;
    for (nk, &k) in gt_views.iter().enumerate() {
        let p = pred_positions.view_slice(nk);
        let g = gt_positions.view_slice(k);
        mpjpe += mpjpe_p1(&p, &g, frames, j_count)?;
        accel += accel_error(&p, &g, frames, j_count)?;
        let pred_root: Vec<f64> = (0..frames).flat_map(|t| pred.root.pos(t, nk)).collect();
        let gt_root: Vec<f64> = (0..frames).flat_map(|t| gt_motion.root.pos(t, k)).collect();
        let (s, e) = root_trajectory_error(&pred_root, &gt_root)?;
        scale += s;
        root_err += e;
    }
    let n = gt_views.len() as f64;
    Ok((mpjpe / n, accel / n, scale / n, root_err / n))
}

/// Evaluate a model on a dataset restricted to a view subset (0-based view
/// indices). Returns one row per sequence plus an aggregate row.
pub fn evaluate(model: &FlexModel, dataset: &Dataset, views: &[usize]) -> Result<Vec<MetricRow>> {
    if views.is_empty() {
        return Err(FlexError::InvalidConfig("empty view subset".into()));
    }
    for &v in views {
        if v >= dataset.views() {
            return Err(FlexError::InvalidConfig(format!(
                "view {v} out of range (dataset has {})",
                dataset.views()
            )));
        }
    }
    if dataset.topology != model.topology {
        return Err(FlexError::InvalidTopology(
            "checkpoint topology differs from dataset topology".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut sums = [0.0; 4];
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let obs = seq.observations.select_views(views);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let out = model.forward(&mut tape, &binding, &obs, None);
        let decoded = model.decode_motion(&tape, &out, views)?;
        let (mpjpe, accel, scale, root_err) =
            motion_metrics(&decoded.motion, &seq.gt_positions, &seq.motion, views)?;
        sums[0] += mpjpe;
        sums[1] += accel;
        sums[2] += scale;
        sums[3] += root_err;
        rows.push(MetricRow {
            sequence_id: format!("seq{i}"),
            views: views.len(),
            sigma_frac: 0.0,
            mpjpe_mm: mpjpe,
            accel_err: accel,
            root_scale: scale,
            root_err_mm: root_err,
        });
    }
    let n = dataset.sequences.len().max(1) as f64;
    rows.push(MetricRow {
        sequence_id: "aggregate".into(),
        views: views.len(),
        sigma_frac: 0.0,
        mpjpe_mm: sums[0] / n,
        accel_err: sums[1] / n,
        root_scale: sums[2] / n,
        root_err_mm: sums[3] / n,
    });
    Ok(rows)
}

/// Training loss of `losses::total_loss` evaluated without updating anything.
/// Used by smoke tests.
pub fn eval_total_loss(
    model: &FlexModel,
    seq: &LoadedSequence,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let joints = model.topology.joint_count() - 1;
    let mut fake_scores: Vec<Vec<TensorId>> = vec![Vec::new(); joints + 1];
    let gt = SequenceGt { zeroed: root_zeroed_positions(&seq.gt_positions) };
    let out = model.forward(&mut tape, &binding, &seq.observations, None);
    let (p, s, r, f, fc) =
        sequence_losses(&mut tape, model, &binding, seq, &gt, &out, &mut fake_scores)?;
    let mut gan_joints = Vec::new();
    for joint in 1..=joints {
        gan_joints.push(lsgan_loss(&mut tape, &[], &fake_scores[joint], GanRole::Generator)?);
    }
    let gan_root: Vec<TensorId> = fake_scores[0]
        .iter()
        .map(|&sc| lsgan_loss(&mut tape, &[], &[sc], GanRole::Generator))
        .collect::<Result<_>>()?;
    let parts = LossParts {
        position: p,
        skeleton: s,
        gan_joints,
        gan_root,
        root_depth: r,
        foot_labels: f,
        foot_contact: fc,
    };
    let total = losses::total_loss(&mut tape, &parts, weights)?;
    Ok(tape.scalar_value(total))
}
