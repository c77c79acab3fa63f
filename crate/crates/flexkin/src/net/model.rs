//! The model: two independent fusion layers feeding a bone-length encoder
//! and a rotation/root/contact encoder, plus per-joint discriminators over
//! temporal rotation differences.

use rand_chacha::ChaCha8Rng;
use rand::prelude::*;

use crate::error::{FlexError, Result};
use crate::kinematics::{MotionSequence, RootTrajectory, Rotations};

use crate::skeleton::{BoneLengths, SkeletonTopology};
use crate::synth::MultiView2D;
use crate::tape::{Tape, Tensor, TensorId};

use super::layers::{
    channel_norm, collapse_views, conv_block, linear, multiview_conv, view_attention,
    AttentionParams, ConvBlockIds, MultiViewConvParams, LEAKY_SLOPE,
};
use super::{fan_in_uniform, FusionConfig, FusionMode, ParamBinding, ParamStore};

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    score: usize,
}

#[derive(Debug, Clone)]
struct FusionIdx {
    expand: BlockIdx,
    per_view: Vec<BlockIdx>,
    mv: Option<(usize, usize, usize, BlockIdx)>, // w_self, w_cross, b, norm block
    attn: AttnIdx,
}

#[derive(Debug, Clone)]
struct EncoderSIdx {
    block: BlockIdx,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct EncoderQIdx {
    parallel: [BlockIdx; 3],
    merge: BlockIdx,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct DiscIdx {
    c1w: usize,
    c1b: usize,
    c2w: usize,
    c2b: usize,
    fcw: usize,
    fcb: usize,
}

/// Rotation-and-skeleton network over multi-view 2D joint streams.
///
/// Joint rotations, bone lengths and foot contacts are shared across views;
/// only the root position and rotation are per view, emitted as one channel
/// block per view slot (the root head is sized for `config.views` slots while
/// the fusion layers accept any number of input views). A single root
/// discriminator is applied to every view's root rotation stream.
pub struct FlexModel {
    pub config: FusionConfig,
    pub topology: SkeletonTopology,
    pub params: ParamStore,
    pub seed: u64,
    f_s: FusionIdx,
    f_q: FusionIdx,
    e_s: EncoderSIdx,
    e_q: EncoderQIdx,
    disc: Vec<DiscIdx>,
}

/// Everything the network predicts for one sequence.
pub struct ForwardOutput {
    pub frames: usize,
    /// Distinct bone lengths, `[L]`, positive via softplus.
    pub s_distinct: TensorId,
    /// Unit quaternion rows `[T*(J-1) x 4]`, frame-major.
    pub q_rows: TensorId,
    /// Per root-head slot: position `[T x 3]` (x, y image-plane units up to
    /// scale, z depth in meters) and unit rotation `[T x 4]`.
    pub root_pos: Vec<TensorId>,
    pub root_rot: Vec<TensorId>,
    /// Foot contact probabilities `[T x 2]`.
    pub foot: TensorId,
}

/// A forward output read back into plain motion data.
pub struct EncodedMotion {
    pub motion: MotionSequence,
    /// Raw contact probabilities before thresholding, `[T][2]`.
    pub contact_probs: Vec<f64>,
}

impl FlexModel {
    pub fn new(config: FusionConfig, topology: SkeletonTopology, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let c = config.channels;
        let in_ch = 3 * topology.joint_count();

        let block = |params: &mut ParamStore,
                         rng: &mut ChaCha8Rng,
                         name: &str,
                         c_in: usize,
                         c_out: usize,
                         kw: usize| {
            let fan = c_in * kw;
            BlockIdx {
                w: params.register(
                    &format!("{name}.w"),
                    vec![c_out, c_in, kw],
                    fan_in_uniform(&[c_out, c_in, kw], fan, rng),
                ),
                b: params.register(&format!("{name}.b"), vec![c_out], vec![0.0; c_out]),
                gamma: params.register(&format!("{name}.gamma"), vec![1, c_out], vec![1.0; c_out]),
                beta: params.register(&format!("{name}.beta"), vec![1, c_out], vec![0.0; c_out]),
            }
        };
        let attn = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            let mat = |params: &mut ParamStore, rng: &mut ChaCha8Rng, w: &str, b: &str| {
                (
                    params.register(
                        &format!("{name}.{w}"),
                        vec![c, c],
                        fan_in_uniform(&[c, c], c, rng),
                    ),
                    params.register(&format!("{name}.{b}"), vec![1, c], vec![0.0; c]),
                )
            };
            let (wq, bq) = mat(params, rng, "wq", "bq");
            let (wk, bk) = mat(params, rng, "wk", "bk");
            let (wv, bv) = mat(params, rng, "wv", "bv");
            let (wo, bo) = mat(params, rng, "wo", "bo");
            let score = params.register(
                &format!("{name}.score"),
                vec![c, 1],
                fan_in_uniform(&[c, 1], c, rng),
            );
            AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo, score }
        };
        let per_view_count = match config.fusion {
            FusionMode::Early => 0,
            FusionMode::Middle => 1,
            FusionMode::Late => 2,
        };
        let fusion = |params: &mut ParamStore,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          with_mv: bool| {
            let expand = block(params, rng, &format!("{name}.expand"), in_ch, c, config.expansion_kernel);
            let per_view = (0..per_view_count)
                .map(|i| block(params, rng, &format!("{name}.view{i}"), c, c, 3))
                .collect();
            let mv = with_mv.then(|| {
                let fan = c * 3;
                let w_self = params.register(
                    &format!("{name}.mv.w_self"),
                    vec![c, c, 3],
                    fan_in_uniform(&[c, c, 3], fan, rng),
                );
                let w_cross = params.register(
                    &format!("{name}.mv.w_cross"),
                    vec![c, c, 3],
                    fan_in_uniform(&[c, c, 3], fan, rng),
                );
                let b = params.register(&format!("{name}.mv.b"), vec![c], vec![0.0; c]);
                let gamma =
                    params.register(&format!("{name}.mv.gamma"), vec![1, c], vec![1.0; c]);
                let beta = params.register(&format!("{name}.mv.beta"), vec![1, c], vec![0.0; c]);
                (w_self, w_cross, b, BlockIdx { w: w_self, b, gamma, beta })
            });
            let attn = attn(params, rng, &format!("{name}.attn"));
            FusionIdx { expand, per_view, mv, attn }
        };

        let f_s = fusion(&mut params, &mut rng, "f_s", false);
        let f_q = fusion(&mut params, &mut rng, "f_q", true);

        let l_count = topology.distinct_length_count();
        let e_s = EncoderSIdx {
            block: block(&mut params, &mut rng, "e_s.conv", c, c, 1),
            out_w: params.register(
                "e_s.out.w",
                vec![l_count, c, 1],
                fan_in_uniform(&[l_count, c, 1], c, &mut rng),
            ),
            out_b: params.register("e_s.out.b", vec![l_count], vec![0.0; l_count]),
        };

        let d_out = self::eq_output_channels(&config, &topology);
        let e_q = EncoderQIdx {
            parallel: [
                block(&mut params, &mut rng, "e_q.par0", c, c, config.eq_kernels[0]),
                block(&mut params, &mut rng, "e_q.par1", c, c, config.eq_kernels[1]),
                block(&mut params, &mut rng, "e_q.par2", c, c, config.eq_kernels[2]),
            ],
            merge: block(&mut params, &mut rng, "e_q.merge", 3 * c, c, 3),
            out_w: params.register(
                "e_q.out.w",
                vec![d_out, c, 1],
                fan_in_uniform(&[d_out, c, 1], c, &mut rng),
            ),
            out_b: params.register("e_q.out.b", vec![d_out], vec![0.0; d_out]),
        };

        let cd = config.disc_channels;
        let kd = config.disc_kernel;
        let disc = (0..topology.joint_count())
            .map(|j| {
                let name = format!("disc.{j}");
                DiscIdx {
                    c1w: params.register(
                        &format!("{name}.c1w"),
                        vec![cd, 4, kd],
                        fan_in_uniform(&[cd, 4, kd], 4 * kd, &mut rng),
                    ),
                    c1b: params.register(&format!("{name}.c1b"), vec![cd], vec![0.0; cd]),
                    c2w: params.register(
                        &format!("{name}.c2w"),
                        vec![cd, cd, kd],
                        fan_in_uniform(&[cd, cd, kd], cd * kd, &mut rng),
                    ),
                    c2b: params.register(&format!("{name}.c2b"), vec![cd], vec![0.0; cd]),
                    fcw: params.register(
                        &format!("{name}.fcw"),
                        vec![cd, 1],
                        fan_in_uniform(&[cd, 1], cd, &mut rng),
                    ),
                    fcb: params.register(&format!("{name}.fcb"), vec![1, 1], vec![0.0]),
                }
            })
            .collect();

        Ok(Self { config, topology, params, seed, f_s, f_q, e_s, e_q, disc })
    }

    /// Channel budget of the rotation encoder's output head.
    pub fn eq_output_channels(&self) -> usize {
        eq_output_channels(&self.config, &self.topology)
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        self.params.bind(tape)
    }

    fn block_ids(&self, binding: &ParamBinding, idx: BlockIdx) -> ConvBlockIds {
        ConvBlockIds {
            w: binding.id(idx.w),
            b: binding.id(idx.b),
            gamma: binding.id(idx.gamma),
            beta: binding.id(idx.beta),
        }
    }

    fn attn_ids(&self, binding: &ParamBinding, idx: AttnIdx) -> AttentionParams {
        AttentionParams {
            wq: binding.id(idx.wq),
            bq: binding.id(idx.bq),
            wk: binding.id(idx.wk),
            bk: binding.id(idx.bk),
            wv: binding.id(idx.wv),
            bv: binding.id(idx.bv),
            wo: binding.id(idx.wo),
            bo: binding.id(idx.bo),
            score: binding.id(idx.score),
        }
    }

    fn dropout_mask(
        &self,
        shape: &[usize],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Option<Tensor> {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let keep = 1.0 - rate;
                Some(Tensor::from_fn(shape.to_vec(), |_| {
                    if r.random_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        }
    }

    fn fuse(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        idx: &FusionIdx,
        views_in: &[TensorId],
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        let c = self.config.channels;
        let expand = self.block_ids(binding, idx.expand);
        let mut streams: Vec<TensorId> = views_in
            .iter()
            .map(|&x| {
                let frames = tape.value(x).shape()[0];
                let mask = self.dropout_mask(&[frames, c], dropout_rng);
                conv_block(tape, x, expand, mask.as_ref())
            })
            .collect();
        for pv in &idx.per_view {
            let ids = self.block_ids(binding, *pv);
            streams = streams
                .iter()
                .map(|&x| {
                    let frames = tape.value(x).shape()[0];
                    let mask = self.dropout_mask(&[frames, c], dropout_rng);
                    conv_block(tape, x, ids, mask.as_ref())
                })
                .collect();
        }
        let mut stacked = tape.stack_lastdim(&streams);
        if let Some((w_self, w_cross, b, norm)) = idx.mv {
            let mv = multiview_conv(
                tape,
                stacked,
                MultiViewConvParams {
                    w_self: binding.id(w_self),
                    w_cross: binding.id(w_cross),
                    b: binding.id(b),
                },
            );
            let views = tape.value(mv).shape()[2];
            let normed: Vec<TensorId> = (0..views)
                .map(|k| {
                    let xk = tape.index_lastdim(mv, k);
                    let n = channel_norm(tape, xk, binding.id(norm.gamma), binding.id(norm.beta));
                    tape.leaky_relu(n, LEAKY_SLOPE)
                })
                .collect();
            stacked = tape.stack_lastdim(&normed);
        }
        let attn = self.attn_ids(binding, idx.attn);
        let attended = view_attention(tape, stacked, attn, self.config.heads);
        collapse_views(tape, attended, attn.score)
    }

    /// Skeleton branch fusion: per-view expansion, cross-view attention, and
    /// the learned collapse to a single fused stream.
    pub fn fuse_s(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        views_in: &[TensorId],
    ) -> TensorId {
        self.fuse(tape, binding, &self.f_s, views_in, &mut None)
    }

    /// Rotation branch fusion: like `fuse_s` plus the multi-view convolution
    /// between expansion and attention.
    pub fn fuse_q(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        views_in: &[TensorId],
    ) -> TensorId {
        self.fuse(tape, binding, &self.f_q, views_in, &mut None)
    }

    /// Bone-length head: adaptive max pool over time, a convolution stack,
    /// and a softplus to keep lengths positive. Output `[L]`.
    pub fn encode_s(&self, tape: &mut Tape, binding: &ParamBinding, features: TensorId) -> TensorId {
        let pooled = tape.max_over_rows(features);
        let ids = self.block_ids(binding, self.e_s.block);
        let hidden = conv_block(tape, pooled, ids, None);
        let raw = tape.conv1d(hidden, binding.id(self.e_s.out_w), binding.id(self.e_s.out_b));
        let positive = tape.softplus(raw);
        let l_count = self.topology.distinct_length_count();
        tape.reshape(positive, vec![l_count])
    }

    /// Rotation/root/contact head: three parallel convolutions of different
    /// kernel sizes, a merge convolution, and a linear channel head split
    /// into unit-normalized quaternions, per-slot roots, and sigmoid contact
    /// labels.
    pub fn encode_q(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        features: TensorId,
    ) -> (TensorId, Vec<TensorId>, Vec<TensorId>, TensorId) {
        let frames = tape.value(features).shape()[0];
        let joints = self.topology.joint_count() - 1;
        let parts: Vec<TensorId> = self
            .e_q
            .parallel
            .iter()
            .map(|&p| {
                let ids = self.block_ids(binding, p);
                conv_block(tape, features, ids, None)
            })
            .collect();
        let cat = tape.concat_lastdim(&parts);
        let merge_ids = self.block_ids(binding, self.e_q.merge);
        let merged = conv_block(tape, cat, merge_ids, None);
        let out = tape.conv1d(merged, binding.id(self.e_q.out_w), binding.id(self.e_q.out_b));

        let q_ch = 4 * joints;
        let r_ch = (3 + 4) * self.config.views;
        let q_raw = tape.slice_lastdim(out, 0, q_ch);
        let q_mat = tape.reshape(q_raw, vec![frames * joints, 4]);
        let q_rows = tape.normalize_lastdim(q_mat);
        let mut root_pos = Vec::with_capacity(self.config.views);
        let mut root_rot = Vec::with_capacity(self.config.views);
        for k in 0..self.config.views {
            let base = q_ch + 7 * k;
            let pos = tape.slice_lastdim(out, base, base + 3);
            let rot_raw = tape.slice_lastdim(out, base + 3, base + 7);
            let rot = tape.normalize_lastdim(rot_raw);
            root_pos.push(pos);
            root_rot.push(rot);
        }
        let f_raw = tape.slice_lastdim(out, q_ch + r_ch, q_ch + r_ch + 2);
        let foot = tape.sigmoid(f_raw);
        (q_rows, root_pos, root_rot, foot)
    }

    /// Realism score of one temporal-difference rotation stream `[T-1 x 4]`.
    /// `joint` 0 addresses the root discriminator (shared across views),
    /// `1..J-1` the per-joint ones.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        joint: usize,
        dq: TensorId,
    ) -> Result<TensorId> {
        let rows = tape.value(dq).shape()[0];
        if rows < self.config.disc_kernel {
            return Err(FlexError::TooShort {
                need: self.config.disc_kernel,
                got: rows,
            });
        }
        let idx = self.disc[joint];
        let h1 = tape.conv1d(dq, binding.id(idx.c1w), binding.id(idx.c1b));
        let a1 = tape.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = tape.conv1d(a1, binding.id(idx.c2w), binding.id(idx.c2b));
        let a2 = tape.leaky_relu(h2, LEAKY_SLOPE);
        let pooled = tape.mean_over_rows(a2);
        let score = linear(tape, pooled, binding.id(idx.fcw), binding.id(idx.fcb));
        Ok(tape.reshape(score, vec![1]))
    }

    /// Turn raw observations into per-view input tensors. Non-root joints
    /// are re-expressed relative to the root's observed position per frame
    /// (the root keeps its absolute coordinates); pixel coordinates are
    /// scaled by `config.input_scale` and gated by the joint's confidence,
    /// so an unreliable joint fades toward "absent" instead of feeding the
    /// network a misleading position. The raw confidence stays as the third
    /// channel.
    pub fn input_tensors(&self, tape: &mut Tape, v: &MultiView2D) -> Vec<TensorId> {
        let width = 3 * v.joint_count();
        (0..v.views())
            .map(|k| {
                let mut m = v.view_matrix(k);
                for t in 0..v.frames() {
                    let row = &mut m[t * width..(t + 1) * width];
                    let (ru, rv) = (row[0], row[1]);
                    for j in 1..v.joint_count() {
                        row[3 * j] -= ru;
                        row[3 * j + 1] -= rv;
                    }
                    for j in 0..v.joint_count() {
                        let gate = self.config.input_scale * row[3 * j + 2];
                        row[3 * j] *= gate;
                        row[3 * j + 1] *= gate;
                    }
                }
                tape.constant(Tensor::new(vec![v.frames(), width], m))
            })
            .collect()
    }

    /// Full forward pass from pre-built per-view input tensors.
    pub fn forward_from_tensors(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        views_in: &[TensorId],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOutput {
        assert!(!views_in.is_empty(), "need at least one view");
        let frames = tape.value(views_in[0]).shape()[0];
        let fs = self.fuse(tape, binding, &self.f_s, views_in, &mut dropout_rng);
        let fq = self.fuse(tape, binding, &self.f_q, views_in, &mut dropout_rng);
        let s_distinct = self.encode_s(tape, binding, fs);
        let (q_rows, root_pos, root_rot, foot) = self.encode_q(tape, binding, fq);
        ForwardOutput { frames, s_distinct, q_rows, root_pos, root_rot, foot }
    }

    /// Full forward pass on observations.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        v: &MultiView2D,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOutput {
        let inputs = self.input_tensors(tape, v);
        self.forward_from_tensors(tape, binding, &inputs, dropout_rng)
    }

    /// Read a forward output back into a plain motion. `view_slots` selects
    /// which root-head slots become the views of the returned sequence.
    pub fn decode_motion(
        &self,
        tape: &Tape,
        out: &ForwardOutput,
        view_slots: &[usize],
    ) -> Result<EncodedMotion> {
        let frames = out.frames;
        let joints = self.topology.joint_count() - 1;
        for &slot in view_slots {
            if slot >= self.config.views {
                return Err(FlexError::InvalidConfig(format!(
                    "root slot {slot} out of range (model has {})",
                    self.config.views
                )));
            }
        }
        let rotations = Rotations::new(frames, joints, tape.value(out.q_rows).data().to_vec())?;
        let mut root = RootTrajectory::at_rest(frames, view_slots.len());
        for (nk, &slot) in view_slots.iter().enumerate() {
            let pos = tape.value(out.root_pos[slot]).data();
            let rot = tape.value(out.root_rot[slot]).data();
            for t in 0..frames {
                root.set_pos(t, nk, [pos[t * 3], pos[t * 3 + 1], pos[t * 3 + 2]]);
                root.set_rot(
                    t,
                    nk,
                    [rot[t * 4], rot[t * 4 + 1], rot[t * 4 + 2], rot[t * 4 + 3]],
                );
            }
        }
        let s = tape.value(out.s_distinct).data().to_vec();
        // softplus keeps lengths positive but clamp against denormal zeros
        let lengths = BoneLengths::new(s.iter().map(|&v| v.max(1e-9)).collect())?;
        let probs = tape.value(out.foot).data().to_vec();
        let contacts: Vec<f64> = probs.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
        let motion = MotionSequence::new(
            self.topology.clone(),
            lengths,
            rotations,
            root,
            contacts,
        )?;
        Ok(EncodedMotion { motion, contact_probs: probs })
    }
}

fn eq_output_channels(config: &FusionConfig, topology: &SkeletonTopology) -> usize {
    let joints = topology.joint_count() - 1;
    4 * joints + (3 + 4) * config.views + 2
}
