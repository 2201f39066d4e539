//! Attention building blocks: receptive-field block, residual block,
//! channel-attention fusion, cross-branch co-attention with self-gates, and
//! the spatial/channel attention pair applied before progressive fusion.
//!
//! Parameter handling is split in two phases. `*_init` functions register
//! named tensors into a [`ParamSet`] under a prefix (so one block can be
//! instantiated many times); at forward time the whole set is bound onto a
//! tape once via [`BlockParams::bind`] and blocks look their tensors up by
//! name. Names are a stable part of the checkpoint format.

use crate::tensor::{GradientTape, ParamSet, Tensor, TensorError, TensorId, UpsampleMode};
use rand::Rng;
use std::collections::HashMap;

/// Which encoder a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Aif2d,
    Fs3d,
}

/// A `[C,H,W]` tensor on the tape plus where it sits in the pyramid.
/// `level` runs 1..=4 with spatial stride 4/8/16/32 relative to the input.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub id: TensorId,
    pub level: u8,
    pub branch: Branch,
}

impl FeatureMap {
    pub fn new(id: TensorId, level: u8, branch: Branch) -> Self {
        FeatureMap { id, level, branch }
    }
}

/// Intermediates of one co-attention application: the raw similarity matrix,
/// its column/row normalizations, and (once the stage has gated its outputs)
/// the two gate maps.
#[derive(Debug, Clone)]
pub struct CoAttentionState {
    /// `[HW, HW]`, entry (p,q) = <a[:,p], b[:,q]>.
    pub similarity: Tensor,
    /// Columnwise softmax of `similarity`.
    pub col_norm: Tensor,
    /// Columnwise softmax of the transpose.
    pub row_norm: Tensor,
    /// (2D gate, 3D gate), filled by the stage after self-gating.
    pub gates: Option<(Tensor, Tensor)>,
}

/// Name -> tape id for every parameter, valid for one tape's lifetime.
pub struct BlockParams {
    ids: HashMap<String, TensorId>,
}

impl BlockParams {
    /// Registers every parameter as a tape leaf. `trainable` decides whether
    /// gradients are materialized.
    pub fn bind(tape: &mut GradientTape, params: &ParamSet, trainable: bool) -> BlockParams {
        let mut ids = HashMap::new();
        for (name, tensor) in params.iter() {
            let mut t = tensor.clone();
            t.requires_grad = trainable;
            ids.insert(name.to_string(), tape.leaf(t));
        }
        BlockParams { ids }
    }

    /// Looks a parameter up by name. A missing name is a wiring bug between
    /// an `_init` function and its forward, so this panics rather than
    /// returning an error.
    pub fn id(&self, name: &str) -> TensorId {
        match self.ids.get(name) {
            Some(&id) => id,
            None => panic!("parameter {name:?} was never registered"),
        }
    }

    pub fn grad_of<'t>(&self, tape: &'t GradientTape, name: &str) -> Option<&'t [f64]> {
        tape.grad(self.id(name))
    }
}

fn key(prefix: &str, suffix: &str) -> String {
    format!("{prefix}.{suffix}")
}

// He-uniform initialization: +-sqrt(6 / fan_in). Biases start at zero,
// affine scales at one.

pub(crate) fn init_conv2d<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let fan_in = (ci * k * k) as f64;
    let limit = (6.0 / fan_in).sqrt();
    let data: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-limit..limit)).collect();
    ps.insert(&format!("{name}.w"), Tensor::new(&[co, ci, k, k], data)?)?;
    ps.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
}

pub(crate) fn init_conv3d<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    co: usize,
    ci: usize,
    kt: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let fan_in = (ci * kt * k * k) as f64;
    let limit = (6.0 / fan_in).sqrt();
    let data: Vec<f64> = (0..co * ci * kt * k * k).map(|_| rng.gen_range(-limit..limit)).collect();
    ps.insert(&format!("{name}.w"), Tensor::new(&[co, ci, kt, k, k], data)?)?;
    ps.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
}

pub(crate) fn init_convt2d<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let fan_in = (c_in * k * k) as f64;
    let limit = (6.0 / fan_in).sqrt();
    let data: Vec<f64> = (0..c_in * c_out * k * k).map(|_| rng.gen_range(-limit..limit)).collect();
    ps.insert(&format!("{name}.w"), Tensor::new(&[c_in, c_out, k, k], data)?)?;
    ps.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]))
}

pub(crate) fn init_fc<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    co: usize,
    ci: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let limit = (6.0 / ci as f64).sqrt();
    let data: Vec<f64> = (0..co * ci).map(|_| rng.gen_range(-limit..limit)).collect();
    ps.insert(&format!("{name}.w"), Tensor::new(&[co, ci], data)?)?;
    ps.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
}

pub(crate) fn init_affine(ps: &mut ParamSet, name: &str, c: usize) -> Result<(), TensorError> {
    ps.insert(&format!("{name}.scale"), Tensor::full(&[c], 1.0))?;
    ps.insert(&format!("{name}.shift"), Tensor::zeros(&[c]))
}

/// conv2d + per-channel bias.
pub(crate) fn conv2d_p(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    x: TensorId,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<TensorId, TensorError> {
    let y = tape.conv2d_dilated(x, bp.id(&format!("{name}.w")), stride, pad, dilation)?;
    let s = tape.shape(y).to_vec();
    let b = tape.expand_spatial(bp.id(&format!("{name}.b")), s[1], s[2])?;
    tape.add(y, b)
}

/// conv3d + per-channel bias broadcast over (T,H,W).
pub(crate) fn conv3d_p(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    x: TensorId,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorId, TensorError> {
    let y = tape.conv3d(x, bp.id(&format!("{name}.w")), stride, pad)?;
    let s = tape.shape(y).to_vec();
    // bias over [C,T,H,W]: broadcast [C] -> [C,T*H,W] has the same layout
    let b2 = tape.expand_spatial(bp.id(&format!("{name}.b")), s[1] * s[2], s[3])?;
    let b = tape.reshape(b2, &s)?;
    tape.add(y, b)
}

pub(crate) fn convt2d_p(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    x: TensorId,
    stride: usize,
    pad: usize,
) -> Result<TensorId, TensorError> {
    let y = tape.conv_transpose2d(x, bp.id(&format!("{name}.w")), stride, pad)?;
    let s = tape.shape(y).to_vec();
    let b = tape.expand_spatial(bp.id(&format!("{name}.b")), s[1], s[2])?;
    tape.add(y, b)
}

pub(crate) fn fc_p(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    tape.fully_connected(x, bp.id(&format!("{name}.w")), bp.id(&format!("{name}.b")))
}

/// Per-channel affine `scale * x + shift` on `[C,H,W]` (batch-norm stand-in).
pub(crate) fn affine_p(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let s = tape.shape(x).to_vec();
    let scale = tape.expand_spatial(bp.id(&format!("{name}.scale")), s[1], s[2])?;
    let shift = tape.expand_spatial(bp.id(&format!("{name}.shift")), s[1], s[2])?;
    let y = tape.mul(x, scale)?;
    tape.add(y, shift)
}

/// Same affine on a `[C,T,H,W]` volume.
pub(crate) fn affine3d_p(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let s = tape.shape(x).to_vec();
    let scale2 = tape.expand_spatial(bp.id(&format!("{name}.scale")), s[1] * s[2], s[3])?;
    let scale = tape.reshape(scale2, &s)?;
    let shift2 = tape.expand_spatial(bp.id(&format!("{name}.shift")), s[1] * s[2], s[3])?;
    let shift = tape.reshape(shift2, &s)?;
    let y = tape.mul(x, scale)?;
    tape.add(y, shift)
}

const RFB_DILATIONS: [usize; 3] = [1, 3, 5];

/// Receptive-field block: four parallel branches (1x1, and 3x3 at dilations
/// 1/3/5), concatenated and merged by a 1x1 conv, plus a 1x1 shortcut;
/// ReLU on the sum. Branch width is `c_out/4` (at least 1).
pub fn rfb_block_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let cb = (c_out / 4).max(1);
    init_conv2d(ps, &key(prefix, "b0"), cb, c_in, 1, rng)?;
    for (i, _) in RFB_DILATIONS.iter().enumerate() {
        init_conv2d(ps, &key(prefix, &format!("b{}", i + 1)), cb, c_in, 3, rng)?;
    }
    init_conv2d(ps, &key(prefix, "merge"), c_out, 4 * cb, 1, rng)?;
    init_conv2d(ps, &key(prefix, "shortcut"), c_out, c_in, 1, rng)
}

pub fn rfb_block(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    x: &FeatureMap,
) -> Result<FeatureMap, TensorError> {
    let b0 = conv2d_p(tape, bp, &key(prefix, "b0"), x.id, 1, 0, 1)?;
    let mut branches = vec![b0];
    for (i, &d) in RFB_DILATIONS.iter().enumerate() {
        branches.push(conv2d_p(tape, bp, &key(prefix, &format!("b{}", i + 1)), x.id, 1, d, d)?);
    }
    let cat = tape.concat_channels(&branches)?;
    let merged = conv2d_p(tape, bp, &key(prefix, "merge"), cat, 1, 0, 1)?;
    let short = conv2d_p(tape, bp, &key(prefix, "shortcut"), x.id, 1, 0, 1)?;
    let sum = tape.add(merged, short)?;
    let out = tape.relu(sum)?;
    Ok(FeatureMap::new(out, x.level, x.branch))
}

/// `relu(conv3x3(relu(conv3x3(x))) + x)`, shape preserving.
pub fn residual_block_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    init_conv2d(ps, &key(prefix, "c1"), c, c, 3, rng)?;
    init_conv2d(ps, &key(prefix, "c2"), c, c, 3, rng)
}

pub fn residual_block(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    x: &FeatureMap,
) -> Result<FeatureMap, TensorError> {
    let c1 = conv2d_p(tape, bp, &key(prefix, "c1"), x.id, 1, 1, 1)?;
    let r1 = tape.relu(c1)?;
    let c2 = conv2d_p(tape, bp, &key(prefix, "c2"), r1, 1, 1, 1)?;
    let sum = tape.add(c2, x.id)?;
    let out = tape.relu(sum)?;
    Ok(FeatureMap::new(out, x.level, x.branch))
}

/// Squeeze-excitation reduction ratio for the channel-attention MLPs.
pub const SE_REDUCTION: usize = 4;

/// Channel attention driven by the upper pyramid level: upsample `f_upper`
/// 2x, global-max-pool it, run the pooled vector through a bottleneck MLP,
/// and use the sigmoid output as channel weights on `f_i`, with a residual
/// add: `w (.) f_i + f_i`.
pub fn channel_attention_fuse_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let mid = (c / SE_REDUCTION).max(1);
    init_fc(ps, &key(prefix, "fc1"), mid, c, rng)?;
    init_fc(ps, &key(prefix, "fc2"), c, mid, rng)
}

pub fn channel_attention_fuse(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    f_i: &FeatureMap,
    f_upper: &FeatureMap,
    mode: UpsampleMode,
) -> Result<FeatureMap, TensorError> {
    let up = tape.upsample2x(f_upper.id, mode)?;
    if tape.shape(up) != tape.shape(f_i.id) {
        return Err(TensorError::ShapeMismatch {
            op: "channel_attention_fuse",
            detail: format!("upsampled upper {:?} vs lower {:?}", tape.shape(up), tape.shape(f_i.id)),
        });
    }
    let pooled = tape.global_max_pool(up)?;
    let h = fc_p(tape, bp, &key(prefix, "fc1"), pooled)?;
    let h = tape.relu(h)?;
    let wvec = fc_p(tape, bp, &key(prefix, "fc2"), h)?;
    let wvec = tape.sigmoid(wvec)?;
    let s = tape.shape(f_i.id).to_vec();
    let wmap = tape.expand_spatial(wvec, s[1], s[2])?;
    let weighted = tape.mul(wmap, f_i.id)?;
    let out = tape.add(weighted, f_i.id)?;
    Ok(FeatureMap::new(out, f_i.level, f_i.branch))
}

/// Cross-branch co-attention. Both maps are flattened to `[C, HW]`; the
/// similarity matrix `M[p,q] = sum_c a[c,p] b[c,q]` is column-normalized
/// (and its transpose likewise), and each branch is re-read through the
/// matching normalization. No learned weights.
pub fn co_attention(
    tape: &mut GradientTape,
    a: &FeatureMap,
    b: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap, CoAttentionState), TensorError> {
    let sa = tape.shape(a.id).to_vec();
    let sb = tape.shape(b.id).to_vec();
    if sa != sb || sa.len() != 3 {
        return Err(TensorError::ShapeMismatch { op: "co_attention", detail: format!("{sa:?} vs {sb:?}") });
    }
    let (c, h, w) = (sa[0], sa[1], sa[2]);
    let hw = h * w;
    let fa = tape.reshape(a.id, &[c, hw])?;
    let fb = tape.reshape(b.id, &[c, hw])?;
    let fat = tape.permute(fa, &[1, 0])?;
    let m = tape.matmul(fat, fb)?;
    let mc = tape.softmax_axis(m, 0)?;
    let mt = tape.permute(m, &[1, 0])?;
    let mr = tape.softmax_axis(mt, 0)?;
    let ra = tape.matmul(fa, mc)?;
    let rb = tape.matmul(fb, mr)?;
    let out_a = tape.reshape(ra, &[c, h, w])?;
    let out_b = tape.reshape(rb, &[c, h, w])?;
    let state = CoAttentionState {
        similarity: tape.value(m).clone(),
        col_norm: tape.value(mc).clone(),
        row_norm: tape.value(mr).clone(),
        gates: None,
    };
    Ok((FeatureMap::new(out_a, a.level, a.branch), FeatureMap::new(out_b, b.level, b.branch), state))
}

/// Learned confidence gate: `G = sigmoid(conv1x1(f))`, output `G (.) f`.
/// Returns the gated map and the gate itself.
pub fn self_gate_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    init_conv2d(ps, &key(prefix, "gate"), c, c, 1, rng)
}

pub fn self_gate(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    f: &FeatureMap,
) -> Result<(FeatureMap, TensorId), TensorError> {
    let pre = conv2d_p(tape, bp, &key(prefix, "gate"), f.id, 1, 0, 1)?;
    let gate = tape.sigmoid(pre)?;
    let out = tape.mul(gate, f.id)?;
    Ok((FeatureMap::new(out, f.level, f.branch), gate))
}

/// What a stage runs after the channel-attention + concat front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Channel attention and merge only (ablation without co-attention).
    ChannelOnly,
    /// Full stage: co-attention across branches plus self-gates.
    Full,
}

/// One synergistic-attention stage. Per branch: channel-attention fusion of
/// the (level i, level i+1) pair, concat with the upsampled residual-block
/// pass of the upper map, 1x1 merge back to the stage width; then, for
/// [`StageKind::Full`], co-attention across the branches and a self-gate per
/// branch. Outputs live at level i.
pub fn sa_stage_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    kind: StageKind,
    rng: &mut R,
) -> Result<(), TensorError> {
    for branch in ["b2d", "b3d"] {
        channel_attention_fuse_init(ps, &key(prefix, &format!("{branch}.ca")), c, rng)?;
        residual_block_init(ps, &key(prefix, &format!("{branch}.rb")), c, rng)?;
        init_conv2d(ps, &key(prefix, &format!("{branch}.reduce")), c, 2 * c, 1, rng)?;
        if kind == StageKind::Full {
            self_gate_init(ps, &key(prefix, &format!("{branch}.sg")), c, rng)?;
        }
    }
    Ok(())
}

fn stage_branch(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    branch: &str,
    f_i: &FeatureMap,
    f_upper: &FeatureMap,
    mode: UpsampleMode,
) -> Result<FeatureMap, TensorError> {
    let f_ca = channel_attention_fuse(tape, bp, &key(prefix, &format!("{branch}.ca")), f_i, f_upper, mode)?;
    let f_rb = residual_block(tape, bp, &key(prefix, &format!("{branch}.rb")), f_upper)?;
    let f_rb_up = tape.upsample2x(f_rb.id, mode)?;
    let cat = tape.concat_channels(&[f_ca.id, f_rb_up])?;
    let merged = conv2d_p(tape, bp, &key(prefix, &format!("{branch}.reduce")), cat, 1, 0, 1)?;
    Ok(FeatureMap::new(merged, f_i.level, f_i.branch))
}

#[allow(clippy::too_many_arguments)]
pub fn sa_stage(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    pair2d: (&FeatureMap, &FeatureMap),
    pair3d: (&FeatureMap, &FeatureMap),
    mode: UpsampleMode,
    kind: StageKind,
) -> Result<(FeatureMap, FeatureMap, Option<CoAttentionState>), TensorError> {
    for (pair, want) in [(&pair2d, Branch::Aif2d), (&pair3d, Branch::Fs3d)] {
        if pair.0.branch != want || pair.1.branch != want {
            return Err(TensorError::ShapeMismatch {
                op: "sa_stage",
                detail: format!("branch tags {:?}/{:?}, expected {:?}", pair.0.branch, pair.1.branch, want),
            });
        }
        if pair.1.level != pair.0.level + 1 {
            return Err(TensorError::ShapeMismatch {
                op: "sa_stage",
                detail: format!("levels {} and {} are not adjacent", pair.0.level, pair.1.level),
            });
        }
    }
    let f2d = stage_branch(tape, bp, prefix, "b2d", pair2d.0, pair2d.1, mode)?;
    let f3d = stage_branch(tape, bp, prefix, "b3d", pair3d.0, pair3d.1, mode)?;
    match kind {
        StageKind::ChannelOnly => Ok((f2d, f3d, None)),
        StageKind::Full => {
            let (c2d, c3d, mut state) = co_attention(tape, &f2d, &f3d)?;
            let (g2d, gate2d) = self_gate(tape, bp, &key(prefix, "b2d.sg"), &c2d)?;
            let (g3d, gate3d) = self_gate(tape, bp, &key(prefix, "b3d.sg"), &c3d)?;
            state.gates = Some((tape.value(gate2d).clone(), tape.value(gate3d).clone()));
            Ok((g2d, g3d, Some(state)))
        }
    }
}

/// Spatial gate: channel-mean and channel-max maps, stacked, 7x7 conv to one
/// channel, sigmoid, broadcast-multiplied with the input.
pub fn spatial_attention_unit_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    rng: &mut R,
) -> Result<(), TensorError> {
    init_conv2d(ps, &key(prefix, "conv"), 1, 2, 7, rng)
}

pub fn spatial_attention_unit(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    f: &FeatureMap,
) -> Result<FeatureMap, TensorError> {
    let s = tape.shape(f.id).to_vec();
    let mean = tape.mean_axis(f.id, 0)?;
    let mean = tape.reshape(mean, &[1, s[1], s[2]])?;
    let max = tape.max_axis(f.id, 0)?;
    let max = tape.reshape(max, &[1, s[1], s[2]])?;
    let stacked = tape.concat_channels(&[mean, max])?;
    let pre = conv2d_p(tape, bp, &key(prefix, "conv"), stacked, 1, 3, 1)?;
    let mask = tape.sigmoid(pre)?;
    let mask_c = tape.expand_channel(mask, s[0])?;
    let out = tape.mul(mask_c, f.id)?;
    Ok(FeatureMap::new(out, f.level, f.branch))
}

/// Channel gate: global max pool, bottleneck MLP, sigmoid weights multiplied
/// per channel (no residual).
pub fn channel_attention_unit_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let mid = (c / SE_REDUCTION).max(1);
    init_fc(ps, &key(prefix, "fc1"), mid, c, rng)?;
    init_fc(ps, &key(prefix, "fc2"), c, mid, rng)
}

pub fn channel_attention_unit(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    f: &FeatureMap,
) -> Result<FeatureMap, TensorError> {
    let pooled = tape.global_max_pool(f.id)?;
    let h = fc_p(tape, bp, &key(prefix, "fc1"), pooled)?;
    let h = tape.relu(h)?;
    let wvec = fc_p(tape, bp, &key(prefix, "fc2"), h)?;
    let wvec = tape.sigmoid(wvec)?;
    let s = tape.shape(f.id).to_vec();
    let wmap = tape.expand_spatial(wvec, s[1], s[2])?;
    let out = tape.mul(wmap, f.id)?;
    Ok(FeatureMap::new(out, f.level, f.branch))
}

/// All-in-focus-induced attention: the 2D map passes through, the 3D map
/// receives `spatial(channel(f2d)) + f3d` (channel gate first, then the
/// spatial gate, then the residual merge into the 3D branch).
pub fn aif_induced_attention_init<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    channel_attention_unit_init(ps, &key(prefix, "cau"), c, rng)?;
    spatial_attention_unit_init(ps, &key(prefix, "sau"), rng)
}

pub fn aif_induced_attention(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    f2d: &FeatureMap,
    f3d: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap), TensorError> {
    if tape.shape(f2d.id) != tape.shape(f3d.id) {
        return Err(TensorError::ShapeMismatch {
            op: "aif_induced_attention",
            detail: format!("{:?} vs {:?}", tape.shape(f2d.id), tape.shape(f3d.id)),
        });
    }
    let ch = channel_attention_unit(tape, bp, &key(prefix, "cau"), f2d)?;
    let sp = spatial_attention_unit(tape, bp, &key(prefix, "sau"), &ch)?;
    let merged = tape.add(sp.id, f3d.id)?;
    Ok((*f2d, FeatureMap::new(merged, f3d.level, f3d.branch)))
}

/// Finite-difference check over every coordinate of every parameter in
/// `params` and every entry of `inputs`, against the tape gradients of the
/// scalar that `build` constructs. Returns the maximum relative error. Meant
/// for small block instances; cost is two forward passes per coordinate.
pub fn param_grad_check<F>(
    params: &ParamSet,
    inputs: &[Tensor],
    eps: f64,
    build: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut GradientTape, &BlockParams, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let eval = |ps: &ParamSet, ins: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = GradientTape::new();
        let bp = BlockParams::bind(&mut tape, ps, false);
        let ids: Vec<TensorId> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &bp, &ids)?;
        Ok(tape.value(loss).data[0])
    };
    // analytic pass
    let mut tape = GradientTape::new();
    let bp = BlockParams::bind(&mut tape, params, true);
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &bp, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: tape.value(loss).numel() });
    }
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut relerr = |ad: f64, fd: f64| {
        let rel = (ad - fd).abs() / f64::max(1e-8, ad.abs() + fd.abs());
        if rel > worst {
            worst = rel;
        }
    };
    for (name, tensor) in params.iter() {
        let ad_grad = tape.grad(bp.id(name)).expect("param grad").to_vec();
        for j in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data[j] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data[j] -= eps;
            let fd = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * eps);
            relerr(ad_grad[j], fd);
        }
    }
    for (i, input) in inputs.iter().enumerate() {
        let ad_grad = tape.grad(ids[i]).expect("input grad").to_vec();
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let fd = (eval(params, &plus)? - eval(params, &minus)?) / (2.0 * eps);
            relerr(ad_grad[j], fd);
        }
    }
    Ok(worst)
}
