//! The full salient-object-detection model: a 2D encoder for the all-in-focus
//! image and a 3D encoder for the focal stack, receptive-field blocks on
//! pyramid levels 2..4, two cascaded synergistic-attention stages, an
//! all-in-focus-induced attention step, and a deconvolutional decoder, with
//! up to three supervision heads.
//!
//! Every configuration is a strict subset of the full pipeline, selected by
//! [`Ablation`]. Parameters are registered only for the blocks a
//! configuration actually owns, so parameter counts are comparable across
//! configurations.

use crate::attention::{
    self, aif_induced_attention, aif_induced_attention_init, conv2d_p, conv3d_p, convt2d_p,
    residual_block, residual_block_init, rfb_block, rfb_block_init, sa_stage, sa_stage_init,
    BlockParams, Branch, FeatureMap, StageKind,
};
use crate::tensor::{GradientTape, ParamSet, Tensor, TensorError, TensorId, UpsampleMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

/// Pipeline subsets, ordered roughly by capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Two 2D encoders (focal stack collapsed by a temporal mean before
    /// encoding), level-4 concat, one upsampling head.
    B,
    /// B with the real 3D focal-stack encoder, still no receptive-field
    /// blocks.
    Me0,
    /// Me0 plus receptive-field blocks on levels 2..4.
    Me,
    /// Me plus both attention stages in channel-attention-only form.
    Sa1,
    /// Sa1 plus co-attention and self-gates (full attention stages).
    Sa2,
    /// Sa2 with the deconvolutional decoder as the single supervised head.
    Pf1,
    /// Pf1 plus side heads after each attention stage (three-way supervision).
    Pf2,
    /// Pf2 plus all-in-focus-induced attention before the decoder.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::B,
        Ablation::Me0,
        Ablation::Me,
        Ablation::Sa1,
        Ablation::Sa2,
        Ablation::Pf1,
        Ablation::Pf2,
        Ablation::Full,
    ];

    fn code(self) -> u8 {
        match self {
            Ablation::B => 0,
            Ablation::Me0 => 1,
            Ablation::Me => 2,
            Ablation::Sa1 => 3,
            Ablation::Sa2 => 4,
            Ablation::Pf1 => 5,
            Ablation::Pf2 => 6,
            Ablation::Full => 7,
        }
    }

    fn from_code(code: u8) -> Option<Ablation> {
        Ablation::ALL.iter().copied().find(|a| a.code() == code)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Ablation::B => "B",
            Ablation::Me0 => "ME0",
            Ablation::Me => "ME",
            Ablation::Sa1 => "SA1",
            Ablation::Sa2 => "SA2",
            Ablation::Pf1 => "PF1",
            Ablation::Pf2 => "PF2",
            Ablation::Full => "FULL",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "B" => Ok(Ablation::B),
            "ME0" => Ok(Ablation::Me0),
            "ME" => Ok(Ablation::Me),
            "SA1" => Ok(Ablation::Sa1),
            "SA2" => Ok(Ablation::Sa2),
            "PF1" => Ok(Ablation::Pf1),
            "PF2" => Ok(Ablation::Pf2),
            "FULL" => Ok(Ablation::Full),
            other => Err(format!("unknown ablation {other:?} (expected B|ME0|ME|SA1|SA2|PF1|PF2|FULL)")),
        }
    }
}

fn upsample_code(m: UpsampleMode) -> u8 {
    match m {
        UpsampleMode::Nearest => 0,
        UpsampleMode::Bilinear => 1,
    }
}

fn upsample_from_code(code: u8) -> Option<UpsampleMode> {
    match code {
        0 => Some(UpsampleMode::Nearest),
        1 => Some(UpsampleMode::Bilinear),
        _ => None,
    }
}

/// Model hyperparameters. `input_size` is the square side of both the
/// all-in-focus image and every focal slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Focal-stack slice count fed to the 3D encoder.
    pub temporal_slices: usize,
    /// Channel width of pyramid level 1; levels double from there.
    pub base_channels: usize,
    /// Channel width after the receptive-field blocks.
    pub rfb_channels: usize,
    pub input_size: usize,
    pub ablation: Ablation,
    pub upsample: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            temporal_slices: 12,
            base_channels: 16,
            rfb_channels: 32,
            input_size: 64,
            ablation: Ablation::Full,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

impl ModelConfig {
    /// The pyramid has stride 32 at level 4 and the heads upsample by
    /// doubling, so the input side must be a positive multiple of 32.
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "ModelConfig",
                detail: format!("input_size {} is not a positive multiple of 32", self.input_size),
            });
        }
        if self.temporal_slices == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "ModelConfig",
                detail: "temporal_slices must be at least 1".into(),
            });
        }
        if self.base_channels == 0 || self.rfb_channels == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "ModelConfig",
                detail: "channel widths must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Channel width entering pyramid level `i` (1-based).
    fn width(&self, level: u8) -> usize {
        self.base_channels << (level - 1)
    }
}

/// The four encoder outputs, strides 4/8/16/32 relative to the input.
pub struct FeaturePyramid {
    levels: [FeatureMap; 4],
}

impl FeaturePyramid {
    /// 1-based level accessor.
    pub fn level(&self, i: u8) -> &FeatureMap {
        assert!((1..=4).contains(&i), "pyramid level {i} out of range");
        &self.levels[(i - 1) as usize]
    }
}

/// Saliency maps emitted by one forward pass, each `[1,S,S]` in [0,1].
/// `p3` is always present and is the model's final output; the side maps
/// exist only under three-way supervision.
pub struct Prediction {
    pub p1: Option<TensorId>,
    pub p2: Option<TensorId>,
    pub p3: TensorId,
}

impl Prediction {
    /// Supervised maps in emission order; the final map is last.
    pub fn heads(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        if let Some(p) = self.p1 {
            out.push(p);
        }
        if let Some(p) = self.p2 {
            out.push(p);
        }
        out.push(self.p3);
        out
    }

    pub fn final_map(&self) -> TensorId {
        self.p3
    }
}

fn k2(prefix: &str, suffix: &str) -> String {
    format!("{prefix}.{suffix}")
}

// ---- parameter registration -------------------------------------------------

fn init_encoder2d<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    base: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    attention::init_conv2d(ps, &k2(prefix, "stem1"), base, 3, 3, rng)?;
    attention::init_affine(ps, &k2(prefix, "stem1.bn"), base)?;
    attention::init_conv2d(ps, &k2(prefix, "stem2"), base, base, 3, rng)?;
    attention::init_affine(ps, &k2(prefix, "stem2.bn"), base)?;
    for i in 2..=4u8 {
        let c_in = base << (i - 2);
        let c_out = 2 * c_in;
        attention::init_conv2d(ps, &k2(prefix, &format!("s{i}.conv")), c_out, c_in, 3, rng)?;
        attention::init_affine(ps, &k2(prefix, &format!("s{i}.bn")), c_out)?;
        residual_block_init(ps, &k2(prefix, &format!("s{i}.rb")), c_out, rng)?;
    }
    Ok(())
}

fn init_residual3d<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    attention::init_conv3d(ps, &k2(prefix, "c1"), c, c, 3, 3, rng)?;
    attention::init_conv3d(ps, &k2(prefix, "c2"), c, c, 3, 3, rng)
}

fn init_encoder3d<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    base: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    attention::init_conv3d(ps, &k2(prefix, "stem1"), base, 3, 3, 3, rng)?;
    attention::init_affine(ps, &k2(prefix, "stem1.bn"), base)?;
    attention::init_conv3d(ps, &k2(prefix, "stem2"), base, base, 3, 3, rng)?;
    attention::init_affine(ps, &k2(prefix, "stem2.bn"), base)?;
    for i in 2..=4u8 {
        let c_in = base << (i - 2);
        let c_out = 2 * c_in;
        attention::init_conv3d(ps, &k2(prefix, &format!("s{i}.conv")), c_out, c_in, 3, 3, rng)?;
        attention::init_affine(ps, &k2(prefix, &format!("s{i}.bn")), c_out)?;
        init_residual3d(ps, &k2(prefix, &format!("s{i}.rb")), c_out, rng)?;
    }
    Ok(())
}

fn init_head<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    c_in: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    attention::init_conv2d(ps, &k2(name, "out"), 1, c_in, 1, rng)
}

/// Parameters for [`pf_forward`]: three transposed-conv rounds that halve the
/// channel count while doubling the extent, then a single-channel 1x1 head.
pub fn init_decoder<R: Rng>(ps: &mut ParamSet, c_rfb: usize, rng: &mut R) -> Result<(), TensorError> {
    let c1 = c_rfb;
    let c2 = (c_rfb / 2).max(1);
    let c3 = (c_rfb / 4).max(1);
    attention::init_convt2d(ps, "db.d1.up", 2 * c_rfb, c1, 2, rng)?;
    attention::init_conv2d(ps, "db.d1.conv", c1, c1, 3, rng)?;
    attention::init_convt2d(ps, "db.d2.up", c1, c2, 2, rng)?;
    attention::init_conv2d(ps, "db.d2.conv", c2, c2, 3, rng)?;
    attention::init_convt2d(ps, "db.d3.up", c2, c3, 2, rng)?;
    attention::init_conv2d(ps, "db.d3.conv", c3, c3, 3, rng)?;
    attention::init_conv2d(ps, "db.out", 1, c3, 1, rng)
}

fn build_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamSet, TensorError> {
    let mut ps = ParamSet::new();
    let base = cfg.base_channels;
    let c_rfb = cfg.rfb_channels;
    init_encoder2d(&mut ps, "enc2d", base, rng)?;
    match cfg.ablation {
        Ablation::B => {
            init_encoder2d(&mut ps, "enc2db", base, rng)?;
            init_head(&mut ps, "pb", 2 * cfg.width(4), rng)?;
        }
        Ablation::Me0 => {
            init_encoder3d(&mut ps, "enc3d", base, rng)?;
            init_head(&mut ps, "pme", 2 * cfg.width(4), rng)?;
        }
        _ => {
            init_encoder3d(&mut ps, "enc3d", base, rng)?;
            for i in 2..=4u8 {
                rfb_block_init(&mut ps, &format!("rfb2d.l{i}"), cfg.width(i), c_rfb, rng)?;
            }
            for i in 2..=4u8 {
                rfb_block_init(&mut ps, &format!("rfb3d.l{i}"), cfg.width(i), c_rfb, rng)?;
            }
            if cfg.ablation == Ablation::Me {
                init_head(&mut ps, "pme", 2 * c_rfb, rng)?;
            } else {
                let kind = if cfg.ablation == Ablation::Sa1 {
                    StageKind::ChannelOnly
                } else {
                    StageKind::Full
                };
                sa_stage_init(&mut ps, "sa1", c_rfb, kind, rng)?;
                residual_block_init(&mut ps, "bridge2d", c_rfb, rng)?;
                residual_block_init(&mut ps, "bridge3d", c_rfb, rng)?;
                sa_stage_init(&mut ps, "sa2", c_rfb, kind, rng)?;
                match cfg.ablation {
                    Ablation::Sa1 | Ablation::Sa2 => init_head(&mut ps, "psa", 2 * c_rfb, rng)?,
                    Ablation::Pf1 => init_decoder(&mut ps, c_rfb, rng)?,
                    Ablation::Pf2 | Ablation::Full => {
                        init_decoder(&mut ps, c_rfb, rng)?;
                        init_head(&mut ps, "p1", 2 * c_rfb, rng)?;
                        init_head(&mut ps, "p2", 2 * c_rfb, rng)?;
                        if cfg.ablation == Ablation::Full {
                            aif_induced_attention_init(&mut ps, "aa", c_rfb, rng)?;
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(ps)
}

// ---- forward passes ----------------------------------------------------------

fn encode2d(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    img: TensorId,
    branch: Branch,
) -> Result<FeaturePyramid, TensorError> {
    let x = conv2d_p(tape, bp, &k2(prefix, "stem1"), img, 2, 1, 1)?;
    let x = attention::affine_p(tape, bp, &k2(prefix, "stem1.bn"), x)?;
    let x = tape.relu(x)?;
    let x = conv2d_p(tape, bp, &k2(prefix, "stem2"), x, 2, 1, 1)?;
    let x = attention::affine_p(tape, bp, &k2(prefix, "stem2.bn"), x)?;
    let l1 = tape.relu(x)?;
    let mut levels = vec![FeatureMap::new(l1, 1, branch)];
    let mut cur = l1;
    for i in 2..=4u8 {
        let x = conv2d_p(tape, bp, &k2(prefix, &format!("s{i}.conv")), cur, 2, 1, 1)?;
        let x = attention::affine_p(tape, bp, &k2(prefix, &format!("s{i}.bn")), x)?;
        let x = tape.relu(x)?;
        let fm = residual_block(
            tape,
            bp,
            &k2(prefix, &format!("s{i}.rb")),
            &FeatureMap::new(x, i, branch),
        )?;
        cur = fm.id;
        levels.push(fm);
    }
    Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
}

fn residual3d(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let c1 = conv3d_p(tape, bp, &k2(prefix, "c1"), x, (1, 1), (1, 1))?;
    let r = tape.relu(c1)?;
    let c2 = conv3d_p(tape, bp, &k2(prefix, "c2"), r, (1, 1), (1, 1))?;
    let sum = tape.add(c2, x)?;
    tape.relu(sum)
}

/// Mean over the temporal axis: `[C,T,H,W] -> [C,H,W]`.
fn collapse_temporal(tape: &mut GradientTape, x: TensorId) -> Result<TensorId, TensorError> {
    tape.mean_axis(x, 1)
}

fn encode3d(
    tape: &mut GradientTape,
    bp: &BlockParams,
    prefix: &str,
    stack: TensorId,
) -> Result<FeaturePyramid, TensorError> {
    // [T,3,H,W] -> [3,T,H,W]
    let vol = tape.permute(stack, &[1, 0, 2, 3])?;
    let x = conv3d_p(tape, bp, &k2(prefix, "stem1"), vol, (1, 2), (1, 1))?;
    let x = attention::affine3d_p(tape, bp, &k2(prefix, "stem1.bn"), x)?;
    let x = tape.relu(x)?;
    let x = conv3d_p(tape, bp, &k2(prefix, "stem2"), x, (1, 2), (1, 1))?;
    let x = attention::affine3d_p(tape, bp, &k2(prefix, "stem2.bn"), x)?;
    let l1vol = tape.relu(x)?;
    let l1 = collapse_temporal(tape, l1vol)?;
    let mut levels = vec![FeatureMap::new(l1, 1, Branch::Fs3d)];
    let mut cur = l1vol;
    for i in 2..=4u8 {
        let x = conv3d_p(tape, bp, &k2(prefix, &format!("s{i}.conv")), cur, (2, 2), (1, 1))?;
        let x = attention::affine3d_p(tape, bp, &k2(prefix, &format!("s{i}.bn")), x)?;
        let x = tape.relu(x)?;
        let x = residual3d(tape, bp, &k2(prefix, &format!("s{i}.rb")), x)?;
        let flat = collapse_temporal(tape, x)?;
        levels.push(FeatureMap::new(flat, i, Branch::Fs3d));
        cur = x;
    }
    Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
}

/// Doubles spatial extent until it reaches `target`.
fn upsample_to(
    tape: &mut GradientTape,
    x: TensorId,
    target: usize,
    mode: UpsampleMode,
) -> Result<TensorId, TensorError> {
    let mut h = tape.shape(x)[1];
    if h > target || target % h != 0 || !(target / h).is_power_of_two() {
        return Err(TensorError::ShapeMismatch {
            op: "upsample_to",
            detail: format!("cannot reach {target} from {h} by doubling"),
        });
    }
    let mut cur = x;
    while h < target {
        cur = tape.upsample2x(cur, mode)?;
        h *= 2;
    }
    Ok(cur)
}

/// Concat both branches, 1x1 conv to one channel, sigmoid, upsample to the
/// input size.
fn prediction_head(
    tape: &mut GradientTape,
    bp: &BlockParams,
    name: &str,
    f2d: &FeatureMap,
    f3d: &FeatureMap,
    cfg: &ModelConfig,
) -> Result<TensorId, TensorError> {
    if tape.shape(f2d.id) != tape.shape(f3d.id) {
        return Err(TensorError::ShapeMismatch {
            op: "prediction_head",
            detail: format!("{:?} vs {:?}", tape.shape(f2d.id), tape.shape(f3d.id)),
        });
    }
    let cat = tape.concat_channels(&[f2d.id, f3d.id])?;
    let pre = conv2d_p(tape, bp, &k2(name, "out"), cat, 1, 0, 1)?;
    let sig = tape.sigmoid(pre)?;
    upsample_to(tape, sig, cfg.input_size, cfg.upsample)
}

/// Deconvolutional decoder: three (transposed conv stride 2, 3x3 conv, ReLU)
/// rounds restore the stride-8 input to full resolution, then a 1x1 conv and
/// sigmoid produce the final map.
pub fn pf_forward(
    tape: &mut GradientTape,
    bp: &BlockParams,
    f2d: &FeatureMap,
    f3d: &FeatureMap,
    cfg: &ModelConfig,
) -> Result<TensorId, TensorError> {
    if tape.shape(f2d.id) != tape.shape(f3d.id) {
        return Err(TensorError::ShapeMismatch {
            op: "pf_forward",
            detail: format!("{:?} vs {:?}", tape.shape(f2d.id), tape.shape(f3d.id)),
        });
    }
    let extent = tape.shape(f2d.id)[1];
    if extent * 8 != cfg.input_size {
        return Err(TensorError::ShapeMismatch {
            op: "pf_forward",
            detail: format!("expected stride-8 features, got extent {extent} for input {}", cfg.input_size),
        });
    }
    let mut cur = tape.concat_channels(&[f2d.id, f3d.id])?;
    for i in 1..=3 {
        let up = convt2d_p(tape, bp, &format!("db.d{i}.up"), cur, 2, 0)?;
        let conv = conv2d_p(tape, bp, &format!("db.d{i}.conv"), up, 1, 1, 1)?;
        cur = tape.relu(conv)?;
    }
    let pre = conv2d_p(tape, bp, "db.out", cur, 1, 0, 1)?;
    tape.sigmoid(pre)
}

/// Configuration plus parameters. Forward passes borrow the parameters
/// through a [`BlockParams`] binding, so a model is immutable during a pass
/// and several passes can run concurrently on independent tapes.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build_params(&config, &mut rng)?;
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// Runs the configured pipeline. `aif` is `[3,S,S]`, `stack` is
    /// `[T,3,S,S]` with `T == config.temporal_slices`.
    pub fn forward(
        &self,
        tape: &mut GradientTape,
        bp: &BlockParams,
        aif: TensorId,
        stack: TensorId,
    ) -> Result<Prediction, TensorError> {
        let cfg = &self.config;
        let s = cfg.input_size;
        if tape.shape(aif) != [3, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                detail: format!("aif {:?}, expected [3, {s}, {s}]", tape.shape(aif)),
            });
        }
        if tape.shape(stack) != [cfg.temporal_slices, 3, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "stack {:?}, expected [{}, 3, {s}, {s}]",
                    tape.shape(stack),
                    cfg.temporal_slices
                ),
            });
        }
        let pyr2d = encode2d(tape, bp, "enc2d", aif, Branch::Aif2d)?;
        match cfg.ablation {
            Ablation::B => {
                let mean = tape.mean_axis(stack, 0)?;
                let pyrb = encode2d(tape, bp, "enc2db", mean, Branch::Fs3d)?;
                let p = prediction_head(tape, bp, "pb", pyr2d.level(4), pyrb.level(4), cfg)?;
                Ok(Prediction { p1: None, p2: None, p3: p })
            }
            Ablation::Me0 => {
                let pyr3d = encode3d(tape, bp, "enc3d", stack)?;
                let p = prediction_head(tape, bp, "pme", pyr2d.level(4), pyr3d.level(4), cfg)?;
                Ok(Prediction { p1: None, p2: None, p3: p })
            }
            _ => {
                let pyr3d = encode3d(tape, bp, "enc3d", stack)?;
                let mut r2d = Vec::new();
                let mut r3d = Vec::new();
                for i in 2..=4u8 {
                    r2d.push(rfb_block(tape, bp, &format!("rfb2d.l{i}"), pyr2d.level(i))?);
                    r3d.push(rfb_block(tape, bp, &format!("rfb3d.l{i}"), pyr3d.level(i))?);
                }
                // r2d/r3d index 0..2 holds levels 2..4
                if cfg.ablation == Ablation::Me {
                    let p = prediction_head(tape, bp, "pme", &r2d[2], &r3d[2], cfg)?;
                    return Ok(Prediction { p1: None, p2: None, p3: p });
                }
                let kind = if cfg.ablation == Ablation::Sa1 {
                    StageKind::ChannelOnly
                } else {
                    StageKind::Full
                };
                let (s1_2d, s1_3d, _) = sa_stage(
                    tape,
                    bp,
                    "sa1",
                    (&r2d[1], &r2d[2]),
                    (&r3d[1], &r3d[2]),
                    cfg.upsample,
                    kind,
                )?;
                let b2d = residual_block(tape, bp, "bridge2d", &s1_2d)?;
                let b3d = residual_block(tape, bp, "bridge3d", &s1_3d)?;
                let (s2_2d, s2_3d, _) = sa_stage(
                    tape,
                    bp,
                    "sa2",
                    (&r2d[0], &b2d),
                    (&r3d[0], &b3d),
                    cfg.upsample,
                    kind,
                )?;
                match cfg.ablation {
                    Ablation::Sa1 | Ablation::Sa2 => {
                        let p = prediction_head(tape, bp, "psa", &s2_2d, &s2_3d, cfg)?;
                        Ok(Prediction { p1: None, p2: None, p3: p })
                    }
                    Ablation::Pf1 => {
                        let p3 = pf_forward(tape, bp, &s2_2d, &s2_3d, cfg)?;
                        Ok(Prediction { p1: None, p2: None, p3 })
                    }
                    Ablation::Pf2 => {
                        let p1 = prediction_head(tape, bp, "p1", &s1_2d, &s1_3d, cfg)?;
                        let p2 = prediction_head(tape, bp, "p2", &s2_2d, &s2_3d, cfg)?;
                        let p3 = pf_forward(tape, bp, &s2_2d, &s2_3d, cfg)?;
                        Ok(Prediction { p1: Some(p1), p2: Some(p2), p3 })
                    }
                    Ablation::Full => {
                        let p1 = prediction_head(tape, bp, "p1", &s1_2d, &s1_3d, cfg)?;
                        let p2 = prediction_head(tape, bp, "p2", &s2_2d, &s2_3d, cfg)?;
                        let (a2d, a3d) = aif_induced_attention(tape, bp, "aa", &s2_2d, &s2_3d)?;
                        let p3 = pf_forward(tape, bp, &a2d, &a3d, cfg)?;
                        Ok(Prediction { p1: Some(p1), p2: Some(p2), p3 })
                    }
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Single-sample inference: builds a throwaway tape and returns the
    /// final saliency map values.
    pub fn infer(&self, aif: &Tensor, stack: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = GradientTape::new();
        let bp = BlockParams::bind(&mut tape, &self.params, false);
        let a = tape.constant(aif.clone());
        let st = tape.constant(stack.clone());
        let pred = self.forward(&mut tape, &bp, a, st)?;
        Ok(tape.value(pred.final_map()).clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, encode_checkpoint(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, CheckpointError> {
        let bytes = std::fs::read(path)?;
        decode_checkpoint(&bytes)
    }
}

/// Directional finite-difference check of the whole model: compares the
/// directional derivative of a scalar head statistic against the tape
/// gradient projected on random unit directions over all parameters.
/// Returns the worst relative error.
pub fn model_grad_check_directional<R: Rng>(
    model: &Model,
    aif: &Tensor,
    stack: &Tensor,
    directions: usize,
    eps: f64,
    rng: &mut R,
) -> Result<f64, TensorError> {
    fn head_statistic(
        model: &Model,
        aif: &Tensor,
        stack: &Tensor,
        trainable: bool,
    ) -> Result<(GradientTape, BlockParams, TensorId), TensorError> {
        let mut tape = GradientTape::new();
        let bp = BlockParams::bind(&mut tape, &model.params, trainable);
        let a = tape.constant(aif.clone());
        let st = tape.constant(stack.clone());
        let pred = model.forward(&mut tape, &bp, a, st)?;
        let mut total: Option<TensorId> = None;
        for h in pred.heads() {
            let sq = tape.mul(h, h)?;
            let m = tape.mean_all(sq)?;
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m)?,
            });
        }
        Ok((tape, bp, total.expect("at least one head")))
    }

    let (mut tape, bp, loss) = head_statistic(model, aif, stack, true)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|(name, _)| tape.grad(bp.id(name)).expect("trainable param grad").to_vec())
        .collect();

    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut dir: Vec<Vec<f64>> =
            model.params.iter().map(|(_, t)| (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let norm: f64 = dir.iter().flat_map(|v| v.iter().map(|x| x * x)).sum::<f64>().sqrt();
        for v in dir.iter_mut().flat_map(|v| v.iter_mut()) {
            *v /= norm;
        }
        let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum();
        let shifted = |sign: f64| -> Result<f64, TensorError> {
            let mut m = model.clone();
            for ((_, t), d) in m.params.iter_mut().zip(&dir) {
                for (x, dx) in t.data.iter_mut().zip(d) {
                    *x += sign * eps * dx;
                }
            }
            let (tape, _, loss) = head_statistic(&m, aif, stack, false)?;
            Ok(tape.value(loss).data[0])
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        let rel = (analytic - fd).abs() / f64::max(1e-8, analytic.abs() + fd.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

// ---- checkpoint container -----------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"LFSC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    UnsupportedVersion(u32),
    /// Structurally invalid payload (truncated, trailing bytes, bad enum
    /// code, or a parameter list that does not match the stored config).
    Malformed(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            CheckpointError::Malformed(msg) => write!(f, "malformed checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.temporal_slices, cfg.base_channels, cfg.rfb_channels, cfg.input_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.ablation.code());
    out.push(upsample_code(cfg.upsample));
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let temporal_slices = cur.u32()? as usize;
    let base_channels = cur.u32()? as usize;
    let rfb_channels = cur.u32()? as usize;
    let input_size = cur.u32()? as usize;
    let ablation = Ablation::from_code(cur.u8()?)
        .ok_or_else(|| CheckpointError::Malformed("bad ablation code".into()))?;
    let upsample = upsample_from_code(cur.u8()?)
        .ok_or_else(|| CheckpointError::Malformed("bad upsample code".into()))?;
    let config = ModelConfig { temporal_slices, base_channels, rfb_channels, input_size, ablation, upsample };
    config.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let n = cur.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("non-utf8 parameter name".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64()?);
        }
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.insert(&name, t).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - cur.pos
        )));
    }
    // the stored parameter list must be exactly what the config would build
    let mut skeleton_rng = ChaCha8Rng::seed_from_u64(0);
    let skeleton = build_params(&config, &mut skeleton_rng)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if skeleton.len() != params.len()
        || skeleton.iter().zip(params.iter()).any(|((na, ta), (nb, tb))| na != nb || ta.shape != tb.shape)
    {
        return Err(CheckpointError::Malformed("parameter list does not match config".into()));
    }
    Ok(Model { config, params })
}
