//! Release gate. Eight criteria, one test each, ordered so the cheap
//! algebraic checks run before the training runs. Every test prints a single
//! `criterion N ... pass` or `... fail` line with its measured numbers; run
//! `cargo test --test acceptance -- --nocapture` to read them.
//!
//! The oracles here are deliberately independent of the library: metric
//! values are recomputed with plain nested loops, co-attention with a triple
//! loop, and gradients with central finite differences.
//!
//! Criterion 5 is red by design, not by bug: its failure message carries the
//! measurement showing the required loss bound is unreachable for this
//! architecture. See `side_head_floor` below.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use lfsod::attention::{
    aif_induced_attention, aif_induced_attention_init, channel_attention_fuse,
    channel_attention_fuse_init, co_attention, param_grad_check, residual_block,
    residual_block_init, rfb_block, rfb_block_init, sa_stage, sa_stage_init, BlockParams, Branch,
    FeatureMap, StageKind,
};
use lfsod::cli::{cmd_eval, cmd_metrics, cmd_predict, cmd_train, train_model, Protocol, RunConfig};
use lfsod::dataset::{generate_synthetic, LoadConfig};
use lfsod::loss::{bce_loss, em_loss, hybrid_loss, iou_loss};
use lfsod::metrics::{
    adaptive_threshold, aggregate_report, e_measure, f_measure, fe_curves, mae, s_measure,
    score_image, CurveRow, GroundTruthMask, MetricReport, SaliencyMap,
};
use lfsod::network::{
    init_decoder, model_grad_check_directional, pf_forward, Ablation, Model, ModelConfig,
};
use lfsod::tensor::{
    grad_check, GradientTape, ParamSet, Tensor, TensorError, TensorId, UpsampleMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

const PER_COORD_TOL: f64 = 1e-4;
const FULL_MODEL_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, r: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero<R: Rng>(shape: &[usize], margin: f64, r: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.gen_range(margin..1.0);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Shuffled arithmetic progression: pairwise gaps of at least `2.2/n`, so
/// argmax choices cannot flip under the finite-difference step.
fn spread<R: Rng>(shape: &[usize], r: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.2 * (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

/// Shifts every parameter off its freshly initialized value. Biases start at
/// zero, and a zero bias can place a relu pre-activation exactly on its kink,
/// where a central difference stops being a valid oracle.
fn jitter<R: Rng>(ps: &mut ParamSet, r: &mut R) {
    for (_, t) in ps.iter_mut() {
        for v in t.data.iter_mut() {
            *v += r.gen_range(-0.05..0.05);
        }
    }
}

/// Reduces any tensor to a scalar through fixed non-uniform weights, so the
/// backward pass sees a distinct cotangent on every output coordinate.
fn weighted_sum(tape: &mut GradientTape, y: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|j| 0.2 + 0.1 * ((3 * j + 1) % 7) as f64).collect();
    let c = tape.constant(Tensor::new(&shape, w)?);
    let prod = tape.mul(y, c)?;
    tape.sum_all(prod)
}

// ---- criterion 1: gradients ---------------------------------------------------

fn prim<F>(results: &mut Vec<(&'static str, f64)>, name: &'static str, inputs: &[Tensor], eps: f64, build: F)
where
    F: Fn(&mut GradientTape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let report = grad_check(
        |tape, ids| {
            let y = build(tape, ids)?;
            weighted_sum(tape, y)
        },
        inputs,
        eps,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(
        report.max_rel_err <= PER_COORD_TOL,
        "{name}: rel err {} at input {} coord {}",
        report.max_rel_err,
        report.worst.0,
        report.worst.1
    );
    results.push((name, report.max_rel_err));
}

fn comp<F>(
    results: &mut Vec<(&'static str, f64)>,
    name: &'static str,
    params: &ParamSet,
    inputs: &[Tensor],
    eps: f64,
    build: F,
) where
    F: Fn(&mut GradientTape, &BlockParams, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let worst = param_grad_check(params, inputs, eps, build).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(worst <= PER_COORD_TOL, "{name}: rel err {worst}");
    results.push((name, worst));
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut results: Vec<(&'static str, f64)> = Vec::new();

    // every primitive
    let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    prim(&mut results, "add", &[a.clone(), b.clone()], 1e-5, |t, ids| t.add(ids[0], ids[1]));
    prim(&mut results, "sub", &[a.clone(), b.clone()], 1e-5, |t, ids| t.sub(ids[0], ids[1]));
    prim(&mut results, "mul", &[a.clone(), b.clone()], 1e-5, |t, ids| t.mul(ids[0], ids[1]));
    let denom = uniform(&[2, 3, 4], 0.6, 1.6, &mut r);
    prim(&mut results, "div", &[a.clone(), denom], 1e-5, |t, ids| t.div(ids[0], ids[1]));
    prim(&mut results, "scale", &[a.clone()], 1e-5, |t, ids| t.scale(ids[0], -1.7));
    prim(&mut results, "add_const", &[a.clone()], 1e-5, |t, ids| t.add_const(ids[0], 0.9));
    prim(&mut results, "sigmoid", &[uniform(&[3, 4], -2.0, 2.0, &mut r)], 1e-5, |t, ids| {
        t.sigmoid(ids[0])
    });
    prim(&mut results, "relu", &[off_zero(&[3, 4], 0.2, &mut r)], 1e-5, |t, ids| t.relu(ids[0]));
    prim(&mut results, "ln", &[uniform(&[3, 4], 0.5, 2.0, &mut r)], 1e-5, |t, ids| t.ln(ids[0]));
    // clamp cuts at +-0.7; keep samples clear of the cut points
    let clampable = {
        let data: Vec<f64> = (0..12)
            .map(|_| match r.gen_range(0..3) {
                0 => r.gen_range(-1.0..-0.8),
                1 => r.gen_range(-0.5..0.5),
                _ => r.gen_range(0.8..1.0),
            })
            .collect();
        Tensor::new(&[3, 4], data).unwrap()
    };
    prim(&mut results, "clamp", &[clampable], 1e-5, |t, ids| t.clamp(ids[0], -0.7, 0.7));
    let m1 = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let m2 = uniform(&[4, 2], -1.0, 1.0, &mut r);
    prim(&mut results, "matmul", &[m1, m2], 1e-5, |t, ids| t.matmul(ids[0], ids[1]));
    let sm = uniform(&[3, 4], -2.0, 2.0, &mut r);
    prim(&mut results, "softmax_axis0", &[sm.clone()], 1e-5, |t, ids| t.softmax_axis(ids[0], 0));
    prim(&mut results, "softmax_axis1", &[sm], 1e-5, |t, ids| t.softmax_axis(ids[0], 1));
    let cx = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
    let cw = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    prim(&mut results, "conv2d", &[cx, cw], 1e-5, |t, ids| t.conv2d(ids[0], ids[1], 2, 1));
    let dx = uniform(&[1, 7, 7], -1.0, 1.0, &mut r);
    let dw = uniform(&[2, 1, 3, 3], -0.5, 0.5, &mut r);
    prim(&mut results, "conv2d_dilated", &[dx, dw], 1e-5, |t, ids| {
        t.conv2d_dilated(ids[0], ids[1], 1, 2, 2)
    });
    let vx = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
    let vw = uniform(&[2, 2, 2, 3, 3], -0.5, 0.5, &mut r);
    prim(&mut results, "conv3d", &[vx, vw], 1e-5, |t, ids| t.conv3d(ids[0], ids[1], (1, 2), (1, 1)));
    let tx = uniform(&[3, 3, 3], -1.0, 1.0, &mut r);
    let tw = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    prim(&mut results, "conv_transpose2d", &[tx, tw], 1e-5, |t, ids| {
        t.conv_transpose2d(ids[0], ids[1], 2, 1)
    });
    prim(&mut results, "global_max_pool", &[spread(&[3, 4, 4], &mut r)], 1e-5, |t, ids| {
        t.global_max_pool(ids[0])
    });
    let fx = uniform(&[5], -1.0, 1.0, &mut r);
    let fw = uniform(&[3, 5], -1.0, 1.0, &mut r);
    let fb = uniform(&[3], -1.0, 1.0, &mut r);
    prim(&mut results, "fully_connected", &[fx, fw, fb], 1e-5, |t, ids| {
        t.fully_connected(ids[0], ids[1], ids[2])
    });
    let ux = uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    prim(&mut results, "upsample2x_nearest", &[ux.clone()], 1e-5, |t, ids| {
        t.upsample2x(ids[0], UpsampleMode::Nearest)
    });
    prim(&mut results, "upsample2x_bilinear", &[ux], 1e-5, |t, ids| {
        t.upsample2x(ids[0], UpsampleMode::Bilinear)
    });
    let c1 = uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
    let c2 = uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    let c3 = uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
    prim(&mut results, "concat_channels", &[c1, c2, c3], 1e-5, |t, ids| {
        t.concat_channels(&[ids[0], ids[1], ids[2]])
    });
    prim(&mut results, "reshape", &[a.clone()], 1e-5, |t, ids| t.reshape(ids[0], &[4, 6]));
    prim(&mut results, "permute", &[a.clone()], 1e-5, |t, ids| t.permute(ids[0], &[2, 0, 1]));
    prim(&mut results, "mean_axis0", &[uniform(&[3, 4], -1.0, 1.0, &mut r)], 1e-5, |t, ids| {
        t.mean_axis(ids[0], 0)
    });
    prim(&mut results, "mean_axis1", &[a.clone()], 1e-5, |t, ids| t.mean_axis(ids[0], 1));
    prim(&mut results, "max_axis0", &[spread(&[3, 4], &mut r)], 1e-5, |t, ids| t.max_axis(ids[0], 0));
    prim(&mut results, "max_axis2", &[spread(&[2, 3, 4], &mut r)], 1e-5, |t, ids| {
        t.max_axis(ids[0], 2)
    });
    prim(&mut results, "mean_all", &[a.clone()], 1e-5, |t, ids| t.mean_all(ids[0]));
    prim(&mut results, "sum_all", &[a.clone()], 1e-5, |t, ids| t.sum_all(ids[0]));
    prim(&mut results, "expand_channel", &[uniform(&[1, 3, 4], -1.0, 1.0, &mut r)], 1e-5, |t, ids| {
        t.expand_channel(ids[0], 4)
    });
    prim(&mut results, "expand_spatial", &[uniform(&[4], -1.0, 1.0, &mut r)], 1e-5, |t, ids| {
        t.expand_spatial(ids[0], 3, 2)
    });

    // every composite block
    let mut ps = ParamSet::new();
    rfb_block_init(&mut ps, "rfb", 3, 4, &mut r).unwrap();
    jitter(&mut ps, &mut r);
    let x = uniform(&[3, 6, 6], -1.0, 1.0, &mut r);
    comp(&mut results, "rfb_block", &ps, &[x], 1e-5, |tape, bp, ids| {
        let f = FeatureMap::new(ids[0], 2, Branch::Aif2d);
        let y = rfb_block(tape, bp, "rfb", &f)?;
        weighted_sum(tape, y.id)
    });

    let mut ps = ParamSet::new();
    residual_block_init(&mut ps, "rb", 3, &mut r).unwrap();
    jitter(&mut ps, &mut r);
    let x = uniform(&[3, 5, 5], -1.0, 1.0, &mut r);
    comp(&mut results, "residual_block", &ps, &[x], 1e-5, |tape, bp, ids| {
        let f = FeatureMap::new(ids[0], 2, Branch::Fs3d);
        let y = residual_block(tape, bp, "rb", &f)?;
        weighted_sum(tape, y.id)
    });

    let mut ps = ParamSet::new();
    channel_attention_fuse_init(&mut ps, "ca", 4, &mut r).unwrap();
    jitter(&mut ps, &mut r);
    let fi = uniform(&[4, 6, 6], -1.0, 1.0, &mut r);
    let fu = spread(&[4, 3, 3], &mut r);
    comp(&mut results, "channel_attention_fuse", &ps, &[fi, fu], 1e-5, |tape, bp, ids| {
        let lo = FeatureMap::new(ids[0], 2, Branch::Aif2d);
        let hi = FeatureMap::new(ids[1], 3, Branch::Aif2d);
        let y = channel_attention_fuse(tape, bp, "ca", &lo, &hi, UpsampleMode::Bilinear)?;
        weighted_sum(tape, y.id)
    });

    let mut ps = ParamSet::new();
    sa_stage_init(&mut ps, "sa", 4, StageKind::Full, &mut r).unwrap();
    jitter(&mut ps, &mut r);
    let f2i = uniform(&[4, 6, 6], -1.0, 1.0, &mut r);
    let f2u = spread(&[4, 3, 3], &mut r);
    let f3i = uniform(&[4, 6, 6], -1.0, 1.0, &mut r);
    let f3u = spread(&[4, 3, 3], &mut r);
    comp(&mut results, "sa_stage_full", &ps, &[f2i, f2u, f3i, f3u], 1e-5, |tape, bp, ids| {
        let a_i = FeatureMap::new(ids[0], 2, Branch::Aif2d);
        let a_u = FeatureMap::new(ids[1], 3, Branch::Aif2d);
        let b_i = FeatureMap::new(ids[2], 2, Branch::Fs3d);
        let b_u = FeatureMap::new(ids[3], 3, Branch::Fs3d);
        let (o2, o3, _) =
            sa_stage(tape, bp, "sa", (&a_i, &a_u), (&b_i, &b_u), UpsampleMode::Bilinear, StageKind::Full)?;
        let s2 = weighted_sum(tape, o2.id)?;
        let s3 = weighted_sum(tape, o3.id)?;
        tape.add(s2, s3)
    });

    let mut ps = ParamSet::new();
    aif_induced_attention_init(&mut ps, "aa", 4, &mut r).unwrap();
    jitter(&mut ps, &mut r);
    let f2 = spread(&[4, 6, 6], &mut r);
    let f3 = uniform(&[4, 6, 6], -1.0, 1.0, &mut r);
    comp(&mut results, "aif_induced_attention", &ps, &[f2, f3], 1e-5, |tape, bp, ids| {
        let a2 = FeatureMap::new(ids[0], 2, Branch::Aif2d);
        let a3 = FeatureMap::new(ids[1], 2, Branch::Fs3d);
        let (o2, o3) = aif_induced_attention(tape, bp, "aa", &a2, &a3)?;
        let s2 = weighted_sum(tape, o2.id)?;
        let s3 = weighted_sum(tape, o3.id)?;
        tape.add(s2, s3)
    });

    let dec_cfg = ModelConfig {
        temporal_slices: 2,
        base_channels: 2,
        rfb_channels: 4,
        input_size: 32,
        ablation: Ablation::Pf1,
        upsample: UpsampleMode::Bilinear,
    };
    let mut ps = ParamSet::new();
    init_decoder(&mut ps, dec_cfg.rfb_channels, &mut r).unwrap();
    jitter(&mut ps, &mut r);
    let f2 = uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    let f3 = uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    comp(&mut results, "decoder", &ps, &[f2, f3], 1e-6, move |tape, bp, ids| {
        let a = FeatureMap::new(ids[0], 2, Branch::Aif2d);
        let b = FeatureMap::new(ids[1], 2, Branch::Fs3d);
        let p = pf_forward(tape, bp, &a, &b, &dec_cfg)?;
        weighted_sum(tape, p)
    });

    // each loss term and their sum
    let p1 = uniform(&[1, 8, 8], 0.05, 0.95, &mut r);
    let p2 = uniform(&[1, 8, 8], 0.05, 0.95, &mut r);
    let p3 = uniform(&[1, 8, 8], 0.05, 0.95, &mut r);
    let gdata: Vec<f64> = (0..64).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let g = Tensor::new(&[1, 8, 8], gdata).unwrap();
    let gc = g.clone();
    prim(&mut results, "bce_loss", &[p1.clone()], 1e-5, move |t, ids| {
        let gid = t.constant(gc.clone());
        bce_loss(t, ids[0], gid)
    });
    let gc = g.clone();
    prim(&mut results, "iou_loss", &[p1.clone()], 1e-5, move |t, ids| {
        let gid = t.constant(gc.clone());
        iou_loss(t, ids[0], gid)
    });
    let gc = g.clone();
    prim(&mut results, "em_loss", &[p1.clone()], 1e-5, move |t, ids| {
        let gid = t.constant(gc.clone());
        em_loss(t, ids[0], gid)
    });
    let gc = g.clone();
    prim(&mut results, "hybrid_loss", &[p1, p2, p3], 1e-5, move |t, ids| {
        let gid = t.constant(gc.clone());
        let lb = hybrid_loss(t, &[ids[0], ids[1], ids[2]], gid)?;
        Ok(lb.total_id)
    });

    // the assembled model, directional because of the parameter count
    let full_cfg = ModelConfig {
        temporal_slices: 2,
        base_channels: 2,
        rfb_channels: 4,
        input_size: 32,
        ablation: Ablation::Full,
        upsample: UpsampleMode::Bilinear,
    };
    let mut model = Model::new(full_cfg, 33).unwrap();
    jitter(&mut model.params, &mut r);
    let aif = uniform(&[3, 32, 32], 0.0, 1.0, &mut r);
    let stack = uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
    let full_err = model_grad_check_directional(&model, &aif, &stack, 6, 1e-6, &mut r).unwrap();
    assert!(full_err <= FULL_MODEL_TOL, "full model: rel err {full_err}");

    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "gradient suite took {elapsed:.1}s");
    let (worst_name, worst_err) =
        results.iter().fold(("", 0.0), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    println!(
        "criterion 1 (gradient suite): pass; {} per-coordinate checks <= {PER_COORD_TOL:.0e} \
         (worst {worst_err:.2e} in {worst_name}), full model {full_err:.2e} <= {FULL_MODEL_TOL:.0e}, {elapsed:.1}s",
        results.len()
    );
}

// ---- criterion 2: attention invariants ----------------------------------------

#[test]
fn criterion_2_attention_invariants() {
    let mut r = rng(202);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let c = r.gen_range(1..=4);
        let h = r.gen_range(1..=4);
        let w = r.gen_range(1..=4);
        let hw = h * w;
        let ta = uniform(&[c, h, w], -2.0, 2.0, &mut r);
        let tb = uniform(&[c, h, w], -2.0, 2.0, &mut r);

        let mut tape = GradientTape::new();
        let fa = FeatureMap::new(tape.constant(ta.clone()), 2, Branch::Aif2d);
        let fb = FeatureMap::new(tape.constant(tb), 2, Branch::Fs3d);
        let (_, _, state) = co_attention(&mut tape, &fa, &fb).unwrap();
        for q in 0..hw {
            let col: f64 = (0..hw).map(|p| state.col_norm.data[p * hw + q]).sum();
            let row: f64 = (0..hw).map(|p| state.row_norm.data[p * hw + q]).sum();
            worst_sum = worst_sum.max((col - 1.0).abs()).max((row - 1.0).abs());
        }

        // identical branches must stay bitwise identical
        let mut tape = GradientTape::new();
        let fa = FeatureMap::new(tape.constant(ta.clone()), 2, Branch::Aif2d);
        let fb = FeatureMap::new(tape.constant(ta), 2, Branch::Fs3d);
        let (oa, ob, _) = co_attention(&mut tape, &fa, &fb).unwrap();
        let va = tape.value(oa.id).data.clone();
        let vb = &tape.value(ob.id).data;
        for (x, y) in va.iter().zip(vb) {
            assert_eq!(x.to_bits(), y.to_bits(), "branches diverged on identical input");
        }
    }
    assert!(worst_sum <= 1e-9, "normalization column sums off by {worst_sum}");

    let mut gate_lo = 1.0f64;
    let mut gate_hi = 0.0f64;
    for _ in 0..100 {
        let c = r.gen_range(1..=4);
        let mut ps = ParamSet::new();
        sa_stage_init(&mut ps, "sa", c, StageKind::Full, &mut r).unwrap();
        jitter(&mut ps, &mut r);
        let mut tape = GradientTape::new();
        let bp = BlockParams::bind(&mut tape, &ps, false);
        let f2i = FeatureMap::new(tape.constant(uniform(&[c, 4, 4], -1.0, 1.0, &mut r)), 2, Branch::Aif2d);
        let f2u = FeatureMap::new(tape.constant(uniform(&[c, 2, 2], -1.0, 1.0, &mut r)), 3, Branch::Aif2d);
        let f3i = FeatureMap::new(tape.constant(uniform(&[c, 4, 4], -1.0, 1.0, &mut r)), 2, Branch::Fs3d);
        let f3u = FeatureMap::new(tape.constant(uniform(&[c, 2, 2], -1.0, 1.0, &mut r)), 3, Branch::Fs3d);
        let (_, _, state) = sa_stage(
            &mut tape,
            &bp,
            "sa",
            (&f2i, &f2u),
            (&f3i, &f3u),
            UpsampleMode::Bilinear,
            StageKind::Full,
        )
        .unwrap();
        let (g2, g3) = state.expect("full stage returns attention state").gates.expect("gates");
        for &v in g2.data.iter().chain(&g3.data) {
            assert!(v > 0.0 && v < 1.0, "gate value {v} not strictly inside (0,1)");
            gate_lo = gate_lo.min(v);
            gate_hi = gate_hi.max(v);
        }
    }
    println!(
        "criterion 2 (attention invariants): pass; 100 instances, column sums within {worst_sum:.1e} \
         of 1, identical branches bitwise equal, gates in [{gate_lo:.4}, {gate_hi:.4}] strictly inside (0,1)"
    );
}

// ---- criterion 3: co-attention against a triple loop ---------------------------

fn col_softmax(m: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw * hw];
    for q in 0..hw {
        let mut mx = f64::NEG_INFINITY;
        for p in 0..hw {
            mx = mx.max(m[p * hw + q]);
        }
        let mut z = 0.0;
        for p in 0..hw {
            z += (m[p * hw + q] - mx).exp();
        }
        for p in 0..hw {
            out[p * hw + q] = (m[p * hw + q] - mx).exp() / z;
        }
    }
    out
}

#[test]
fn criterion_3_co_attention_matches_triple_loop() {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = r.gen_range(1..=3);
        let h = r.gen_range(1..=3);
        let w = r.gen_range(1..=3);
        let hw = h * w;
        let a = uniform(&[c, h, w], -2.0, 2.0, &mut r);
        let b = uniform(&[c, h, w], -2.0, 2.0, &mut r);

        let mut tape = GradientTape::new();
        let fa = FeatureMap::new(tape.constant(a.clone()), 2, Branch::Aif2d);
        let fb = FeatureMap::new(tape.constant(b.clone()), 2, Branch::Fs3d);
        let (oa, ob, state) = co_attention(&mut tape, &fa, &fb).unwrap();

        let mut m = vec![0.0; hw * hw];
        for p in 0..hw {
            for q in 0..hw {
                let mut s = 0.0;
                for ch in 0..c {
                    s += a.data[ch * hw + p] * b.data[ch * hw + q];
                }
                m[p * hw + q] = s;
            }
        }
        let mc = col_softmax(&m, hw);
        let mut mt = vec![0.0; hw * hw];
        for p in 0..hw {
            for q in 0..hw {
                mt[p * hw + q] = m[q * hw + p];
            }
        }
        let mr = col_softmax(&mt, hw);
        let mut va = vec![0.0; c * hw];
        let mut vb = vec![0.0; c * hw];
        for ch in 0..c {
            for q in 0..hw {
                let mut sa = 0.0;
                let mut sb = 0.0;
                for p in 0..hw {
                    sa += a.data[ch * hw + p] * mc[p * hw + q];
                    sb += b.data[ch * hw + p] * mr[p * hw + q];
                }
                va[ch * hw + q] = sa;
                vb[ch * hw + q] = sb;
            }
        }

        let pairs: [(&[f64], &[f64]); 5] = [
            (&state.similarity.data, &m),
            (&state.col_norm.data, &mc),
            (&state.row_norm.data, &mr),
            (&tape.value(oa.id).data, &va),
            (&tape.value(ob.id).data, &vb),
        ];
        for (got, want) in pairs {
            assert_eq!(got.len(), want.len());
            for (x, y) in got.iter().zip(want) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert!(worst <= ORACLE_TOL, "worst deviation {worst}");
    println!(
        "criterion 3 (co-attention oracle): pass; 50 instances, worst deviation {worst:.2e} <= {ORACLE_TOL:.0e}"
    );
}

// ---- criterion 4: metrics against brute force -----------------------------------

/// Straight-line reimplementations of every reported metric: explicit loops,
/// no shared code with the library.
mod brute {
    pub fn mean(p: &[f64]) -> f64 {
        let mut s = 0.0;
        for &v in p {
            s += v;
        }
        s / p.len() as f64
    }

    pub fn mae(p: &[f64], g: &[bool]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - if g[i] { 1.0 } else { 0.0 }).abs();
        }
        s / p.len() as f64
    }

    pub fn tau(p: &[f64]) -> f64 {
        f64::min(2.0 * mean(p), 1.0)
    }

    fn counts(p: &[f64], g: &[bool], t: f64) -> (usize, usize, usize) {
        let mut nfg = 0;
        let mut nsal = 0;
        let mut tp = 0;
        for i in 0..p.len() {
            if g[i] {
                nfg += 1;
            }
            if p[i] >= t {
                nsal += 1;
                if g[i] {
                    tp += 1;
                }
            }
        }
        (nfg, nsal, tp)
    }

    pub fn f_at(p: &[f64], g: &[bool], t: f64) -> f64 {
        let (nfg, nsal, tp) = counts(p, g, t);
        if tp == 0 || nsal == 0 || nfg == 0 {
            return 0.0;
        }
        let prec = tp as f64 / nsal as f64;
        let rec = tp as f64 / nfg as f64;
        (1.0 + 0.3) * prec * rec / (0.3 * prec + rec)
    }

    pub fn e_at(p: &[f64], g: &[bool], t: f64) -> f64 {
        let n = p.len();
        let (nfg, nsal, _) = counts(p, g, t);
        let mut total = 0.0;
        if nfg == 0 {
            for i in 0..n {
                total += if p[i] >= t { 0.0 } else { 1.0 };
            }
        } else if nfg == n {
            for i in 0..n {
                total += if p[i] >= t { 1.0 } else { 0.0 };
            }
        } else {
            let mu_g = nfg as f64 / n as f64;
            let mu_b = nsal as f64 / n as f64;
            for i in 0..n {
                let phi_g = if g[i] { 1.0 - mu_g } else { -mu_g };
                let phi_b = if p[i] >= t { 1.0 - mu_b } else { -mu_b };
                let xi = 2.0 * phi_g * phi_b / (phi_g * phi_g + phi_b * phi_b + 1e-8);
                total += (xi + 1.0) * (xi + 1.0) / 4.0;
            }
        }
        (total / (n as f64 - 1.0 + 1e-8)).clamp(0.0, 1.0)
    }

    fn object_half(vals: &[f64]) -> f64 {
        let n = vals.len();
        if n == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for &v in vals {
            s += v;
        }
        let m = s / n as f64;
        let sigma = if n > 1 {
            let mut q = 0.0;
            for &v in vals {
                q += (v - m) * (v - m);
            }
            (q / (n as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + sigma + f64::EPSILON)
    }

    fn ssim(pv: &[f64], gv: &[f64]) -> f64 {
        let n = pv.len();
        if n == 0 {
            return 1.0;
        }
        let nf = n as f64;
        let mut sp = 0.0;
        let mut sg = 0.0;
        for i in 0..n {
            sp += pv[i];
            sg += gv[i];
        }
        let mx = sp / nf;
        let my = sg / nf;
        let denom = nf - 1.0 + f64::EPSILON;
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxy = 0.0;
        for i in 0..n {
            sx += (pv[i] - mx) * (pv[i] - mx);
            sy += (gv[i] - my) * (gv[i] - my);
            sxy += (pv[i] - mx) * (gv[i] - my);
        }
        sx /= denom;
        sy /= denom;
        sxy /= denom;
        let alpha = 4.0 * mx * my * sxy;
        let beta = (mx * mx + my * my) * (sx + sy);
        if alpha != 0.0 {
            alpha / (beta + f64::EPSILON)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    fn block(p: &[f64], g: &[bool], w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> (Vec<f64>, Vec<f64>) {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pv.push(p[r * w + c]);
                gv.push(if g[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        (pv, gv)
    }

    pub fn s(p: &[f64], g: &[bool], w: usize, h: usize) -> f64 {
        let n = w * h;
        let mut nfg = 0;
        for i in 0..n {
            if g[i] {
                nfg += 1;
            }
        }
        if nfg == 0 {
            return (1.0 - mean(p)).clamp(0.0, 1.0);
        }
        if nfg == n {
            return mean(p).clamp(0.0, 1.0);
        }
        let mu = nfg as f64 / n as f64;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for i in 0..n {
            if g[i] {
                fg.push(p[i]);
            } else {
                bg.push(1.0 - p[i]);
            }
        }
        let so = mu * object_half(&fg) + (1.0 - mu) * object_half(&bg);
        let mut sum_x = 0.0;
        let mut sum_y = 0.0;
        for r in 0..h {
            for c in 0..w {
                if g[r * w + c] {
                    sum_x += (c + 1) as f64;
                    sum_y += (r + 1) as f64;
                }
            }
        }
        let cx = (sum_x / nfg as f64).round() as usize;
        let cy = (sum_y / nfg as f64).round() as usize;
        let area = n as f64;
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let (p1, g1) = block(p, g, w, 0, cy, 0, cx);
        let (p2, g2) = block(p, g, w, 0, cy, cx, w);
        let (p3, g3) = block(p, g, w, cy, h, 0, cx);
        let (p4, g4) = block(p, g, w, cy, h, cx, w);
        let sr = w1 * ssim(&p1, &g1) + w2 * ssim(&p2, &g2) + w3 * ssim(&p3, &g3) + w4 * ssim(&p4, &g4);
        (0.5 * so + 0.5 * sr).clamp(0.0, 1.0)
    }

    /// (threshold, precision, recall, F, E) at every k/255.
    pub fn curve(p: &[f64], g: &[bool]) -> Vec<(f64, f64, f64, f64, f64)> {
        (0..256)
            .map(|k| {
                let t = k as f64 / 255.0;
                let (nfg, nsal, tp) = counts(p, g, t);
                let prec = if nsal == 0 { 0.0 } else { tp as f64 / nsal as f64 };
                let rec = if nfg == 0 { 0.0 } else { tp as f64 / nfg as f64 };
                (t, prec, rec, f_at(p, g, t), e_at(p, g, t))
            })
            .collect()
    }
}

#[test]
fn criterion_4_metrics_match_brute_force() {
    let mut r = rng(404);
    let (w, h) = (16, 16);
    let n = w * h;
    let mut worst = 0.0f64;
    let mut cases = 0usize;

    let check_pair = |pdata: Vec<f64>, gdata: Vec<bool>, worst: &mut f64| {
        let p = SaliencyMap::new(w, h, pdata.clone()).unwrap();
        let g = GroundTruthMask::new(w, h, gdata.clone()).unwrap();
        let tau = adaptive_threshold(&p);
        assert!((tau - brute::tau(&pdata)).abs() <= ORACLE_TOL);
        let lib = [
            mae(&p, &g).unwrap(),
            f_measure(&p, &g, tau).unwrap(),
            e_measure(&p, &g, tau).unwrap(),
            s_measure(&p, &g).unwrap(),
        ];
        let want = [
            brute::mae(&pdata, &gdata),
            brute::f_at(&pdata, &gdata, tau),
            brute::e_at(&pdata, &gdata, tau),
            brute::s(&pdata, &gdata, w, h),
        ];
        for (name, (got, exp)) in ["mae", "f", "e", "s"].iter().zip(lib.iter().zip(&want)) {
            let d = (got - exp).abs();
            assert!(d <= ORACLE_TOL, "{name}: lib {got} vs brute {exp}");
            *worst = worst.max(d);
        }
        let rows = fe_curves(&p, &g).unwrap();
        let want_rows = brute::curve(&pdata, &gdata);
        assert_eq!(rows.len(), 256);
        for (row, (t, prec, rec, f, e)) in rows.iter().zip(&want_rows) {
            assert_eq!(row.threshold, *t);
            for (got, exp) in [(row.precision, prec), (row.recall, rec), (row.f, f), (row.e, e)] {
                let d = (got - exp).abs();
                assert!(d <= ORACLE_TOL, "curve at {t}: lib {got} vs brute {exp}");
                *worst = worst.max(d);
            }
        }
    };

    for i in 0..50 {
        // every fifth map sits exactly on the 8-bit threshold grid to stress
        // tie handling at p == k/255
        let pdata: Vec<f64> = if i % 5 == 0 {
            (0..n).map(|_| r.gen_range(0..=255u32) as f64 / 255.0).collect()
        } else {
            (0..n).map(|_| r.gen_range(0.0..=1.0)).collect()
        };
        let fg_prob = r.gen_range(0.1..0.9);
        let gdata: Vec<bool> = (0..n).map(|_| r.gen_bool(fg_prob)).collect();
        check_pair(pdata, gdata, &mut worst);
        cases += 1;
    }
    // degenerate masks
    let pdata: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
    check_pair(pdata.clone(), vec![false; n], &mut worst);
    check_pair(pdata, vec![true; n], &mut worst);
    cases += 2;

    // worked examples with known closed-form values
    let p = SaliencyMap::new(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let g = GroundTruthMask::new(2, 2, vec![false, false, true, true]).unwrap();
    assert!((mae(&p, &g).unwrap() - 0.3).abs() <= 1e-12);

    let p = SaliencyMap::new(2, 2, vec![1.0; 4]).unwrap();
    let g = GroundTruthMask::new(2, 2, vec![true, true, false, false]).unwrap();
    let tau = adaptive_threshold(&p);
    assert_eq!(tau, 1.0);
    assert!((f_measure(&p, &g, tau).unwrap() - 0.65 / 1.15).abs() <= 1e-12);

    let p = SaliencyMap::new(2, 2, vec![0.3; 4]).unwrap();
    let g = GroundTruthMask::new(2, 2, vec![false; 4]).unwrap();
    assert!((s_measure(&p, &g).unwrap() - 0.7).abs() <= 1e-12);
    let p = SaliencyMap::new(2, 2, vec![0.6; 4]).unwrap();
    let g = GroundTruthMask::new(2, 2, vec![true; 4]).unwrap();
    assert!((s_measure(&p, &g).unwrap() - 0.6).abs() <= 1e-12);

    println!(
        "criterion 4 (metric oracles): pass; {cases} image pairs, worst deviation {worst:.2e} <= {ORACLE_TOL:.0e}, \
         worked examples exact"
    );
}

// ---- criteria 5 and 8: one shared overfit run -----------------------------------

fn overfit_cfg() -> ModelConfig {
    ModelConfig {
        temporal_slices: 4,
        base_channels: 8,
        rfb_channels: 16,
        input_size: 32,
        ablation: Ablation::Full,
        upsample: UpsampleMode::Nearest,
    }
}

struct Overfit {
    first_loss: f64,
    last_loss: f64,
    report: MetricReport,
    curves: Vec<Vec<CurveRow>>,
    seconds: f64,
}

static OVERFIT: OnceLock<Overfit> = OnceLock::new();

fn overfit() -> &'static Overfit {
    OVERFIT.get_or_init(|| {
        let model_cfg = overfit_cfg();
        let mut cfg = RunConfig::defaults(Protocol::Toy);
        cfg.synthetic = Some(4);
        cfg.model = model_cfg;
        cfg.batch_size = 4;
        cfg.steps = 500;
        cfg.seed = 7;
        assert_eq!(cfg.lr, 1e-3, "toy protocol trains at 1e-3");
        let samples = generate_synthetic(cfg.seed, 4, LoadConfig::from(&model_cfg)).unwrap();
        let mut model = Model::new(model_cfg, 4242).unwrap();
        let t0 = Instant::now();
        let log = train_model(&cfg, &mut model, &samples).unwrap();
        let seconds = t0.elapsed().as_secs_f64();
        let mut scored = Vec::new();
        let mut curves = Vec::new();
        for s in &samples {
            let out = model.infer(&s.aif, &s.focal_stack).unwrap();
            let p = SaliencyMap::new(32, 32, out.data.clone()).unwrap();
            scored.push(score_image(&s.id, &p, &s.gt).unwrap());
            curves.push(fe_curves(&p, &s.gt).unwrap());
        }
        let report = aggregate_report(scored).unwrap();
        Overfit {
            first_loss: log.rows.first().unwrap().loss,
            last_loss: log.rows.last().unwrap().loss,
            report,
            curves,
            seconds,
        }
    })
}

/// Best hybrid loss any parameter setting can reach through a side head:
/// optimize the head's grid cells directly with Adam, no backbone in the way.
/// The P1 head emits 2x2 and the P2 head 4x4 before upsampling to 32x32, so a
/// per-cell-optimal map is an information-theoretic floor for that head's
/// term regardless of what the network learns.
fn side_head_floor(gt: &[bool], grid: usize, mode: UpsampleMode) -> f64 {
    let gdata: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut z = vec![0.0_f64; grid * grid];
    let mut m = vec![0.0_f64; z.len()];
    let mut v = vec![0.0_f64; z.len()];
    let mut best = f64::INFINITY;
    let doublings = (32usize / grid).trailing_zeros();
    for step in 0..4000 {
        let mut t = GradientTape::new();
        let zt = t.leaf(Tensor::new(&[1, grid, grid], z.clone()).unwrap().with_grad());
        let mut p = t.sigmoid(zt).unwrap();
        for _ in 0..doublings {
            p = t.upsample2x(p, mode).unwrap();
        }
        let g = t.constant(Tensor::new(&[1, 32, 32], gdata.clone()).unwrap());
        let b = bce_loss(&mut t, p, g).unwrap();
        let i = iou_loss(&mut t, p, g).unwrap();
        let e = em_loss(&mut t, p, g).unwrap();
        let bi = t.add(b, i).unwrap();
        let total = t.add(bi, e).unwrap();
        best = best.min(t.value(total).data[0]);
        t.backward(total).unwrap();
        let grad = t.grad(zt).unwrap().to_vec();
        let lr = 0.2 * 0.999_f64.powi(step);
        for (j, gz) in grad.iter().enumerate() {
            m[j] = 0.9 * m[j] + 0.1 * gz;
            v[j] = 0.999 * v[j] + 0.001 * gz * gz;
            let mh = m[j] / (1.0 - 0.9_f64.powi(step + 1));
            let vh = v[j] / (1.0 - 0.999_f64.powi(step + 1));
            z[j] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    best
}

#[test]
fn criterion_5_overfits_four_synthetic_scenes() {
    let o = overfit();
    assert!(o.first_loss.is_finite() && o.last_loss.is_finite());
    let bound = 0.10 * o.first_loss;
    let loss_ok = o.last_loss <= bound;
    let f_ok = o.report.mean_f >= 0.95;
    let time_ok = o.seconds < 600.0;
    let per_scene: Vec<String> = o.report.images.iter().map(|i| format!("{:.3}", i.f_adaptive)).collect();
    println!(
        "criterion 5 (overfit): {}; 500 steps in {:.0}s, loss {:.4} -> {:.4} (bound {:.4}), adaptive F {:.4} (scenes {})",
        if loss_ok && f_ok && time_ok { "pass" } else { "fail" },
        o.seconds,
        o.first_loss,
        o.last_loss,
        bound,
        o.report.mean_f,
        per_scene.join("/")
    );
    assert!(f_ok, "adaptive F stuck at {}", o.report.mean_f);
    assert!(time_ok, "training took {:.0}s", o.seconds);
    if !loss_ok {
        // Measure how much of the residual is forced by the architecture:
        // sum the per-scene floors of the two coarse side heads (the decoder
        // head can fit the mask exactly, so its floor is ~0).
        let model_cfg = overfit_cfg();
        let samples = generate_synthetic(7, 4, LoadConfig::from(&model_cfg)).unwrap();
        let mut floor = 0.0;
        for s in &samples {
            for grid in [2usize, 4] {
                floor += side_head_floor(&s.gt.data, grid, model_cfg.upsample);
            }
        }
        floor /= samples.len() as f64;
        panic!(
            "final loss {:.4} exceeds the bound {:.4} (10% of initial {:.4}), and no training \
             improvement can fix that: the sum over heads includes two side maps predicted on \
             2x2 and 4x4 grids and upsampled to 32x32 before the loss, and even per-cell-optimal \
             side maps leave {:.4} of loss on these scenes. The trained model's {:.4} sits on \
             that floor, and the adaptive-F half of the criterion holds at {:.4}.",
            o.last_loss, bound, o.first_loss, floor, o.last_loss, o.report.mean_f
        );
    }
}

// ---- criterion 6: ablation lattice ----------------------------------------------

#[test]
fn criterion_6_ablation_lattice() {
    let lc = LoadConfig { input_size: 32, temporal_slices: 2 };
    let samples = generate_synthetic(61, 1, lc).unwrap();
    let s = &samples[0];
    let mut counts = Vec::new();
    for ablation in Ablation::ALL {
        let cfg = ModelConfig {
            temporal_slices: 2,
            base_channels: 2,
            rfb_channels: 4,
            input_size: 32,
            ablation,
            upsample: UpsampleMode::Bilinear,
        };
        let model = Model::new(cfg, 66).unwrap();
        let mut tape = GradientTape::new();
        let bp = BlockParams::bind(&mut tape, &model.params, true);
        let aif = tape.constant(s.aif.clone());
        let stack = tape.constant(s.focal_stack.clone());
        let pred = model.forward(&mut tape, &bp, aif, stack).unwrap();
        for head in pred.heads() {
            for &v in &tape.value(head).data {
                assert!(v.is_finite() && (0.0..=1.0).contains(&v), "{ablation:?}: head value {v}");
            }
        }
        let g = tape.constant(s.gt_tensor());
        let lb = hybrid_loss(&mut tape, &pred.heads(), g).unwrap();
        assert!(lb.total.is_finite(), "{ablation:?}: loss {}", lb.total);
        tape.backward(lb.total_id).unwrap();
        for (name, _) in model.params.iter() {
            let grad = bp.grad_of(&tape, name).unwrap_or_else(|| panic!("{ablation:?}: {name} grad"));
            for &v in grad {
                assert!(v.is_finite(), "{ablation:?}: non-finite gradient in {name}");
            }
        }
        counts.push((ablation, model.param_count()));
    }
    let count = |ab: Ablation| counts.iter().find(|(a, _)| *a == ab).unwrap().1;
    assert!(count(Ablation::B) < count(Ablation::Me), "B {} !< ME {}", count(Ablation::B), count(Ablation::Me));
    assert!(count(Ablation::Me) < count(Ablation::Sa2), "ME {} !< SA2 {}", count(Ablation::Me), count(Ablation::Sa2));
    assert!(count(Ablation::Sa2) <= count(Ablation::Pf2), "SA2 {} !<= PF2 {}", count(Ablation::Sa2), count(Ablation::Pf2));
    assert!(count(Ablation::Pf2) < count(Ablation::Full), "PF2 {} !< FULL {}", count(Ablation::Pf2), count(Ablation::Full));
    let listing: Vec<String> = counts.iter().map(|(a, c)| format!("{a:?}={c}")).collect();
    println!(
        "criterion 6 (ablation lattice): pass; all 8 variants finite through forward, loss, and backward; \
         parameters {}",
        listing.join(" ")
    );
}

// ---- criterion 7: byte-identical reruns ------------------------------------------

#[test]
fn criterion_7_reruns_are_byte_identical() {
    let dir = tempdir().unwrap();
    let model_cfg = ModelConfig {
        temporal_slices: 2,
        base_channels: 2,
        rfb_channels: 4,
        input_size: 32,
        ablation: Ablation::Full,
        upsample: UpsampleMode::Bilinear,
    };
    let mk = |out: PathBuf| {
        let mut c = RunConfig::defaults(Protocol::Toy);
        c.synthetic = Some(2);
        c.model = model_cfg;
        c.steps = 5;
        c.batch_size = 2;
        c.seed = 9;
        c.out_dir = out;
        c
    };
    let eq = |x: &Path, y: &Path| std::fs::read(x).unwrap() == std::fs::read(y).unwrap();

    let ta = dir.path().join("train_a");
    let tb = dir.path().join("train_b");
    cmd_train(&mk(ta.clone())).unwrap();
    cmd_train(&mk(tb.clone())).unwrap();
    assert!(eq(&ta.join("loss.csv"), &tb.join("loss.csv")), "loss csv differs between reruns");
    assert!(eq(&ta.join("model.ckpt"), &tb.join("model.ckpt")), "checkpoint differs between reruns");

    let mke = |out: PathBuf| {
        let mut c = mk(out);
        c.checkpoint = Some(ta.join("model.ckpt"));
        c
    };
    let ea = dir.path().join("eval_a");
    let eb = dir.path().join("eval_b");
    cmd_eval(&mke(ea.clone())).unwrap();
    cmd_eval(&mke(eb.clone())).unwrap();
    assert!(eq(&ea.join("report.csv"), &eb.join("report.csv")), "metric report differs between reruns");
    assert!(eq(&ea.join("curves_mean.csv"), &eb.join("curves_mean.csv")), "mean curves differ between reruns");

    let pa = dir.path().join("pred_a");
    cmd_predict(&mke(pa.clone())).unwrap();
    let ma = dir.path().join("metrics_a");
    let mb = dir.path().join("metrics_b");
    cmd_metrics(&pa, &pa, &ma).unwrap();
    cmd_metrics(&pa, &pa, &mb).unwrap();
    assert!(eq(&ma.join("report.csv"), &mb.join("report.csv")), "standalone scorer differs between reruns");

    println!(
        "criterion 7 (determinism): pass; loss csv, checkpoint, eval report, mean curves, and \
         standalone metric report byte-identical across reruns"
    );
}

// ---- criterion 8: threshold curves behave at the ends ----------------------------

#[test]
fn criterion_8_curves_behave_at_the_extremes() {
    let o = overfit();
    for (i, rows) in o.curves.iter().enumerate() {
        assert_eq!(rows.len(), 256);
        assert_eq!(rows[0].threshold, 0.0);
        assert_eq!(rows[0].recall, 1.0, "scene {i}: recall at threshold 0");
        for pair in rows.windows(2) {
            assert!(
                pair[1].recall <= pair[0].recall + 1e-12,
                "scene {i}: recall rose from {} to {} at threshold {}",
                pair[0].recall,
                pair[1].recall,
                pair[1].threshold
            );
        }
        let fmax = rows.iter().map(|r| r.f).fold(f64::NEG_INFINITY, f64::max);
        assert!(
            rows[0].f < fmax && rows[255].f < fmax,
            "scene {i}: F not peaked in the interior (ends {} / {}, max {})",
            rows[0].f,
            rows[255].f,
            fmax
        );
    }
    println!(
        "criterion 8 (curve sanity): pass; {} scenes, recall monotone from 1.0, F strictly below its \
         peak at both threshold ends",
        o.curves.len()
    );
}
