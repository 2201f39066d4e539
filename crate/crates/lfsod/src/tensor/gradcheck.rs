//! Finite-difference verification of tape gradients.
//!
//! Central differences in f64: `(f(x+e) - f(x-e)) / 2e` against the analytic
//! gradient, with the relative error measured as
//! `|ad - fd| / max(1e-8, |ad| + |fd|)` so that near-zero gradients do not
//! blow up the ratio.

use super::{GradientTape, Tensor, TensorError, TensorId};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut GradientTape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = GradientTape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: tape.value(loss).numel() });
    }
    Ok(tape.value(loss).data[0])
}

fn analytic_grads<F>(build: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut GradientTape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = GradientTape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(ids.iter().map(|&id| tape.grad(id).expect("leaf grad").to_vec()).collect())
}

/// Checks every coordinate of every input against a central difference.
/// `build` must construct the same scalar function each call.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut GradientTape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let grads = analytic_grads(&build, inputs)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), coords_checked: 0 };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let fd = (eval(&build, &plus)? - eval(&build, &minus)?) / (2.0 * eps);
            let ad = grads[i][j];
            let rel = (ad - fd).abs() / f64::max(1e-8, ad.abs() + fd.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Directional variant for large parameter sets: compares `<grad, v>` against
/// a central difference along `dirs` random unit directions spanning all
/// inputs at once. Much cheaper than per-coordinate checking and still
/// sensitive to systematic backward errors.
pub fn grad_check_directional<F, R>(
    build: F,
    inputs: &[Tensor],
    dirs: usize,
    eps: f64,
    rng: &mut R,
) -> Result<f64, TensorError>
where
    F: Fn(&mut GradientTape, &[TensorId]) -> Result<TensorId, TensorError>,
    R: Rng,
{
    let grads = analytic_grads(&build, inputs)?;
    let mut worst = 0.0f64;
    for _ in 0..dirs {
        let mut v: Vec<Vec<f64>> = inputs.iter().map(|t| (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let norm: f64 = v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for part in &mut v {
            for x in part.iter_mut() {
                *x /= norm;
            }
        }
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        for (i, part) in v.iter().enumerate() {
            for (j, &d) in part.iter().enumerate() {
                plus[i].data[j] += eps * d;
                minus[i].data[j] -= eps * d;
            }
        }
        let fd = (eval(&build, &plus)? - eval(&build, &minus)?) / (2.0 * eps);
        let ad: f64 = grads.iter().zip(&v).map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum();
        let rel = (ad - fd).abs() / f64::max(1e-8, ad.abs() + fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_slope_at_zero_is_quarter() {
        let inputs = vec![Tensor::scalar(0.0)];
        let report = grad_check(
            |tape, ids| {
                let s = tape.sigmoid(ids[0])?;
                tape.sum_all(s)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
        // the analytic value itself
        let mut tape = GradientTape::new();
        let x = tape.leaf(Tensor::scalar(0.0).with_grad());
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn matmul_chain_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                let s = tape.sigmoid(y)?;
                tape.mean_all(s)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 18);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let inputs = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
        let report = grad_check(
            |tape, _ids| {
                let c = tape.scalar_const(5.0);
                tape.sum_all(c)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn directional_check_on_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(&[2, 5, 5], (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let worst = grad_check_directional(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], 1, 1)?;
                let s = tape.sigmoid(y)?;
                tape.mean_all(s)
            },
            &[x, w],
            4,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(worst < 1e-7, "rel err {worst}");
    }

    #[test]
    fn full_check_on_transposed_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::new(&[2, 4, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(&[2, 3, 2, 2], (0..24).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let report = grad_check(
            |tape, ids| {
                let y = tape.conv_transpose2d(ids[0], ids[1], 2, 0)?;
                let s = tape.sigmoid(y)?;
                tape.mean_all(s)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
