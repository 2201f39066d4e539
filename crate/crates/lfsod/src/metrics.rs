//! Saliency evaluation: MAE, adaptive F-measure, S-measure, adaptive
//! E-measure, and 256-point threshold curves.
//!
//! Conventions are frozen here so the numbers are reproducible:
//! * binarization is `p >= t` everywhere a threshold appears;
//! * the adaptive threshold is `min(2 * mean(P), 1)`;
//! * F-measure uses beta^2 = 0.3 and is 0 whenever the intersection, the
//!   binarized mask, or the ground truth is empty;
//! * S-measure follows the reference definition: object term with sample
//!   standard deviation (N-1), region term split at the ground-truth centroid
//!   (1-based, rounded half away from zero), SSIM-style quadrant scores with
//!   the published zero-variance rules, machine epsilon as stabilizer, edge
//!   rules S = 1 - mean(P) / mean(P) for all-background / all-foreground GT;
//! * E-measure uses epsilon = 1e-8 in the alignment term and in the
//!   `sum / (W*H - 1 + eps)` normalization, the all-0/all-1 GT edge rules,
//!   and is clamped to [0,1] (the reference normalization can exceed 1 by
//!   1/(W*H-1) on a perfect match);
//! * an empty quadrant in the S-measure region split scores 1 with weight 0.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

const FM_BETA2: f64 = 0.3;
const EM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// Prediction and ground truth extents differ.
    SizeMismatch { pred: (usize, usize), gt: (usize, usize) },
    /// Saliency value outside [0,1] (or not finite) at a flat index.
    BadValue { index: usize, value: f64 },
    /// Zero-sized map.
    Empty,
    /// Aggregation over an empty set of images.
    NoImages,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::SizeMismatch { pred, gt } => {
                write!(f, "prediction {}x{} vs ground truth {}x{}", pred.0, pred.1, gt.0, gt.1)
            }
            MetricsError::BadValue { index, value } => {
                write!(f, "saliency value {value} at index {index} outside [0,1]")
            }
            MetricsError::Empty => write!(f, "empty map"),
            MetricsError::NoImages => write!(f, "no images to aggregate"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Predicted saliency in [0,1], row-major `h` rows by `w` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(w: usize, h: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        if w == 0 || h == 0 || data.is_empty() {
            return Err(MetricsError::Empty);
        }
        if data.len() != w * h {
            return Err(MetricsError::SizeMismatch { pred: (w, h), gt: (data.len(), 1) });
        }
        for (i, &v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricsError::BadValue { index: i, value: v });
            }
        }
        Ok(SaliencyMap { w, h, data })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Binary ground truth, row-major, `true` = foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new(w: usize, h: usize, data: Vec<bool>) -> Result<Self, MetricsError> {
        if w == 0 || h == 0 || data.is_empty() {
            return Err(MetricsError::Empty);
        }
        if data.len() != w * h {
            return Err(MetricsError::SizeMismatch { pred: (w, h), gt: (data.len(), 1) });
        }
        Ok(GroundTruthMask { w, h, data })
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn check_sizes(p: &SaliencyMap, g: &GroundTruthMask) -> Result<(), MetricsError> {
    if p.w != g.w || p.h != g.h {
        return Err(MetricsError::SizeMismatch { pred: (p.w, p.h), gt: (g.w, g.h) });
    }
    Ok(())
}

/// Mean absolute error between the map and the 0/1 mask.
pub fn mae(p: &SaliencyMap, g: &GroundTruthMask) -> Result<f64, MetricsError> {
    check_sizes(p, g)?;
    let s: f64 = p.data.iter().zip(&g.data).map(|(&v, &b)| (v - if b { 1.0 } else { 0.0 }).abs()).sum();
    Ok(s / p.data.len() as f64)
}

/// Per-image binarization level: twice the map mean, clamped to 1.
pub fn adaptive_threshold(p: &SaliencyMap) -> f64 {
    f64::min(2.0 * p.mean(), 1.0)
}

/// Confusion counts at `p >= t`. Returns (salient count, true positives).
fn binarize_counts(p: &SaliencyMap, g: &GroundTruthMask, t: f64) -> (usize, usize) {
    let mut nsal = 0;
    let mut tp = 0;
    for (&v, &b) in p.data.iter().zip(&g.data) {
        if v >= t {
            nsal += 1;
            if b {
                tp += 1;
            }
        }
    }
    (nsal, tp)
}

fn f_from_counts(nfg: usize, nsal: usize, tp: usize) -> f64 {
    if tp == 0 || nsal == 0 || nfg == 0 {
        return 0.0;
    }
    let prec = tp as f64 / nsal as f64;
    let rec = tp as f64 / nfg as f64;
    (1.0 + FM_BETA2) * prec * rec / (FM_BETA2 * prec + rec)
}

/// F-measure of the map binarized at `threshold` (beta^2 = 0.3).
pub fn f_measure(p: &SaliencyMap, g: &GroundTruthMask, threshold: f64) -> Result<f64, MetricsError> {
    check_sizes(p, g)?;
    let (nsal, tp) = binarize_counts(p, g, threshold);
    Ok(f_from_counts(g.foreground_count(), nsal, tp))
}

/// Enhanced-alignment score from confusion counts. The alignment term takes
/// one of four values depending on (g, b), so the pixel sum collapses to a
/// weighted sum over the confusion matrix.
fn e_from_counts(n: usize, nfg: usize, nsal: usize, tp: usize) -> f64 {
    let total = if nfg == 0 {
        // all-background GT: enhanced = 1 - B
        (n - nsal) as f64
    } else if nfg == n {
        // all-foreground GT: enhanced = B
        nsal as f64
    } else {
        let mu_g = nfg as f64 / n as f64;
        let mu_b = nsal as f64 / n as f64;
        let fp = nsal - tp;
        let fn_ = nfg - tp;
        let tn = n - tp - fp - fn_;
        let mut acc = 0.0;
        for (gv, bv, count) in [
            (1.0, 1.0, tp as f64),
            (0.0, 1.0, fp as f64),
            (1.0, 0.0, fn_ as f64),
            (0.0, 0.0, tn as f64),
        ] {
            let phi_g = gv - mu_g;
            let phi_b = bv - mu_b;
            let xi = 2.0 * phi_g * phi_b / (phi_g * phi_g + phi_b * phi_b + EM_EPS);
            let enhanced = (xi + 1.0) * (xi + 1.0) / 4.0;
            acc += count * enhanced;
        }
        acc
    };
    (total / (n as f64 - 1.0 + EM_EPS)).clamp(0.0, 1.0)
}

/// E-measure of the map binarized at `threshold`.
pub fn e_measure(p: &SaliencyMap, g: &GroundTruthMask, threshold: f64) -> Result<f64, MetricsError> {
    check_sizes(p, g)?;
    let (nsal, tp) = binarize_counts(p, g, threshold);
    Ok(e_from_counts(p.data.len(), g.foreground_count(), nsal, tp))
}

/// Object-aware half of the S-measure: `2x / (x^2 + 1 + sigma_x + eps)` with
/// x restricted to one region, sample standard deviation.
fn s_object_region(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let sigma = if n > 1 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + sigma + f64::EPSILON)
}

/// SSIM-style quadrant score with the reference zero rules. Inputs are the
/// prediction block and the 0/1 GT block.
fn ssim_block(px: &[f64], gx: &[f64]) -> f64 {
    let n = px.len();
    if n == 0 {
        // empty quadrant: scored 1 but always paired with weight 0
        return 1.0;
    }
    let nf = n as f64;
    let mx = px.iter().sum::<f64>() / nf;
    let my = gx.iter().sum::<f64>() / nf;
    let denom = nf - 1.0 + f64::EPSILON;
    let sx = px.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / denom;
    let sy = gx.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / denom;
    let sxy = px.iter().zip(gx).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / denom;
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

/// Collects one quadrant (rows `r0..r1`, cols `c0..c1`) of both maps.
fn quadrant(p: &SaliencyMap, g: &GroundTruthMask, r0: usize, r1: usize, c0: usize, c1: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pv = Vec::with_capacity((r1 - r0) * (c1 - c0));
    let mut gv = Vec::with_capacity(pv.capacity());
    for r in r0..r1 {
        for c in c0..c1 {
            pv.push(p.data[r * p.w + c]);
            gv.push(if g.data[r * g.w + c] { 1.0 } else { 0.0 });
        }
    }
    (pv, gv)
}

fn s_region(p: &SaliencyMap, g: &GroundTruthMask) -> f64 {
    let (w, h) = (g.w, g.h);
    let total = g.foreground_count() as f64;
    // 1-based centroid, rounded half away from zero (reference convention)
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for r in 0..h {
        for c in 0..w {
            if g.data[r * w + c] {
                sum_x += (c + 1) as f64;
                sum_y += (r + 1) as f64;
            }
        }
    }
    let cx = (sum_x / total).round() as usize;
    let cy = (sum_y / total).round() as usize;
    let area = (w * h) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let (p1, g1) = quadrant(p, g, 0, cy, 0, cx);
    let (p2, g2) = quadrant(p, g, 0, cy, cx, w);
    let (p3, g3) = quadrant(p, g, cy, h, 0, cx);
    let (p4, g4) = quadrant(p, g, cy, h, cx, w);
    w1 * ssim_block(&p1, &g1) + w2 * ssim_block(&p2, &g2) + w3 * ssim_block(&p3, &g3) + w4 * ssim_block(&p4, &g4)
}

/// Structure measure, alpha = 0.5, clamped to [0,1].
pub fn s_measure(p: &SaliencyMap, g: &GroundTruthMask) -> Result<f64, MetricsError> {
    check_sizes(p, g)?;
    let n = g.data.len();
    let nfg = g.foreground_count();
    if nfg == 0 {
        return Ok((1.0 - p.mean()).clamp(0.0, 1.0));
    }
    if nfg == n {
        return Ok(p.mean().clamp(0.0, 1.0));
    }
    let mu = nfg as f64 / n as f64;
    let fg_vals = p.data.iter().zip(&g.data).filter(|(_, &b)| b).map(|(&v, _)| v).collect::<Vec<_>>();
    let bg_vals = p.data.iter().zip(&g.data).filter(|(_, &b)| !b).map(|(&v, _)| 1.0 - v).collect::<Vec<_>>();
    let so = mu * s_object_region(fg_vals.iter().copied()) + (1.0 - mu) * s_object_region(bg_vals.iter().copied());
    let sr = s_region(p, g);
    Ok((0.5 * so + 0.5 * sr).clamp(0.0, 1.0))
}

/// One row of the threshold sweep. The report file keeps threshold/F/E;
/// precision and recall are exposed for invariants and debugging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub e: f64,
}

/// F/E at thresholds k/255, k = 0..=255. Computed from a cumulative
/// histogram of per-pixel maximal thresholds, which selects exactly the same
/// pixel sets as comparing `p >= k/255` per threshold.
pub fn fe_curves(p: &SaliencyMap, g: &GroundTruthMask) -> Result<Vec<CurveRow>, MetricsError> {
    check_sizes(p, g)?;
    let n = p.data.len();
    let nfg = g.foreground_count();
    let mut hist_all = [0usize; 256];
    let mut hist_tp = [0usize; 256];
    for (&v, &b) in p.data.iter().zip(&g.data) {
        // largest k with k/255 <= v, robust to floating rounding at the edges
        let mut k = (v * 255.0).floor() as i64;
        k = k.clamp(0, 255);
        while k < 255 && (k + 1) as f64 / 255.0 <= v {
            k += 1;
        }
        while k > 0 && k as f64 / 255.0 > v {
            k -= 1;
        }
        hist_all[k as usize] += 1;
        if b {
            hist_tp[k as usize] += 1;
        }
    }
    let mut rows = Vec::with_capacity(256);
    let mut nsal = 0usize;
    let mut tp = 0usize;
    let mut counts = [(0usize, 0usize); 256];
    for k in (0..256).rev() {
        nsal += hist_all[k];
        tp += hist_tp[k];
        counts[k] = (nsal, tp);
    }
    for (k, &(nsal, tp)) in counts.iter().enumerate() {
        let threshold = k as f64 / 255.0;
        let precision = if nsal == 0 { 0.0 } else { tp as f64 / nsal as f64 };
        let recall = if nfg == 0 { 0.0 } else { tp as f64 / nfg as f64 };
        rows.push(CurveRow {
            threshold,
            precision,
            recall,
            f: f_from_counts(nfg, nsal, tp),
            e: e_from_counts(n, nfg, nsal, tp),
        });
    }
    Ok(rows)
}

/// Everything scored for one image.
#[derive(Debug, Clone)]
pub struct ImageScores {
    pub id: String,
    pub mae: f64,
    pub f_adaptive: f64,
    pub s: f64,
    pub e_adaptive: f64,
    pub curves: Vec<CurveRow>,
}

/// Runs the full metric set on one prediction/GT pair.
pub fn score_image(id: &str, p: &SaliencyMap, g: &GroundTruthMask) -> Result<ImageScores, MetricsError> {
    let tau = adaptive_threshold(p);
    Ok(ImageScores {
        id: id.to_string(),
        mae: mae(p, g)?,
        f_adaptive: f_measure(p, g, tau)?,
        s: s_measure(p, g)?,
        e_adaptive: e_measure(p, g, tau)?,
        curves: fe_curves(p, g)?,
    })
}

/// Per-image scores plus dataset means. Images are kept sorted by id so the
/// aggregate is independent of input order.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub images: Vec<ImageScores>,
    pub mean_mae: f64,
    pub mean_f: f64,
    pub mean_s: f64,
    pub mean_e: f64,
    pub mean_curves: Vec<CurveRow>,
}

pub fn aggregate_report(mut images: Vec<ImageScores>) -> Result<MetricReport, MetricsError> {
    if images.is_empty() {
        return Err(MetricsError::NoImages);
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let n = images.len() as f64;
    let mean_mae = images.iter().map(|s| s.mae).sum::<f64>() / n;
    let mean_f = images.iter().map(|s| s.f_adaptive).sum::<f64>() / n;
    let mean_s = images.iter().map(|s| s.s).sum::<f64>() / n;
    let mean_e = images.iter().map(|s| s.e_adaptive).sum::<f64>() / n;
    let rows = images[0].curves.len();
    let mut mean_curves = Vec::with_capacity(rows);
    for k in 0..rows {
        let mut row = CurveRow { threshold: images[0].curves[k].threshold, precision: 0.0, recall: 0.0, f: 0.0, e: 0.0 };
        for img in &images {
            row.precision += img.curves[k].precision;
            row.recall += img.curves[k].recall;
            row.f += img.curves[k].f;
            row.e += img.curves[k].e;
        }
        row.precision /= n;
        row.recall /= n;
        row.f /= n;
        row.e /= n;
        mean_curves.push(row);
    }
    Ok(MetricReport { images, mean_mae, mean_f, mean_s, mean_e, mean_curves })
}

/// `id,MAE,F_adp,S,E_adp` per image plus a MEAN row, 6 decimals.
pub fn render_report(report: &MetricReport) -> String {
    let mut out = String::from("id,MAE,F_adp,S,E_adp\n");
    for img in &report.images {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            img.id, img.mae, img.f_adaptive, img.s, img.e_adaptive
        ));
    }
    out.push_str(&format!(
        "MEAN,{:.6},{:.6},{:.6},{:.6}\n",
        report.mean_mae, report.mean_f, report.mean_s, report.mean_e
    ));
    out
}

/// 256 rows `threshold,F,E`, 6 decimals.
pub fn render_curves(rows: &[CurveRow]) -> String {
    let mut out = String::from("threshold,F,E\n");
    for r in rows {
        out.push_str(&format!("{:.6},{:.6},{:.6}\n", r.threshold, r.f, r.e));
    }
    out
}

pub fn write_report(report: &MetricReport, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_report(report).as_bytes())
}

pub fn write_curves(rows: &[CurveRow], path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_curves(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(w: usize, h: usize, data: &[f64]) -> SaliencyMap {
        SaliencyMap::new(w, h, data.to_vec()).unwrap()
    }

    fn mask(w: usize, h: usize, data: &[bool]) -> GroundTruthMask {
        GroundTruthMask::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn saliency_map_validates_range() {
        let err = SaliencyMap::new(2, 1, vec![0.5, 1.5]).unwrap_err();
        assert_eq!(err, MetricsError::BadValue { index: 1, value: 1.5 });
        assert!(SaliencyMap::new(0, 0, vec![]).is_err());
    }

    #[test]
    fn mae_hand_example() {
        let p = map(2, 2, &[0.2, 0.4, 0.6, 0.8]);
        let g = mask(2, 2, &[false, false, true, true]);
        assert!((mae(&p, &g).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mae_zero_iff_exact() {
        let g = mask(2, 1, &[true, false]);
        let exact = map(2, 1, &[1.0, 0.0]);
        assert_eq!(mae(&exact, &g).unwrap(), 0.0);
        let off = map(2, 1, &[1.0, 0.001]);
        assert!(mae(&off, &g).unwrap() > 0.0);
    }

    #[test]
    fn mae_rejects_size_mismatch() {
        let p = map(2, 2, &[0.0; 4]);
        let g = mask(2, 1, &[true, false]);
        assert!(matches!(mae(&p, &g), Err(MetricsError::SizeMismatch { .. })));
    }

    #[test]
    fn adaptive_threshold_rules() {
        assert_eq!(adaptive_threshold(&map(2, 1, &[0.0, 0.0])), 0.0);
        assert!((adaptive_threshold(&map(2, 1, &[0.3, 0.3])) - 0.6).abs() < 1e-15);
        assert_eq!(adaptive_threshold(&map(2, 1, &[0.7, 0.7])), 1.0);
    }

    #[test]
    fn f_measure_hand_example() {
        // P all salient, 2 of 4 pixels foreground: Prec 0.5, Rec 1 -> 0.65/1.15
        let p = map(2, 2, &[1.0; 4]);
        let g = mask(2, 2, &[true, true, false, false]);
        let f = f_measure(&p, &g, 0.5).unwrap();
        assert!((f - 0.65 / 1.15).abs() < 1e-12);
    }

    #[test]
    fn f_measure_perfect_and_empty() {
        let g = mask(2, 2, &[true, false, false, true]);
        let exact = map(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!((f_measure(&exact, &g, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let miss = map(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(f_measure(&miss, &g, 0.5).unwrap(), 0.0);
        let empty_gt = mask(2, 2, &[false; 4]);
        assert_eq!(f_measure(&exact, &empty_gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn s_measure_edge_rules() {
        let g0 = mask(2, 2, &[false; 4]);
        let p = map(2, 2, &[0.3; 4]);
        assert!((s_measure(&p, &g0).unwrap() - 0.7).abs() < 1e-12);
        let g1 = mask(2, 2, &[true; 4]);
        let p6 = map(2, 2, &[0.6; 4]);
        assert!((s_measure(&p6, &g1).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn s_measure_perfect_match_is_one() {
        let g = mask(4, 4, &{
            let mut d = [false; 16];
            d[5] = true;
            d[6] = true;
            d[9] = true;
            d[10] = true;
            d
        });
        let p = SaliencyMap::new(4, 4, g.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let s = s_measure(&p, &g).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "S = {s}");
    }

    #[test]
    fn e_measure_edge_rules() {
        let g0 = mask(4, 4, &[false; 16]);
        let b0 = map(4, 4, &[0.0; 16]);
        let b1 = map(4, 4, &[1.0; 16]);
        // all background, empty prediction: near-perfect
        let hi = e_measure(&b0, &g0, 0.5).unwrap();
        assert!(hi > 0.99, "E = {hi}");
        // all background, everything predicted: zero
        let lo = e_measure(&b1, &g0, 0.5).unwrap();
        assert!(lo < 1e-12, "E = {lo}");
    }

    #[test]
    fn e_measure_perfect_mixed_match() {
        let g = mask(8, 8, &{
            let mut d = [false; 64];
            for i in 0..16 {
                d[i] = true;
            }
            d
        });
        let p = SaliencyMap::new(8, 8, g.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let e = e_measure(&p, &g, 0.5).unwrap();
        assert!(e > 1.0 - 1e-3, "E = {e}");
        assert!(e <= 1.0);
    }

    #[test]
    fn e_measure_complement_symmetry() {
        // binary maps, threshold 0.5: complementing both P and G preserves E
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let w = 6;
            let h = 5;
            let gd: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
            if gd.iter().all(|&b| b) || gd.iter().all(|&b| !b) {
                continue; // edge rules excluded
            }
            let pd: Vec<f64> = (0..w * h).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            if pd.iter().all(|&v| v == 1.0) || pd.iter().all(|&v| v == 0.0) {
                continue;
            }
            let g = mask(w, h, &gd);
            let gc = mask(w, h, &gd.iter().map(|&b| !b).collect::<Vec<_>>());
            let p = map(w, h, &pd);
            let pc = map(w, h, &pd.iter().map(|&v| 1.0 - v).collect::<Vec<_>>());
            let a = e_measure(&p, &g, 0.5).unwrap();
            let b = e_measure(&pc, &gc, 0.5).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn curves_have_expected_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pd: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gd: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.3)).collect();
        let p = map(16, 16, &pd);
        let g = mask(16, 16, &gd);
        let rows = fe_curves(&p, &g).unwrap();
        assert_eq!(rows.len(), 256);
        assert_eq!(rows[0].threshold, 0.0);
        assert!((rows[0].recall - 1.0).abs() < 1e-15);
        let mean_g = g.foreground_count() as f64 / 256.0;
        assert!((rows[0].precision - mean_g).abs() < 1e-15);
        for k in 1..256 {
            assert!(rows[k].recall <= rows[k - 1].recall + 1e-15);
        }
    }

    #[test]
    fn curves_match_per_threshold_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pd: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gd: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
        let p = map(8, 8, &pd);
        let g = mask(8, 8, &gd);
        let rows = fe_curves(&p, &g).unwrap();
        for k in (0..256).step_by(17) {
            let t = k as f64 / 255.0;
            let f = f_measure(&p, &g, t).unwrap();
            let e = e_measure(&p, &g, t).unwrap();
            assert!((rows[k].f - f).abs() < 1e-12);
            assert!((rows[k].e - e).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut scores = Vec::new();
        for i in 0..4 {
            let pd: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gd: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.4)).collect();
            let p = map(4, 4, &pd);
            let g = mask(4, 4, &gd);
            scores.push(score_image(&format!("img{i}"), &p, &g).unwrap());
        }
        let fwd = aggregate_report(scores.clone()).unwrap();
        scores.reverse();
        let rev = aggregate_report(scores).unwrap();
        assert_eq!(render_report(&fwd), render_report(&rev));
        assert_eq!(render_curves(&fwd.mean_curves), render_curves(&rev.mean_curves));
    }

    #[test]
    fn aggregate_two_images_averages() {
        let g = mask(2, 2, &[true, true, false, false]);
        let a = score_image("a", &map(2, 2, &[1.0, 1.0, 0.0, 0.0]), &g).unwrap();
        let b = score_image("b", &map(2, 2, &[1.0, 1.0, 1.0, 1.0]), &g).unwrap();
        let rep = aggregate_report(vec![a.clone(), b.clone()]).unwrap();
        assert!((rep.mean_f - (a.f_adaptive + b.f_adaptive) / 2.0).abs() < 1e-15);
        assert!((rep.mean_mae - (a.mae + b.mae) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn report_text_format() {
        let g = mask(2, 2, &[true, false, false, false]);
        let p = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let rep = aggregate_report(vec![score_image("x", &p, &g).unwrap()]).unwrap();
        let text = render_report(&rep);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,MAE,F_adp,S,E_adp");
        assert!(lines[1].starts_with("x,0.000000,1.000000,"));
        assert!(lines[2].starts_with("MEAN,"));
        let curves = render_curves(&rep.mean_curves);
        assert_eq!(curves.lines().count(), 257);
        assert!(curves.starts_with("threshold,F,E\n0.000000,"));
    }
}
