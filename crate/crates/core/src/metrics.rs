//! Trajectory and heatmap evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{HandTrajectory, Point, Side};

/// A nonnegative grid over the last observation frame, row-major, `h × w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceHeatmap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl AffordanceHeatmap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::ShapeMismatch(format!("{} values for a {h}×{w} grid", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![1.0 / (h * w) as f64; h * w] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Cell of the first maximum, as `(row, col)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    /// Cell containing normalized point `p` (clamped onto the grid).
    pub fn cell_of(&self, p: Point) -> (usize, usize) {
        let idx = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        (idx(p.y, self.h), idx(p.x, self.w))
    }

    /// Cells whose value is at least `frac` of the maximum.
    pub fn cells_above(&self, frac: f64) -> Vec<(usize, usize)> {
        let mx = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..self.data.len())
            .filter(|&i| self.data[i] >= frac * mx)
            .map(|i| (i / self.w, i % self.w))
            .collect()
    }
}

fn visible_pairs(pred: &HandTrajectory, gt: &HandTrajectory) -> Result<()> {
    if pred.horizon() != gt.horizon() {
        return Err(Error::ShapeMismatch(format!("horizons {} and {}", pred.horizon(), gt.horizon())));
    }
    Ok(())
}

/// Mean ℓ₂ distance over gt-visible (step, hand) pairs.
pub fn ade(pred: &HandTrajectory, gt: &HandTrajectory) -> Result<f64> {
    visible_pairs(pred, gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for s in 0..gt.horizon() {
        for side in Side::BOTH {
            if gt.is_visible(s, side) {
                sum += pred.point(s, side).dist(gt.point(s, side));
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoVisibleGroundTruth);
    }
    Ok(sum / n as f64)
}

/// Mean ℓ₂ distance over gt-visible hands at the last step.
pub fn fde(pred: &HandTrajectory, gt: &HandTrajectory) -> Result<f64> {
    visible_pairs(pred, gt)?;
    let s = gt.horizon() - 1;
    let d: Vec<f64> = Side::BOTH
        .iter()
        .filter(|&&side| gt.is_visible(s, side))
        .map(|&side| pred.point(s, side).dist(gt.point(s, side)))
        .collect();
    if d.is_empty() {
        return Err(Error::NoVisibleGroundTruth);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Best value of `metric` over the samples.
pub fn min_of_k(
    samples: &[HandTrajectory],
    gt: &HandTrajectory,
    metric: impl Fn(&HandTrajectory, &HandTrajectory) -> Result<f64>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("min-of-K needs at least one sample".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        best = best.min(metric(s, gt)?);
    }
    Ok(best)
}

/// Block-mean pool `raw` (`rows × cols`) to `target` and normalize to sum 1.
/// When the sizes do not divide, the raw grid is edge-padded up to the next
/// multiple before pooling.
pub fn normalize_heatmap(raw: &AffordanceHeatmap, target: (usize, usize)) -> Result<AffordanceHeatmap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::ShapeMismatch("target grid is empty".into()));
    }
    if raw.data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Schema("heatmap entries must be finite and nonnegative".into()));
    }
    let (bh, bw) = (raw.h.div_ceil(th), raw.w.div_ceil(tw));
    let mut out = vec![0.0; th * tw];
    for r in 0..th {
        for c in 0..tw {
            let mut acc = 0.0;
            for i in 0..bh {
                for j in 0..bw {
                    acc += raw.at((r * bh + i).min(raw.h - 1), (c * bw + j).min(raw.w - 1));
                }
            }
            out[r * tw + c] = acc / (bh * bw) as f64;
        }
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZero);
    }
    out.iter_mut().for_each(|v| *v /= total);
    AffordanceHeatmap::new(th, tw, out)
}

fn same_shape(p: &AffordanceHeatmap, q: &AffordanceHeatmap) -> Result<()> {
    if (p.h, p.w) != (q.h, q.w) || p.data.len() != q.data.len() {
        return Err(Error::ShapeMismatch(format!("{}×{} vs {}×{}", p.h, p.w, q.h, q.w)));
    }
    Ok(())
}

/// Histogram intersection `Σ min(p, q)`.
pub fn sim(p: &AffordanceHeatmap, q: &AffordanceHeatmap) -> Result<f64> {
    same_shape(p, q)?;
    Ok(p.data.iter().zip(&q.data).map(|(a, b)| a.min(*b)).sum())
}

fn check_cells(p: &AffordanceHeatmap, cells: &[(usize, usize)]) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    if let Some(&(r, c)) = cells.iter().find(|&&(r, c)| r >= p.h || c >= p.w) {
        return Err(Error::ShapeMismatch(format!("cell ({r}, {c}) outside a {}×{} grid", p.h, p.w)));
    }
    Ok(())
}

/// Judd AUC: thresholds are the map values at the ground-truth cells; each
/// threshold gives (FPR, TPR) counting every cell at or above it, and the
/// curve from (0,0) to (1,1) is integrated with the trapezoid rule.
/// Duplicate cells count once. If every cell is ground truth the curve is
/// undefined and 0.5 is returned.
pub fn auc_judd(p: &AffordanceHeatmap, gt_cells: &[(usize, usize)]) -> Result<f64> {
    check_cells(p, gt_cells)?;
    let n = p.data.len();
    let mut is_gt = vec![false; n];
    for &(r, c) in gt_cells {
        is_gt[r * p.w + c] = true;
    }
    let n_gt = is_gt.iter().filter(|&&g| g).count();
    if n_gt == n {
        return Ok(0.5);
    }
    let mut thresholds: Vec<f64> = (0..n).filter(|&i| is_gt[i]).map(|i| p.data[i]).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p.data[b].total_cmp(&p.data[a]));
    let (mut tp, mut fp, mut k) = (0usize, 0usize, 0usize);
    let mut curve = vec![(0.0, 0.0)];
    for th in thresholds {
        while k < n && p.data[order[k]] >= th {
            if is_gt[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push((fp as f64 / (n - n_gt) as f64, tp as f64 / n_gt as f64));
    }
    curve.push((1.0, 1.0));
    Ok(curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Mean z-scored map value at the ground-truth cells; population std, and 0
/// for a constant map.
pub fn nss(p: &AffordanceHeatmap, gt_cells: &[(usize, usize)]) -> Result<f64> {
    check_cells(p, gt_cells)?;
    let n = p.data.len() as f64;
    let mean = p.sum() / n;
    let std = (p.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return Ok(0.0);
    }
    Ok(gt_cells.iter().map(|&(r, c)| (p.at(r, c) - mean) / std).sum::<f64>() / gt_cells.len() as f64)
}

/// Per-sample metrics in an evaluation report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ade_min: Option<f64>,
    pub fde_min: Option<f64>,
    /// ADE of rollout 0 alone.
    pub ade_first: Option<f64>,
    pub sim: Option<f64>,
    pub auc_j: Option<f64>,
    pub nss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kalman_ade: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kalman_fde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_auc_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_nss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub kalman_ade: f64,
    pub kalman_fde: f64,
    pub center_sim: f64,
    pub center_auc_j: f64,
    pub center_nss: f64,
}

/// Aggregate report; metric means skip samples where a metric is undefined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub k: usize,
    pub ade_min20: f64,
    pub fde_min20: f64,
    pub sim: f64,
    pub auc_j: f64,
    pub nss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineMetrics>,
    pub per_sample: Vec<SampleMetrics>,
}

/// Mean of the defined values (NaN when none are).
pub fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    pub fn from_samples(k: usize, per_sample: Vec<SampleMetrics>, baselines: bool) -> Self {
        let m = |f: fn(&SampleMetrics) -> Option<f64>| mean_defined(per_sample.iter().map(f));
        let baselines = baselines.then(|| BaselineMetrics {
            kalman_ade: m(|s| s.kalman_ade),
            kalman_fde: m(|s| s.kalman_fde),
            center_sim: m(|s| s.center_sim),
            center_auc_j: m(|s| s.center_auc_j),
            center_nss: m(|s| s.center_nss),
        });
        Self {
            n: per_sample.len(),
            k,
            ade_min20: m(|s| s.ade_min),
            fde_min20: m(|s| s.fde_min),
            sim: m(|s| s.sim),
            auc_j: m(|s| s.auc_j),
            nss: m(|s| s.nss),
            baselines,
            per_sample,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(pts: &[(f64, f64)]) -> HandTrajectory {
        let l: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let r: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(1.0 - x, y)).collect();
        HandTrajectory::fully_visible(l, r)
    }

    fn shift(t: &HandTrajectory, dx: f64) -> HandTrajectory {
        let mv = |v: &Vec<Point>| v.iter().map(|p| Point::new(p.x + dx, p.y)).collect();
        HandTrajectory::fully_visible(mv(&t.left), mv(&t.right))
    }

    #[test]
    fn displacement_basics() {
        let gt = traj(&[(0.1, 0.2), (0.3, 0.4), (0.5, 0.6)]);
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
        let off = shift(&gt, 0.1);
        assert!((ade(&off, &gt).unwrap() - 0.1).abs() < 1e-12);
        assert!((fde(&off, &gt).unwrap() - 0.1).abs() < 1e-12);
        let mut hidden = gt.clone();
        hidden.visible = vec![[false, false]; 3];
        assert!(matches!(ade(&gt, &hidden), Err(Error::NoVisibleGroundTruth)));
        assert!(matches!(fde(&gt, &hidden), Err(Error::NoVisibleGroundTruth)));
    }

    #[test]
    fn invisible_ground_truth_is_skipped() {
        let gt = traj(&[(0.1, 0.2), (0.3, 0.4)]);
        let mut pred = gt.clone();
        pred.right[1] = Point::new(9.0, 9.0);
        let mut g2 = gt.clone();
        g2.visible[1][1] = false;
        assert_eq!(ade(&pred, &g2).unwrap(), 0.0);
        assert_eq!(fde(&pred, &g2).unwrap(), 0.0);
    }

    #[test]
    fn min_of_k_cases() {
        let gt = traj(&[(0.1, 0.2), (0.3, 0.4)]);
        let a = shift(&gt, 0.2);
        assert_eq!(min_of_k(std::slice::from_ref(&a), &gt, ade).unwrap(), ade(&a, &gt).unwrap());
        assert_eq!(min_of_k(&[a.clone(), gt.clone()], &gt, ade).unwrap(), 0.0);
        assert!(min_of_k(&[], &gt, ade).is_err());
    }

    #[test]
    fn normalization_cases() {
        let p = AffordanceHeatmap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(normalize_heatmap(&p, (2, 2)).unwrap(), p);
        let u = normalize_heatmap(&AffordanceHeatmap::new(4, 6, vec![3.0; 24]).unwrap(), (2, 3)).unwrap();
        assert!(u.data.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let raw = AffordanceHeatmap::new(2, 4, vec![1.0, 3.0, 0.0, 0.0, 1.0, 3.0, 2.0, 2.0]).unwrap();
        let n = normalize_heatmap(&raw, (1, 2)).unwrap();
        assert_eq!(n.data, vec![8.0 / 12.0, 4.0 / 12.0]);
        // 3 columns into 2: the last block repeats the edge column.
        let odd = AffordanceHeatmap::new(1, 3, vec![1.0, 2.0, 4.0]).unwrap();
        let n = normalize_heatmap(&odd, (1, 2)).unwrap();
        assert!((n.data[0] - 1.5 / 5.5).abs() < 1e-15 && (n.data[1] - 4.0 / 5.5).abs() < 1e-15);
        assert!(matches!(normalize_heatmap(&AffordanceHeatmap::new(1, 2, vec![0.0; 2]).unwrap(), (1, 1)), Err(Error::AllZero)));
    }

    #[test]
    fn sim_cases() {
        let p = AffordanceHeatmap::new(1, 4, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let q = AffordanceHeatmap::new(1, 4, vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(sim(&p, &p).unwrap(), 1.0);
        assert_eq!(sim(&p, &q).unwrap(), 0.0);
        assert!(sim(&p, &AffordanceHeatmap::uniform(2, 2)).is_err());
    }

    #[test]
    fn auc_cases() {
        let u = AffordanceHeatmap::uniform(4, 4);
        assert!((auc_judd(&u, &[(1, 2), (3, 3)]).unwrap() - 0.5).abs() < 1e-12);
        let mut d = vec![0.01; 16];
        d[5] = 0.5;
        d[6] = 0.5;
        let p = AffordanceHeatmap::new(4, 4, d).unwrap();
        let a = auc_judd(&p, &[(1, 1), (1, 2)]).unwrap();
        assert!((1.0 - 1.0 / 32.0..=1.0).contains(&a));
        assert!(matches!(auc_judd(&p, &[]), Err(Error::EmptyGroundTruth)));
        assert!(auc_judd(&p, &[(4, 0)]).is_err());
    }

    #[test]
    fn nss_cases() {
        assert_eq!(nss(&AffordanceHeatmap::uniform(3, 3), &[(0, 0)]).unwrap(), 0.0);
        let mut d = vec![0.1; 9];
        d[4] = 0.2;
        let p = AffordanceHeatmap::new(3, 3, d.clone()).unwrap();
        let mean = d.iter().sum::<f64>() / 9.0;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!((nss(&p, &[(1, 1)]).unwrap() - (0.2 - mean) / std).abs() < 1e-12);
        assert!(nss(&p, &[(1, 1)]).unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn ade_is_a_symmetric_metric(a in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3),
                                      b in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3),
                                      c in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3)) {
            let (a, b, c) = (traj(&a), traj(&b), traj(&c));
            prop_assert!((ade(&a, &b).unwrap() - ade(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ade(&a, &c).unwrap() <= ade(&a, &b).unwrap() + ade(&b, &c).unwrap() + 1e-12);
            prop_assert!(fde(&a, &c).unwrap() <= fde(&a, &b).unwrap() + fde(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn sim_is_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 9), b in proptest::collection::vec(0.0f64..1.0, 9)) {
            let p = normalize_heatmap(&AffordanceHeatmap::new(3, 3, a.iter().map(|v| v + 1e-3).collect()).unwrap(), (3, 3)).unwrap();
            let q = normalize_heatmap(&AffordanceHeatmap::new(3, 3, b.iter().map(|v| v + 1e-3).collect()).unwrap(), (3, 3)).unwrap();
            let s = sim(&p, &q).unwrap();
            prop_assert!((s - sim(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((sim(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_and_nss_invariances(a in proptest::collection::vec(0.0f64..1.0, 16), cells in proptest::collection::vec((0usize..4, 0usize..4), 1..4), scale in 0.1f64..10.0, offset in 0.0f64..2.0) {
            let p = AffordanceHeatmap::new(4, 4, a.clone()).unwrap();
            let sq = AffordanceHeatmap::new(4, 4, a.iter().map(|v| v * v).collect()).unwrap();
            prop_assert!((auc_judd(&p, &cells).unwrap() - auc_judd(&sq, &cells).unwrap()).abs() < 1e-9);
            let aff = AffordanceHeatmap::new(4, 4, a.iter().map(|v| scale * v + offset).collect()).unwrap();
            prop_assert!((nss(&p, &cells).unwrap() - nss(&aff, &cells).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn min_of_k_never_exceeds_a_sample(k in 1usize..6, seed in 0u64..1000) {
            let gt = traj(&[(0.2, 0.3), (0.4, 0.5)]);
            let samples: Vec<HandTrajectory> = (0..k).map(|i| shift(&gt, ((seed + i as u64) % 7) as f64 * 0.03 - 0.09)).collect();
            let m = min_of_k(&samples, &gt, ade).unwrap();
            for s in &samples {
                prop_assert!(m <= ade(s, &gt).unwrap());
            }
        }
    }
}
