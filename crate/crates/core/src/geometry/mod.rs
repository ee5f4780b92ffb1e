//! Planar homographies between consecutive frames and the automatic
//! trajectory / contact-point label generation built on top of them.

mod interp;
mod labels;

pub use interp::interpolate_trajectory;
pub use labels::{
    generate_contact_labels, generate_trajectory_labels, label_clip, ClipRecord, CorrespondenceRecord,
    FrameDetections, HandBox, LabelConfig, LabelOutput,
};

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::Point;

const MIN_DEPTH: f64 = 1e-12;
const MIN_DET: f64 = 1e-12;
const MIN_SAMPLE_AREA: f64 = 1e-6;

/// A projective map between two frames, normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    /// Normalize and validate an arbitrary 3×3 matrix.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if s.abs() < MIN_DEPTH || !s.is_finite() {
            return Err(Error::DegenerateConfiguration("homography has vanishing m[2][2]".into()));
        }
        let m = m / s;
        if !(m.determinant().abs() > MIN_DET) || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateConfiguration("homography is singular".into()));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    pub fn project(&self, p: Point) -> Result<Point> {
        project_point(self, p)
    }
}

/// Matched pixel locations `src[i] ↦ dst[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondences {
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
}

impl Correspondences {
    pub fn new(src: Vec<Point>, dst: Vec<Point>) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::ShapeMismatch(format!("{} sources vs {} destinations", src.len(), dst.len())));
        }
        if src.iter().chain(&dst).any(|p| !p.is_finite()) {
            return Err(Error::Schema("correspondence point is not finite".into()));
        }
        Ok(Self { src, dst })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Correspondences {
        Correspondences {
            src: idx.iter().map(|&i| self.src[i]).collect(),
            dst: idx.iter().map(|&i| self.dst[i]).collect(),
        }
    }
}

/// Perspective division of `h · [p; 1]`.
pub fn project_point(h: &Homography, p: Point) -> Result<Point> {
    let v = h.m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < MIN_DEPTH {
        return Err(Error::PointAtInfinity);
    }
    Ok(Point::new(v.x / v.z, v.y / v.z))
}

/// Hartley normalization: centroid to the origin, mean distance √2.
fn normalizing_transform(pts: &[Point]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return Err(Error::DegenerateConfiguration("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    Point::new(v.x / v.z, v.y / v.z)
}

/// Direct linear transform with Hartley normalization.
///
/// Minimizes the algebraic error over all correspondences; the result is
/// rescaled so `m[2][2] == 1`.
pub fn estimate_homography(c: &Correspondences) -> Result<Homography> {
    let n = c.len();
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!("need at least 4 correspondences, got {n}")));
    }
    if c.src.len() != c.dst.len() {
        return Err(Error::ShapeMismatch("source/destination lengths differ".into()));
    }
    let ts = normalizing_transform(&c.src)?;
    let td = normalizing_transform(&c.dst)?;
    // 4 points give 8 rows; a zero row keeps the SVD full so V spans R^9.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let s = apply(&ts, c.src[i]);
        let d = apply(&td, c.dst[i]);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(second > 1e-10 * largest) {
        return Err(Error::DegenerateConfiguration("design matrix is rank deficient".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("normalization not invertible".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
}

/// Exact homography through 4 correspondences by solving the 8×8 system
/// with `h22 = 1` in normalized coordinates. Falls back to the DLT.
fn minimal_homography(c: &Correspondences) -> Result<Homography> {
    let ts = normalizing_transform(&c.src)?;
    let td = normalizing_transform(&c.dst)?;
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let s = apply(&ts, c.src[i]);
        let d = apply(&td, c.dst[i]);
        let r0 = [s.x, s.y, 1.0, 0.0, 0.0, 0.0, -d.x * s.x, -d.x * s.y];
        let r1 = [0.0, 0.0, 0.0, s.x, s.y, 1.0, -d.y * s.x, -d.y * s.y];
        for j in 0..8 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
        b[2 * i] = d.x;
        b[2 * i + 1] = d.y;
    }
    match a.lu().solve(&b) {
        Some(h) if h.iter().all(|v| v.is_finite()) => {
            let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
            let td_inv = td
                .try_inverse()
                .ok_or_else(|| Error::DegenerateConfiguration("normalization not invertible".into()))?;
            Homography::from_matrix(td_inv * hn * ts)
        }
        _ => estimate_homography(c),
    }
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs()
}

fn has_collinear_triple(p: &[Point]) -> bool {
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            for k in j + 1..p.len() {
                if triangle_area(p[i], p[j], p[k]) < MIN_SAMPLE_AREA {
                    return true;
                }
            }
        }
    }
    false
}

fn reprojection_error(h: &Homography, s: Point, d: Point) -> f64 {
    match project_point(h, s) {
        Ok(p) => p.dist(d),
        Err(_) => f64::INFINITY,
    }
}

/// Robust homography fit by 4-point RANSAC.
///
/// The best hypothesis maximizes the inlier count, ties going to the lower
/// mean inlier error and then to the earlier draw. The winner is re-fit by
/// [`estimate_homography`] over all of its inliers. The returned mask marks
/// the inliers of the re-fit model.
pub fn ransac_homography(
    c: &Correspondences,
    threshold_px: f64,
    iterations: usize,
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    let n = c.len();
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!("need at least 4 correspondences, got {n}")));
    }
    if !(threshold_px > 0.0) {
        return Err(Error::Config("RANSAC threshold must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, Homography)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, n, 4).into_vec();
        let s = c.subset(&idx);
        if has_collinear_triple(&s.src) || has_collinear_triple(&s.dst) {
            continue;
        }
        let Ok(h) = minimal_homography(&s) else { continue };
        let mut count = 0;
        let mut err_sum = 0.0;
        for i in 0..n {
            let e = reprojection_error(&h, c.src[i], c.dst[i]);
            if e < threshold_px {
                count += 1;
                err_sum += e;
            }
        }
        let mean = err_sum / count.max(1) as f64;
        let better = match &best {
            None => true,
            Some((bc, bm, _)) => count > *bc || (count == *bc && mean < *bm),
        };
        if better {
            best = Some((count, mean, h));
            // An exact fit to every point cannot be meaningfully beaten.
            if count == n && mean < 1e-9 {
                break;
            }
        }
    }
    let (_, _, h) = best.ok_or_else(|| Error::DegenerateConfiguration("no valid 4-point sample".into()))?;
    let inliers: Vec<usize> =
        (0..n).filter(|&i| reprojection_error(&h, c.src[i], c.dst[i]) < threshold_px).collect();
    let refit = if inliers.len() >= 4 { estimate_homography(&c.subset(&inliers)).unwrap_or(h) } else { h };
    let mask: Vec<bool> = (0..n).map(|i| reprojection_error(&refit, c.src[i], c.dst[i]) < threshold_px).collect();
    // Keep the hypothesis if the re-fit somehow lost support.
    if mask.iter().filter(|&&m| m).count() < inliers.len() {
        let mask = (0..n).map(|i| inliers.binary_search(&i).is_ok()).collect();
        return Ok((h, mask));
    }
    Ok((refit, mask))
}

/// Product `hs[0] · hs[1] · … · hs[n-1]`; maps frame `n` to frame 0 when
/// `hs[k]` maps frame `k+1` to frame `k`.
pub fn compose_chain(hs: &[Homography]) -> Result<Homography> {
    let (first, rest) =
        hs.split_first().ok_or_else(|| Error::ShapeMismatch("homography chain is empty".into()))?;
    let mut m = first.m;
    for h in rest {
        m *= h.m;
        // Renormalize as we go so long chains stay well scaled.
        let s = m[(2, 2)];
        if s.abs() > MIN_DEPTH {
            m /= s;
        }
    }
    Homography::from_matrix(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_homography(rng: &mut impl Rng) -> Homography {
        Homography::from_rows([
            [1.0 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-20.0..20.0)],
            [rng.random_range(-0.1..0.1), 1.0 + rng.random_range(-0.1..0.1), rng.random_range(-20.0..20.0)],
            [rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4), 1.0],
        ])
        .unwrap()
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| Point::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0))).collect()
    }

    fn mapped(h: &Homography, pts: &[Point]) -> Correspondences {
        Correspondences::new(pts.to_vec(), pts.iter().map(|&p| project_point(h, p).unwrap()).collect()).unwrap()
    }

    fn max_reprojection(h: &Homography, c: &Correspondences) -> f64 {
        c.src.iter().zip(&c.dst).map(|(&s, &d)| reprojection_error(h, s, d)).fold(0.0, f64::max)
    }

    #[test]
    fn identity_from_four_points() {
        let pts = vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(10.0, 10.0), Point::new(0.0, 10.0)];
        let h = estimate_homography(&Correspondences::new(pts.clone(), pts).unwrap()).unwrap();
        let eye = Matrix3::<f64>::identity();
        assert!((h.matrix() - eye).abs().max() < 1e-12);
    }

    #[test]
    fn translation_is_recovered() {
        let h0 = Homography::translation(5.0, -3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = mapped(&h0, &random_points(&mut rng, 8));
        let h = estimate_homography(&c).unwrap();
        assert!(max_reprojection(&h, &c) < 1e-9);
        assert!((h.matrix() - h0.matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn random_projective_map_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let h0 = random_homography(&mut rng);
            let c = mapped(&h0, &random_points(&mut rng, 20));
            let h = estimate_homography(&c).unwrap();
            assert!(max_reprojection(&h, &c) < 1e-6);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<Point> = (0..6).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        let c = Correspondences::new(pts.clone(), pts).unwrap();
        assert!(matches!(estimate_homography(&c), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = vec![Point::new(0.0, 0.0); 3];
        let c = Correspondences::new(pts.clone(), pts).unwrap();
        assert!(estimate_homography(&c).is_err());
        assert!(ransac_homography(&c, 3.0, 10, 0).is_err());
    }

    #[test]
    fn scale_invariance_of_destination() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h0 = random_homography(&mut rng);
        let c = mapped(&h0, &random_points(&mut rng, 12));
        let s = 3.7;
        let scaled = Correspondences::new(c.src.clone(), c.dst.iter().map(|&p| p * s).collect()).unwrap();
        let h = estimate_homography(&c).unwrap();
        let hs = estimate_homography(&scaled).unwrap();
        let unscale = Homography::from_rows([[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let back = unscale.compose(&hs).unwrap();
        for &p in &c.src {
            assert!(project_point(&h, p).unwrap().dist(project_point(&back, p).unwrap()) < 1e-6);
        }
    }

    #[test]
    fn ransac_on_clean_data_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h0 = random_homography(&mut rng);
        let c = mapped(&h0, &random_points(&mut rng, 30));
        let (h, mask) = ransac_homography(&c, 3.0, 2000, 9).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!(max_reprojection(&h, &c) < 1e-6);
    }

    #[test]
    fn ransac_minimal_sample_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h0 = random_homography(&mut rng);
        let c = mapped(&h0, &random_points(&mut rng, 4));
        let (h, mask) = ransac_homography(&c, 3.0, 50, 1).unwrap();
        assert_eq!(mask, vec![true; 4]);
        assert!(max_reprojection(&h, &c) < 1e-9);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h0 = random_homography(&mut rng);
        let mut c = mapped(&h0, &random_points(&mut rng, 100));
        for i in 70..100 {
            c.dst[i] = Point::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
        }
        let (h, mask) = ransac_homography(&c, 3.0, 2000, 11).unwrap();
        assert!(mask[..70].iter().all(|&m| m));
        let clean = c.subset(&(0..70).collect::<Vec<_>>());
        assert!(max_reprojection(&h, &clean) < 1e-6);
    }

    #[test]
    fn ransac_fails_on_all_collinear() {
        let pts: Vec<Point> = (0..8).map(|i| Point::new(i as f64, 0.0)).collect();
        let c = Correspondences::new(pts.clone(), pts).unwrap();
        assert!(matches!(ransac_homography(&c, 3.0, 100, 0), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn chains_compose() {
        let eye = Homography::identity();
        assert_eq!(compose_chain(&[eye, eye, eye]).unwrap(), eye);
        let t = compose_chain(&[Homography::translation(1.0, 0.0), Homography::translation(0.0, 2.0)]).unwrap();
        assert!((t.matrix() - Homography::translation(1.0, 2.0).matrix()).abs().max() < 1e-15);
        assert!(compose_chain(&[]).is_err());
    }

    #[test]
    fn chain_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let hs: Vec<Homography> = (0..5).map(|_| random_homography(&mut rng)).collect();
            let composed = compose_chain(&hs).unwrap();
            for p in random_points(&mut rng, 10) {
                let mut q = p;
                for h in hs.iter().rev() {
                    q = project_point(h, q).unwrap();
                }
                assert!(project_point(&composed, p).unwrap().dist(q) < 1e-8);
            }
        }
    }

    #[test]
    fn projection_matches_homogeneous_product() {
        assert_eq!(project_point(&Homography::identity(), Point::new(3.0, 4.0)).unwrap(), Point::new(3.0, 4.0));
        assert_eq!(project_point(&Homography::translation(1.0, 2.0), Point::new(0.0, 0.0)).unwrap(), Point::new(1.0, 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let h = random_homography(&mut rng);
            let p = random_points(&mut rng, 1)[0];
            let r = h.to_rows();
            let x = r[0][0] * p.x + r[0][1] * p.y + r[0][2];
            let y = r[1][0] * p.x + r[1][1] * p.y + r[1][2];
            let w = r[2][0] * p.x + r[2][1] * p.y + r[2][2];
            let q = project_point(&h, p).unwrap();
            assert!((q.x - x / w).abs() < 1e-12 && (q.y - y / w).abs() < 1e-12);
        }
    }

    #[test]
    fn points_on_the_horizon_fail() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(project_point(&h, Point::new(-1.0, 5.0)), Err(Error::PointAtInfinity)));
    }
}
