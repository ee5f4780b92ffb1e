use crate::error::{Error, Result};
use crate::types::Point;

const TIME_TOL: f64 = 1e-9;

/// Three-point one-sided derivative at `a` from the next two keys `b`, `c`
/// (which lie on the same side of `a`). Exact for quadratics.
fn one_sided(a: (f64, Point), b: (f64, Point), c: (f64, Point)) -> Point {
    let (h1, h2) = (b.0 - a.0, c.0 - b.0);
    let wa = -(2.0 * h1 + h2) / (h1 * (h1 + h2));
    let wb = (h1 + h2) / (h1 * h2);
    let wc = -h1 / (h2 * (h1 + h2));
    a.1 * wa + b.1 * wb + c.1 * wc
}

/// Cubic Hermite interpolation through `keyed` samples.
///
/// Tangents are Catmull-Rom (centered differences over the neighbouring keys)
/// with one-sided (three-point where possible) differences at the two ends. Key times must be strictly
/// increasing and every query must lie within `[first, last]`.
pub fn interpolate_trajectory(keyed: &[(f64, Point)], query_times: &[f64]) -> Result<Vec<Point>> {
    if keyed.len() < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 keys, got {}", keyed.len())));
    }
    if keyed.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Schema("key times must be strictly increasing".into()));
    }
    let n = keyed.len();
    let tangents: Vec<Point> = (0..n)
        .map(|k| {
            if n >= 3 && k == 0 {
                one_sided(keyed[0], keyed[1], keyed[2])
            } else if n >= 3 && k == n - 1 {
                one_sided(keyed[n - 1], keyed[n - 2], keyed[n - 3])
            } else {
                let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
                (keyed[hi].1 - keyed[lo].1) * (1.0 / (keyed[hi].0 - keyed[lo].0))
            }
        })
        .collect();
    let (t_first, t_last) = (keyed[0].0, keyed[n - 1].0);
    query_times
        .iter()
        .map(|&t| {
            if t < t_first - TIME_TOL || t > t_last + TIME_TOL || !t.is_finite() {
                return Err(Error::OutOfRange(t));
            }
            let t = t.clamp(t_first, t_last);
            // Segment k covers [t_k, t_{k+1}].
            let k = keyed.partition_point(|&(tk, _)| tk <= t).saturating_sub(1).min(n - 2);
            let (t0, p0) = keyed[k];
            let (t1, p1) = keyed[k + 1];
            if t == t0 {
                return Ok(p0);
            }
            if t == t1 {
                return Ok(p1);
            }
            let h = t1 - t0;
            let s = (t - t0) / h;
            let (s2, s3) = (s * s, s * s * s);
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            Ok(p0 * h00 + tangents[k] * (h10 * h) + p1 * h01 + tangents[k + 1] * (h11 * h))
        })
        .collect()
}
