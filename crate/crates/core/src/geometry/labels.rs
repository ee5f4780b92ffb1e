//! Automatic trajectory and contact-point labels.
//!
//! Future frames are indexed `1..=n` relative to the last observation frame
//! (index 0). `chain[i]` maps future frame `i + 1` into frame `i`, so the
//! prefix product `chain[0] · … · chain[i]` carries frame `i + 1` into the
//! last observation frame.

use serde::{Deserialize, Serialize};

use super::{compose_chain, interpolate_trajectory, project_point, ransac_homography, Correspondences, Homography};
use crate::error::{Error, Result};
use crate::rng::mix_seed;
use crate::types::{BBox, ContactPointSet, HandTrajectory, Point, Side};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandBox {
    pub side: Side,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Detector output for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub frame_index: usize,
    #[serde(default)]
    pub hand_boxes: Vec<HandBox>,
    #[serde(default)]
    pub object_boxes: Vec<BBox>,
    #[serde(default)]
    pub contact_candidates: Vec<Point>,
}

impl FrameDetections {
    pub fn validate(&self) -> Result<()> {
        if self.object_boxes.len() > 2 {
            return Err(Error::Schema(format!("frame {} has more than two object boxes", self.frame_index)));
        }
        for side in Side::BOTH {
            if self.hand_boxes.iter().filter(|b| b.side == side).count() > 1 {
                return Err(Error::Schema(format!("frame {} has two {side:?} hand boxes", self.frame_index)));
            }
        }
        Ok(())
    }

    pub fn hand(&self, side: Side) -> Option<&BBox> {
        self.hand_boxes.iter().find(|b| b.side == side).map(|b| &b.bbox)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub dense_fps: f64,
    pub label_fps: f64,
    pub ransac_threshold_px: f64,
    pub ransac_iterations: usize,
    pub seed: u64,
    pub n_contacts: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { dense_fps: 20.0, label_fps: 4.0, ransac_threshold_px: 3.0, ransac_iterations: 2000, seed: 0, n_contacts: 5 }
    }
}

impl LabelConfig {
    /// Dense frames per label step.
    pub fn stride(&self) -> Result<usize> {
        let r = self.dense_fps / self.label_fps;
        if !(self.label_fps > 0.0) || !(r >= 1.0) || (r - r.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dense_fps ({}) must be a positive multiple of label_fps ({})",
                self.dense_fps, self.label_fps
            )));
        }
        Ok(r.round() as usize)
    }
}

fn prefix_chains(chain: &[Homography]) -> Result<Vec<Homography>> {
    let mut out: Vec<Homography> = Vec::with_capacity(chain.len());
    for h in chain {
        let next = match out.last() {
            Some(prev) => prev.compose(h)?,
            None => *h,
        };
        out.push(next);
    }
    Ok(out)
}

/// Project future hand detections into the last observation frame, fill
/// detection gaps on the dense grid and subsample at the label rate.
///
/// A side without any detection is marked invisible at every step; if both
/// sides are empty the clip yields [`Error::EmptyTrajectory`]. Steps before
/// the first or after the last detection of a side hold that detection.
pub fn generate_trajectory_labels(
    future: &[FrameDetections],
    chain: &[Homography],
    frame_size: [f64; 2],
    cfg: &LabelConfig,
) -> Result<HandTrajectory> {
    let n = future.len();
    if n == 0 || chain.len() != n {
        return Err(Error::ShapeMismatch(format!("{} future frames but {} chain links", n, chain.len())));
    }
    for (i, f) in future.iter().enumerate() {
        f.validate()?;
        if f.frame_index != i + 1 {
            return Err(Error::Schema(format!("future frame {} is out of sequence (expected {})", f.frame_index, i + 1)));
        }
    }
    let stride = cfg.stride()?;
    if !n.is_multiple_of(stride) {
        return Err(Error::Config(format!("{n} dense frames do not cover whole label steps of {stride}")));
    }
    let horizon = n / stride;
    let to_last = prefix_chains(chain)?;
    let time = |idx: usize| idx as f64 / cfg.dense_fps;

    let mut sides: Vec<(Vec<Point>, bool)> = Vec::with_capacity(2);
    for side in Side::BOTH {
        let mut keys = Vec::new();
        let mut dense: Vec<Option<Point>> = vec![None; n];
        for (i, f) in future.iter().enumerate() {
            if let Some(b) = f.hand(side) {
                let p = project_point(&to_last[i], b.center())?;
                keys.push((time(f.frame_index), p));
                dense[i] = Some(p);
            }
        }
        if keys.is_empty() {
            sides.push((vec![side.default_location(); horizon], false));
            continue;
        }
        let (t_first, p_first) = keys[0];
        let (t_last, p_last) = keys[keys.len() - 1];
        for (i, slot) in dense.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let t = time(i + 1);
            *slot = Some(if t <= t_first {
                p_first
            } else if t >= t_last {
                p_last
            } else {
                interpolate_trajectory(&keys, &[t])?[0]
            });
        }
        let labels = (1..=horizon).map(|k| dense[k * stride - 1].expect("filled").normalized(frame_size)).collect();
        sides.push((labels, true));
    }
    let (right, rvis) = sides.pop().expect("two sides");
    let (left, lvis) = sides.pop().expect("two sides");
    if !lvis && !rvis {
        return Err(Error::EmptyTrajectory);
    }
    HandTrajectory::new(left, right, vec![[lvis, rvis]; horizon])
}

/// Project contact candidates from the contact frame into the last
/// observation frame.
///
/// When `object_track` is given, `track[0]` is the active object's resting
/// position in the last observation frame and `track.last()` its position in
/// the contact frame (contact-frame pixels); the projected candidates are
/// shifted back by the object's displacement. Output is normalized, clipped
/// to the unit square and truncated to `n_max` points.
pub fn generate_contact_labels(
    contact_frame: &FrameDetections,
    chain: &[Homography],
    object_track: Option<&[Point]>,
    frame_size: [f64; 2],
    n_max: usize,
) -> Result<ContactPointSet> {
    if contact_frame.contact_candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let h = compose_chain(chain)?;
    let shift = match object_track {
        Some(track) => {
            if track.len() < 2 {
                return Err(Error::ShapeMismatch("object track needs a resting and a contact position".into()));
            }
            let moved = project_point(&h, track[track.len() - 1])?;
            track[0] - moved
        }
        None => Point::new(0.0, 0.0),
    };
    let points = contact_frame
        .contact_candidates
        .iter()
        .take(n_max)
        .map(|&c| Ok((project_point(&h, c)? + shift).normalized(frame_size).clamped_unit()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContactPointSet { points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceRecord {
    pub from: usize,
    pub to: usize,
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
}

/// One clip of the label-generation input (JSON-lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frame_size: [f64; 2],
    pub future_frames: Vec<FrameDetections>,
    pub correspondences: Vec<CorrespondenceRecord>,
    #[serde(default)]
    pub active_object_track: Option<Vec<Point>>,
}

/// One clip of the label-generation output (JSON-lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOutput {
    pub clip_id: String,
    pub trajectory: HandTrajectory,
    pub contacts: Vec<Point>,
}

/// Estimate the per-frame homography chain for a clip and produce its labels.
///
/// A clip whose contact frame carries no candidates gets an empty contact list.
pub fn label_clip(rec: &ClipRecord, cfg: &LabelConfig) -> Result<LabelOutput> {
    let mut future = rec.future_frames.clone();
    future.sort_by_key(|f| f.frame_index);
    let chain = (0..future.len())
        .map(|i| {
            let corr = rec
                .correspondences
                .iter()
                .find(|c| c.from == i + 1 && c.to == i)
                .ok_or_else(|| Error::Schema(format!("clip {}: no correspondences from frame {} to {}", rec.clip_id, i + 1, i)))?;
            let c = Correspondences::new(corr.src.clone(), corr.dst.clone())?;
            let (h, _) = ransac_homography(&c, cfg.ransac_threshold_px, cfg.ransac_iterations, mix_seed(cfg.seed, i as u64))?;
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    let trajectory = generate_trajectory_labels(&future, &chain, rec.frame_size, cfg)?;
    let contacts = match future.last() {
        Some(last) if !last.contact_candidates.is_empty() => {
            generate_contact_labels(last, &chain, rec.active_object_track.as_deref(), rec.frame_size, cfg.n_contacts)?.points
        }
        _ => Vec::new(),
    };
    Ok(LabelOutput { clip_id: rec.clip_id.clone(), trajectory, contacts })
}
