//! Deterministic synthetic egocentric scenes with exact ground truth.
//!
//! World coordinates are the pixel coordinates of the last observation frame
//! (time 0). A camera homography `G(τ)` maps frame-`τ` pixels into world
//! pixels with `G(0) = I`. Hands follow quadratic Bézier paths in time; the
//! contact hand ends on a contact point of the active object at the contact
//! time `F / label_fps`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    label_clip, project_point, ClipRecord, CorrespondenceRecord, FrameDetections, HandBox, Homography, LabelConfig,
};
use crate::rng::{mix_seed, rng_for};
use crate::types::{BBox, HandTrajectory, Point, Side};

pub const DATASET_MAGIC: &[u8; 5] = b"OCTD1";
const HAND_BOX: f64 = 48.0;
const STATE_DIM: usize = 5;
const GLOBAL_STATE_DIM: usize = 4 * STATE_DIM + 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactSide {
    #[default]
    Random,
    Left,
    Right,
}

/// Scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct SynthConfig {
    pub T: usize,
    pub F: usize,
    pub obs_fps: f64,
    pub dense_fps: f64,
    pub label_fps: f64,
    pub frame_size: [f64; 2],
    pub d_feat: usize,
    pub featurizer_seed: u64,
    /// Multiplier on every camera-motion bound; 0 freezes the camera.
    pub camera_motion: f64,
    /// Bézier control-point offset relative to the path length.
    pub curvature: f64,
    pub n_bg: usize,
    pub outlier_frac: f64,
    /// Probability that a hand detection is missing in a frame.
    pub dropout: f64,
    pub n_objects: usize,
    pub n_object_kinds: usize,
    pub n_contacts: usize,
    pub contact_radius: f64,
    pub contact_side: ContactSide,
    /// Probability that the non-contact hand never appears.
    pub single_hand_prob: f64,
    /// Probability that the active object moves before the contact frame.
    pub object_motion_prob: f64,
    pub ransac_threshold_px: f64,
    pub ransac_iterations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            T: 10,
            F: 4,
            obs_fps: 4.0,
            dense_fps: 20.0,
            label_fps: 4.0,
            frame_size: [454.0, 256.0],
            d_feat: 1024,
            featurizer_seed: 0x0C7_F3A7,
            camera_motion: 1.0,
            curvature: 0.3,
            n_bg: 40,
            outlier_frac: 0.0,
            dropout: 0.0,
            n_objects: 2,
            n_object_kinds: 4,
            n_contacts: 5,
            contact_radius: 6.0,
            contact_side: ContactSide::Random,
            single_hand_prob: 0.0,
            object_motion_prob: 0.0,
            ransac_threshold_px: 3.0,
            ransac_iterations: 2000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.T < 2 || self.F < 1 {
            return bad("need T >= 2 and F >= 1");
        }
        if !(1..=2).contains(&self.n_objects) {
            return bad("n_objects must be 1 or 2");
        }
        if self.n_object_kinds == 0 || self.n_contacts == 0 || self.d_feat == 0 {
            return bad("n_object_kinds, n_contacts and d_feat must be positive");
        }
        for (name, p) in [
            ("outlier_frac", self.outlier_frac),
            ("dropout", self.dropout),
            ("single_hand_prob", self.single_hand_prob),
            ("object_motion_prob", self.object_motion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.obs_fps > 0.0) || !(self.frame_size[0] > 0.0 && self.frame_size[1] > 0.0) {
            return bad("obs_fps and frame_size must be positive");
        }
        if self.n_bg < 4 {
            return bad("n_bg must be at least 4");
        }
        self.label_config(0).stride()?;
        Ok(())
    }

    pub fn label_config(&self, seed: u64) -> LabelConfig {
        LabelConfig {
            dense_fps: self.dense_fps,
            label_fps: self.label_fps,
            ransac_threshold_px: self.ransac_threshold_px,
            ransac_iterations: self.ransac_iterations,
            seed,
            n_contacts: self.n_contacts,
        }
    }

    /// Number of dense future frames up to the contact frame.
    pub fn n_dense(&self) -> usize {
        (self.F as f64 * self.dense_fps / self.label_fps).round() as usize
    }

    pub fn contact_time(&self) -> f64 {
        self.F as f64 / self.label_fps
    }

    pub fn obs_time(&self, i: usize) -> f64 {
        -((self.T - 1 - i) as f64) / self.obs_fps
    }

    pub fn future_time(&self, j: usize) -> f64 {
        j as f64 / self.dense_fps
    }
}

/// Smooth similarity-plus-perspective camera drift, frame pixels → world pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPath {
    center: Point,
    vel: Point,
    acc: Point,
    rot_rate: f64,
    log_scale_rate: f64,
    persp_rate: [f64; 2],
}

impl CameraPath {
    fn sample(rng: &mut ChaCha8Rng, amount: f64, frame: [f64; 2]) -> Self {
        let mut u = |b: f64| amount * rng.random_range(-b..=b);
        Self {
            center: Point::new(frame[0] / 2.0, frame[1] / 2.0),
            vel: Point::new(u(40.0), u(25.0)),
            acc: Point::new(u(20.0), u(12.0)),
            rot_rate: u(0.04),
            log_scale_rate: u(0.03),
            persp_rate: [u(2e-5), u(2e-5)],
        }
    }

    /// `G(τ)`.
    pub fn at(&self, tau: f64) -> Homography {
        let t = self.vel * tau + self.acc * (0.5 * tau * tau);
        let th = self.rot_rate * tau;
        let s = (self.log_scale_rate * tau).exp();
        let (sn, cs) = th.sin_cos();
        let (a, b, c, d) = (s * cs, -s * sn, s * sn, s * cs);
        let (cx, cy) = (self.center.x, self.center.y);
        let m = Matrix3::new(
            a,
            b,
            cx + t.x - (a * cx + b * cy),
            c,
            d,
            cy + t.y - (c * cx + d * cy),
            self.persp_rate[0] * tau,
            self.persp_rate[1] * tau,
            1.0,
        );
        Homography::from_matrix(m).expect("bounded camera drift stays invertible")
    }
}

/// A quadratic Bézier hand path over `[t0, t1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HandPath {
    pub present: bool,
    pub p0: Point,
    pub p1: Point,
    pub p2: Point,
    pub t0: f64,
    pub t1: f64,
}

impl HandPath {
    pub fn at(&self, tau: f64) -> Point {
        let u = (tau - self.t0) / (self.t1 - self.t0);
        let v = 1.0 - u;
        self.p0 * (v * v) + self.p1 * (2.0 * v * u) + self.p2 * (u * u)
    }

    /// Time derivative in world pixels per second.
    pub fn velocity(&self, tau: f64) -> Point {
        let u = (tau - self.t0) / (self.t1 - self.t0);
        ((self.p1 - self.p0) * (2.0 * (1.0 - u)) + (self.p2 - self.p1) * (2.0 * u)) * (1.0 / (self.t1 - self.t0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    /// Box in world pixels while the object rests.
    pub rest: BBox,
    pub kind: usize,
    /// Displacement reached at the contact time, if the object moves.
    pub motion: Option<Point>,
}

impl SceneObject {
    fn offset_at(&self, tau: f64, contact_time: f64) -> Point {
        match self.motion {
            Some(d) if tau > 0.0 => {
                let u = (tau / contact_time).clamp(0.0, 1.0);
                d * (u * u * (3.0 - 2.0 * u))
            }
            _ => Point::new(0.0, 0.0),
        }
    }

    pub fn center_at(&self, tau: f64, contact_time: f64) -> Point {
        self.rest.center() + self.offset_at(tau, contact_time)
    }
}

/// Everything needed to render observations and exact labels for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneScript {
    pub seed: u64,
    pub config: SynthConfig,
    pub camera: CameraPath,
    /// `hs[j]` maps future frame `j + 1` to frame `j` (frame 0 is the last observation).
    pub camera_homographies: Vec<Homography>,
    pub hands: [HandPath; 2],
    pub objects: Vec<SceneObject>,
    pub active_object: usize,
    pub contact_side: Side,
    /// Contact points on the resting active object, world pixels.
    pub contact_points: Vec<Point>,
    /// `[left, right]` detection dropped, per observation frame.
    pub obs_dropped: Vec<[bool; 2]>,
    /// `[left, right]` detection dropped, per dense future frame.
    pub future_dropped: Vec<[bool; 2]>,
}

impl SceneScript {
    pub fn frame_size(&self) -> [f64; 2] {
        self.config.frame_size
    }

    /// World → frame-`τ` pixels.
    fn to_frame(&self, tau: f64, p: Point) -> Point {
        let g = self.camera.at(tau).inverse().expect("camera is invertible");
        project_point(&g, p).expect("camera keeps points finite")
    }

    fn object_box_in_frame(&self, o: &SceneObject, tau: f64) -> BBox {
        let c = self.to_frame(tau, o.center_at(tau, self.config.contact_time()));
        BBox::centered(c, o.rest.width(), o.rest.height())
    }

    /// Exact future trajectory, normalized to the last observation frame.
    pub fn true_trajectory(&self) -> HandTrajectory {
        let cfg = &self.config;
        let steps: Vec<f64> = (1..=cfg.F).map(|k| k as f64 / cfg.label_fps).collect();
        let side = |s: Side| -> Vec<Point> {
            let h = &self.hands[s.index()];
            steps
                .iter()
                .map(|&t| if h.present { h.at(t).normalized(cfg.frame_size) } else { s.default_location() })
                .collect()
        };
        let vis = [self.hands[0].present, self.hands[1].present];
        HandTrajectory::new(side(Side::Left), side(Side::Right), vec![vis; cfg.F]).expect("generator trajectories are finite")
    }

    pub fn true_contacts(&self) -> Vec<Point> {
        self.contact_points.iter().map(|p| p.normalized(self.config.frame_size)).collect()
    }

    /// `(verb, noun)`: contact side and active object kind.
    pub fn action(&self) -> [usize; 2] {
        [self.contact_side.index(), self.objects[self.active_object].kind]
    }
}

fn unit_point(rng: &mut ChaCha8Rng, lo: [f64; 2], hi: [f64; 2], frame: [f64; 2]) -> Point {
    Point::new(rng.random_range(lo[0]..hi[0]) * frame[0], rng.random_range(lo[1]..hi[1]) * frame[1])
}

fn boxes_overlap(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin
}

/// Draw a scene. Identical `(seed, config)` give identical scripts.
pub fn simulate_scene(seed: u64, cfg: &SynthConfig) -> Result<SceneScript> {
    cfg.validate()?;
    let fs = cfg.frame_size;
    let mut rng = rng_for(seed, &[0x5CE4E]);
    let camera = CameraPath::sample(&mut rng, cfg.camera_motion, fs);
    let tc = cfg.contact_time();
    let t0 = cfg.obs_time(0);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.n_objects);
    while objects.len() < cfg.n_objects {
        let w = rng.random_range(0.13..0.22) * fs[0];
        let h = rng.random_range(0.16..0.28) * fs[1];
        let c = unit_point(&mut rng, [0.15, 0.2], [0.85, 0.55], fs);
        let b = BBox::centered(c, w, h);
        if objects.iter().all(|o| !boxes_overlap(&o.rest, &b, 10.0)) {
            let kind = rng.random_range(0..cfg.n_object_kinds);
            objects.push(SceneObject { rest: b, kind, motion: None });
        }
    }
    let active_object = rng.random_range(0..cfg.n_objects);
    if rng.random_bool(cfg.object_motion_prob) {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(15.0..35.0);
        objects[active_object].motion = Some(Point::new(r * ang.cos(), r * ang.sin()));
    }

    let contact_side = match cfg.contact_side {
        ContactSide::Left => Side::Left,
        ContactSide::Right => Side::Right,
        ContactSide::Random => {
            if rng.random_bool(0.5) {
                Side::Left
            } else {
                Side::Right
            }
        }
    };
    let rest = objects[active_object].rest;
    let margin = 0.15;
    let first = Point::new(
        rest.x1 + rest.width() * rng.random_range(margin..1.0 - margin),
        rest.y1 + rest.height() * rng.random_range(margin..1.0 - margin),
    );
    let mut contact_points = vec![first];
    while contact_points.len() < cfg.n_contacts {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let r = cfg.contact_radius * rng.random::<f64>().sqrt();
        let p = first + Point::new(r * ang.cos(), r * ang.sin());
        contact_points.push(Point::new(p.x.clamp(rest.x1, rest.x2), p.y.clamp(rest.y1, rest.y2)));
    }
    let motion = objects[active_object].motion.unwrap_or_default();

    let other_present = !rng.random_bool(cfg.single_hand_prob);
    let make_hand = |side: Side, rng: &mut ChaCha8Rng| -> HandPath {
        let x_lo = if side == Side::Left { 0.1 } else { 0.55 };
        let p0 = unit_point(rng, [x_lo, 0.78], [x_lo + 0.35, 0.98], fs);
        let (p2, present) = if side == contact_side {
            (first + motion, true)
        } else {
            let d = Point::new(rng.random_range(-0.08..0.08) * fs[0], rng.random_range(-0.15..0.02) * fs[1]);
            (p0 + d, other_present)
        };
        let chord = p2 - p0;
        let len = chord.x.hypot(chord.y).max(1.0);
        let normal = Point::new(-chord.y / len, chord.x / len);
        let bend = cfg.curvature * len * rng.random_range(-1.0..1.0);
        let p1 = (p0 + p2) * 0.5 + normal * bend;
        HandPath { present, p0, p1, p2, t0, t1: tc }
    };
    let hands = [make_hand(Side::Left, &mut rng), make_hand(Side::Right, &mut rng)];

    let n_dense = cfg.n_dense();
    let drop = |n: usize, rng: &mut ChaCha8Rng| -> Vec<[bool; 2]> {
        (0..n).map(|_| [rng.random_bool(cfg.dropout), rng.random_bool(cfg.dropout)]).collect()
    };
    let obs_dropped = drop(cfg.T, &mut rng);
    let future_dropped = drop(n_dense, &mut rng);

    let frames: Vec<Homography> = (0..=n_dense).map(|j| camera.at(cfg.future_time(j))).collect();
    let camera_homographies = frames
        .windows(2)
        .map(|w| w[0].inverse()?.compose(&w[1]))
        .collect::<Result<Vec<_>>>()?;

    Ok(SceneScript {
        seed,
        config: cfg.clone(),
        camera,
        camera_homographies,
        hands,
        objects,
        active_object,
        contact_side,
        contact_points,
        obs_dropped,
        future_dropped,
    })
}

/// Detections and background matches rendered from a script.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    /// Observation frames `0..T`, in their own pixel coordinates.
    pub observed: Vec<FrameDetections>,
    /// Dense future frames, `frame_index` 1..=n (the last is the contact frame).
    pub future: Vec<FrameDetections>,
    /// Background matches from future frame `j + 1` to frame `j`.
    pub correspondences: Vec<CorrespondenceRecord>,
    /// Active-object track when it moves: resting center, then its center in the contact frame.
    pub active_object_track: Option<Vec<Point>>,
}

impl Observations {
    pub fn clip_record(&self, clip_id: impl Into<String>, frame_size: [f64; 2]) -> ClipRecord {
        ClipRecord {
            clip_id: clip_id.into(),
            frame_size,
            future_frames: self.future.clone(),
            correspondences: self.correspondences.clone(),
            active_object_track: self.active_object_track.clone(),
        }
    }
}

fn detections_at(s: &SceneScript, tau: f64, index: usize, dropped: [bool; 2]) -> FrameDetections {
    let mut hand_boxes = Vec::new();
    for side in Side::BOTH {
        let h = &s.hands[side.index()];
        if h.present && !dropped[side.index()] {
            let c = s.to_frame(tau, h.at(tau));
            hand_boxes.push(HandBox { side, bbox: BBox::centered(c, HAND_BOX, HAND_BOX) });
        }
    }
    let object_boxes = s.objects.iter().map(|o| s.object_box_in_frame(o, tau)).collect();
    FrameDetections { frame_index: index, hand_boxes, object_boxes, contact_candidates: Vec::new() }
}

/// Render detections and background correspondences.
pub fn render_observations(s: &SceneScript) -> Observations {
    let cfg = &s.config;
    let fs = cfg.frame_size;
    let tc = cfg.contact_time();
    let observed = (0..cfg.T).map(|i| detections_at(s, cfg.obs_time(i), i, s.obs_dropped[i])).collect();
    let n_dense = cfg.n_dense();
    let mut future: Vec<FrameDetections> =
        (1..=n_dense).map(|j| detections_at(s, cfg.future_time(j), j, s.future_dropped[j - 1])).collect();
    let motion = s.objects[s.active_object].motion;
    let last = future.last_mut().expect("at least one future frame");
    last.contact_candidates = s.contact_points.iter().map(|&p| s.to_frame(tc, p + motion.unwrap_or_default())).collect();

    let mut rng = rng_for(s.seed, &[0xC0BB]);
    let n_out = (cfg.n_bg as f64 * cfg.outlier_frac).round() as usize;
    let correspondences = (0..n_dense)
        .map(|j| {
            let blocked: Vec<BBox> = {
                let d = &future[j];
                d.hand_boxes.iter().map(|b| b.bbox).chain(d.object_boxes.iter().copied()).collect()
            };
            let mut src = Vec::with_capacity(cfg.n_bg);
            while src.len() < cfg.n_bg {
                let p = unit_point(&mut rng, [0.0, 0.0], [1.0, 1.0], fs);
                if blocked.iter().all(|b| !b.contains(p)) {
                    src.push(p);
                }
            }
            let h = &s.camera_homographies[j];
            let mut dst: Vec<Point> = src.iter().map(|&p| project_point(h, p).expect("finite")).collect();
            for d in dst.iter_mut().take(n_out) {
                *d = unit_point(&mut rng, [0.0, 0.0], [1.0, 1.0], fs);
            }
            CorrespondenceRecord { from: j + 1, to: j, src, dst }
        })
        .collect();

    let active_object_track = motion.map(|_| {
        let o = &s.objects[s.active_object];
        vec![o.rest.center(), s.to_frame(tc, o.center_at(tc, tc))]
    });
    Observations { observed, future, correspondences, active_object_track }
}

/// Fixed random feature map standing in for a pretrained backbone.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub d_feat: usize,
    entity: Vec<f64>,
    global: Vec<f64>,
    identity: Vec<Vec<f64>>,
}

/// Per-frame feature vectors; invisible entities are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub hand: [Vec<f32>; 2],
    pub object: [Vec<f32>; 2],
    pub global: Vec<f32>,
    pub hand_valid: [bool; 2],
    pub object_valid: [bool; 2],
}

impl Featurizer {
    /// Identity slots: 0/1 hands, 2 global, 3.. object kinds.
    pub fn new(seed: u64, d_feat: usize, n_object_kinds: usize) -> Self {
        let mut rng = rng_for(seed, &[0xFEA7]);
        let mut gauss = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
        };
        let entity = gauss(d_feat * STATE_DIM, 2.0);
        let global = gauss(d_feat * GLOBAL_STATE_DIM, 1.0);
        let identity = (0..3 + n_object_kinds).map(|_| gauss(d_feat, 0.5)).collect();
        Self { d_feat, entity, global, identity }
    }

    pub fn for_config(cfg: &SynthConfig) -> Self {
        Self::new(cfg.featurizer_seed, cfg.d_feat, cfg.n_object_kinds)
    }

    fn map(&self, mat: &[f64], state: &[f64], id: usize) -> Vec<f32> {
        let k = state.len();
        (0..self.d_feat)
            .map(|r| {
                let row = &mat[r * k..(r + 1) * k];
                let pre: f64 = row.iter().zip(state).map(|(a, b)| a * b).sum::<f64>() + self.identity[id][r];
                pre.tanh() as f32
            })
            .collect()
    }

    /// Feature of one entity from `[x, y, a, b]` (position plus velocity or size).
    pub fn entity_feature(&self, state: [f64; 4], identity: usize) -> Vec<f32> {
        self.map(&self.entity, &[state[0], state[1], state[2], state[3], 1.0], identity)
    }

    /// Features of observation frame `t` (1-based, `1..=T`).
    pub fn featurize(&self, s: &SceneScript, t: usize) -> FrameFeatures {
        let cfg = &s.config;
        assert!((1..=cfg.T).contains(&t), "observation frame {t} outside 1..={}", cfg.T);
        let i = t - 1;
        let tau = cfg.obs_time(i);
        let fs = cfg.frame_size;
        let tc = cfg.contact_time();
        let zero = || vec![0.0f32; self.d_feat];
        let mut global_state = vec![0.0; GLOBAL_STATE_DIM];

        let mut hand = [zero(), zero()];
        let mut hand_valid = [false; 2];
        for side in Side::BOTH {
            let h = &s.hands[side.index()];
            if !h.present {
                continue;
            }
            let p = s.to_frame(tau, h.at(tau)).normalized(fs);
            let v = h.velocity(tau).normalized(fs);
            let st = [p.x, p.y, v.x, v.y];
            global_state[side.index() * STATE_DIM..side.index() * STATE_DIM + 4].copy_from_slice(&st);
            global_state[side.index() * STATE_DIM + 4] = 1.0;
            if !s.obs_dropped[i][side.index()] {
                hand[side.index()] = self.entity_feature(st, side.index());
                hand_valid[side.index()] = true;
            }
        }
        let mut object = [zero(), zero()];
        let mut object_valid = [false; 2];
        for (k, o) in s.objects.iter().enumerate().take(2) {
            let b = s.object_box_in_frame(o, tau);
            let c = b.center().normalized(fs);
            let st = [c.x, c.y, b.width() / fs[0], b.height() / fs[1]];
            object[k] = self.entity_feature(st, 3 + o.kind);
            object_valid[k] = true;
            let off = (2 + k) * STATE_DIM;
            global_state[off..off + 4].copy_from_slice(&st);
            global_state[off + 4] = 1.0;
        }
        // Gaze rests on the object about to be touched.
        let gaze = s.to_frame(tau, s.objects[s.active_object].center_at(tau, tc)).normalized(fs);
        let cam = s.to_frame(tau, Point::new(fs[0] / 2.0, fs[1] / 2.0)).normalized(fs);
        let n = global_state.len();
        global_state[n - 4..].copy_from_slice(&[gaze.x, gaze.y, cam.x - 0.5, cam.y - 0.5]);
        let global = self.map(&self.global, &global_state, 2);
        FrameFeatures { hand, object, global, hand_valid, object_valid }
    }
}

/// `features.hand[side][t]` etc. as stored in dataset records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFeatures {
    pub hand: Vec<Vec<Vec<f32>>>,
    pub object: Vec<Vec<Vec<f32>>>,
    pub global: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBoxes {
    pub hand: Vec<Vec<[f64; 4]>>,
    pub object: Vec<Vec<[f64; 4]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleValid {
    pub hand: Vec<Vec<bool>>,
    pub object: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLabels {
    pub trajectory: HandTrajectory,
    pub contacts: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub trajectory: HandTrajectory,
    pub contacts: Vec<Point>,
}

/// One training/evaluation record. Boxes are normalized to `[0, 1]` of their
/// own frame; invalid entries hold zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TrainingSample {
    pub id: String,
    pub T: usize,
    pub F: usize,
    pub features: SampleFeatures,
    pub boxes: SampleBoxes,
    pub valid: SampleValid,
    pub gt: SampleLabels,
    pub oracle: OracleLabels,
}

impl TrainingSample {
    pub fn d_feat(&self) -> usize {
        self.features.global.first().map_or(0, Vec::len)
    }

    /// Check shapes and the zero-feature rule for invalid entries.
    pub fn validate(&self) -> Result<()> {
        let (t, d) = (self.T, self.d_feat());
        let bad = |m: String| Err(Error::Schema(format!("sample {}: {m}", self.id)));
        if t == 0 || d == 0 {
            return bad("empty observation window".into());
        }
        if self.features.global.len() != t || self.features.global.iter().any(|v| v.len() != d) {
            return bad("global features are not T x d_feat".into());
        }
        for (name, feats, boxes, valid) in [
            ("hand", &self.features.hand, &self.boxes.hand, &self.valid.hand),
            ("object", &self.features.object, &self.boxes.object, &self.valid.object),
        ] {
            if feats.len() != 2 || boxes.len() != 2 || valid.len() != 2 {
                return bad(format!("{name} entries must come in pairs"));
            }
            for k in 0..2 {
                if feats[k].len() != t || boxes[k].len() != t || valid[k].len() != t {
                    return bad(format!("{name} {k} does not span T frames"));
                }
                for s in 0..t {
                    let f = &feats[k][s];
                    if f.len() != d || f.iter().any(|v| !v.is_finite()) {
                        return bad(format!("{name} {k} frame {s} feature malformed"));
                    }
                    if valid[k][s] == f.iter().all(|&v| v == 0.0) {
                        return bad(format!("{name} {k} frame {s}: validity disagrees with zero feature"));
                    }
                }
            }
        }
        self.gt.trajectory.validate()?;
        if self.gt.trajectory.horizon() != self.F {
            return bad("trajectory horizon differs from F".into());
        }
        Ok(())
    }

    /// Normalized `[lx, ly, rx, ry]` in the last observation frame, defaults for
    /// hands not detected there.
    pub fn last_hands(&self) -> [f64; 4] {
        let t = self.T - 1;
        let mut out = [0.0; 4];
        for side in Side::BOTH {
            let k = side.index();
            let p = if self.valid.hand[k][t] {
                let b = self.boxes.hand[k][t];
                Point::new((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
            } else {
                side.default_location()
            };
            out[2 * k] = p.x;
            out[2 * k + 1] = p.y;
        }
        out
    }

    /// Observed hand centers per side, `None` where undetected.
    pub fn observed_centers(&self, side: Side) -> Vec<Option<Point>> {
        let k = side.index();
        (0..self.T)
            .map(|t| {
                self.valid.hand[k][t].then(|| {
                    let b = self.boxes.hand[k][t];
                    Point::new((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
                })
            })
            .collect()
    }

    /// Keep only the last `t` observation frames.
    pub fn truncate_observations(&self, t: usize) -> Result<TrainingSample> {
        if t == 0 || t > self.T {
            return Err(Error::Config(format!("cannot keep {t} of {} observation frames", self.T)));
        }
        let skip = self.T - t;
        let tail2 = |v: &Vec<Vec<Vec<f32>>>| v.iter().map(|s| s[skip..].to_vec()).collect::<Vec<_>>();
        let mut out = self.clone();
        out.T = t;
        out.features.hand = tail2(&self.features.hand);
        out.features.object = tail2(&self.features.object);
        out.features.global = self.features.global[skip..].to_vec();
        out.boxes.hand = self.boxes.hand.iter().map(|s| s[skip..].to_vec()).collect();
        out.boxes.object = self.boxes.object.iter().map(|s| s[skip..].to_vec()).collect();
        out.valid.hand = self.valid.hand.iter().map(|s| s[skip..].to_vec()).collect();
        out.valid.object = self.valid.object.iter().map(|s| s[skip..].to_vec()).collect();
        Ok(out)
    }
}

fn normalized_box(b: &BBox, fs: [f64; 2]) -> [f64; 4] {
    [b.x1 / fs[0], b.y1 / fs[1], b.x2 / fs[0], b.y2 / fs[1]]
}

/// Render, label and featurize one scene.
pub fn make_sample(id: impl Into<String>, s: &SceneScript, featurizer: &Featurizer) -> Result<TrainingSample> {
    let cfg = &s.config;
    let id = id.into();
    let obs = render_observations(s);
    let labels = label_clip(&obs.clip_record(id.clone(), cfg.frame_size), &cfg.label_config(mix_seed(s.seed, 0x1ABE1)))?;
    let t = cfg.T;
    let mut features = SampleFeatures {
        hand: vec![Vec::with_capacity(t), Vec::with_capacity(t)],
        object: vec![Vec::with_capacity(t), Vec::with_capacity(t)],
        global: Vec::with_capacity(t),
    };
    let mut boxes = SampleBoxes { hand: vec![vec![[0.0; 4]; t]; 2], object: vec![vec![[0.0; 4]; t]; 2] };
    let mut valid = SampleValid { hand: vec![vec![false; t]; 2], object: vec![vec![false; t]; 2] };
    for (i, det) in obs.observed.iter().enumerate() {
        let f = featurizer.featurize(s, i + 1);
        for k in 0..2 {
            features.hand[k].push(f.hand[k].clone());
            features.object[k].push(f.object[k].clone());
            valid.hand[k][i] = f.hand_valid[k];
            valid.object[k][i] = f.object_valid[k];
        }
        features.global.push(f.global);
        for hb in &det.hand_boxes {
            boxes.hand[hb.side.index()][i] = normalized_box(&hb.bbox, cfg.frame_size);
        }
        for (k, ob) in det.object_boxes.iter().enumerate().take(2) {
            boxes.object[k][i] = normalized_box(ob, cfg.frame_size);
        }
    }
    let sample = TrainingSample {
        id,
        T: t,
        F: cfg.F,
        features,
        boxes,
        valid,
        gt: SampleLabels { trajectory: labels.trajectory, contacts: labels.contacts, action: Some(s.action()) },
        oracle: OracleLabels { trajectory: s.true_trajectory(), contacts: s.true_contacts() },
    };
    Ok(sample)
}

/// Generate `n` samples; sample `i` uses scene seed `mix_seed(seed, i)`.
pub fn generate_samples(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let featurizer = Featurizer::for_config(cfg);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = simulate_scene(mix_seed(seed, i as u64), cfg)?;
            make_sample(format!("{i:06}"), &s, &featurizer)
        })
        .collect()
}

/// Write `n` samples to `path`; `.octd` selects the binary container.
pub fn build_dataset(n: usize, seed: u64, cfg: &SynthConfig, path: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let samples = generate_samples(n, seed, cfg)?;
    write_dataset(&samples, path)?;
    Ok(samples)
}

pub fn write_dataset(samples: &[TrainingSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e == "octd") { to_octd(samples)? } else { to_jsonl(samples)? };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn to_jsonl(samples: &[TrainingSample]) -> Result<Vec<u8>> {
    let mut out = BufWriter::new(Vec::new());
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(out.into_inner().map_err(|e| e.into_error())?)
}

/// Read either format, detected from the leading magic bytes.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.starts_with(DATASET_MAGIC) {
        return from_octd(&bytes);
    }
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(&bytes[..]).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TrainingSample = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("dataset line {}: {e}", lineno + 1)))?;
        s.validate()?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Schema("dataset is empty".into()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct OctdManifest {
    d_feat: usize,
    samples: Vec<TrainingSample>,
}

/// Binary container: magic, u64 LE manifest length, JSON manifest (records with
/// empty feature arrays), then all features as f32 LE in record order
/// (hand, object, global).
pub fn to_octd(samples: &[TrainingSample]) -> Result<Vec<u8>> {
    let d_feat = samples.first().map_or(0, TrainingSample::d_feat);
    let mut payload: Vec<u8> = Vec::new();
    let stripped: Vec<TrainingSample> = samples
        .iter()
        .map(|s| {
            for v in s.features.hand.iter().chain(&s.features.object).flatten().chain(&s.features.global) {
                for x in v {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            let mut c = s.clone();
            c.features = SampleFeatures { hand: vec![], object: vec![], global: vec![] };
            c
        })
        .collect();
    let manifest = serde_json::to_vec(&OctdManifest { d_feat, samples: stripped })?;
    let mut out = Vec::with_capacity(13 + manifest.len() + payload.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_octd(bytes: &[u8]) -> Result<Vec<TrainingSample>> {
    let bad = |m: &str| Error::Schema(format!("OCTD1 container: {m}"));
    if !bytes.starts_with(DATASET_MAGIC) || bytes.len() < 13 {
        return Err(bad("missing header"));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(13..13 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: OctdManifest = serde_json::from_slice(body)?;
    let mut floats = bytes[13 + len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let d = manifest.d_feat;
    let mut next = || -> Result<Vec<f32>> {
        let v: Vec<f32> = floats.by_ref().take(d).collect();
        if v.len() != d {
            return Err(bad("truncated payload"));
        }
        Ok(v)
    };
    let mut out = Vec::with_capacity(manifest.samples.len());
    for mut s in manifest.samples {
        let t = s.T;
        let mut grab2 = || -> Result<Vec<Vec<Vec<f32>>>> {
            (0..2).map(|_| (0..t).map(|_| next()).collect()).collect()
        };
        let hand = grab2()?;
        let object = grab2()?;
        let global = (0..t).map(|_| next()).collect::<Result<Vec<_>>>()?;
        s.features = SampleFeatures { hand, object, global };
        s.validate()?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(bad("no samples"));
    }
    Ok(out)
}

/// Mean distance between pipeline labels and generator labels over visible
/// entries, in normalized units.
pub fn label_fidelity(samples: &[TrainingSample]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let (g, o) = (&s.gt.trajectory, &s.oracle.trajectory);
        for t in 0..g.horizon() {
            for side in Side::BOTH {
                if g.is_visible(t, side) && o.is_visible(t, side) {
                    sum += g.point(t, side).dist(o.point(t, side));
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ransac_homography;
    use crate::geometry::Correspondences;

    fn small() -> SynthConfig {
        SynthConfig { d_feat: 32, ..SynthConfig::default() }
    }

    #[test]
    fn scripts_are_reproducible() {
        let cfg = SynthConfig::default();
        assert_eq!(simulate_scene(7, &cfg).unwrap(), simulate_scene(7, &cfg).unwrap());
        assert_ne!(simulate_scene(7, &cfg).unwrap(), simulate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn frozen_camera_gives_identity_chain_and_equal_matches() {
        let cfg = SynthConfig { camera_motion: 0.0, ..small() };
        let s = simulate_scene(3, &cfg).unwrap();
        for h in &s.camera_homographies {
            assert_eq!(*h, Homography::identity());
        }
        for c in render_observations(&s).correspondences {
            assert_eq!(c.src, c.dst);
        }
    }

    #[test]
    fn contact_hand_reaches_the_contact_point() {
        for seed in 0..20 {
            let cfg = SynthConfig { object_motion_prob: 0.5, ..small() };
            let s = simulate_scene(seed, &cfg).unwrap();
            let h = &s.hands[s.contact_side.index()];
            let motion = s.objects[s.active_object].motion.unwrap_or_default();
            assert!(h.at(cfg.contact_time()).dist(s.contact_points[0] + motion) < 1e-6);
            let rest = s.objects[s.active_object].rest;
            assert!(s.contact_points.iter().all(|&p| rest.contains(p)));
        }
    }

    #[test]
    fn clean_matches_recover_camera() {
        let s = simulate_scene(5, &small()).unwrap();
        let obs = render_observations(&s);
        for (c, h0) in obs.correspondences.iter().zip(&s.camera_homographies) {
            let corr = Correspondences::new(c.src.clone(), c.dst.clone()).unwrap();
            let (h, _) = ransac_homography(&corr, 3.0, 2000, 0).unwrap();
            for &p in &c.src {
                assert!(project_point(&h, p).unwrap().dist(project_point(h0, p).unwrap()) < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_rate_is_respected() {
        let cfg = SynthConfig { dropout: 0.3, ..small() };
        let (mut missing, mut total) = (0usize, 0usize);
        for seed in 0..100 {
            let s = simulate_scene(seed, &cfg).unwrap();
            let obs = render_observations(&s);
            for f in obs.observed.iter().chain(&obs.future) {
                for side in Side::BOTH {
                    if s.hands[side.index()].present {
                        total += 1;
                        missing += usize::from(f.hand(side).is_none());
                    }
                }
            }
        }
        let rate = missing as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.1, "rate {rate}");
    }

    #[test]
    fn features_follow_the_padding_rule() {
        let cfg = SynthConfig { dropout: 0.5, single_hand_prob: 0.5, ..small() };
        let fz = Featurizer::for_config(&cfg);
        for seed in 0..10 {
            let s = simulate_scene(seed, &cfg).unwrap();
            for t in 1..=cfg.T {
                let f = fz.featurize(&s, t);
                for k in 0..2 {
                    assert_eq!(!f.hand_valid[k], f.hand[k].iter().all(|&v| v == 0.0));
                }
                assert_eq!(f, fz.featurize(&s, t));
            }
        }
    }

    #[test]
    fn nearby_states_are_distinguishable() {
        let fz = Featurizer::new(1, 1024, 4);
        let a = fz.entity_feature([0.3, 0.4, 0.0, 0.0], 0);
        let b = fz.entity_feature([0.4, 0.4, 0.0, 0.0], 0);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 0.999);
    }

    #[test]
    fn clean_labels_match_the_generator() {
        let cfg = small();
        let samples = generate_samples(10, 1, &cfg).unwrap();
        assert!(label_fidelity(&samples) < 2e-3);
        for s in &samples {
            s.validate().unwrap();
            for (a, b) in s.gt.contacts.iter().zip(&s.oracle.contacts) {
                assert!(a.dist(*b) < 1e-6);
            }
        }
    }

    #[test]
    fn moving_objects_relocate_contacts() {
        let cfg = SynthConfig { object_motion_prob: 1.0, ..small() };
        for s in generate_samples(5, 2, &cfg).unwrap() {
            for (a, b) in s.gt.contacts.iter().zip(&s.oracle.contacts) {
                assert!(a.dist(*b) < 1e-6, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn both_formats_round_trip() {
        let samples = generate_samples(2, 4, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["d.jsonl", "d.octd"] {
            let p = dir.path().join(name);
            write_dataset(&samples, &p).unwrap();
            assert_eq!(read_dataset(&p).unwrap(), samples);
        }
    }
}
