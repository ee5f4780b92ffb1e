//! Training, stochastic forecasting, heatmap rasterization, baselines and
//! the evaluation loop.

use nalgebra::{Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::heads::{
    anticipation_graph, anticipation_logits, hand_loss_graph, hand_targets, init_anticipation, marginalize,
    normal_tensor, object_condition_graph, object_loss_graph, sample_contact, sample_hand, trajectory_condition,
};
use crate::metrics::{ade, auc_judd, fde, min_of_k, nss, sim, AffordanceHeatmap, EvalReport, SampleMetrics};
use crate::oct::{check_weights, decode_step, decoder_graph, encode_inputs, encode_inputs_graph, init_weights, Dropout, ModelConfig};
use crate::rng::{mix_seed, rng_for};
use crate::synthdata::TrainingSample;
use crate::tensor::Tensor;
use crate::tokens::{check_ablation, TokenCategory, TokenInputs};
use crate::types::{HandTrajectory, Point, Side};
use crate::weights::Weights;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Overrides the model's `lambda_obj` when set.
    pub lambda_obj: Option<f64>,
    pub ablate: Vec<TokenCategory>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch: 32, epochs: 35, warmup_epochs: 5, seed: 0, lambda_obj: None, ablate: Vec::new() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.lambda_obj.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("lambda_obj must be non-negative".into()));
        }
        check_ablation(&self.ablate)
    }
}

pub fn total_loss(l_h: f64, l_o: f64, lambda: f64) -> f64 {
    l_h + lambda * l_o
}

/// Linear warmup to `cfg.lr` over the warmup share of `total_steps`, then
/// cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = (total_steps as f64 * cfg.warmup_epochs as f64 / cfg.epochs as f64).round() as usize;
    let step = step.min(total_steps);
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if total_steps == warm {
        return cfg.lr;
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_H")]
    pub l_h: f64,
    #[serde(rename = "L_O")]
    pub l_o: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub weights: Weights,
    pub log: Vec<EpochLog>,
}

/// Everything about one sample that stays fixed during training.
struct Prepared {
    inputs: TokenInputs,
    /// `F × 4`: `h_T, h_{T+1} … h_{T+F-1}` (teacher forcing).
    history: Tensor,
    target: Tensor,
    vis: Tensor,
    traj: Tensor,
    contacts: Vec<Point>,
}

fn prepare(s: &TrainingSample, ablate: &[TokenCategory]) -> Result<Prepared> {
    let gt = &s.gt.trajectory;
    let last = s.last_hands();
    let mut rows = vec![last.to_vec()];
    rows.extend((0..s.F - 1).map(|k| gt.hands_or_default(k).to_vec()));
    let (target, vis) = hand_targets(gt);
    Ok(Prepared {
        inputs: TokenInputs::from_sample(s, ablate)?,
        history: Tensor::from_rows(&rows),
        target,
        vis,
        traj: Tensor::row_vector(trajectory_condition(last, gt)),
        contacts: s.gt.contacts.clone(),
    })
}

/// Samples must agree with the model's window sizes and feature width.
pub fn check_dataset(samples: &[TrainingSample], cfg: &ModelConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Schema("dataset is empty".into()));
    }
    for s in samples {
        s.validate()?;
        if s.T != cfg.T || s.F != cfg.F || s.d_feat() != cfg.d_feat {
            return Err(Error::Schema(format!(
                "sample {} has T={}, F={}, d_feat={} but the model expects T={}, F={}, d_feat={}",
                s.id,
                s.T,
                s.F,
                s.d_feat(),
                cfg.T,
                cfg.F,
                cfg.d_feat
            )));
        }
    }
    Ok(())
}

struct StepResult {
    l_h: f64,
    l_o: f64,
    grads: Vec<(usize, Tensor)>,
}

fn sample_step(
    p: &Prepared,
    w: &Weights,
    cfg: &ModelConfig,
    lambda: f64,
    scale: f64,
    seed: u64,
    path: [u64; 2],
) -> Result<StepResult> {
    let mut rng = rng_for(seed, &[path[0], path[1], 2]);
    let mut drop = Dropout::train(cfg.dropout, rng_for(seed, &[path[0], path[1], 1]));
    let mut g = Graph::new();
    let enc = encode_inputs_graph(&mut g, w, cfg, &p.inputs, &mut drop)?;
    let x = decoder_graph(&mut g, w, cfg, &p.history, &enc, &mut drop)?;
    let hand_noise = normal_tensor(&mut rng, cfg.F, cfg.latent_dim);
    let l_h = hand_loss_graph(&mut g, w, x, &p.target, &p.vis, &hand_noise);
    let mut root = l_h;
    let mut l_o_val = 0.0;
    if !p.contacts.is_empty() && lambda > 0.0 {
        let o = p.contacts[rng.random_range(0..p.contacts.len())];
        let obj_noise = normal_tensor(&mut rng, 1, cfg.latent_dim);
        let cond = object_condition_graph(&mut g, w, cfg.conditioning, enc.z_gt, &p.traj)?;
        let l_o = object_loss_graph(&mut g, w, cond, &Tensor::row_vector(vec![o.x, o.y]), &obj_noise);
        l_o_val = g.scalar(l_o);
        let weighted = g.scale(l_o, lambda);
        root = g.add(root, weighted);
    }
    let root = g.scale(root, scale);
    let grads = g.backward(root).param_grads(&g);
    Ok(StepResult { l_h: g.scalar(l_h), l_o: l_o_val, grads })
}

/// Adam state laid out like the weight store.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(w: &Weights) -> Self {
        Self { m: w.zeros_like(), v: w.zeros_like(), t: 0 }
    }

    /// One update; parameters are rounded to `f32` afterwards so a saved
    /// checkpoint reloads bit-exactly. Returns `false` and leaves `w` and the
    /// moments untouched if any updated parameter would be non-finite.
    #[must_use]
    pub fn step(&mut self, w: &mut Weights, grads: &[Tensor], lr: f64) -> bool {
        let t = self.t + 1;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        let update = |m: f64, v: f64, g: f64, p: f64| {
            let m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let p = (p - lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS)) as f32 as f64;
            (m, v, p)
        };
        for (i, g) in grads.iter().enumerate() {
            let p = w.tensor_mut(i);
            for k in 0..g.data.len() {
                if !update(self.m[i].data[k], self.v[i].data[k], g.data[k], p.data[k]).2.is_finite() {
                    return false;
                }
            }
        }
        self.t = t;
        for (i, g) in grads.iter().enumerate() {
            let p = w.tensor_mut(i);
            for k in 0..g.data.len() {
                let (m, v, q) = update(self.m[i].data[k], self.v[i].data[k], g.data[k], p.data[k]);
                (self.m[i].data[k], self.v[i].data[k], p.data[k]) = (m, v, q);
            }
        }
        true
    }
}

/// Train from freshly initialized weights.
pub fn train(dataset: &[TrainingSample], cfg: &TrainConfig, model: &ModelConfig) -> Result<TrainOutput> {
    model.validate()?;
    let w = init_weights(model, cfg.seed)?;
    train_from(w, dataset, cfg, model, |_| {})
}

/// Train starting from `w`, reporting each epoch to `on_epoch`.
pub fn train_from(
    mut w: Weights,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    model: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    model.conditioning.check()?;
    check_dataset(dataset, model)?;
    check_weights(model, &w)?;
    let lambda = cfg.lambda_obj.unwrap_or(model.lambda_obj);
    let prepared: Vec<Prepared> = dataset.iter().map(|s| prepare(s, &cfg.ablate)).collect::<Result<_>>()?;
    let n = prepared.len();
    let batch = cfg.batch.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(&w);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[epoch as u64, u64::MAX]));
        let (mut sum_h, mut sum_o) = (0.0, 0.0);
        let mut lr = 0.0;
        for chunk in order.chunks(batch) {
            let scale = 1.0 / chunk.len() as f64;
            let results: Vec<StepResult> = chunk
                .par_iter()
                .map(|&i| sample_step(&prepared[i], &w, model, lambda, scale, cfg.seed, [epoch as u64, i as u64]))
                .collect::<Result<_>>()?;
            let mut acc = w.zeros_like();
            let mut finite = true;
            for r in &results {
                sum_h += r.l_h;
                sum_o += r.l_o;
                finite &= r.l_h.is_finite() && r.l_o.is_finite();
                for (idx, g) in &r.grads {
                    acc[*idx].add_assign(g);
                }
            }
            if !finite || acc.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, last_good: Box::new(w) });
            }
            step += 1;
            lr = lr_at(step, total, cfg);
            if !adam.step(&mut w, &acc, lr) {
                return Err(Error::NonFiniteLoss { epoch, last_good: Box::new(w) });
            }
        }
        let (l_h, l_o) = (sum_h / n as f64, sum_o / n as f64);
        let entry = EpochLog { epoch, lr, l_h, l_o, total: total_loss(l_h, l_o, lambda) };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutput { weights: w, log })
}

/// Log as JSON lines.
pub fn log_to_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastOptions {
    /// Rollouts; `None` uses the model's `K_samples`.
    pub k: Option<usize>,
    /// Contact draws per rollout; `None` uses the model's `N_contacts`.
    pub n_contacts: Option<usize>,
    pub sigma: f64,
    pub grid: [usize; 2],
    /// Replace every latent draw with zero.
    pub zero_noise: bool,
    pub ablate: Vec<TokenCategory>,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self { k: None, n_contacts: None, sigma: 0.05, grid: [32, 32], zero_noise: false, ablate: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    pub trajectories: Vec<HandTrajectory>,
    pub contacts: Vec<Vec<Point>>,
    pub heatmap: AffordanceHeatmap,
}

/// Output layout `{trajectories:[K][F][2][2], contacts:[K][N][2], heatmap}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastJson {
    pub trajectories: Vec<Vec<[Point; 2]>>,
    pub contacts: Vec<Vec<Point>>,
    pub heatmap: AffordanceHeatmap,
}

impl ForecastResult {
    pub fn to_json(&self) -> ForecastJson {
        ForecastJson {
            trajectories: self
                .trajectories
                .iter()
                .map(|t| (0..t.horizon()).map(|s| [t.left[s], t.right[s]]).collect())
                .collect(),
            contacts: self.contacts.clone(),
            heatmap: self.heatmap.clone(),
        }
    }
}

fn draw(rng: &mut impl Rng, n: usize, zero: bool) -> Vec<f64> {
    if zero {
        vec![0.0; n]
    } else {
        normal_tensor(rng, 1, n).data
    }
}

/// K stochastic rollouts sharing one encoder pass, their contact draws and
/// the heatmap rasterized from all contacts.
pub fn forecast(sample: &TrainingSample, w: &Weights, cfg: &ModelConfig, seed: u64, opts: &ForecastOptions) -> Result<ForecastResult> {
    cfg.conditioning.check()?;
    let k = opts.k.unwrap_or(cfg.K_samples);
    let n_contacts = opts.n_contacts.unwrap_or(cfg.N_contacts);
    if k == 0 || n_contacts == 0 {
        return Err(Error::Config("forecast needs at least one rollout and one contact".into()));
    }
    let inputs = TokenInputs::from_sample(sample, &opts.ablate)?;
    let enc = encode_inputs(&inputs, cfg, w)?;
    let last = sample.last_hands();
    let rollouts: Vec<(HandTrajectory, Vec<Point>)> = (0..k)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, &[r as u64]);
            let mut history = vec![last];
            let (mut left, mut right) = (Vec::with_capacity(cfg.F), Vec::with_capacity(cfg.F));
            for _ in 0..cfg.F {
                let x = decode_step(&history, &enc, cfg, w)?;
                let h = sample_hand(&x, w, &draw(&mut rng, cfg.latent_dim, opts.zero_noise))?;
                history.push([h[0].x, h[0].y, h[1].x, h[1].y]);
                left.push(h[0]);
                right.push(h[1]);
            }
            let traj = HandTrajectory::fully_visible(left, right);
            let contacts = (0..n_contacts)
                .map(|_| {
                    let z = draw(&mut rng, cfg.latent_dim, opts.zero_noise);
                    sample_contact(&enc.z_gt, last, &traj, cfg.conditioning, w, &z).map(Point::clamped_unit)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((traj, contacts))
        })
        .collect::<Result<_>>()?;
    let all: Vec<Point> = rollouts.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let heatmap = rasterize_heatmap(&all, opts.sigma, (opts.grid[0], opts.grid[1]))?;
    let (trajectories, contacts) = rollouts.into_iter().unzip();
    Ok(ForecastResult { trajectories, contacts, heatmap })
}

/// Sum of isotropic Gaussians at the cell centers, normalized to sum 1.
pub fn rasterize_heatmap(points: &[Point], sigma: f64, grid: (usize, usize)) -> Result<AffordanceHeatmap> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = grid;
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("heatmap grid is empty".into()));
    }
    if let Some(p) = points.iter().find(|p| !(p.is_finite() && (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y))) {
        return Err(Error::OutOfRange(if (0.0..=1.0).contains(&p.x) { p.y } else { p.x }));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            data[r * w + c] = points.iter().map(|p| (-((p.x - cx).powi(2) + (p.y - cy).powi(2)) * inv).exp()).sum();
        }
    }
    let total: f64 = data.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZero);
    }
    data.iter_mut().for_each(|v| *v /= total);
    AffordanceHeatmap::new(h, w, data)
}

pub fn center_baseline(grid: (usize, usize), sigma: f64) -> Result<AffordanceHeatmap> {
    rasterize_heatmap(&[Point::new(0.5, 0.5)], sigma, grid)
}

pub const KALMAN_Q: f64 = 1e-4;
pub const KALMAN_R: f64 = 1e-2;

/// Constant-velocity filter over one hand's observed centers (unit time
/// step per observation frame, gaps predicted without update), then `f`
/// open-loop predictions.
pub fn kalman_track(observed: &[Option<Point>], f: usize) -> Result<Vec<Point>> {
    let first = observed.iter().position(Option::is_some).ok_or(Error::InsufficientObservations)?;
    if observed.iter().flatten().count() < 2 {
        return Err(Error::InsufficientObservations);
    }
    let a = Matrix4::new(1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let hm = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let q = Matrix4::identity() * KALMAN_Q;
    let r = nalgebra::Matrix2::identity() * KALMAN_R;
    let p0 = observed[first].expect("first observation");
    let mut x = Vector4::new(p0.x, p0.y, 0.0, 0.0);
    let mut p = Matrix4::from_diagonal(&Vector4::new(KALMAN_R, KALMAN_R, 1.0, 1.0));
    for obs in &observed[first + 1..] {
        x = a * x;
        p = a * p * a.transpose() + q;
        if let Some(o) = obs {
            let s = hm * p * hm.transpose() + r;
            let s_inv = s.try_inverse().ok_or(Error::InsufficientObservations)?;
            let gain: Matrix4x2<f64> = p * hm.transpose() * s_inv;
            let innov = Vector2::new(o.x, o.y) - hm * x;
            x += gain * innov;
            p = (Matrix4::identity() - gain * hm) * p;
        }
    }
    Ok((0..f)
        .map(|_| {
            x = a * x;
            Point::new(x[0], x[1])
        })
        .collect())
}

/// Kalman forecast for both hands. A hand never observed is left invisible at
/// its default location; a hand seen once is an error.
pub fn kalman_baseline(observed: [&[Option<Point>]; 2], f: usize) -> Result<HandTrajectory> {
    let mut sides = Vec::with_capacity(2);
    for (k, obs) in observed.iter().enumerate() {
        let side = Side::BOTH[k];
        if obs.iter().all(Option::is_none) {
            sides.push((vec![side.default_location(); f], false));
        } else {
            sides.push((kalman_track(obs, f)?, true));
        }
    }
    if sides.iter().all(|s| !s.1) {
        return Err(Error::InsufficientObservations);
    }
    let visible = vec![[sides[0].1, sides[1].1]; f];
    let right = sides.pop().expect("two sides").0;
    let left = sides.pop().expect("two sides").0;
    HandTrajectory::new(left, right, visible)
}

pub fn kalman_for_sample(s: &TrainingSample) -> Result<HandTrajectory> {
    let (l, r) = (s.observed_centers(Side::Left), s.observed_centers(Side::Right));
    kalman_baseline([&l, &r], s.F)
}

/// Ground-truth cells used by AUC-Judd: the cells of the rasterized
/// ground-truth heatmap at or above half its peak.
pub const AUC_GT_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub forecast: ForecastOptions,
    pub seed: u64,
    pub baselines: bool,
}

/// Heatmap metrics of `p` against ground-truth contacts.
pub fn heatmap_metrics(p: &AffordanceHeatmap, contacts: &[Point], sigma: f64) -> Result<(f64, f64, f64)> {
    let gt = rasterize_heatmap(contacts, sigma, (p.h, p.w))?;
    let cells: Vec<(usize, usize)> = contacts.iter().map(|&c| gt.cell_of(c)).collect();
    Ok((sim(p, &gt)?, auc_judd(p, &gt.cells_above(AUC_GT_FRACTION))?, nss(p, &cells)?))
}

fn eval_sample(i: usize, s: &TrainingSample, w: &Weights, cfg: &ModelConfig, opts: &EvalOptions) -> Result<SampleMetrics> {
    let fc = forecast(s, w, cfg, mix_seed(opts.seed, i as u64), &opts.forecast)?;
    let gt = &s.gt.trajectory;
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoVisibleGroundTruth) => Ok(None),
        Err(e) => Err(e),
    };
    let mut m = SampleMetrics {
        id: s.id.clone(),
        ade_min: defined(min_of_k(&fc.trajectories, gt, ade))?,
        fde_min: defined(min_of_k(&fc.trajectories, gt, fde))?,
        ade_first: defined(ade(&fc.trajectories[0], gt))?,
        ..SampleMetrics::default()
    };
    let contacts: Vec<Point> = s.gt.contacts.iter().map(|p| p.clamped_unit()).collect();
    if !contacts.is_empty() {
        let (a, b, c) = heatmap_metrics(&fc.heatmap, &contacts, opts.forecast.sigma)?;
        (m.sim, m.auc_j, m.nss) = (Some(a), Some(b), Some(c));
    }
    if opts.baselines {
        match kalman_for_sample(s) {
            Ok(k) => {
                m.kalman_ade = defined(ade(&k, gt))?;
                m.kalman_fde = defined(fde(&k, gt))?;
            }
            Err(Error::InsufficientObservations) => {}
            Err(e) => return Err(e),
        }
        if !contacts.is_empty() {
            let grid = (opts.forecast.grid[0], opts.forecast.grid[1]);
            let center = center_baseline(grid, opts.forecast.sigma)?;
            let (a, b, c) = heatmap_metrics(&center, &contacts, opts.forecast.sigma)?;
            (m.center_sim, m.center_auc_j, m.center_nss) = (Some(a), Some(b), Some(c));
        }
    }
    Ok(m)
}

/// Forecast and score every sample; results are ordered like `samples`.
pub fn evaluate(samples: &[TrainingSample], w: &Weights, cfg: &ModelConfig, opts: &EvalOptions) -> Result<EvalReport> {
    check_dataset(samples, cfg)?;
    check_weights(cfg, w)?;
    let per: Vec<SampleMetrics> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| eval_sample(i, s, w, cfg, opts))
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_samples(opts.forecast.k.unwrap_or(cfg.K_samples), per, opts.baselines))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnticipationConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of samples (taken from the end) held out for the accuracy report.
    pub test_fraction: f64,
}

impl Default for AnticipationConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 200, seed: 0, test_fraction: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnticipationReport {
    pub n_train: usize,
    pub n_test: usize,
    pub verb_top5: f64,
    pub noun_top5: f64,
    pub action_top5: f64,
    pub action_top1: f64,
}

pub struct AnticipationOutput {
    pub head: Weights,
    pub report: AnticipationReport,
}

/// Action vocabulary: verb = the contacting side, noun = the object kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub n_verbs: usize,
    pub n_nouns: usize,
}

impl ActionSpace {
    pub fn from_samples(samples: &[TrainingSample]) -> Result<Self> {
        let mut n_verbs = 0;
        let mut n_nouns = 0;
        for s in samples {
            let [v, n] = s.gt.action.ok_or_else(|| Error::Schema(format!("sample {} lacks an action label", s.id)))?;
            n_verbs = n_verbs.max(v + 1);
            n_nouns = n_nouns.max(n + 1);
        }
        Ok(Self { n_verbs, n_nouns })
    }

    pub fn n_actions(&self) -> usize {
        self.n_verbs * self.n_nouns
    }

    pub fn action_id(&self, verb: usize, noun: usize) -> usize {
        verb * self.n_nouns + noun
    }

    pub fn verb_map(&self) -> Vec<usize> {
        (0..self.n_actions()).map(|a| a / self.n_nouns).collect()
    }

    pub fn noun_map(&self) -> Vec<usize> {
        (0..self.n_actions()).map(|a| a % self.n_nouns).collect()
    }
}

fn in_top5(scores: &[f64], target: usize) -> bool {
    let better = scores.iter().filter(|&&s| s > scores[target]).count();
    better < 5
}

/// Train the anticipation MLP on `Z_gT` from a frozen encoder and report
/// top-k accuracies on the held-out tail of `samples`.
pub fn train_anticipation(
    samples: &[TrainingSample],
    encoder: &Weights,
    model: &ModelConfig,
    cfg: &AnticipationConfig,
) -> Result<AnticipationOutput> {
    check_dataset(samples, model)?;
    check_weights(model, encoder)?;
    let space = ActionSpace::from_samples(samples)?;
    if !(0.0..1.0).contains(&cfg.test_fraction) || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("anticipation needs lr > 0, epochs ≥ 1 and test_fraction in [0, 1)".into()));
    }
    let feats: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| Ok(encode_inputs(&TokenInputs::from_sample(s, &[])?, model, encoder)?.z_gt))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            let [v, n] = s.gt.action.expect("checked above");
            space.action_id(v, n)
        })
        .collect();
    let n_test = ((samples.len() as f64) * cfg.test_fraction).round() as usize;
    let n_train = samples.len() - n_test;
    if n_train == 0 {
        return Err(Error::Config("no training samples left for anticipation".into()));
    }
    let mut head = init_anticipation(model.D, space.n_actions(), cfg.seed);
    let mut adam = Adam::new(&head);
    for epoch in 0..cfg.epochs {
        let mut acc = head.zeros_like();
        for i in 0..n_train {
            let mut g = Graph::new();
            let z = g.constant(Tensor::row_vector(feats[i].clone()));
            let logits = anticipation_graph(&mut g, &head, z);
            let loss = g.softmax_xent(logits, labels[i]);
            let loss = g.scale(loss, 1.0 / n_train as f64);
            g.backward(loss).accumulate_params(&g, &mut acc);
        }
        if acc.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, last_good: Box::new(head) });
        }
        if !adam.step(&mut head, &acc, cfg.lr) {
            return Err(Error::NonFiniteLoss { epoch, last_good: Box::new(head) });
        }
    }
    let eval: Vec<usize> = if n_test == 0 { (0..n_train).collect() } else { (n_train..samples.len()).collect() };
    let (verb_map, noun_map) = (space.verb_map(), space.noun_map());
    let (mut v5, mut n5, mut a5, mut a1) = (0usize, 0usize, 0usize, 0usize);
    for &i in &eval {
        let logits = anticipation_logits(&feats[i], &head)?;
        let (verbs, nouns) = marginalize(&logits, &verb_map, &noun_map)?;
        let y = labels[i];
        v5 += in_top5(&verbs, verb_map[y]) as usize;
        n5 += in_top5(&nouns, noun_map[y]) as usize;
        a5 += in_top5(&logits, y) as usize;
        a1 += (logits.iter().filter(|&&s| s >= logits[y]).count() == 1) as usize;
    }
    let frac = |c: usize| c as f64 / eval.len() as f64;
    Ok(AnticipationOutput {
        head,
        report: AnticipationReport {
            n_train,
            n_test,
            verb_top5: frac(v5),
            noun_top5: frac(n5),
            action_top5: frac(a5),
            action_top1: frac(a1),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_samples, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 5.0, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { lr: 1e-3, epochs: 10, warmup_epochs: 2, ..TrainConfig::default() };
        let total = 100;
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert_eq!(lr_at(20, total, &cfg), 1e-3);
        assert!(lr_at(total, total, &cfg) < 1e-8 * cfg.lr);
        assert!((lr_at(10, total, &cfg) - 5e-4).abs() < 1e-15);
        assert!((lr_at(60, total, &cfg) - 5e-4).abs() < 1e-12);
        for s in 20..total {
            assert!(lr_at(s + 1, total, &cfg) <= lr_at(s, total, &cfg));
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { warmup_epochs: 35, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        let all = vec![TokenCategory::Hand, TokenCategory::Object, TokenCategory::Global];
        assert!(matches!(TrainConfig { ablate: all, ..TrainConfig::default() }.validate(), Err(Error::AllTokensAblated)));
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "ablate": ["hand"]}"#).unwrap();
        assert_eq!((cfg.lr, cfg.epochs, cfg.ablate), (0.01, 35, vec![TokenCategory::Hand]));
    }

    #[test]
    fn raster_cases() {
        let one = rasterize_heatmap(&[Point::new(0.5, 0.5)], 0.05, (31, 31)).unwrap();
        assert_eq!(one.argmax(), (15, 15));
        assert!((one.sum() - 1.0).abs() < 1e-12);
        let p = Point::new(0.3, 0.7);
        assert_eq!(rasterize_heatmap(&[p, p], 0.05, (8, 8)).unwrap(), rasterize_heatmap(&[p], 0.05, (8, 8)).unwrap());
        assert!(matches!(rasterize_heatmap(&[], 0.05, (8, 8)), Err(Error::EmptyPoints)));
        let pts = [Point::new(0.1, 0.9), Point::new(0.6, 0.2), Point::new(0.45, 0.5)];
        let hm = rasterize_heatmap(&pts, 0.07, (5, 7)).unwrap();
        let mut raw = vec![0.0; 35];
        for r in 0..5 {
            for c in 0..7 {
                for q in &pts {
                    let (cx, cy) = ((c as f64 + 0.5) / 7.0, (r as f64 + 0.5) / 5.0);
                    raw[r * 7 + c] += (-((q.x - cx).powi(2) + (q.y - cy).powi(2)) / (2.0 * 0.07 * 0.07)).exp();
                }
            }
        }
        let z: f64 = raw.iter().sum();
        assert!(hm.data.iter().zip(&raw).all(|(a, b)| (a - b / z).abs() < 1e-9));
        let c = center_baseline((9, 9), 0.1).unwrap();
        assert_eq!(c.argmax(), (4, 4));
    }

    proptest! {
        #[test]
        fn raster_ignores_point_order(pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..6)) {
            let a: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let mut b = a.clone();
            b.reverse();
            let (ha, hb) = (rasterize_heatmap(&a, 0.05, (6, 6)).unwrap(), rasterize_heatmap(&b, 0.05, (6, 6)).unwrap());
            prop_assert!(ha.data.iter().zip(&hb.data).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn kalman_cases() {
        let line: Vec<Option<Point>> = (0..30).map(|i| Some(Point::new(0.1 * i as f64, 0.5))).collect();
        let pred = kalman_track(&line, 3).unwrap();
        for (k, p) in pred.iter().enumerate() {
            assert!((p.x - 0.1 * (30 + k) as f64).abs() < 1e-3 && (p.y - 0.5).abs() < 1e-3, "{p:?}");
        }
        let still = vec![Some(Point::new(0.4, 0.6)); 10];
        assert!(kalman_track(&still, 4).unwrap().iter().all(|p| p.dist(Point::new(0.4, 0.6)) < 1e-3));
        let once = [None, Some(Point::new(0.4, 0.6)), None];
        assert!(matches!(kalman_track(&once, 2), Err(Error::InsufficientObservations)));
        let none = [None, None, None];
        let t = kalman_baseline([&none, &line[..3]], 2).unwrap();
        assert_eq!(t.visible, vec![[false, true]; 2]);
        assert!(kalman_baseline([&none, &none], 2).is_err());
    }

    fn tiny() -> (Vec<TrainingSample>, ModelConfig) {
        let sc = SynthConfig { d_feat: 8, ..SynthConfig::default() };
        let samples = generate_samples(2, 5, &sc).unwrap();
        let cfg = ModelConfig {
            D: 16,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            latent_dim: 4,
            d_feat: 8,
            K_samples: 3,
            N_contacts: 2,
            ..ModelConfig::default()
        };
        (samples, cfg)
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (samples, cfg) = tiny();
        let tc = TrainConfig { lr: 1e-3, epochs: 3, warmup_epochs: 1, batch: 2, seed: 4, ..TrainConfig::default() };
        let a = train(&samples, &tc, &cfg).unwrap();
        let b = train(&samples, &tc, &cfg).unwrap();
        assert_eq!(a.weights.to_bytes(), b.weights.to_bytes());
        assert_eq!(a.log.len(), 3);
        let text = log_to_jsonl(&a.log).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "lr", "L_H", "L_O", "total"] {
            assert!(first.get(key).is_some());
        }
        let all = TrainConfig { ablate: vec![TokenCategory::Hand, TokenCategory::Object, TokenCategory::Global], ..tc };
        assert!(matches!(train(&samples, &all, &cfg), Err(Error::AllTokensAblated)));
    }

    #[test]
    fn forecast_is_reproducible_and_shaped() {
        let (samples, cfg) = tiny();
        let w = init_weights(&cfg, 1).unwrap();
        let opts = ForecastOptions::default();
        let a = forecast(&samples[0], &w, &cfg, 9, &opts).unwrap();
        assert_eq!(a, forecast(&samples[0], &w, &cfg, 9, &opts).unwrap());
        assert_eq!(a.trajectories.len(), 3);
        assert!(a.contacts.iter().all(|c| c.len() == 2));
        assert!((a.heatmap.sum() - 1.0).abs() < 1e-9);
        let json = serde_json::to_value(a.to_json()).unwrap();
        assert_eq!(json["trajectories"][0][0][1].as_array().unwrap().len(), 2);
        assert_eq!(json["heatmap"]["h"], 32);

        // Zero noise and K = 1 is the greedy rollout.
        let greedy = ForecastOptions { k: Some(1), zero_noise: true, ..ForecastOptions::default() };
        let f1 = forecast(&samples[0], &w, &cfg, 1, &greedy).unwrap();
        assert_eq!(f1, forecast(&samples[0], &w, &cfg, 2, &greedy).unwrap());
        let enc = encode_inputs(&TokenInputs::from_sample(&samples[0], &[]).unwrap(), &cfg, &w).unwrap();
        let mut hist = vec![samples[0].last_hands()];
        for s in 0..cfg.F {
            let x = decode_step(&hist, &enc, &cfg, &w).unwrap();
            let h = sample_hand(&x, &w, &vec![0.0; cfg.latent_dim]).unwrap();
            assert_eq!([f1.trajectories[0].left[s], f1.trajectories[0].right[s]], h);
            hist.push([h[0].x, h[0].y, h[1].x, h[1].y]);
        }
    }

    #[test]
    fn truncated_window_equals_shorter_model() {
        let (samples, cfg) = tiny();
        let short = samples[0].truncate_observations(4).unwrap();
        let cfg4 = ModelConfig { T: 4, ..cfg.clone() };
        let w = init_weights(&cfg, 2).unwrap();
        let opts = ForecastOptions { k: Some(2), ..ForecastOptions::default() };
        let a = forecast(&short, &w, &cfg4, 3, &opts).unwrap();
        let b = forecast(&short, &w, &cfg4, 3, &opts).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&[short], &w, &cfg, &EvalOptions::default()).is_err());
    }

    #[test]
    fn evaluation_report_is_consistent() {
        let (samples, cfg) = tiny();
        let w = init_weights(&cfg, 3).unwrap();
        let opts = EvalOptions { baselines: true, ..EvalOptions::default() };
        let rep = evaluate(&samples, &w, &cfg, &opts).unwrap();
        assert_eq!(rep.n, 2);
        for s in &rep.per_sample {
            if let (Some(m), Some(f)) = (s.ade_min, s.ade_first) {
                assert!(m <= f);
            }
        }
        assert!(rep.baselines.is_some());
        assert_eq!(rep, evaluate(&samples, &w, &cfg, &opts).unwrap());
    }
}
