//! Hand and object C-VAE heads, their losses, and the action-anticipation MLP.
//!
//! Both C-VAEs use a single affine encoder `[x; c] → (mu, log_var)` and a
//! single affine decoder `[z; c] → x̂`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::oct::{insert_linear, HAND_DIM};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::types::{HandTrajectory, Point, Side};
use crate::weights::Weights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningMode {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "H_GIVEN_O")]
    HGivenO,
    #[default]
    #[serde(rename = "O_GIVEN_H")]
    OGivenH,
}

impl ConditioningMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "NONE",
            Self::HGivenO => "H_GIVEN_O",
            Self::OGivenH => "O_GIVEN_H",
        }
    }

    /// Joint decoding with the object first is reserved but not implemented.
    pub fn check(self) -> Result<()> {
        match self {
            Self::HGivenO => Err(Error::UnsupportedMode(self.name())),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(Self::None),
            "H_GIVEN_O" => Ok(Self::HGivenO),
            "O_GIVEN_H" => Ok(Self::OGivenH),
            _ => Err(Error::Config(format!("unknown conditioning mode `{s}`"))),
        }
    }
}

/// Which C-VAE a call refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Hand,
    Object,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Hand => "hand",
            Head::Object => "obj",
        }
    }

    fn names(self) -> [String; 4] {
        let p = self.prefix();
        [format!("{p}.enc.w"), format!("{p}.enc.b"), format!("{p}.dec.w"), format!("{p}.dec.b")]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Latent handles on a graph; `rows × latent_dim` each.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_var: Var,
}

pub fn cvae_encode_graph<'w>(g: &mut Graph<'w>, w: &'w Weights, head: Head, x: Var, c: Var) -> LatentVars {
    let [ew, eb, ..] = head.names();
    let xc = g.concat_cols(&[x, c]);
    let (wv, bv) = (g.param(w, &ew), g.param(w, &eb));
    let out = g.affine(xc, wv, bv);
    let l = g.shape(out).1 / 2;
    LatentVars { mu: g.slice_cols(out, 0, l), log_var: g.slice_cols(out, l, l) }
}

pub fn cvae_decode_graph<'w>(g: &mut Graph<'w>, w: &'w Weights, head: Head, z: Var, c: Var) -> Var {
    let [.., dw, db] = head.names();
    let zc = g.concat_cols(&[z, c]);
    let (wv, bv) = (g.param(w, &dw), g.param(w, &db));
    g.affine(zc, wv, bv)
}

/// `mu + exp(log_var / 2) * noise`.
pub fn reparameterize_graph(g: &mut Graph<'_>, lat: LatentVars, noise: &Tensor) -> Var {
    let half = g.scale(lat.log_var, 0.5);
    let sigma = g.exp(half);
    let n = g.constant(noise.clone());
    let s = g.mul(sigma, n);
    g.add(lat.mu, s)
}

/// KL to the standard normal, summed over latent dims and averaged over rows.
pub fn kl_graph(g: &mut Graph<'_>, lat: LatentVars) -> Var {
    let (rows, cols) = g.shape(lat.mu);
    let mu2 = g.mul(lat.mu, lat.mu);
    let var = g.exp(lat.log_var);
    let a = g.add(mu2, var);
    let b = g.sub(a, lat.log_var);
    let ones = g.constant(Tensor::filled(rows, cols, 1.0));
    let c = g.sub(b, ones);
    let s = g.sum(c);
    g.scale(s, 0.5 / rows as f64)
}

fn head_dims(w: &Weights, head: Head) -> Result<(usize, usize, usize)> {
    let [ew, _, dw, _] = head.names();
    let missing = || Error::ShapeMismatch(format!("weights lack the {} head", head.prefix()));
    let enc = w.get(&ew).ok_or_else(missing)?;
    let dec = w.get(&dw).ok_or_else(missing)?;
    let latent = enc.cols / 2;
    // enc rows = x + c, dec rows = latent + c, dec cols = x.
    Ok((dec.cols, dec.rows - latent, latent))
}

pub fn cvae_encode(head: Head, x: &[f64], c: &[f64], w: &Weights) -> Result<LatentGaussian> {
    let (dx, dc, _) = head_dims(w, head)?;
    if x.len() != dx || c.len() != dc {
        return Err(Error::ShapeMismatch(format!("input {} + condition {}, expected {dx} + {dc}", x.len(), c.len())));
    }
    let mut g = Graph::inference();
    let (xv, cv) = (g.constant(Tensor::row_vector(x.to_vec())), g.constant(Tensor::row_vector(c.to_vec())));
    let lat = cvae_encode_graph(&mut g, w, head, xv, cv);
    Ok(LatentGaussian { mu: g.value(lat.mu).data.clone(), log_var: g.value(lat.log_var).data.clone() })
}

pub fn cvae_decode(head: Head, z: &[f64], c: &[f64], w: &Weights) -> Result<Vec<f64>> {
    let (_, dc, latent) = head_dims(w, head)?;
    if z.len() != latent || c.len() != dc {
        return Err(Error::ShapeMismatch(format!("latent {} + condition {}, expected {latent} + {dc}", z.len(), c.len())));
    }
    let mut g = Graph::inference();
    let (zv, cv) = (g.constant(Tensor::row_vector(z.to_vec())), g.constant(Tensor::row_vector(c.to_vec())));
    let out = cvae_decode_graph(&mut g, w, head, zv, cv);
    Ok(g.value(out).data.clone())
}

pub fn reparameterize(lat: &LatentGaussian, noise: &[f64]) -> Vec<f64> {
    lat.mu.iter().zip(&lat.log_var).zip(noise).map(|((m, lv), n)| m + (0.5 * lv).exp() * n).collect()
}

pub fn kl_loss(lat: &LatentGaussian) -> f64 {
    0.5 * lat.mu.iter().zip(&lat.log_var).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Ground-truth hand targets (`F × 4`, defaults where invisible) and the
/// matching visibility mask.
pub fn hand_targets(gt: &HandTrajectory) -> (Tensor, Tensor) {
    let f = gt.horizon();
    let mut target = Tensor::zeros(f, HAND_DIM);
    let mut vis = Tensor::zeros(f, HAND_DIM);
    for s in 0..f {
        target.row_mut(s).copy_from_slice(&gt.hands_or_default(s));
        for side in Side::BOTH {
            if gt.is_visible(s, side) {
                let k = side.index();
                vis.set(s, 2 * k, 1.0);
                vis.set(s, 2 * k + 1, 1.0);
            }
        }
    }
    (target, vis)
}

/// `L_H`: squared error averaged over visible (step, hand) pairs plus KL.
pub fn hand_loss_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    feats: Var,
    target: &Tensor,
    vis: &Tensor,
    noise: &Tensor,
) -> Var {
    let h = g.constant(target.clone());
    let lat = cvae_encode_graph(g, w, Head::Hand, h, feats);
    let z = reparameterize_graph(g, lat, noise);
    let pred = cvae_decode_graph(g, w, Head::Hand, z, feats);
    let kl = kl_graph(g, lat);
    let n_vis = vis.sum() / 2.0;
    if n_vis == 0.0 {
        return kl;
    }
    let diff = g.sub(pred, h);
    let sq = g.mul(diff, diff);
    let m = g.constant(vis.clone());
    let masked = g.mul(sq, m);
    let s = g.sum(masked);
    let recon = g.scale(s, 1.0 / n_vis);
    g.add(recon, kl)
}

pub fn hand_head_loss(gt: &HandTrajectory, decoder_feats: &Tensor, w: &Weights, noise: &Tensor) -> Result<f64> {
    let (_, dc, latent) = head_dims(w, Head::Hand)?;
    let f = gt.horizon();
    if decoder_feats.shape() != (f, dc) || noise.shape() != (f, latent) {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} and noise {:?} for horizon {f}",
            decoder_feats.shape(),
            noise.shape()
        )));
    }
    let (target, vis) = hand_targets(gt);
    let mut g = Graph::inference();
    let x = g.constant(decoder_feats.clone());
    let loss = hand_loss_graph(&mut g, w, x, &target, &vis, noise);
    Ok(g.scalar(loss))
}

/// `[h_T ; h_{T+1} … h_{T+F}]` flattened to `(F + 1) · 4` values.
pub fn trajectory_condition(last_hands: [f64; 4], traj: &HandTrajectory) -> Vec<f64> {
    let mut v = last_hands.to_vec();
    for s in 0..traj.horizon() {
        v.extend_from_slice(&traj.hands_or_default(s));
    }
    v
}

/// Object condition `[Z_gT ; linear(trajectory)]`; under NONE the second half is zero.
pub fn object_condition_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    mode: ConditioningMode,
    z_gt: Var,
    traj: &Tensor,
) -> Result<Var> {
    mode.check()?;
    let d = g.shape(z_gt).1;
    let rows = traj.rows;
    let second = match mode {
        ConditioningMode::OGivenH => {
            let t = g.constant(traj.clone());
            let (wv, bv) = (g.param(w, "obj.traj.w"), g.param(w, "obj.traj.b"));
            g.affine(t, wv, bv)
        }
        _ => g.constant(Tensor::zeros(rows, d)),
    };
    let z = if g.shape(z_gt).0 == rows {
        z_gt
    } else {
        g.gather_rows(z_gt, vec![0; rows])
    };
    Ok(g.concat_cols(&[z, second]))
}

/// `L_O = ‖o − ô‖² + KL` for the contact rows in `contacts` (mean over rows).
pub fn object_loss_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    cond: Var,
    contacts: &Tensor,
    noise: &Tensor,
) -> Var {
    let o = g.constant(contacts.clone());
    let lat = cvae_encode_graph(g, w, Head::Object, o, cond);
    let z = reparameterize_graph(g, lat, noise);
    let pred = cvae_decode_graph(g, w, Head::Object, z, cond);
    let diff = g.sub(pred, o);
    let sq = g.mul(diff, diff);
    let s = g.sum(sq);
    let recon = g.scale(s, 1.0 / contacts.rows as f64);
    let kl = kl_graph(g, lat);
    g.add(recon, kl)
}

pub fn object_head_loss(
    gt_contact: Point,
    z_gt: &[f64],
    last_hands: [f64; 4],
    traj: &HandTrajectory,
    mode: ConditioningMode,
    w: &Weights,
    noise: &[f64],
) -> Result<f64> {
    let (_, dc, latent) = head_dims(w, Head::Object)?;
    if 2 * z_gt.len() != dc || noise.len() != latent {
        return Err(Error::ShapeMismatch(format!("Z_gT of {} values and noise of {}", z_gt.len(), noise.len())));
    }
    let tc = trajectory_condition(last_hands, traj);
    if w.get("obj.traj.w").map(|t| t.rows) != Some(tc.len()) {
        return Err(Error::ShapeMismatch(format!("trajectory condition has {} values", tc.len())));
    }
    let mut g = Graph::inference();
    let z = g.constant(Tensor::row_vector(z_gt.to_vec()));
    let cond = object_condition_graph(&mut g, w, mode, z, &Tensor::row_vector(tc))?;
    let loss = object_loss_graph(
        &mut g,
        w,
        cond,
        &Tensor::row_vector(vec![gt_contact.x, gt_contact.y]),
        &Tensor::row_vector(noise.to_vec()),
    );
    Ok(g.scalar(loss))
}

/// Decode one future hand pair from decoder feature `feat` and prior draw `z`.
pub fn sample_hand(decoder_feat: &[f64], w: &Weights, z: &[f64]) -> Result<[Point; 2]> {
    let h = cvae_decode(Head::Hand, z, decoder_feat, w)?;
    Ok([Point::new(h[0], h[1]), Point::new(h[2], h[3])])
}

/// Object condition on plain values.
pub fn object_condition(
    z_gt: &[f64],
    last_hands: [f64; 4],
    traj: &HandTrajectory,
    mode: ConditioningMode,
    w: &Weights,
) -> Result<Vec<f64>> {
    let tc = trajectory_condition(last_hands, traj);
    if mode == ConditioningMode::OGivenH && w.get("obj.traj.w").map(|t| t.rows) != Some(tc.len()) {
        return Err(Error::ShapeMismatch(format!("trajectory condition has {} values", tc.len())));
    }
    let mut g = Graph::inference();
    let z = g.constant(Tensor::row_vector(z_gt.to_vec()));
    let c = object_condition_graph(&mut g, w, mode, z, &Tensor::row_vector(tc))?;
    Ok(g.value(c).data.clone())
}

/// Decode one contact point conditioned on a (predicted) trajectory.
pub fn sample_contact(
    z_gt: &[f64],
    last_hands: [f64; 4],
    traj: &HandTrajectory,
    mode: ConditioningMode,
    w: &Weights,
    z: &[f64],
) -> Result<Point> {
    let c = object_condition(z_gt, last_hands, traj, mode, w)?;
    let o = cvae_decode(Head::Object, z, &c, w)?;
    Ok(Point::new(o[0], o[1]))
}

/// Parameters of the anticipation MLP (`D → D → n_actions`).
pub fn init_anticipation(d: usize, n_actions: usize, seed: u64) -> Weights {
    let mut rng = rng_for(seed, &[0xac7]);
    let mut w = Weights::new();
    insert_linear(&mut w, &mut rng, "act.fc1.w", "act.fc1.b", d, d);
    insert_linear(&mut w, &mut rng, "act.fc2.w", "act.fc2.b", d, n_actions);
    w.round_to_f32();
    w
}

pub fn anticipation_graph<'w>(g: &mut Graph<'w>, w: &'w Weights, z_gt: Var) -> Var {
    let (w1, b1) = (g.param(w, "act.fc1.w"), g.param(w, "act.fc1.b"));
    let h = g.affine(z_gt, w1, b1);
    let h = g.gelu(h);
    let (w2, b2) = (g.param(w, "act.fc2.w"), g.param(w, "act.fc2.b"));
    g.affine(h, w2, b2)
}

pub fn anticipation_logits(z_gt: &[f64], w: &Weights) -> Result<Vec<f64>> {
    let rows = w.get("act.fc1.w").map(|t| t.rows);
    if rows != Some(z_gt.len()) {
        return Err(Error::ShapeMismatch(format!("Z_gT has {} values, head expects {rows:?}", z_gt.len())));
    }
    let mut g = Graph::inference();
    let z = g.constant(Tensor::row_vector(z_gt.to_vec()));
    let out = anticipation_graph(&mut g, w, z);
    Ok(g.value(out).data.clone())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Verb and noun distributions from action scores: softmax over actions, then
/// sum the mass of the actions sharing each verb (noun).
pub fn marginalize(action_scores: &[f64], verb_map: &[usize], noun_map: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(a) = (0..action_scores.len()).find(|&a| a >= verb_map.len() || a >= noun_map.len()) {
        return Err(Error::UnmappedAction(a));
    }
    let p = softmax(action_scores);
    let n_verbs = verb_map.iter().max().map_or(0, |m| m + 1);
    let n_nouns = noun_map.iter().max().map_or(0, |m| m + 1);
    let (mut verbs, mut nouns) = (vec![0.0; n_verbs], vec![0.0; n_nouns]);
    for (a, pa) in p.iter().enumerate() {
        verbs[verb_map[a]] += pa;
        nouns[noun_map[a]] += pa;
    }
    Ok((verbs, nouns))
}

/// Standard-normal draws shaped `rows × cols`.
pub fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let normal = rand_distr::StandardNormal;
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(normal)).collect())
}
