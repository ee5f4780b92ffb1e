//! Central finite-difference checks for gradients recorded on a [`Graph`].

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;
use crate::weights::Weights;

/// Denominator floor for the relative error, so gradients that are zero up to
/// rounding compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst entry found by a check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let rel = relative_error(analytic, numeric);
        if rel > self.worst_rel {
            self.worst_rel = rel;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.worst_rel > self.worst_rel {
            self.worst_rel = other.worst_rel;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic parameter gradients of the scalar built by `build` with
/// central differences of step `eps`, over every entry of every parameter.
pub fn check_params<F>(w: &Weights, eps: f64, build: F) -> GradReport
where
    F: for<'a> Fn(&mut Graph<'a>, &'a Weights) -> Var,
{
    let mut g = Graph::new();
    let root = build(&mut g, w);
    let grads = g.backward(root).param_grads(&g);
    let mut report = GradReport::default();
    let mut wp = w.clone();
    for idx in 0..w.len() {
        let analytic = grads.iter().find(|(i, _)| *i == idx).map(|(_, t)| t.clone());
        for k in 0..w.tensor(idx).len() {
            let orig = w.tensor(idx).data[k];
            let mut eval = |d: f64| {
                wp.tensor_mut(idx).data[k] = orig + d;
                let mut g = Graph::inference();
                let r = build(&mut g, &wp);
                g.scalar(r)
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            wp.tensor_mut(idx).data[k] = orig;
            let a = analytic.as_ref().map_or(0.0, |t| t.data[k]);
            report.record(|| format!("{}[{k}]", w.name(idx)), a, num);
        }
    }
    report
}

/// Same check with respect to an input tensor `x0`.
pub fn check_input<F>(w: &Weights, x0: &Tensor, eps: f64, build: F) -> GradReport
where
    F: for<'a> Fn(&mut Graph<'a>, &'a Weights, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let root = build(&mut g, w, x);
    let grads = g.backward(root);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.rows, x0.cols));
    let mut report = GradReport::default();
    for k in 0..x0.len() {
        let eval = |d: f64| {
            let mut xp = x0.clone();
            xp.data[k] += d;
            let mut g = Graph::new();
            let x = g.input(xp);
            let r = build(&mut g, w, x);
            g.scalar(r)
        };
        let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
        report.record(|| format!("input[{k}]"), analytic.data[k], num);
    }
    report
}

/// The tensors of `w` whose names start with one of `prefixes`.
pub fn subset(w: &Weights, prefixes: &[&str]) -> Weights {
    let mut out = Weights::new();
    for (name, t) in w.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name, t.clone());
        }
    }
    out
}

/// Random small-instance gradient checks of every differentiable stage.
pub mod suite {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::{check_input, check_params, subset, GradReport};
    use crate::autograd::{Graph, Var, NEG_INF};
    use crate::heads::{hand_loss_graph, hand_targets, normal_tensor, object_condition_graph, object_loss_graph, trajectory_condition, ConditioningMode};
    use crate::oct::{decoder_graph, encode_inputs_graph, encoding_block_graph, init_weights, key_mask, Dropout, ModelConfig};
    use crate::rng::rng_for;
    use crate::synthdata::{generate_samples, SynthConfig};
    use crate::tensor::Tensor;
    use crate::weights::Weights;
    use crate::tokens::TokenInputs;
    use crate::types::{HandTrajectory, Point};
    use crate::Result;

    pub const EPS: f64 = 1e-4;

    pub fn small_config() -> ModelConfig {
        ModelConfig {
            T: 3,
            F: 3,
            D: 8,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            latent_dim: 4,
            d_feat: 6,
            ..ModelConfig::default()
        }
    }

    fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// `Σ out ∘ R` for a fixed random `R`, giving every output entry its own weight.
    fn project(g: &mut Graph<'_>, out: Var, r: &Tensor) -> Var {
        let rv = g.constant(r.clone());
        let p = g.mul(out, rv);
        g.sum(p)
    }

    pub fn attention(seed: u64) -> GradReport {
        let mut rng = rng_for(seed, &[1]);
        let (n, m, d) = (3, 4, 8);
        let x0 = uniform(&mut rng, n + 2 * m, d);
        let mut mask = Tensor::zeros(n, m);
        mask.set(0, rng.random_range(0..m), NEG_INF);
        mask.set(1, rng.random_range(0..m), NEG_INF);
        let r = uniform(&mut rng, n, d);
        let w = Weights::new();
        check_input(&w, &x0, EPS, |g, _, x| {
            let q = g.slice_rows(x, 0, n);
            let k = g.slice_rows(x, n, m);
            let v = g.slice_rows(x, n + m, m);
            let out = g.attention(q, k, v, &mask, 2);
            project(g, out, &r)
        })
    }

    pub fn encoding_block(seed: u64) -> Result<GradReport> {
        let cfg = small_config();
        let w = subset(&init_weights(&cfg, seed)?, &["enc.0."]);
        let mut rng = rng_for(seed, &[2]);
        let x0 = uniform(&mut rng, 5, cfg.D);
        let pad = [false, true, false, false, rng.random_bool(0.5)];
        let mask = key_mask(5, &pad);
        let r = uniform(&mut rng, 5, cfg.D);
        fn block<'a>(g: &mut Graph<'a>, w: &'a Weights, x: Var, mask: &Tensor, r: &Tensor) -> Var {
            let out = encoding_block_graph(g, w, "enc.0", x, mask, 2, &mut Dropout::off());
            project(g, out, r)
        }
        let mut rep = check_params(&w, EPS, |g, w| {
            let x = g.constant(x0.clone());
            block(g, w, x, &mask, &r)
        });
        rep.merge(check_input(&w, &x0, EPS, |g, w, x| block(g, w, x, &mask, &r)));
        Ok(rep)
    }

    /// Tokens, encoder and decoder end to end; the decoder output is projected.
    pub fn decode_step(seed: u64) -> Result<GradReport> {
        let cfg = small_config();
        let w = subset(&init_weights(&cfg, seed)?, &["tok.", "enc.", "dec."]);
        let sc = SynthConfig { T: cfg.T, F: cfg.F, d_feat: cfg.d_feat, dropout: 0.3, ..SynthConfig::default() };
        let sample = generate_samples(1, seed, &sc)?.remove(0);
        let inp = TokenInputs::from_sample(&sample, &[])?;
        let mut rng = rng_for(seed, &[3]);
        let hist = Tensor::from_vec(cfg.F, 4, (0..cfg.F * 4).map(|_| rng.random()).collect());
        let r = uniform(&mut rng, cfg.F, cfg.D);
        let rep = check_params(&w, EPS, |g, w| {
            let enc = encode_inputs_graph(g, w, &cfg, &inp, &mut Dropout::off()).expect("encoder");
            let out = decoder_graph(g, w, &cfg, &hist, &enc, &mut Dropout::off()).expect("decoder");
            project(g, out, &r)
        });
        Ok(rep)
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, f: usize) -> HandTrajectory {
        let mut p = || Point::new(rng.random(), rng.random());
        let mut t = HandTrajectory::fully_visible((0..f).map(|_| p()).collect(), (0..f).map(|_| p()).collect());
        t.visible[0][1] = false;
        t
    }

    pub fn hand_loss(seed: u64) -> Result<GradReport> {
        let cfg = small_config();
        let w = subset(&init_weights(&cfg, seed)?, &["hand."]);
        let mut rng = rng_for(seed, &[4]);
        let gt = random_trajectory(&mut rng, cfg.F);
        let (target, vis) = hand_targets(&gt);
        let x0 = uniform(&mut rng, cfg.F, cfg.D);
        let noise = normal_tensor(&mut rng, cfg.F, cfg.latent_dim);
        let mut rep = check_params(&w, EPS, |g, w| {
            let x = g.constant(x0.clone());
            hand_loss_graph(g, w, x, &target, &vis, &noise)
        });
        rep.merge(check_input(&w, &x0, EPS, |g, w, x| hand_loss_graph(g, w, x, &target, &vis, &noise)));
        Ok(rep)
    }

    pub fn object_loss(seed: u64) -> Result<GradReport> {
        let cfg = small_config();
        let w = subset(&init_weights(&cfg, seed)?, &["obj."]);
        let mut rng = rng_for(seed, &[5]);
        let gt = random_trajectory(&mut rng, cfg.F);
        let traj = Tensor::row_vector(trajectory_condition([0.2, 0.7, 0.8, 0.7], &gt));
        let z0 = uniform(&mut rng, 1, cfg.D);
        let contact = Tensor::row_vector(vec![rng.random(), rng.random()]);
        let noise = normal_tensor(&mut rng, 1, cfg.latent_dim);
        fn loss<'a>(g: &mut Graph<'a>, w: &'a Weights, z: Var, traj: &Tensor, contact: &Tensor, noise: &Tensor) -> Var {
            let c = object_condition_graph(g, w, ConditioningMode::OGivenH, z, traj).expect("supported mode");
            object_loss_graph(g, w, c, contact, noise)
        }
        let mut rep = check_params(&w, EPS, |g, w| {
            let z = g.constant(z0.clone());
            loss(g, w, z, &traj, &contact, &noise)
        });
        rep.merge(check_input(&w, &z0, EPS, |g, w, z| loss(g, w, z, &traj, &contact, &noise)));
        Ok(rep)
    }

    /// Worst report per stage over `instances` seeds.
    pub fn run(instances: u64) -> Result<Vec<(&'static str, GradReport)>> {
        let mut out = vec![
            ("attention", GradReport::default()),
            ("encoding_block", GradReport::default()),
            ("decode_step", GradReport::default()),
            ("L_H", GradReport::default()),
            ("L_O", GradReport::default()),
        ];
        for s in 0..instances {
            out[0].1.merge(attention(s));
            out[1].1.merge(encoding_block(s)?);
            out[2].1.merge(decode_step(s)?);
            out[3].1.merge(hand_loss(s)?);
            out[4].1.merge(object_loss(s)?);
        }
        Ok(out)
    }
}
