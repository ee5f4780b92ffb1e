//! Object-centric transformer: masked attention, encoding blocks, the
//! space-time encoder and the autoregressive decoder.
//!
//! Everything is recorded on an [`autograd::Graph`](crate::autograd::Graph);
//! the plain-tensor functions here run the same code on an inference graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, NEG_INF};
use crate::error::{Error, Result};
use crate::heads::ConditioningMode;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::tokens::{embed_graph, sinusoidal_table, token_graph, TokenInputs, TokenSet, GLOBAL, LOC_DIM, N_TOKENS};
use crate::weights::Weights;

/// Decoder input width: `[lx, ly, rx, ry]`.
pub const HAND_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ModelConfig {
    pub T: usize,
    pub F: usize,
    pub D: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub dropout: f64,
    pub latent_dim: usize,
    pub lambda_obj: f64,
    pub K_samples: usize,
    pub N_contacts: usize,
    pub d_feat: usize,
    pub conditioning: ConditioningMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            T: 10,
            F: 4,
            D: 512,
            heads: 8,
            enc_blocks: 6,
            dec_blocks: 4,
            dropout: 0.1,
            latent_dim: 256,
            lambda_obj: 0.1,
            K_samples: 20,
            N_contacts: 5,
            d_feat: 1024,
            conditioning: ConditioningMode::OGivenH,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.T == 0 || self.F == 0 || self.D == 0 || self.heads == 0 || self.latent_dim == 0 || self.d_feat == 0 {
            return bad("T, F, D, heads, latent_dim and d_feat must be positive".into());
        }
        if self.K_samples == 0 || self.N_contacts == 0 {
            return bad("K_samples and N_contacts must be positive".into());
        }
        if !self.D.is_multiple_of(self.heads) {
            return bad(format!("D = {} is not divisible by heads = {}", self.D, self.heads));
        }
        if self.D % 2 == 1 {
            return Err(Error::OddDimension(self.D));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(self.lambda_obj >= 0.0) {
            return bad("lambda_obj must be non-negative".into());
        }
        Ok(())
    }
}

/// Inverted dropout; a no-op unless built with [`Dropout::train`].
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else { return x };
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - self.rate);
        let data = (0..r * c).map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep }).collect();
        let m = g.constant(Tensor::from_vec(r, c, data));
        g.mul(x, m)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Insert `name.w` (`fan_in × fan_out`) and `name.b`, both uniform in ±1/√fan_in.
pub(crate) fn insert_linear(w: &mut Weights, rng: &mut ChaCha8Rng, wname: &str, bname: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    w.insert(wname, uniform(rng, fan_in, fan_out, bound));
    w.insert(bname, uniform(rng, 1, fan_out, bound));
}

fn insert_block(w: &mut Weights, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    insert_linear(w, rng, &format!("{prefix}.qkv.w"), &format!("{prefix}.qkv.b"), d, 3 * d);
    w.insert(format!("{prefix}.ln.g"), Tensor::filled(1, d, 1.0));
    w.insert(format!("{prefix}.ln.b"), Tensor::zeros(1, d));
    insert_linear(w, rng, &format!("{prefix}.mlp1.w"), &format!("{prefix}.mlp1.b"), d, 4 * d);
    insert_linear(w, rng, &format!("{prefix}.mlp2.w"), &format!("{prefix}.mlp2.b"), 4 * d, d);
}

/// Fresh parameters for the token maps, transformer and both C-VAE heads.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    cfg.validate()?;
    let (d, l) = (cfg.D, cfg.latent_dim);
    let mut rng = rng_for(seed, &[0x1417]);
    let mut w = Weights::new();
    insert_linear(&mut w, &mut rng, "tok.W_h", "tok.b_h", LOC_DIM + cfg.d_feat, d);
    insert_linear(&mut w, &mut rng, "tok.W_o", "tok.b_o", LOC_DIM + cfg.d_feat, d);
    insert_linear(&mut w, &mut rng, "tok.W_g", "tok.b_g", cfg.d_feat, d);
    w.insert("tok.spatial", uniform(&mut rng, 3, d, 1.0 / (d as f64).sqrt()));
    for b in 0..cfg.enc_blocks {
        insert_block(&mut w, &mut rng, &format!("enc.{b}"), d);
    }
    insert_linear(&mut w, &mut rng, "dec.embed.w", "dec.embed.b", HAND_DIM, d);
    for b in 0..cfg.dec_blocks {
        insert_block(&mut w, &mut rng, &format!("dec.{b}"), d);
    }
    insert_linear(&mut w, &mut rng, "hand.enc.w", "hand.enc.b", HAND_DIM + d, 2 * l);
    insert_linear(&mut w, &mut rng, "hand.dec.w", "hand.dec.b", l + d, HAND_DIM);
    insert_linear(&mut w, &mut rng, "obj.traj.w", "obj.traj.b", (cfg.F + 1) * HAND_DIM, d);
    insert_linear(&mut w, &mut rng, "obj.enc.w", "obj.enc.b", 2 + 2 * d, 2 * l);
    insert_linear(&mut w, &mut rng, "obj.dec.w", "obj.dec.b", l + 2 * d, 2);
    w.round_to_f32();
    Ok(w)
}

/// Check that `w` carries every parameter `cfg` needs, with matching shapes.
pub fn check_weights(cfg: &ModelConfig, w: &Weights) -> Result<()> {
    let reference = init_weights(cfg, 0)?;
    for (name, t) in reference.iter() {
        match w.get(name) {
            Some(x) if x.shape() == t.shape() => {}
            Some(x) => {
                return Err(Error::ShapeMismatch(format!("{name} is {:?}, expected {:?}", x.shape(), t.shape())));
            }
            None => return Err(Error::ShapeMismatch(format!("weights lack {name}"))),
        }
    }
    Ok(())
}

/// Additive mask hiding padded keys from every query.
pub fn key_mask(n_queries: usize, pad: &[bool]) -> Tensor {
    let mut m = Tensor::zeros(n_queries, pad.len());
    for i in 0..n_queries {
        for (j, &p) in pad.iter().enumerate() {
            if p {
                m.set(i, j, NEG_INF);
            }
        }
    }
    m
}

/// Decoder mask over `[Z_T ; history]` keys: padded frame tokens are hidden
/// and history position `i` sees history positions `0..=i` only.
pub fn decoder_mask(t: usize, zt_pad: &[bool]) -> Tensor {
    let n = zt_pad.len();
    let mut m = Tensor::zeros(t, n + t);
    for i in 0..t {
        for (j, &p) in zt_pad.iter().enumerate() {
            if p {
                m.set(i, j, NEG_INF);
            }
        }
        for s in i + 1..t {
            m.set(i, n + s, NEG_INF);
        }
    }
    m
}

fn param_pair<'w>(g: &mut Graph<'w>, w: &'w Weights, prefix: &str, part: &str) -> (Var, Var) {
    (g.param(w, &format!("{prefix}.{part}.w")), g.param(w, &format!("{prefix}.{part}.b")))
}

/// `Q' + dropout(MLP(LN(Q')))` with a GELU hidden layer of width 4D.
fn feed_forward<'w>(g: &mut Graph<'w>, w: &'w Weights, prefix: &str, q1: Var, drop: &mut Dropout) -> Var {
    let (lg, lb) = (g.param(w, &format!("{prefix}.ln.g")), g.param(w, &format!("{prefix}.ln.b")));
    let h = g.layer_norm(q1, lg, lb);
    let (w1, b1) = param_pair(g, w, prefix, "mlp1");
    let h = g.affine(h, w1, b1);
    let h = g.gelu(h);
    let (w2, b2) = param_pair(g, w, prefix, "mlp2");
    let h = g.affine(h, w2, b2);
    let h = drop.apply(g, h);
    g.add(q1, h)
}

/// One encoding block over `x` with additive attention mask `mask`.
pub fn encoding_block_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    prefix: &str,
    x: Var,
    mask: &Tensor,
    heads: usize,
    drop: &mut Dropout,
) -> Var {
    let d = g.shape(x).1;
    let (wq, bq) = param_pair(g, w, prefix, "qkv");
    let p = g.affine(x, wq, bq);
    let q = g.slice_cols(p, 0, d);
    let k = g.slice_cols(p, d, d);
    let v = g.slice_cols(p, 2 * d, d);
    let att = g.attention(q, k, v, mask, heads);
    let att = drop.apply(g, att);
    let q1 = g.add(x, att);
    feed_forward(g, w, prefix, q1, drop)
}

/// One decoding block: history queries attend to `[Z_T ; history]`.
#[allow(clippy::too_many_arguments)]
pub fn decoding_block_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    prefix: &str,
    q_prev: Var,
    z_t: Var,
    zt_pad: &[bool],
    heads: usize,
    drop: &mut Dropout,
) -> Var {
    let (t, d) = g.shape(q_prev);
    let n = g.shape(z_t).0;
    let kv = g.concat_rows(&[z_t, q_prev]);
    let (wq, bq) = param_pair(g, w, prefix, "qkv");
    let p = g.affine(kv, wq, bq);
    let q_all = g.slice_cols(p, 0, d);
    let q = g.slice_rows(q_all, n, t);
    let k = g.slice_cols(p, d, d);
    let v = g.slice_cols(p, 2 * d, d);
    let att = g.attention(q, k, v, &decoder_mask(t, zt_pad), heads);
    let att = drop.apply(g, att);
    let q1 = g.add(q_prev, att);
    feed_forward(g, w, prefix, q1, drop)
}

/// Encoder handles on a graph.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// `5T × D`.
    pub z: Var,
    /// `5 × D`, last-frame tokens in slot order.
    pub z_t: Var,
    /// `1 × D`, last-frame global token.
    pub z_gt: Var,
    /// Padding of the five last-frame tokens.
    pub zt_pad: Vec<bool>,
}

/// Run encoding blocks over embedded tokens.
pub fn encoder_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    cfg: &ModelConfig,
    embedded: Var,
    pad: &[bool],
    t: usize,
    drop: &mut Dropout,
) -> EncoderVars {
    let mask = key_mask(pad.len(), pad);
    let mut x = embedded;
    for b in 0..cfg.enc_blocks {
        x = encoding_block_graph(g, w, &format!("enc.{b}"), x, &mask, cfg.heads, drop);
    }
    let last: Vec<usize> = (0..N_TOKENS).map(|c| c * t + t - 1).collect();
    let zt_pad = last.iter().map(|&r| pad[r]).collect();
    let z_t = g.gather_rows(x, last);
    let z_gt = g.slice_rows(z_t, GLOBAL, 1);
    EncoderVars { z: x, z_t, z_gt, zt_pad }
}

/// Tokens, embeddings and encoder for one sample.
pub fn encode_inputs_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    cfg: &ModelConfig,
    inp: &TokenInputs,
    drop: &mut Dropout,
) -> Result<EncoderVars> {
    let tokens = token_graph(g, w, inp);
    let embedded = embed_graph(g, w, tokens, inp.T)?;
    Ok(encoder_graph(g, w, cfg, embedded, &inp.pad_mask(), inp.T, drop))
}

/// Decoder over a history of hand locations (`t × 4`, oldest first). Returns
/// the `t × D` outputs; row `i` is the feature for future step `i + 1`.
pub fn decoder_graph<'w>(
    g: &mut Graph<'w>,
    w: &'w Weights,
    cfg: &ModelConfig,
    history: &Tensor,
    enc: &EncoderVars,
    drop: &mut Dropout,
) -> Result<Var> {
    let t = history.rows;
    if t == 0 {
        return Err(Error::EmptyHistory);
    }
    if history.cols != HAND_DIM {
        return Err(Error::ShapeMismatch(format!("history rows have {} values, expected {HAND_DIM}", history.cols)));
    }
    let h = g.constant(history.clone());
    let (we, be) = (g.param(w, "dec.embed.w"), g.param(w, "dec.embed.b"));
    let e = g.affine(h, we, be);
    let pos = g.constant(sinusoidal_table(t, cfg.D)?);
    let mut q = g.add(e, pos);
    for b in 0..cfg.dec_blocks {
        q = decoding_block_graph(g, w, &format!("dec.{b}"), q, enc.z_t, &enc.zt_pad, cfg.heads, drop);
    }
    Ok(q)
}

/// Multi-head masked attention on plain tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = q.shape();
    let m = k.rows;
    if k.cols != d || v.shape() != (m, d) || mask.shape() != (n, m) {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}, M {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            mask.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!("width {d} is not divisible by {heads} heads")));
    }
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, mask, heads);
    Ok(g.value(out).clone())
}

/// One encoding block (evaluation mode) on plain tensors.
pub fn encoding_block(q_in: &Tensor, pad_mask: &[bool], w: &Weights, prefix: &str, heads: usize) -> Result<Tensor> {
    if pad_mask.len() != q_in.rows {
        return Err(Error::ShapeMismatch(format!("{} tokens but {} mask entries", q_in.rows, pad_mask.len())));
    }
    let mut g = Graph::inference();
    let x = g.constant(q_in.clone());
    let y = encoding_block_graph(&mut g, w, prefix, x, &key_mask(q_in.rows, pad_mask), heads, &mut Dropout::off());
    Ok(g.value(y).clone())
}

/// Encoder result on plain tensors.
#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct EncoderOutput {
    pub T: usize,
    /// `5T × D`, rows `slot * T + t`.
    pub z: Tensor,
    /// `5 × D` last-frame tokens.
    pub z_t: Tensor,
    pub z_gt: Vec<f64>,
    pub pad_mask: Vec<bool>,
}

impl EncoderOutput {
    /// Re-enter a fixed encoder result as constants on a graph.
    pub fn as_vars(&self, g: &mut Graph<'_>) -> EncoderVars {
        let z = g.constant(self.z.clone());
        let z_t = g.constant(self.z_t.clone());
        let z_gt = g.constant(Tensor::row_vector(self.z_gt.clone()));
        let t = self.T;
        let zt_pad = (0..N_TOKENS).map(|c| self.pad_mask[c * t + t - 1]).collect();
        EncoderVars { z, z_t, z_gt, zt_pad }
    }
}

fn encoder_output(g: &Graph<'_>, v: &EncoderVars, pad: Vec<bool>, t: usize) -> EncoderOutput {
    EncoderOutput {
        T: t,
        z: g.value(v.z).clone(),
        z_t: g.value(v.z_t).clone(),
        z_gt: g.value(v.z_gt).data.clone(),
        pad_mask: pad,
    }
}

/// Embed and encode a (pre-embedding) token set.
pub fn encode(ts: &TokenSet, cfg: &ModelConfig, w: &Weights) -> Result<EncoderOutput> {
    if ts.tokens.shape() != (N_TOKENS * ts.T, cfg.D) || ts.pad_mask.len() != N_TOKENS * ts.T {
        return Err(Error::ShapeMismatch(format!("token set {:?} for T = {}, D = {}", ts.tokens.shape(), ts.T, cfg.D)));
    }
    let mut g = Graph::inference();
    let x = g.constant(ts.tokens.clone());
    let e = embed_graph(&mut g, w, x, ts.T)?;
    let v = encoder_graph(&mut g, w, cfg, e, &ts.pad_mask, ts.T, &mut Dropout::off());
    Ok(encoder_output(&g, &v, ts.pad_mask.clone(), ts.T))
}

/// Encode one sample's token inputs in evaluation mode.
pub fn encode_inputs(inp: &TokenInputs, cfg: &ModelConfig, w: &Weights) -> Result<EncoderOutput> {
    let mut g = Graph::inference();
    let v = encode_inputs_graph(&mut g, w, cfg, inp, &mut Dropout::off())?;
    Ok(encoder_output(&g, &v, inp.pad_mask(), inp.T))
}

/// Decoder outputs for every history position (evaluation mode).
pub fn decode_all(history: &[[f64; 4]], enc: &EncoderOutput, cfg: &ModelConfig, w: &Weights) -> Result<Tensor> {
    let hist = Tensor::from_rows(&history.iter().map(|h| h.to_vec()).collect::<Vec<_>>());
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut g = Graph::inference();
    let ev = enc.as_vars(&mut g);
    let out = decoder_graph(&mut g, w, cfg, &hist, &ev, &mut Dropout::off())?;
    Ok(g.value(out).clone())
}

/// Decoder feature `X_{T+t}` for a history `h_T … h_{T+t-1}`.
pub fn decode_step(history: &[[f64; 4]], enc: &EncoderOutput, cfg: &ModelConfig, w: &Weights) -> Result<Vec<f64>> {
    let all = decode_all(history, enc, cfg, w)?;
    Ok(all.row(all.rows - 1).to_vec())
}
