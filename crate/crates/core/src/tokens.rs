//! Per-frame input tokens: two hands, two objects and one global token.
//!
//! Tokens are laid out category-major: row `c * T + t` holds category `c`
//! (handL, handR, obj1, obj2, global) at observation step `t`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthdata::TrainingSample;
use crate::tensor::Tensor;
use crate::weights::Weights;

pub const N_TOKENS: usize = 5;
pub const GLOBAL: usize = 4;
/// Extra location values appended to hand/object features: center and size.
pub const LOC_DIM: usize = 4;

/// Spatial-embedding row used by each token slot.
pub const fn category_of(slot: usize) -> usize {
    match slot {
        0 | 1 => 0,
        2 | 3 => 1,
        _ => 2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenCategory {
    Hand,
    Object,
    Global,
}

impl std::str::FromStr for TokenCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hand" => Ok(Self::Hand),
            "object" => Ok(Self::Object),
            "global" => Ok(Self::Global),
            other => Err(Error::Config(format!("unknown token category `{other}`"))),
        }
    }
}

pub fn check_ablation(ablate: &[TokenCategory]) -> Result<()> {
    let all = [TokenCategory::Hand, TokenCategory::Object, TokenCategory::Global];
    if all.iter().all(|c| ablate.contains(c)) {
        return Err(Error::AllTokensAblated);
    }
    Ok(())
}

/// Raw affine inputs for one sample, before the learned maps.
#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct TokenInputs {
    pub T: usize,
    /// `2T × (LOC_DIM + d_feat)`, rows `side * T + t`.
    pub hand: Tensor,
    pub hand_valid: Vec<bool>,
    pub object: Tensor,
    pub object_valid: Vec<bool>,
    /// `T × d_feat`.
    pub global: Tensor,
    pub global_valid: bool,
}

fn entity_rows(feats: &[Vec<Vec<f32>>], boxes: &[Vec<[f64; 4]>], valid: &[Vec<bool>], keep: bool, t: usize, d: usize) -> (Tensor, Vec<bool>) {
    let mut m = Tensor::zeros(2 * t, LOC_DIM + d);
    let mut v = vec![false; 2 * t];
    for k in 0..2 {
        for s in 0..t {
            if !(keep && valid[k][s]) {
                continue;
            }
            let row = m.row_mut(k * t + s);
            let b = boxes[k][s];
            row[0] = (b[0] + b[2]) / 2.0;
            row[1] = (b[1] + b[3]) / 2.0;
            row[2] = b[2] - b[0];
            row[3] = b[3] - b[1];
            for (o, &f) in row[LOC_DIM..].iter_mut().zip(&feats[k][s]) {
                *o = f as f64;
            }
            v[k * t + s] = true;
        }
    }
    (m, v)
}

impl TokenInputs {
    pub fn from_sample(s: &TrainingSample, ablate: &[TokenCategory]) -> Result<Self> {
        check_ablation(ablate)?;
        let (t, d) = (s.T, s.d_feat());
        let (hand, hand_valid) = entity_rows(
            &s.features.hand,
            &s.boxes.hand,
            &s.valid.hand,
            !ablate.contains(&TokenCategory::Hand),
            t,
            d,
        );
        let (object, object_valid) = entity_rows(
            &s.features.object,
            &s.boxes.object,
            &s.valid.object,
            !ablate.contains(&TokenCategory::Object),
            t,
            d,
        );
        let global_valid = !ablate.contains(&TokenCategory::Global);
        let mut global = Tensor::zeros(t, d);
        if global_valid {
            for (r, f) in s.features.global.iter().enumerate() {
                for (o, &x) in global.row_mut(r).iter_mut().zip(f) {
                    *o = x as f64;
                }
            }
        }
        Ok(Self { T: t, hand, hand_valid, object, object_valid, global, global_valid })
    }

    pub fn d_feat(&self) -> usize {
        self.global.cols
    }

    /// `true` where a token is padding, in token-row order.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut m: Vec<bool> = self.hand_valid.iter().chain(&self.object_valid).map(|v| !v).collect();
        m.extend(std::iter::repeat_n(!self.global_valid, self.T));
        m
    }
}

/// `5T × D` tokens with their padding mask.
#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct TokenSet {
    pub T: usize,
    pub tokens: Tensor,
    pub pad_mask: Vec<bool>,
}

impl TokenSet {
    pub fn token(&self, slot: usize, t: usize) -> &[f64] {
        self.tokens.row(slot * self.T + t)
    }

    pub fn is_padded(&self, slot: usize, t: usize) -> bool {
        self.pad_mask[slot * self.T + t]
    }
}

/// Interleaved sine/cosine position code with base 10000.
pub fn sinusoidal_embedding(t: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 == 1 {
        return Err(Error::OddDimension(d));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
        let (s, c) = (t as f64 * freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    Ok(out)
}

/// Positions `0..n` stacked into an `n × d` table.
pub fn sinusoidal_table(n: usize, d: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(n, d);
    for t in 0..n {
        m.row_mut(t).copy_from_slice(&sinusoidal_embedding(t, d)?);
    }
    Ok(m)
}

fn valid_mask(valid: &[bool], d: usize) -> Tensor {
    let mut m = Tensor::zeros(valid.len(), d);
    for (r, &v) in valid.iter().enumerate() {
        if v {
            m.row_mut(r).fill(1.0);
        }
    }
    m
}

/// Learned maps on the tape: `5T × D` tokens, padded rows exactly zero.
pub fn token_graph<'w>(g: &mut Graph<'w>, w: &'w Weights, inp: &TokenInputs) -> Var {
    let d = w.get("tok.b_h").expect("token weights").cols;
    let entity = |g: &mut Graph<'w>, x: &Tensor, valid: &[bool], wn: &str, bn: &str| {
        let x = g.constant(x.clone());
        let (wv, bv) = (g.param(w, wn), g.param(w, bn));
        let y = g.affine(x, wv, bv);
        let m = g.constant(valid_mask(valid, d));
        g.mul(y, m)
    };
    let hands = entity(g, &inp.hand, &inp.hand_valid, "tok.W_h", "tok.b_h");
    let objects = entity(g, &inp.object, &inp.object_valid, "tok.W_o", "tok.b_o");
    let global = entity(g, &inp.global, &vec![inp.global_valid; inp.T], "tok.W_g", "tok.b_g");
    g.concat_rows(&[hands, objects, global])
}

/// Add spatial and positional embeddings to `tokens` on the tape.
pub fn embed_graph<'w>(g: &mut Graph<'w>, w: &'w Weights, tokens: Var, t: usize) -> Result<Var> {
    let (rows, d) = g.shape(tokens);
    if rows != N_TOKENS * t {
        return Err(Error::ShapeMismatch(format!("{rows} token rows for T = {t}")));
    }
    let spatial = g.param(w, "tok.spatial");
    let idx = (0..rows).map(|r| category_of(r / t)).collect();
    let sp = g.gather_rows(spatial, idx);
    let pos = sinusoidal_table(t, d)?;
    let mut table = Tensor::zeros(rows, d);
    for r in 0..rows {
        table.row_mut(r).copy_from_slice(pos.row(r % t));
    }
    let pos = g.constant(table);
    let x = g.add(tokens, sp);
    Ok(g.add(x, pos))
}

fn check_shapes(inp: &TokenInputs, w: &Weights) -> Result<()> {
    let wh = w.get("tok.W_h").ok_or_else(|| Error::ShapeMismatch("missing token weights".into()))?;
    let wg = w.get("tok.W_g").ok_or_else(|| Error::ShapeMismatch("missing token weights".into()))?;
    if wh.rows != LOC_DIM + inp.d_feat() || wg.rows != inp.d_feat() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} dims but token weights expect {}",
            inp.d_feat(),
            wg.rows
        )));
    }
    Ok(())
}

/// Token set before embeddings.
pub fn build_tokens(sample: &TrainingSample, w: &Weights, ablate: &[TokenCategory]) -> Result<TokenSet> {
    let inp = TokenInputs::from_sample(sample, ablate)?;
    check_shapes(&inp, w)?;
    let mut g = Graph::inference();
    let v = token_graph(&mut g, w, &inp);
    Ok(TokenSet { T: inp.T, tokens: g.value(v).clone(), pad_mask: inp.pad_mask() })
}

/// `token[c][t] += spatial[category(c)] + sinusoidal(t)`; the mask is untouched.
pub fn apply_embeddings(ts: &TokenSet, w: &Weights) -> Result<TokenSet> {
    let mut g = Graph::inference();
    let x = g.constant(ts.tokens.clone());
    let y = embed_graph(&mut g, w, x, ts.T)?;
    Ok(TokenSet { T: ts.T, tokens: g.value(y).clone(), pad_mask: ts.pad_mask.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oct::{init_weights, ModelConfig};
    use crate::synthdata::{generate_samples, SynthConfig};

    fn setup(d_feat: usize) -> (TrainingSample, Weights, ModelConfig) {
        let sc = SynthConfig { d_feat, dropout: 0.3, ..SynthConfig::default() };
        let s = generate_samples(1, 3, &sc).unwrap().remove(0);
        let cfg = ModelConfig { D: 8, heads: 2, d_feat, ..ModelConfig::default() };
        let w = init_weights(&cfg, 1).unwrap();
        (s, w, cfg)
    }

    #[test]
    fn invalid_entities_are_zero_and_padded() {
        let (mut s, w, _) = setup(6);
        for side in 0..2 {
            for t in 0..s.T {
                s.valid.hand[side][t] = false;
                s.valid.object[side][t] = false;
            }
        }
        let ts = build_tokens(&s, &w, &[]).unwrap();
        for slot in 0..4 {
            for t in 0..s.T {
                assert!(ts.is_padded(slot, t));
                assert!(ts.token(slot, t).iter().all(|&v| v == 0.0));
            }
        }
        assert!((0..s.T).all(|t| !ts.is_padded(GLOBAL, t)));
    }

    #[test]
    fn tokens_match_a_loop_oracle() {
        let (s, w, cfg) = setup(6);
        let ts = build_tokens(&s, &w, &[]).unwrap();
        let inp = TokenInputs::from_sample(&s, &[]).unwrap();
        let (wh, bh) = (w.get("tok.W_h").unwrap(), w.get("tok.b_h").unwrap());
        for side in 0..2 {
            for t in 0..s.T {
                let r = side * s.T + t;
                for j in 0..cfg.D {
                    let mut acc = bh.get(0, j);
                    for i in 0..wh.rows {
                        acc += inp.hand.get(r, i) * wh.get(i, j);
                    }
                    let expect = if inp.hand_valid[r] { acc } else { 0.0 };
                    assert!((ts.token(side, t)[j] - expect).abs() < 1e-9);
                }
            }
        }
        let (wg, bg) = (w.get("tok.W_g").unwrap(), w.get("tok.b_g").unwrap());
        for t in 0..s.T {
            for j in 0..cfg.D {
                let acc = bg.get(0, j) + (0..wg.rows).map(|i| inp.global.get(t, i) * wg.get(i, j)).sum::<f64>();
                assert!((ts.token(GLOBAL, t)[j] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_like_weights_select_columns() {
        let (mut s, mut w, cfg) = setup(6);
        let wh = w.get_mut("tok.W_h").unwrap();
        *wh = Tensor::zeros(wh.rows, wh.cols);
        for j in 0..cfg.D.min(wh.rows - LOC_DIM) {
            wh.set(LOC_DIM + j, j, 1.0);
        }
        *w.get_mut("tok.b_h").unwrap() = Tensor::zeros(1, cfg.D);
        s.valid.hand[0][0] = true;
        s.boxes.hand[0][0] = [0.0; 4];
        s.features.hand[0][0] = vec![0.0; 6];
        s.features.hand[0][0][0] = 1.0;
        let ts = build_tokens(&s, &w, &[]).unwrap();
        let mut e1 = vec![0.0; cfg.D];
        e1[0] = 1.0;
        assert_eq!(ts.token(0, 0), &e1[..]);
    }

    #[test]
    fn linear_in_features_without_bias() {
        let (s, mut w, _) = setup(6);
        for name in ["tok.b_h", "tok.b_o", "tok.b_g"] {
            let b = w.get_mut(name).unwrap();
            *b = Tensor::zeros(1, b.cols);
        }
        let mut s2 = s.clone();
        let scale = |v: &mut Vec<f32>| v.iter_mut().for_each(|x| *x *= 2.0);
        s2.features.global.iter_mut().for_each(scale);
        let a = build_tokens(&s, &w, &[]).unwrap();
        let b = build_tokens(&s2, &w, &[]).unwrap();
        for t in 0..s.T {
            for (x, y) in a.token(GLOBAL, t).iter().zip(b.token(GLOBAL, t)) {
                assert!((2.0 * x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ablation_pads_whole_categories() {
        let (s, w, _) = setup(6);
        let ts = build_tokens(&s, &w, &[TokenCategory::Hand, TokenCategory::Global]).unwrap();
        for t in 0..s.T {
            assert!(ts.is_padded(0, t) && ts.is_padded(1, t) && ts.is_padded(GLOBAL, t));
            assert!(ts.token(GLOBAL, t).iter().all(|&v| v == 0.0));
        }
        let all = [TokenCategory::Hand, TokenCategory::Object, TokenCategory::Global];
        assert!(matches!(build_tokens(&s, &w, &all), Err(Error::AllTokensAblated)));
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let (s, _, cfg) = setup(6);
        let w = init_weights(&ModelConfig { d_feat: 7, ..cfg }, 1).unwrap();
        assert!(matches!(build_tokens(&s, &w, &[]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sinusoid_formula() {
        let e0 = sinusoidal_embedding(0, 8).unwrap();
        assert_eq!(e0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embedding(3, 8).unwrap();
        for i in 0..4 {
            let w = 3.0 / 10000f64.powf(2.0 * i as f64 / 8.0);
            assert!((e[2 * i] - w.sin()).abs() < 1e-15);
            assert!((e[2 * i + 1] - w.cos()).abs() < 1e-15);
        }
        assert!(sinusoidal_embedding(1000, 64).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_embedding(1, 7), Err(Error::OddDimension(7))));
    }

    #[test]
    fn embeddings_add_componentwise() {
        let (s, mut w, cfg) = setup(6);
        let ts = build_tokens(&s, &w, &[]).unwrap();
        // Zeroed spatial rows leave only the positional code.
        *w.get_mut("tok.spatial").unwrap() = Tensor::zeros(3, cfg.D);
        let pos_only = apply_embeddings(&ts, &w).unwrap();
        assert_eq!(pos_only.pad_mask, ts.pad_mask);
        let w2 = init_weights(&cfg, 9).unwrap();
        let out = apply_embeddings(&ts, &w2).unwrap();
        let sp = w2.get("tok.spatial").unwrap();
        for slot in 0..N_TOKENS {
            for t in 0..s.T {
                let pe = sinusoidal_embedding(t, cfg.D).unwrap();
                for j in 0..cfg.D {
                    let expect = ts.token(slot, t)[j] + sp.get(category_of(slot), j) + pe[j];
                    assert!((out.token(slot, t)[j] - expect).abs() < 1e-12);
                    assert!((pos_only.token(slot, t)[j] - ts.token(slot, t)[j] - pe[j]).abs() < 1e-12);
                }
            }
        }
    }
}
