use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, CONV_KERNEL};
use crate::ctc::FrameDistributionSeq;
use crate::error::{contract, Result};
use crate::numerics::{ConvGeom, Grid, ParamId, ParamSet, Tape, Var};
use crate::scalar::Real;

const LAYER_NORM_EPS: f64 = 1e-5;
const PRIOR_SUM_TOL: f64 = 1e-9;

/// Eval mode is deterministic; train mode draws dropout masks from the rng.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Sinusoidal position table `[len, dim]`: sine on even columns, cosine on odd.
pub fn positional_encoding<S: Real>(len: usize, dim: usize) -> Grid<S> {
    Grid::from_fn(&[len, dim], |i| {
        let (pos, col) = (i / dim, i % dim);
        let rate = 10000f64.powf((col - col % 2) as f64 / dim as f64);
        let angle = pos as f64 / rate;
        S::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Row `t` may attend to column `s` iff `s <= t` and, with a window, `t - s <= window`.
pub fn causal_mask(len: usize, window: Option<usize>) -> Vec<bool> {
    (0..len * len)
        .map(|i| {
            let (t, s) = (i / len, i % len);
            s <= t && window.is_none_or(|w| t - s <= w)
        })
        .collect()
}

#[derive(Clone, Debug)]
struct EncoderLayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    conv: Vec<(ParamId, ParamId)>,
    attn_wa: ParamId,
    attn_wv: ParamId,
    refine_q: ParamId,
    refine_k: ParamId,
    refine_v: ParamId,
    blend_raw: ParamId,
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<EncoderLayerIds>,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Intermediate attention tensors of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub raw: Var,
    pub refined: Var,
    pub priors: Var,
    pub blend_weight: Var,
    pub final_maps: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub attention: AttentionVars,
}

/// The recognition network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamSet<S>,
    ids: ParamIds,
}

struct Init<'a, S> {
    params: &'a mut ParamSet<S>,
    rng: ChaCha8Rng,
}

impl<S: Real> Init<'_, S> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let g = Grid::from_fn(shape, |_| S::lit(rng.random_range(-bound..=bound)));
        self.params.add(name, g)
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`.
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    fn filled(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.params.add(name, Grid::filled(shape, S::lit(v)))
    }
}

impl<S: Real> Model<S> {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k = CONV_KERNEL;
        let mut conv = Vec::new();
        for (i, (cin, cout)) in config.layer_channels().into_iter().enumerate() {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            let w = init.uniform(&format!("backbone.{i}.weight"), &[cout, cin, k, k], bound)?;
            let b = init.filled(&format!("backbone.{i}.bias"), &[cout], 0.0)?;
            conv.push((w, b));
        }
        let (d, a) = (config.feat_channels, config.attention_hidden);
        let attn_wa = init.dense("attention.w_a", d, a)?;
        let attn_wv = init.dense("attention.w_v", a, 1)?;
        let (fh, fw) = config.feat_grid();
        let cells = fh * fw;
        let refine_q = init.dense("refine.query", cells, cells)?;
        let refine_k = init.dense("refine.key", cells, cells)?;
        let refine_v = init.dense("refine.value", cells, cells)?;
        let blend_raw = init.filled("prior.blend", &[1], 0.0)?;
        let pooled = d * config.pooled_height * config.pooled_width;
        let e = config.embed_dim;
        let embed_w = init.dense("embed.weight", pooled, e)?;
        let embed_b = init.filled("embed.bias", &[e], 0.0)?;
        let mut layers = Vec::new();
        for l in 0..config.encoder_layers {
            let p = format!("encoder.{l}");
            let f = config.ffn_hidden;
            layers.push(EncoderLayerIds {
                wq: init.dense(&format!("{p}.query.weight"), e, e)?,
                bq: init.filled(&format!("{p}.query.bias"), &[e], 0.0)?,
                wk: init.dense(&format!("{p}.key.weight"), e, e)?,
                bk: init.filled(&format!("{p}.key.bias"), &[e], 0.0)?,
                wv: init.dense(&format!("{p}.value.weight"), e, e)?,
                bv: init.filled(&format!("{p}.value.bias"), &[e], 0.0)?,
                wo: init.dense(&format!("{p}.out.weight"), e, e)?,
                bo: init.filled(&format!("{p}.out.bias"), &[e], 0.0)?,
                ln1_gain: init.filled(&format!("{p}.norm1.gain"), &[e], 1.0)?,
                ln1_bias: init.filled(&format!("{p}.norm1.bias"), &[e], 0.0)?,
                ff1_w: init.dense(&format!("{p}.ffn1.weight"), e, f)?,
                ff1_b: init.filled(&format!("{p}.ffn1.bias"), &[f], 0.0)?,
                ff2_w: init.dense(&format!("{p}.ffn2.weight"), f, e)?,
                ff2_b: init.filled(&format!("{p}.ffn2.bias"), &[e], 0.0)?,
                ln2_gain: init.filled(&format!("{p}.norm2.gain"), &[e], 1.0)?,
                ln2_bias: init.filled(&format!("{p}.norm2.bias"), &[e], 0.0)?,
            });
        }
        let classes = config.num_classes + 1;
        let cls_w = init.dense("classifier.weight", e, classes)?;
        let cls_b = init.filled("classifier.bias", &[classes], 0.0)?;
        let ids = ParamIds {
            conv,
            attn_wa,
            attn_wv,
            refine_q,
            refine_k,
            refine_v,
            blend_raw,
            embed_w,
            embed_b,
            layers,
            cls_w,
            cls_b,
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Current prior blend weight `sigmoid(raw)`.
    pub fn blend_weight(&self) -> S {
        let raw = self.params.get(self.ids.blend_raw).value.values()[0];
        S::one() / (S::one() + (-raw).exp())
    }

    fn check_frames(&self, frames: &Grid<S>) -> Result<usize> {
        let c = &self.config;
        let expect = [c.in_channels, c.frame_height, c.frame_width];
        if frames.ndim() != 4 || frames.shape()[1..] != expect || frames.dim(0) == 0 {
            return contract(format!(
                "frames of shape {:?}, expected [T, {}, {}, {}]",
                frames.shape(),
                expect[0],
                expect[1],
                expect[2]
            ));
        }
        Ok(frames.dim(0))
    }

    /// Backbone: `[T, channels, pixelH, pixelW]` to `[T, D, H, W]`.
    pub fn extract_features(&self, tape: &mut Tape<S>, frames: Var) -> Result<Var> {
        let mut x = frames;
        let last = self.ids.conv.len() - 1;
        for (i, (&(w, b), &stride)) in self.ids.conv.iter().zip(&self.config.conv_strides).enumerate() {
            let (wv, bv) = (tape.param(&self.params, w), tape.param(&self.params, b));
            x = tape.conv2d(x, wv, bv, ConvGeom { stride, pad: 1 })?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Per-cell `relu(relu(F · W_a) · W_v)`, giving `[T, H, W]`.
    pub fn spatial_attention(&self, tape: &mut Tape<S>, feats: Var) -> Result<Var> {
        let s = tape.shape(feats).to_vec();
        let (t, d, h, w) = (s[0], s[1], s[2], s[3]);
        let cells = tape.permute(feats, &[0, 2, 3, 1])?;
        let cells = tape.reshape(cells, &[t * h * w, d])?;
        let wa = tape.param(&self.params, self.ids.attn_wa);
        let wv = tape.param(&self.params, self.ids.attn_wv);
        let hidden = tape.matmul(cells, wa)?;
        let hidden = tape.relu(hidden);
        let score = tape.matmul(hidden, wv)?;
        let score = tape.relu(score);
        tape.reshape(score, &[t, h, w])
    }

    /// Windowed single-head self-attention over flattened maps, with a residual.
    pub fn refine_attention(&self, tape: &mut Tape<S>, raw: Var) -> Result<Var> {
        let s = tape.shape(raw).to_vec();
        let (t, cells) = (s[0], s[1] * s[2]);
        let tokens = tape.reshape(raw, &[t, cells])?;
        let with_pos = tape.add_const(tokens, &positional_encoding(t, cells))?;
        let wq = tape.param(&self.params, self.ids.refine_q);
        let wk = tape.param(&self.params, self.ids.refine_k);
        let wv = tape.param(&self.params, self.ids.refine_v);
        let mask = causal_mask(t, Some(self.config.context_window));
        let attended = self.attend(tape, with_pos, (wq, wk, wv), &mask, 1)?;
        let refined = tape.add(tokens, attended)?;
        tape.reshape(refined, &s)
    }

    /// `w · P + (1 - w) · softmax(A^s)` with `w = sigmoid(raw)`.
    pub fn blend_with_prior(&self, tape: &mut Tape<S>, refined: Var, priors: Var) -> Result<(Var, Var)> {
        let s = tape.shape(refined).to_vec();
        if tape.shape(priors) != s.as_slice() {
            return contract(format!(
                "priors of shape {:?} for maps {:?}",
                tape.shape(priors),
                s
            ));
        }
        let cells = s[1] * s[2];
        for map in tape.value(priors).values().chunks(cells) {
            let total = map.iter().copied().sum::<S>().as_f64();
            if (total - 1.0).abs() > PRIOR_SUM_TOL || map.iter().any(|&v| v < S::zero()) {
                return contract(format!("prior map sums to {total}, expected 1"));
            }
        }
        let flat = tape.reshape(refined, &[s[0], cells])?;
        let soft = tape.softmax(flat)?;
        let soft = tape.reshape(soft, &s)?;
        let raw = tape.param(&self.params, self.ids.blend_raw);
        let w = tape.sigmoid(raw);
        let neg = tape.scale(w, -S::one());
        let one_minus = tape.add_scalar(neg, S::one());
        let from_prior = tape.scale_by(priors, w)?;
        let from_soft = tape.scale_by(soft, one_minus)?;
        Ok((tape.add(from_prior, from_soft)?, w))
    }

    /// Adaptive average pooling, flatten, affine map to `[T, E]`.
    pub fn pool_and_embed(&self, tape: &mut Tape<S>, attended: Var) -> Result<Var> {
        let c = &self.config;
        let pooled = tape.adaptive_avg_pool(attended, c.pooled_height, c.pooled_width)?;
        let t = tape.shape(pooled)[0];
        let flat = tape.reshape(pooled, &[t, c.feat_channels * c.pooled_height * c.pooled_width])?;
        let w = tape.param(&self.params, self.ids.embed_w);
        let b = tape.param(&self.params, self.ids.embed_b);
        tape.linear(flat, w, Some(b))
    }

    /// Scaled-dot-product attention with `heads` heads over rows of `x`.
    fn attend(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        (wq, wk, wv): (Var, Var, Var),
        mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        self.attend_projected(tape, (q, k, v), mask, heads)
    }

    fn attend_projected(&self, tape: &mut Tape<S>, (q, k, v): (Var, Var, Var), mask: &[bool], heads: usize) -> Result<Var> {
        let width = tape.shape(q)[1];
        let dh = width / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_last(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_last(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_last(v, h * dh, (h + 1) * dh)?;
            let kt = tape.permute(kh, &[1, 0])?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, mask)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_last(&outs)
        }
    }

    /// Positional encoding, then causal multi-head self-attention blocks.
    pub fn encode(&self, tape: &mut Tape<S>, emb: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let c = &self.config;
        let (t, e) = (tape.shape(emb)[0], c.embed_dim);
        let scaled = tape.scale(emb, S::lit(e as f64).sqrt());
        let mut x = tape.add_const(scaled, &positional_encoding(t, e))?;
        let mask = causal_mask(t, None);
        let p = S::lit(c.dropout_encoder);
        let eps = S::lit(LAYER_NORM_EPS);
        for ids in &self.ids.layers {
            let pv = |tape: &mut Tape<S>, id| tape.param(&self.params, id);
            let (wq, bq, wk, bk) = (pv(tape, ids.wq), pv(tape, ids.bq), pv(tape, ids.wk), pv(tape, ids.bk));
            let (wv, bv, wo, bo) = (pv(tape, ids.wv), pv(tape, ids.bv), pv(tape, ids.wo), pv(tape, ids.bo));
            let q = tape.linear(x, wq, Some(bq))?;
            let k = tape.linear(x, wk, Some(bk))?;
            let v = tape.linear(x, wv, Some(bv))?;
            let heads = self.attend_projected(tape, (q, k, v), &mask, c.heads)?;
            let attn = tape.linear(heads, wo, Some(bo))?;
            let attn = dropout(tape, attn, p, mode)?;
            let res = tape.add(x, attn)?;
            let (g1, b1) = (pv(tape, ids.ln1_gain), pv(tape, ids.ln1_bias));
            let x1 = tape.layer_norm(res, g1, b1, eps)?;

            let (f1w, f1b, f2w, f2b) = (pv(tape, ids.ff1_w), pv(tape, ids.ff1_b), pv(tape, ids.ff2_w), pv(tape, ids.ff2_b));
            let hdn = tape.linear(x1, f1w, Some(f1b))?;
            let hdn = tape.relu(hdn);
            let ff = tape.linear(hdn, f2w, Some(f2b))?;
            let ff = dropout(tape, ff, p, mode)?;
            let res = tape.add(x1, ff)?;
            let (g2, b2) = (pv(tape, ids.ln2_gain), pv(tape, ids.ln2_bias));
            x = tape.layer_norm(res, g2, b2, eps)?;
        }
        Ok(x)
    }

    /// Affine map to `C + 1` logits per frame; blank is the last column.
    pub fn classify(&self, tape: &mut Tape<S>, encoded: Var) -> Result<Var> {
        let w = tape.param(&self.params, self.ids.cls_w);
        let b = tape.param(&self.params, self.ids.cls_b);
        tape.linear(encoded, w, Some(b))
    }

    /// Full forward pass from normalized frames and per-frame priors to logits.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        frames: &Grid<S>,
        priors: &Grid<S>,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        self.check_frames(frames)?;
        let x = tape.input(frames.clone());
        let feats = self.extract_features(tape, x)?;
        let raw = self.spatial_attention(tape, feats)?;
        let raw_dropped = dropout(tape, raw, S::lit(self.config.dropout_attention), mode)?;
        let refined = self.refine_attention(tape, raw_dropped)?;
        let pv = tape.input(priors.clone());
        let (final_maps, blend_weight) = self.blend_with_prior(tape, refined, pv)?;
        let attended = tape.mul_maps(feats, final_maps)?;
        let emb = self.pool_and_embed(tape, attended)?;
        let enc = self.encode(tape, emb, mode)?;
        let logits = self.classify(tape, enc)?;
        Ok(ForwardVars {
            logits,
            attention: AttentionVars {
                raw,
                refined,
                priors: pv,
                blend_weight,
                final_maps,
            },
        })
    }

    /// Eval-mode logits `[T, C + 1]`.
    pub fn logits(&self, frames: &Grid<S>, priors: &Grid<S>) -> Result<Grid<S>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, frames, priors, &mut Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode per-frame class distribution.
    pub fn distribution(&self, frames: &Grid<S>, priors: &Grid<S>) -> Result<FrameDistributionSeq<S>> {
        FrameDistributionSeq::from_logits(&self.logits(frames, priors)?)
    }
}

fn dropout<S: Real>(tape: &mut Tape<S>, x: Var, p: S, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => tape.dropout(x, p, &mut **rng),
    }
}
