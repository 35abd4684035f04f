//! Stage-adaptive gated conditioning of visual tokens on text and on a
//! spatial prior.
//!
//! Every stage mixes a semantic stream (cross-attention from visual tokens to
//! instruction tokens) and a structural stream derived from the prior. The
//! structural stream is a token-wise projection in stages 1-2 and
//! cross-attention to prior tokens in stages 3-4. The mixture enters the
//! visual tokens through a sigmoid-gated residual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::probmaps::ProbMap;
use crate::tensorcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Shape of the token grid at one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageDims {
    /// 1-based stage index.
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl StageDims {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Tokens of one stage, `[N, C]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub dims: StageDims,
    pub tokens: Var,
}

/// Instruction tokens, `[L, C_t]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SemanticField {
    pub len: usize,
    pub tokens: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum GeoParams {
    /// Token-wise linear map `W_p` (shallow stages).
    Projection { wp: ParamId },
    /// Cross-attention to prior tokens (deep stages).
    Attention(AttentionParams),
}

/// Learnable parameters of one conditioning stage.
#[derive(Clone, Copy, Debug)]
pub struct SesmStage {
    pub dims: StageDims,
    pub text_dim: usize,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub lift_w: ParamId,
    pub lift_b: ParamId,
    pub sem: AttentionParams,
    pub geo: GeoParams,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape matches")
}

impl SesmStage {
    /// Registers the stage's parameters. Gates start at 0.5 (zero gate
    /// weights) and both mixing scalars at 0.5.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: StageDims, text_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if !(1..=4).contains(&dims.index) {
            return Err(Error::Contract(format!("stage index {} outside 1..4", dims.index)));
        }
        let c = dims.channels;
        let p = |s: &str| format!("{prefix}.{s}");
        let alpha = store.add(p("alpha"), Tensor::scalar(0.5));
        let beta = store.add(p("beta"), Tensor::scalar(0.5));
        let lift_w = store.add(p("lift_w"), uniform(rng, &[1, c], 1));
        let lift_b = store.add(p("lift_b"), Tensor::zeros(&[c]));
        let sem = AttentionParams {
            wq: store.add(p("sem.wq"), uniform(rng, &[c, c], c)),
            wk: store.add(p("sem.wk"), uniform(rng, &[text_dim, c], text_dim)),
            wv: store.add(p("sem.wv"), uniform(rng, &[text_dim, c], text_dim)),
        };
        let geo = if dims.index <= 2 {
            GeoParams::Projection {
                wp: store.add(p("geo.wp"), uniform(rng, &[c, c], c)),
            }
        } else {
            GeoParams::Attention(AttentionParams {
                wq: store.add(p("geo.wq"), uniform(rng, &[c, c], c)),
                wk: store.add(p("geo.wk"), uniform(rng, &[c, c], c)),
                wv: store.add(p("geo.wv"), uniform(rng, &[c, c], c)),
            })
        };
        let gate_w = store.add(p("gate_w"), Tensor::zeros(&[c, c]));
        let gate_b = store.add(p("gate_b"), Tensor::zeros(&[c]));
        Ok(Self {
            dims,
            text_dim,
            alpha,
            beta,
            lift_w,
            lift_b,
            sem,
            geo,
            gate_w,
            gate_b,
        })
    }

    /// Freezes the two mixing scalars (fixed-weight ablation).
    pub fn freeze_mixing(&self, store: &mut ParamStore) {
        store.set_trainable(self.alpha, false);
        store.set_trainable(self.beta, false);
    }
}

/// Average-pools a prior map onto a `h x w` grid.
pub fn pool_prior(prior: &ProbMap, h: usize, w: usize) -> Result<Vec<f64>> {
    let (ph, pw) = (prior.height(), prior.width());
    if h == 0 || w == 0 || ph % h != 0 || pw % w != 0 {
        return Err(Error::shape(
            "align_prior",
            format!("prior {ph}x{pw} not divisible by stage {h}x{w}"),
        ));
    }
    let (fy, fx) = (ph / h, pw / w);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..ph {
        for x in 0..pw {
            out[(y / fy) * w + x / fx] += prior.get(y, x) * inv;
        }
    }
    Ok(out)
}

/// Pools the prior to the stage grid and lifts each pooled value to
/// `C_j` channels with a learnable affine map.
pub fn align_prior(tape: &mut Tape, prior: &ProbMap, stage: &SesmStage, params: &[Var]) -> Result<FeatureMap> {
    let d = stage.dims;
    let pooled = pool_prior(prior, d.height, d.width)?;
    let col = tape.constant(&[d.tokens(), 1], pooled)?;
    let lifted = tape.matmul(col, params[stage.lift_w.0])?;
    let tokens = tape.add_bias(lifted, params[stage.lift_b.0])?;
    Ok(FeatureMap { dims: d, tokens })
}

/// Single-head scaled dot-product attention. Returns `(output, weights)`
/// with weights `[N, L]`, rows summing to one.
pub fn attend(tape: &mut Tape, queries: Var, keys_values: Var, p: &AttentionParams, params: &[Var]) -> Result<(Var, Var)> {
    let q = tape.matmul(queries, params[p.wq.0])?;
    let k = tape.matmul(keys_values, params[p.wk.0])?;
    let v = tape.matmul(keys_values, params[p.wv.0])?;
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn semantic_attention(tape: &mut Tape, v: &FeatureMap, s: &SemanticField, stage: &SesmStage, params: &[Var]) -> Result<Var> {
    check_channels(tape, v, stage)?;
    if tape.shape(s.tokens) != [s.len, stage.text_dim] || s.len == 0 {
        return Err(Error::shape(
            "semantic_attention",
            format!("semantic field {:?}, expected [L>=1, {}]", tape.shape(s.tokens), stage.text_dim),
        ));
    }
    Ok(attend(tape, v.tokens, s.tokens, &stage.sem, params)?.0)
}

pub fn structural_interact(tape: &mut Tape, v: &FeatureMap, g: &FeatureMap, stage: &SesmStage, params: &[Var]) -> Result<Var> {
    check_channels(tape, v, stage)?;
    if tape.shape(g.tokens) != tape.shape(v.tokens) {
        return Err(Error::shape(
            "structural_interact",
            format!("prior tokens {:?} not aligned with {:?}", tape.shape(g.tokens), tape.shape(v.tokens)),
        ));
    }
    match (&stage.geo, stage.dims.index) {
        (GeoParams::Projection { wp }, 1 | 2) => tape.matmul(g.tokens, params[wp.0]),
        (GeoParams::Attention(p), 3 | 4) => Ok(attend(tape, v.tokens, g.tokens, p, params)?.0),
        (_, j) => Err(Error::Contract(format!("stage index {j} has no structural operator"))),
    }
}

/// Gated residual update `V + sigmoid(W_g V) * (alpha * sem + beta * geo)`.
pub fn condition(
    tape: &mut Tape,
    v: &FeatureMap,
    s: &SemanticField,
    g: &FeatureMap,
    stage: &SesmStage,
    params: &[Var],
) -> Result<FeatureMap> {
    let sem = semantic_attention(tape, v, s, stage, params)?;
    let geo = structural_interact(tape, v, g, stage, params)?;
    let a = tape.mul_scalar_var(params[stage.alpha.0], sem)?;
    let b = tape.mul_scalar_var(params[stage.beta.0], geo)?;
    let mix = tape.add(a, b)?;
    let gate = tape.matmul(v.tokens, params[stage.gate_w.0])?;
    let gate = tape.add_bias(gate, params[stage.gate_b.0])?;
    let gate = tape.sigmoid(gate)?;
    let delta = tape.mul(gate, mix)?;
    let tokens = tape.add(v.tokens, delta)?;
    Ok(FeatureMap { dims: v.dims, tokens })
}

fn check_channels(tape: &Tape, v: &FeatureMap, stage: &SesmStage) -> Result<()> {
    let want = [stage.dims.tokens(), stage.dims.channels];
    if tape.shape(v.tokens) != want {
        return Err(Error::shape(
            "sesm",
            format!("visual tokens {:?}, stage expects {want:?}", tape.shape(v.tokens)),
        ));
    }
    Ok(())
}
