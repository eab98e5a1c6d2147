//! Fusion-head self-attention encoder.
//!
//! Per-head attention intensities are mixed across heads by a trainable
//! `n_h×n_h` logic map before the key-axis softmax, and by a second weight
//! map afterwards. With both maps equal to the identity a layer is a plain
//! pre-norm multi-head attention layer.

use brainformer_tensor::{Tape, Var};

use crate::config::{AttentionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::sequentializer::TokenSequence;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct FusionAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `n_h×n_h` mix before the softmax; absent in plain multi-head mode.
    pub head_logic: Option<ParamId>,
    /// `n_h×n_h` mix after the softmax; absent in plain multi-head mode.
    pub head_weight: Option<ParamId>,
    pub w_out: ParamId,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionLayerParams {
    pub attention: FusionAttentionParams,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl FusionLayerParams {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        mode: AttentionMode,
    ) -> Self {
        let k = width;
        let hidden = mlp_ratio * k;
        let mut add = |name: &str, t| store.add(format!("{prefix}.{name}"), t);
        let w_q = add("attn.w_q", init.fan_in(&[k, k], k));
        let w_k = add("attn.w_k", init.fan_in(&[k, k], k));
        let w_v = add("attn.w_v", init.fan_in(&[k, k], k));
        let (head_logic, head_weight) = match mode {
            AttentionMode::Fusion => (
                Some(add("attn.head_logic", init.near_identity(heads, 0.02))),
                Some(add("attn.head_weight", init.near_identity(heads, 0.02))),
            ),
            AttentionMode::MultiHead => (None, None),
        };
        let w_out = add("attn.w_out", init.fan_in(&[k, k], k));
        let attention = FusionAttentionParams {
            w_q,
            w_k,
            w_v,
            head_logic,
            head_weight,
            w_out,
            heads,
        };
        FusionLayerParams {
            attention,
            ln1_gamma: add("ln1.gamma", Init::ones(&[k])),
            ln1_beta: add("ln1.beta", Init::zeros(&[k])),
            ln2_gamma: add("ln2.gamma", Init::ones(&[k])),
            ln2_beta: add("ln2.beta", Init::zeros(&[k])),
            mlp_w1: add("mlp.w1", init.fan_in(&[k, hidden], k)),
            mlp_b1: add("mlp.b1", Init::zeros(&[hidden])),
            mlp_w2: add("mlp.w2", init.fan_in(&[hidden, k], hidden)),
            mlp_b2: add("mlp.b2", Init::zeros(&[k])),
        }
    }
}

/// Encoder shape: `L` layers tapped every `L/n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub taps: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
}

impl EncoderConfig {
    pub fn from_model(m: &ModelConfig) -> Self {
        EncoderConfig {
            layers: m.layers,
            taps: m.taps,
            width: m.width,
            heads: m.heads,
            patch: m.patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.layers % self.taps != 0 {
            return Err(Error::Config(format!(
                "layers L={} is not divisible by taps n={}",
                self.layers, self.taps
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width k={} is not divisible by heads n_h={}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<FusionLayerParams>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, init: &mut Init, m: &ModelConfig) -> Self {
        let layers = (0..m.layers)
            .map(|l| {
                FusionLayerParams::init(
                    store,
                    init,
                    &format!("encoder.layer{l}"),
                    m.width,
                    m.heads,
                    m.mlp_ratio,
                    m.attention,
                )
            })
            .collect();
        Encoder {
            config: EncoderConfig::from_model(m),
            layers,
        }
    }
}

/// `[N, k]` to `[n_h, N, k/n_h]`: head `j` takes columns `j·k_h .. (j+1)·k_h`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let (n, k) = (tape.shape(x)[0], tape.shape(x)[1]);
    if k % heads != 0 {
        return Err(Error::Config(format!("width {k} not divisible by {heads} heads")));
    }
    let split = tape.reshape(x, &[n, heads, k / heads])?;
    Ok(tape.permute(split, &[1, 0, 2])?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let moved = tape.permute(x, &[1, 0, 2])?;
    Ok(tape.reshape(moved, &[s[1], s[0] * s[2]])?)
}

/// Per-head `Q, K, V`, each `[n_h, N, k_h]`.
pub fn qkv_project(tape: &mut Tape, s: Var, w_q: Var, w_k: Var, w_v: Var, heads: usize) -> Result<(Var, Var, Var)> {
    let mut head = |w: Var| -> Result<Var> {
        let x = tape.matmul(s, w)?;
        split_heads(tape, x, heads)
    };
    Ok((head(w_q)?, head(w_k)?, head(w_v)?))
}

/// `E_j = Q_j K_jᵀ / √k_h` for every head; inputs `[n_h, N, k_h]`.
pub fn attention_intensity(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let kh = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let e = tape.bmm(q, kt)?;
    Ok(tape.scale(e, 1.0 / (kh as f64).sqrt())?)
}

/// Pointwise head mix: `out[r] = Σ_s mix[r, s] · x[s]` over `[n, a, b]`.
pub fn head_mix(tape: &mut Tape, x: Var, mix: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let n = s[0];
    if tape.shape(mix) != [n, n] {
        return Err(Error::Config(format!(
            "head mix {:?} does not match {n} heads",
            tape.shape(mix)
        )));
    }
    let flat = tape.reshape(x, &[n, s[1..].iter().product()])?;
    let mixed = tape.matmul(mix, flat)?;
    Ok(tape.reshape(mixed, &s)?)
}

/// `h_A = softmax_key(F_A ∘ E)`.
pub fn logic_fusion(tape: &mut Tape, e: Var, head_logic: Var) -> Result<Var> {
    let mixed = head_mix(tape, e, head_logic)?;
    Ok(tape.softmax(mixed, 2)?)
}

/// `h_B = F_B ∘ h_A`.
pub fn weight_fusion(tape: &mut Tape, h_a: Var, head_weight: Var) -> Result<Var> {
    head_mix(tape, h_a, head_weight)
}

/// `h_v[r] = h_B[r] · V[r]`.
pub fn apply_values(tape: &mut Tape, h_b: Var, v: Var) -> Result<Var> {
    Ok(tape.bmm(h_b, v)?)
}

/// Concatenates heads along the feature axis and applies `w_out`.
pub fn reproject(tape: &mut Tape, h_v: Var, w_out: Var) -> Result<Var> {
    let merged = merge_heads(tape, h_v)?;
    Ok(tape.matmul(merged, w_out)?)
}

/// Attention sublayer on already-normalized tokens `[N, k]`.
pub fn fusion_attention(ctx: &mut Ctx, s: Var, p: &FusionAttentionParams) -> Result<Var> {
    let (w_q, w_k, w_v, w_out) = (ctx.p(p.w_q), ctx.p(p.w_k), ctx.p(p.w_v), ctx.p(p.w_out));
    let mixes = p.head_logic.zip(p.head_weight).map(|(a, b)| (ctx.p(a), ctx.p(b)));
    let t = &mut *ctx.tape;
    let (q, k, v) = qkv_project(t, s, w_q, w_k, w_v, p.heads)?;
    let e = attention_intensity(t, q, k)?;
    let h_b = match mixes {
        Some((logic, weight)) => {
            let h_a = logic_fusion(t, e, logic)?;
            weight_fusion(t, h_a, weight)?
        }
        None => t.softmax(e, 2)?,
    };
    let h_v = apply_values(t, h_b, v)?;
    reproject(t, h_v, w_out)
}

fn mlp(ctx: &mut Ctx, x: Var, p: &FusionLayerParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (ctx.p(p.mlp_w1), ctx.p(p.mlp_b1), ctx.p(p.mlp_w2), ctx.p(p.mlp_b2));
    let t = &mut *ctx.tape;
    let h = t.matmul(x, w1)?;
    let h = t.add(h, b1)?;
    let h = t.gelu(h)?;
    let o = t.matmul(h, w2)?;
    Ok(t.add(o, b2)?)
}

/// `S' = S + FHSA(LN(S))`, `out = S' + MLP(LN(S'))`.
pub fn fusion_layer_forward(ctx: &mut Ctx, s: Var, p: &FusionLayerParams) -> Result<Var> {
    let (g1, b1) = (ctx.p(p.ln1_gamma), ctx.p(p.ln1_beta));
    let n1 = ctx.tape.layernorm(s, g1, b1, LN_EPS)?;
    let a = fusion_attention(ctx, n1, &p.attention)?;
    let s1 = ctx.tape.add(s, a)?;
    let (g2, b2) = (ctx.p(p.ln2_gamma), ctx.p(p.ln2_beta));
    let n2 = ctx.tape.layernorm(s1, g2, b2, LN_EPS)?;
    let m = mlp(ctx, n2, p)?;
    Ok(ctx.tape.add(s1, m)?)
}

/// Runs every layer and returns the outputs after layers `L/n, 2L/n, …, L`.
pub fn encoder_forward(ctx: &mut Ctx, s0: &TokenSequence, encoder: &Encoder) -> Result<Vec<TokenSequence>> {
    encoder.config.validate()?;
    if encoder.layers.len() != encoder.config.layers {
        return Err(Error::Config(format!(
            "encoder has {} layers, config says {}",
            encoder.layers.len(),
            encoder.config.layers
        )));
    }
    let every = encoder.config.layers / encoder.config.taps;
    let mut taps = Vec::with_capacity(encoder.config.taps);
    let mut s = s0.tokens;
    for (l, layer) in encoder.layers.iter().enumerate() {
        s = fusion_layer_forward(ctx, s, layer)?;
        ctx.note(|| format!("encoder.layer{l}"), s);
        if (l + 1) % every == 0 {
            taps.push(TokenSequence { tokens: s, ..*s0 });
        }
    }
    Ok(taps)
}
