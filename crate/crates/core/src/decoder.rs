//! Convolutional decoder with deformable fusion attention (IDFTM) and
//! residual convolution blocks (RBM).
//!
//! Stage `b = n` starts from the deepest encoder tap; every shallower stage
//! upsamples ×2, concatenates the matching tap (itself upsampled to the same
//! extent) and runs the configured cascade. A last transposed convolution
//! restores the input resolution, where a convolution of the raw input is
//! concatenated before the 1×1×1 class head.
//!
//! ```text
//! tap_n ─ block ─ 1³ conv ─ cascade ─┐
//!                                    up×2 ─┐
//! tap_b ─ block ─ up×2^(n-b) ────────────── concat ─ 1³ conv ─ cascade ─ …
//! input ─ 3³ conv ─ relu ─────────── concat(up×f(stage 1)) ─ 1³ conv ─ logits
//! ```

use brainformer_tensor::{Tape, Var};

use crate::config::{CascadeMode, ModelConfig, CLASSES};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::sequentializer::{tokens_to_block, TokenSequence};

pub use crate::encoder::{head_mix, logic_fusion as idftm_logic_fusion, weight_fusion as idftm_weight_fusion};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct IdftmParams {
    /// `[n_h'·c, C_b, ks, ks, ks]`; head `r` owns output channels `r·c .. (r+1)·c`.
    pub q_kernel: ParamId,
    pub k_kernel: ParamId,
    pub v_kernel: ParamId,
    /// `[n_h', 1, w, 1, c]`
    pub pos_w: ParamId,
    /// `[n_h', h, 1, 1, c]`
    pub pos_h: ParamId,
    /// `[n_h', 1, 1, d, c]`
    pub pos_d: ParamId,
    pub head_logic: ParamId,
    pub head_weight: ParamId,
    /// `[C_b, n_h'·c, 1, 1, 1]`
    pub out_proj: ParamId,
    pub heads: usize,
    pub kernel_size: usize,
    pub scaled: bool,
}

impl IdftmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        extents: [usize; 3],
        heads: usize,
        kernel_size: usize,
        scaled: bool,
    ) -> Self {
        let c = channels / heads;
        let ks = kernel_size;
        let kshape = [channels, channels, ks, ks, ks];
        let fan = channels * ks * ks * ks;
        // q, k and v start from one draw
        let shared = init.fan_in(&kshape, fan);
        let [h, w, d] = extents;
        let mut add = |name: &str, t| store.add(format!("{prefix}.{name}"), t);
        IdftmParams {
            q_kernel: add("q_kernel", shared.clone()),
            k_kernel: add("k_kernel", shared.clone()),
            v_kernel: add("v_kernel", shared),
            pos_w: add("pos_w", init.normal(&[heads, 1, w, 1, c], 0.02)),
            pos_h: add("pos_h", init.normal(&[heads, h, 1, 1, c], 0.02)),
            pos_d: add("pos_d", init.normal(&[heads, 1, 1, d, c], 0.02)),
            head_logic: add("head_logic", init.near_identity(heads, 0.02)),
            head_weight: add("head_weight", init.near_identity(heads, 0.02)),
            out_proj: add("out_proj", init.fan_in(&[channels, channels, 1, 1, 1], channels)),
            heads,
            kernel_size,
            scaled,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RbmParams {
    pub conv1: ParamId,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub conv2: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    /// 1×1×1 projection, present only when channels change.
    pub skip: Option<ParamId>,
}

impl RbmParams {
    pub fn init(store: &mut ParamStore, init: &mut Init, prefix: &str, c_in: usize, c_out: usize) -> Self {
        let mut add = |name: &str, t| store.add(format!("{prefix}.{name}"), t);
        RbmParams {
            conv1: add("conv1", init.he(&[c_out, c_in, 3, 3, 3], c_in * 27)),
            norm1_gamma: add("norm1.gamma", Init::ones(&[c_out])),
            norm1_beta: add("norm1.beta", Init::zeros(&[c_out])),
            conv2: add("conv2", init.he(&[c_out, c_out, 3, 3, 3], c_out * 27)),
            norm2_gamma: add("norm2.gamma", Init::ones(&[c_out])),
            norm2_beta: add("norm2.beta", Init::zeros(&[c_out])),
            skip: (c_in != c_out).then(|| add("skip", init.fan_in(&[c_out, c_in, 1, 1, 1], c_in))),
        }
    }
}

/// The two modules of one stage: `T' = first(T)`, `T'' = T' + second(T')`.
#[derive(Debug, Clone, Copy)]
pub enum Cascade {
    RbmRbm(RbmParams, RbmParams),
    IdftmIdftm(IdftmParams, IdftmParams),
    IdftmRbm(IdftmParams, RbmParams),
}

impl Cascade {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        mode: CascadeMode,
        channels: usize,
        extents: [usize; 3],
        m: &ModelConfig,
    ) -> Self {
        let idftm = |store: &mut ParamStore, init: &mut Init, name: &str| {
            IdftmParams::init(
                store,
                init,
                &format!("{prefix}.{name}"),
                channels,
                extents,
                m.decoder_heads,
                m.idftm_kernel,
                m.scaled_idftm,
            )
        };
        let rbm = |store: &mut ParamStore, init: &mut Init, name: &str| {
            RbmParams::init(store, init, &format!("{prefix}.{name}"), channels, channels)
        };
        match mode {
            CascadeMode::RbmRbm => Cascade::RbmRbm(rbm(store, init, "rbm1"), rbm(store, init, "rbm2")),
            CascadeMode::IdftmIdftm => {
                Cascade::IdftmIdftm(idftm(store, init, "idftm1"), idftm(store, init, "idftm2"))
            }
            CascadeMode::IdftmRbm => Cascade::IdftmRbm(idftm(store, init, "idftm"), rbm(store, init, "rbm")),
        }
    }
}

/// Scale applied to the fan-in init of the final class projection.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// Weight and bias of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    /// Forward convolution `[c_out, c_in, ks³]`.
    pub fn conv(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize, ks: usize) -> Self {
        ConvParams {
            weight: store.add(
                format!("{name}.weight"),
                init.fan_in(&[c_out, c_in, ks, ks, ks], c_in * ks * ks * ks),
            ),
            bias: store.add(format!("{name}.bias"), Init::zeros(&[c_out])),
        }
    }

    /// Transposed convolution `[c_in, c_out, ks³]` with stride = kernel size.
    pub fn up(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize, ks: usize) -> Self {
        ConvParams {
            weight: store.add(format!("{name}.weight"), init.fan_in(&[c_in, c_out, ks, ks, ks], c_in)),
            bias: store.add(format!("{name}.bias"), Init::zeros(&[c_out])),
        }
    }
}

fn conv(ctx: &mut Ctx, x: Var, p: &ConvParams, pad: usize) -> Result<Var> {
    let w = ctx.p(p.weight);
    let y = ctx.tape.conv3d(x, w, 1, pad)?;
    Ok(ctx.add_channel_bias(y, p.bias)?)
}

fn upsample(ctx: &mut Ctx, x: Var, p: &ConvParams, factor: usize) -> Result<Var> {
    let w = ctx.p(p.weight);
    let y = ctx.tape.conv3d_transpose(x, w, factor)?;
    Ok(ctx.add_channel_bias(y, p.bias)?)
}

#[derive(Debug, Clone)]
pub enum StageEntry {
    /// Deepest stage: channel projection `k → C_n` of the last tap.
    Deepest { proj: ConvParams },
    /// Upsample the previous stage and fuse it with a shallower tap.
    Upper {
        up: ConvParams,
        skip_chain: Vec<ConvParams>,
        fuse: ConvParams,
    },
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    /// Scale index `b` (1 = shallowest).
    pub scale: usize,
    pub channels: usize,
    pub extents: [usize; 3],
    pub entry: StageEntry,
    pub cascade: Cascade,
}

#[derive(Debug, Clone)]
pub struct DecoderHead {
    pub up: ConvParams,
    pub factor: usize,
    pub input_conv: ConvParams,
    pub out: ConvParams,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Ordered deepest first.
    pub stages: Vec<DecoderStage>,
    pub head: DecoderHead,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, init: &mut Init, m: &ModelConfig) -> Self {
        let n = m.taps;
        let mut stages = Vec::with_capacity(n);
        for b in (1..=n).rev() {
            let c = m.stage_channels(b);
            let extents = m.stage_extents(b);
            let prefix = format!("decoder.stage{b}");
            let entry = if b == n {
                StageEntry::Deepest {
                    proj: ConvParams::conv(store, init, &format!("{prefix}.proj"), m.width, c, 1),
                }
            } else {
                let up = ConvParams::up(store, init, &format!("{prefix}.up"), m.stage_channels(b + 1), c, 2);
                let skip_chain = (0..n - b)
                    .map(|i| {
                        let c_in = if i == 0 { m.width } else { c };
                        ConvParams::up(store, init, &format!("{prefix}.skip{i}"), c_in, c, 2)
                    })
                    .collect();
                let fuse = ConvParams::conv(store, init, &format!("{prefix}.fuse"), 2 * c, c, 1);
                StageEntry::Upper { up, skip_chain, fuse }
            };
            let cascade = Cascade::init(store, init, &prefix, m.cascade, c, extents, m);
            stages.push(DecoderStage {
                scale: b,
                channels: c,
                extents,
                entry,
                cascade,
            });
        }
        let c1 = m.stage_channels(1);
        let factor = m.final_upsample();
        let head = DecoderHead {
            up: ConvParams::up(store, init, "decoder.head.up", c1, c1, factor),
            factor,
            input_conv: ConvParams::conv(store, init, "decoder.head.input", m.in_channels, c1, 3),
            out: ConvParams::conv(store, init, "decoder.head.out", 2 * c1, CLASSES, 1),
        };
        // Small initial logits keep the softmax away from saturation while
        // the class layout is still being found.
        for x in store.get_mut(head.out.weight).data_mut() {
            *x *= HEAD_INIT_SCALE;
        }
        Decoder { stages, head }
    }
}

/// Per-head `Q, K, V`, each `[n_h', c, λ]` with `λ = h·w·d` in row-major
/// (h, w, d) order.
pub fn idftm_qkv(tape: &mut Tape, t: Var, q_kernel: Var, k_kernel: Var, v_kernel: Var, heads: usize) -> Result<(Var, Var, Var)> {
    let s = tape.shape(t).to_vec();
    if s.len() != 4 {
        return Err(Error::Config(format!("idftm input must be C×h×w×d, got {s:?}")));
    }
    let lambda = s[1] * s[2] * s[3];
    let mut apply = |kernel: Var| -> Result<Var> {
        let ks = tape.shape(kernel)[2];
        let y = tape.conv3d(t, kernel, 1, ks / 2)?;
        let ch = tape.shape(y)[0];
        if ch % heads != 0 {
            return Err(Error::Config(format!("{ch} channels not divisible by {heads} heads")));
        }
        Ok(tape.reshape(y, &[heads, ch / heads, lambda])?)
    };
    Ok((apply(q_kernel)?, apply(k_kernel)?, apply(v_kernel)?))
}

/// `ω = α_w + α_h + α_d`, shape `[n_h', h, w, d, c]`.
pub fn fuse_positions(tape: &mut Tape, pos_w: Var, pos_h: Var, pos_d: Var) -> Result<Var> {
    let hw = tape.add(pos_w, pos_h)?;
    Ok(tape.add(hw, pos_d)?)
}

/// `[n_h', h, w, d, c]` to the `[n_h', c, λ]` sequence layout of [`idftm_qkv`].
pub fn position_sequence(tape: &mut Tape, omega: Var) -> Result<Var> {
    let s = tape.shape(omega).to_vec();
    let moved = tape.permute(omega, &[0, 4, 1, 2, 3])?;
    Ok(tape.reshape(moved, &[s[0], s[4], s[1] * s[2] * s[3]])?)
}

/// `E = KᵀQ + RᵀQ` per head, `[n_h', λ, λ]`; optionally divided by `√c`.
pub fn idftm_intensity(tape: &mut Tape, q: Var, k: Var, r: Var, scaled: bool) -> Result<Var> {
    let kt = tape.permute(k, &[0, 2, 1])?;
    let rt = tape.permute(r, &[0, 2, 1])?;
    let content = tape.bmm(kt, q)?;
    let position = tape.bmm(rt, q)?;
    let e = tape.add(content, position)?;
    if scaled {
        let c = tape.shape(q)[1] as f64;
        Ok(tape.scale(e, 1.0 / c.sqrt())?)
    } else {
        Ok(e)
    }
}

/// `H_V[r] = H_B[r] · V[r]ᵀ`, `[n_h', λ, c]`.
pub fn idftm_apply_values(tape: &mut Tape, h_b: Var, v: Var) -> Result<Var> {
    let vt = tape.permute(v, &[0, 2, 1])?;
    Ok(tape.bmm(h_b, vt)?)
}

/// Back to `[n_h'·c, h, w, d]` (head-major channels), then the 1×1×1 projection.
pub fn idftm_unflatten(tape: &mut Tape, h_v: Var, extents: [usize; 3]) -> Result<Var> {
    let s = tape.shape(h_v).to_vec();
    let moved = tape.permute(h_v, &[0, 2, 1])?;
    Ok(tape.reshape(moved, &[s[0] * s[2], extents[0], extents[1], extents[2]])?)
}

pub fn idftm_reproject(tape: &mut Tape, h_v: Var, out_proj: Var, extents: [usize; 3]) -> Result<Var> {
    let block = idftm_unflatten(tape, h_v, extents)?;
    Ok(tape.conv3d(block, out_proj, 1, 0)?)
}

/// Full IDFTM: shape-preserving attention over the voxels of `t`.
pub fn idftm_forward(ctx: &mut Ctx, t: Var, p: &IdftmParams) -> Result<Var> {
    let extents = {
        let s = ctx.tape.shape(t);
        [s[1], s[2], s[3]]
    };
    let (qk, kk, vk) = (ctx.p(p.q_kernel), ctx.p(p.k_kernel), ctx.p(p.v_kernel));
    let (pw, ph, pd) = (ctx.p(p.pos_w), ctx.p(p.pos_h), ctx.p(p.pos_d));
    let (logic, weight, out) = (ctx.p(p.head_logic), ctx.p(p.head_weight), ctx.p(p.out_proj));
    let tape = &mut *ctx.tape;
    let (q, k, v) = idftm_qkv(tape, t, qk, kk, vk, p.heads)?;
    let omega = fuse_positions(tape, pw, ph, pd)?;
    let r = position_sequence(tape, omega)?;
    let e = idftm_intensity(tape, q, k, r, p.scaled)?;
    let h_a = idftm_logic_fusion(tape, e, logic)?;
    let h_b = idftm_weight_fusion(tape, h_a, weight)?;
    let h_v = idftm_apply_values(tape, h_b, v)?;
    idftm_reproject(tape, h_v, out, extents)
}

/// Residual branch `relu(norm(conv(relu(norm(conv(T))))))`.
pub fn rbm_branch(ctx: &mut Ctx, t: Var, p: &RbmParams) -> Result<Var> {
    let (c1, g1, b1) = (ctx.p(p.conv1), ctx.p(p.norm1_gamma), ctx.p(p.norm1_beta));
    let (c2, g2, b2) = (ctx.p(p.conv2), ctx.p(p.norm2_gamma), ctx.p(p.norm2_beta));
    let tape = &mut *ctx.tape;
    let x = tape.conv3d(t, c1, 1, 1)?;
    let x = tape.instance_norm(x, g1, b1, NORM_EPS)?;
    let x = tape.relu(x)?;
    let x = tape.conv3d(x, c2, 1, 1)?;
    let x = tape.instance_norm(x, g2, b2, NORM_EPS)?;
    Ok(tape.relu(x)?)
}

/// `branch(T) + skip(T)`; the skip is the identity unless channels change.
pub fn rbm_forward(ctx: &mut Ctx, t: Var, p: &RbmParams) -> Result<Var> {
    let branch = rbm_branch(ctx, t, p)?;
    let skip = match p.skip {
        Some(w) => {
            let w = ctx.p(w);
            ctx.tape.conv3d(t, w, 1, 0)?
        }
        None => t,
    };
    Ok(ctx.tape.add(branch, skip)?)
}

/// `T' = IDFTM(T)`, `T'' = T' + R(T')` with `R` the residual RBM branch.
pub fn idftm_rbm_block(ctx: &mut Ctx, t: Var, idftm: &IdftmParams, rbm: &RbmParams) -> Result<Var> {
    let t1 = idftm_forward(ctx, t, idftm)?;
    let r = rbm_branch(ctx, t1, rbm)?;
    Ok(ctx.tape.add(t1, r)?)
}

pub fn cascade_forward(ctx: &mut Ctx, t: Var, cascade: &Cascade) -> Result<Var> {
    match cascade {
        Cascade::IdftmRbm(a, b) => idftm_rbm_block(ctx, t, a, b),
        Cascade::IdftmIdftm(a, b) => {
            let t1 = idftm_forward(ctx, t, a)?;
            let r = idftm_forward(ctx, t1, b)?;
            Ok(ctx.tape.add(t1, r)?)
        }
        Cascade::RbmRbm(a, b) => {
            let t1 = rbm_forward(ctx, t, a)?;
            let r = rbm_branch(ctx, t1, b)?;
            Ok(ctx.tape.add(t1, r)?)
        }
    }
}

/// Encoder taps (shallowest first) plus the raw input block to `[4, H, W, D]` logits.
pub fn decoder_forward(ctx: &mut Ctx, taps: &[TokenSequence], input: Var, decoder: &Decoder) -> Result<Var> {
    let n = decoder.stages.len();
    if taps.len() != n {
        return Err(Error::Config(format!("decoder has {n} stages but got {} taps", taps.len())));
    }
    let mut x: Option<Var> = None;
    for stage in &decoder.stages {
        let b = stage.scale;
        let tap = tokens_to_block(ctx.tape, &taps[b - 1])?;
        let entered = match (&stage.entry, x) {
            (StageEntry::Deepest { proj }, None) => conv(ctx, tap, proj, 0)?,
            (StageEntry::Upper { up, skip_chain, fuse }, Some(prev)) => {
                let up_x = upsample(ctx, prev, up, 2)?;
                let mut skip = tap;
                for p in skip_chain {
                    skip = upsample(ctx, skip, p, 2)?;
                }
                let (su, ss) = (ctx.tape.shape(up_x).to_vec(), ctx.tape.shape(skip).to_vec());
                if su != ss || su[1..] != stage.extents[..] {
                    return Err(Error::Config(format!(
                        "decoder stage {b}: upsampled path {su:?} and skip {ss:?} do not match extents {:?}",
                        stage.extents
                    )));
                }
                let cat = ctx.tape.concat(&[up_x, skip], 0)?;
                conv(ctx, cat, fuse, 0)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "decoder stage {b}: stage order does not start at the deepest scale"
                )))
            }
        };
        ctx.note(|| format!("decoder.stage{b}.entry"), entered);
        let out = cascade_forward(ctx, entered, &stage.cascade)?;
        ctx.note(|| format!("decoder.stage{b}.cascade"), out);
        x = Some(out);
    }
    let head = &decoder.head;
    let x = x.ok_or_else(|| Error::Config("decoder has no stages".into()))?;
    let up = upsample(ctx, x, &head.up, head.factor)?;
    ctx.note(|| "decoder.head.up".into(), up);
    let inp = conv(ctx, input, &head.input_conv, 1)?;
    let inp = ctx.tape.relu(inp)?;
    if ctx.tape.shape(up)[1..] != ctx.tape.shape(inp)[1..] {
        return Err(Error::Config(format!(
            "decoder head: restored extents {:?} differ from input {:?}",
            &ctx.tape.shape(up)[1..],
            &ctx.tape.shape(inp)[1..]
        )));
    }
    let cat = ctx.tape.concat(&[up, inp], 0)?;
    let logits = conv(ctx, cat, &head.out, 0)?;
    ctx.note(|| "logits".into(), logits);
    Ok(logits)
}
