//! Building blocks of the hourglass: embedding, attention sublayers,
//! contextual fusion, residual encoder/decoder layers and the regression head.
//!
//! Feature maps are kept as `[N, L, d]` (turbine, time, channel). The
//! temporal branch attends along `L` with turbines as the batch; the spatial
//! branch swaps the first two axes and attends along `N`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::BoundParams;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Temporal- and spatial-branch states of one scale, both `[N, L, d]`.
///
/// With contextual fusion (or a single active branch) both handles point at
/// the same node: the two branches are two views of one feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub tem: Var,
    pub spa: Var,
}

impl Streams {
    pub fn shared(v: Var) -> Self {
        Streams { tem: v, spa: v }
    }

    pub fn is_shared(&self) -> bool {
        self.tem == self.spa
    }

    /// Applies `f` to each distinct branch.
    pub fn map(self, tape: &mut Tape, mut f: impl FnMut(&mut Tape, Var) -> Result<Var>) -> Result<Streams> {
        let tem = f(tape, self.tem)?;
        let spa = if self.is_shared() { tem } else { f(tape, self.spa)? };
        Ok(Streams { tem, spa })
    }

    /// Single feature map: the shared view, or the branch mean when the
    /// branches were never fused.
    pub fn merged(self, tape: &mut Tape) -> Result<Var> {
        if self.is_shared() {
            return Ok(self.tem);
        }
        let sum = tape.add(self.tem, self.spa)?;
        Ok(tape.scale(sum, 0.5))
    }
}

/// Shared state threaded through the layers of one forward pass.
pub struct LayerCtx<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a BoundParams,
    /// Every attention-weight matrix computed so far.
    pub attention: &'a mut Vec<Var>,
}

/// Fixed sinusoidal encoding of absolute timestamp indices, `[1, T, d]`.
/// Channel pair `k` holds the `k+1`-th harmonic of a cycle of `period`
/// timestamps, so every index maps onto a point of the same daily curve.
pub fn positional_encoding(timestamps: &[usize], d: usize, period: usize) -> Tensor {
    let mut data = Vec::with_capacity(timestamps.len() * d);
    for &t in timestamps {
        let phase = (t % period) as f64 / period as f64;
        for i in 0..d {
            let angle = std::f64::consts::TAU * (i / 2 + 1) as f64 * phase;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[1, timestamps.len(), d], data).expect("positional encoding shape")
}

/// 1×1 conv + ReLU, then temporal position encodings along `T` and turbine
/// embeddings along `N`. Returns the `[N, T, d]` map behind both views.
pub fn embed_inputs(tape: &mut Tape, x: Var, timestamps: &[usize], ctx: &LayerCtx) -> Result<Var> {
    let cfg = ctx.cfg;
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != cfg.n_turbines || s[2] != cfg.n_channels {
        return Err(Error::shape(format!(
            "input {s:?} does not match {} turbines with {} channels",
            cfg.n_turbines, cfg.n_channels
        )));
    }
    if timestamps.len() != s[1] {
        return Err(Error::shape(format!("{} timestamps for {} steps", timestamps.len(), s[1])));
    }
    let w = ctx.params.get("embed.w")?;
    let b = ctx.params.get("embed.b")?;
    let conv = tape.pointwise_conv(x, w, b, true)?;
    let pe = tape.constant(positional_encoding(timestamps, cfg.d_model, cfg.time_period));
    let with_time = tape.add_broadcast(conv, pe)?;
    let table = ctx.params.get("turbine.table")?;
    let table = tape.reshape(table, &[cfg.n_turbines, 1, cfg.d_model])?;
    tape.add_broadcast(with_time, table)
}

/// Zero-filled decoder features `[N, F, C]`; only time and turbine identity
/// reach the decoder, through the embedding.
pub fn build_decoder_input(cfg: &ModelConfig, future_timestamps: &[usize]) -> Result<Tensor> {
    if future_timestamps.len() != cfg.horizon_len {
        return Err(Error::shape(format!(
            "{} future timestamps for horizon {}",
            future_timestamps.len(),
            cfg.horizon_len
        )));
    }
    Ok(Tensor::zeros(&[cfg.n_turbines, cfg.horizon_len, cfg.n_channels]))
}

/// Multi-head scaled dot-product attention, queries from `q_src`
/// (`[B, Lq, d]`), keys and values from `kv_src` (`[B, Lk, d]`).
fn attention(tape: &mut Tape, q_src: Var, kv_src: Var, prefix: &str, ctx: &mut LayerCtx) -> Result<Var> {
    let (sq, skv) = (tape.shape(q_src).to_vec(), tape.shape(kv_src).to_vec());
    if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != skv[2] {
        return Err(Error::Contract(format!("attention queries {sq:?} against keys {skv:?}")));
    }
    let (h, dk, dv) = (ctx.cfg.n_heads, ctx.cfg.d_k, ctx.cfg.d_v);
    let p = |name: &str| ctx.params.get(&format!("{prefix}.{name}"));
    let (wq, wk, wv, wo) = (p("wq")?, p("wk")?, p("wv")?, p("wo")?);
    let q = tape.linear(q_src, wq)?;
    let k = tape.linear(kv_src, wk)?;
    let v = tape.linear(kv_src, wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let qi = tape.narrow(q, 2, i * dk, dk)?;
        let ki = tape.narrow(k, 2, i * dk, dk)?;
        let vi = tape.narrow(v, 2, i * dv, dv)?;
        let kt = tape.transpose_last2(ki)?;
        let scores = tape.bmm(qi, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        ctx.attention.push(weights);
        heads.push(tape.bmm(weights, vi)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
    tape.linear(cat, wo)
}

/// Self-attention over each sequence of a `[B, L, d]` batch.
pub fn msa(tape: &mut Tape, x: Var, prefix: &str, ctx: &mut LayerCtx) -> Result<Var> {
    attention(tape, x, x, prefix, ctx)
}

/// Decoder queries attending over same-scale encoder outputs.
pub fn cross_attention(tape: &mut Tape, dec: Var, enc: Var, prefix: &str, ctx: &mut LayerCtx) -> Result<Var> {
    attention(tape, dec, enc, prefix, ctx)
}

/// Spatial-branch wrapper: attends over turbines at every timestamp.
fn along_turbines(
    tape: &mut Tape,
    x: Var,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let xs = tape.swap_axes01(x)?;
    let out = f(tape, xs)?;
    tape.swap_axes01(out)
}

/// Contextual fusion: concatenates the stacked spatial and temporal branch
/// outputs along channels (`[N, L, 2d]`) and reduces them back to `d`
/// channels with a 1×1 conv + ReLU.
pub fn cfb(tape: &mut Tape, attn_tem: Var, attn_spa: Var, prefix: &str, ctx: &LayerCtx) -> Result<Var> {
    if tape.shape(attn_tem) != tape.shape(attn_spa) {
        return Err(Error::shape(format!(
            "fusion of temporal {:?} with spatial {:?}",
            tape.shape(attn_tem),
            tape.shape(attn_spa)
        )));
    }
    let sp = tape.concat(&[attn_spa, attn_tem], 2)?;
    let w = ctx.params.get(&format!("{prefix}.cfb.w"))?;
    let b = ctx.params.get(&format!("{prefix}.cfb.b"))?;
    tape.pointwise_conv(sp, w, b, true)
}

/// `FUSE(attn) + input` per branch; identity fusion without CFB.
fn fuse_residual(
    tape: &mut Tape,
    state: Streams,
    a_tem: Option<Var>,
    a_spa: Option<Var>,
    prefix: &str,
    ctx: &LayerCtx,
) -> Result<Streams> {
    match (a_tem, a_spa) {
        (Some(at), Some(asp)) if ctx.cfg.use_cfb => {
            let fused = cfb(tape, at, asp, prefix, ctx)?;
            let tem = tape.add(fused, state.tem)?;
            let spa = if state.is_shared() { tem } else { tape.add(fused, state.spa)? };
            Ok(Streams { tem, spa })
        }
        (Some(at), Some(asp)) => Ok(Streams { tem: tape.add(at, state.tem)?, spa: tape.add(asp, state.spa)? }),
        (Some(at), None) => Ok(Streams::shared(tape.add(at, state.tem)?)),
        (None, Some(asp)) => Ok(Streams::shared(tape.add(asp, state.spa)?)),
        (None, None) => Err(Error::config("no active branch")),
    }
}

/// Residual spatiotemporal encoder layer.
pub fn rstel(tape: &mut Tape, state: Streams, prefix: &str, ctx: &mut LayerCtx) -> Result<Streams> {
    let a_tem = if ctx.cfg.use_temporal_branch {
        Some(msa(tape, state.tem, &format!("{prefix}.tem"), ctx)?)
    } else {
        None
    };
    let a_spa = if ctx.cfg.use_spatial_branch {
        let p = format!("{prefix}.spa");
        Some(along_turbines(tape, state.spa, |tape, x| msa(tape, x, &p, ctx))?)
    } else {
        None
    };
    fuse_residual(tape, state, a_tem, a_spa, prefix, ctx)
}

/// Residual spatiotemporal decoder layer: self-attention, then a residual
/// cross-attention over the same-scale encoder output, then fusion and the
/// outer residual.
pub fn rstdl(tape: &mut Tape, state: Streams, enc: Streams, prefix: &str, ctx: &mut LayerCtx) -> Result<Streams> {
    if tape.shape(state.tem) != tape.shape(enc.tem) {
        return Err(Error::Contract(format!(
            "decoder state {:?} paired with encoder output {:?}",
            tape.shape(state.tem),
            tape.shape(enc.tem)
        )));
    }
    let self_then_cross = |tape: &mut Tape, q: Var, kv: Var, branch: &str, ctx: &mut LayerCtx| -> Result<Var> {
        let s = msa(tape, q, &format!("{prefix}.{branch}_self"), ctx)?;
        let c = cross_attention(tape, s, kv, &format!("{prefix}.{branch}_cross"), ctx)?;
        tape.add(s, c)
    };
    let a_tem = if ctx.cfg.use_temporal_branch {
        Some(self_then_cross(tape, state.tem, enc.tem, "tem", ctx)?)
    } else {
        None
    };
    let a_spa = if ctx.cfg.use_spatial_branch {
        let q = tape.swap_axes01(state.spa)?;
        let kv = tape.swap_axes01(enc.spa)?;
        let out = self_then_cross(tape, q, kv, "spa", ctx)?;
        Some(tape.swap_axes01(out)?)
    } else {
        None
    };
    fuse_residual(tape, state, a_tem, a_spa, prefix, ctx)
}

/// Dropout followed by the per-position affine map `[N, F, 2d] -> [N, F, 1]`.
pub fn regress(tape: &mut Tape, o_orign: Var, training: bool, rng: &mut RngStream, ctx: &LayerCtx) -> Result<Var> {
    let width = *tape.shape(o_orign).last().unwrap();
    if width != 2 * ctx.cfg.d_model {
        return Err(Error::shape(format!(
            "regression input has {width} channels, expected {}",
            2 * ctx.cfg.d_model
        )));
    }
    let dropped = tape.dropout(o_orign, ctx.cfg.dropout_rate, training, rng)?;
    let w = ctx.params.get("head.w")?;
    let b = ctx.params.get("head.b")?;
    tape.pointwise_conv(dropped, w, b, false)
}
