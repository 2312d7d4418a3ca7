//! Patch tokenization, feature embedding, learned-query channel
//! unification, and the coordinate-conditioned decoder.
//!
//! The channel axis is only ever consumed by cross-attention, so every
//! shape downstream of [`unify`] is independent of the montage.

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::array::Array;
use crate::montage::Montage;
use crate::recording::WindowBatch;
use crate::tape::{Binding, ParamId, Params, Var};
use crate::{Error, Result, Tape};

/// Raw patch grid: `(B*S) x C x P`, with row index `b*S + s`.
pub struct PatchGrid {
    pub patches: Array,
    pub batch: usize,
    pub patches_per_window: usize,
}

/// Cuts each window into `S = T_w / P` patches of length `P`.
pub fn tokenize(batch: &WindowBatch, patch_len: usize) -> Result<PatchGrid> {
    let t_w = batch.window_len;
    if patch_len == 0 || t_w % patch_len != 0 {
        return Err(Error::invalid(format!(
            "window length {t_w} not divisible by patch length {patch_len}"
        )));
    }
    let s = t_w / patch_len;
    let b = batch.batch();
    let c = batch.montage.channels();
    let mut out = vec![0f32; b * s * c * patch_len];
    for bi in 0..b {
        let win = batch.window(bi);
        for si in 0..s {
            for ci in 0..c {
                let src = &win[ci * t_w + si * patch_len..ci * t_w + (si + 1) * patch_len];
                let dst = ((bi * s + si) * c + ci) * patch_len;
                out[dst..dst + patch_len].copy_from_slice(src);
            }
        }
    }
    Ok(PatchGrid {
        patches: Array::from_vec(vec![b * s, c, patch_len], out)?,
        batch: b,
        patches_per_window: s,
    })
}

/// log(1 + |rFFT|) magnitude features of each patch row.
/// Treated as a fixed input feature: no gradient flows into the signal.
pub fn spectral_features(patches: &Array) -> Result<Array> {
    let shape = patches.shape().to_vec();
    let p = *shape.last().unwrap();
    let rows = patches.numel() / p;
    let bins = p / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(p);
    let mut out = Vec::with_capacity(rows * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); p];
    for r in 0..rows {
        for (dst, &v) in buf.iter_mut().zip(&patches.data()[r * p..(r + 1) * p]) {
            *dst = Complex64::new(v as f64, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out.push(buf[k].norm().ln_1p() as f32);
        }
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = bins;
    Array::from_vec(out_shape, out)
}

/// Parameter handles for the encoder/decoder stack.
pub struct EncoderParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub spec_w: ParamId,
    pub spec_b: ParamId,
    pub pos_w1: ParamId,
    pub pos_b1: ParamId,
    pub pos_w2: ParamId,
    pub pos_b2: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub mask_token: ParamId,
    pub unify_q: ParamId,
    pub unify_wk: ParamId,
    pub unify_wv: ParamId,
    pub unify_wo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

pub struct DecoderParams {
    pub base_query: ParamId,
    pub pos_proj: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Encoder dimensioning (see `ModelConfig` for the full model).
#[derive(Clone, Copy, Debug)]
pub struct EncoderDims {
    pub patch_len: usize,
    pub embed: usize,
    pub queries: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub temporal_feat: usize,
    pub spectral_feat: usize,
    pub pos_feat: usize,
    pub pos_hidden: usize,
}

impl EncoderParams {
    pub fn register(params: &mut Params, d: &EncoderDims, seed: u64) -> Result<Self> {
        let bins = d.patch_len / 2 + 1;
        let content = d.temporal_feat + d.spectral_feat;
        let fuse_in = content + d.pos_feat;
        let e = d.embed;
        Ok(EncoderParams {
            conv1_w: params.register_init(
                "enc/conv1/w",
                vec![d.conv_channels, 1, d.conv_kernel],
                d.conv_kernel,
                seed,
            )?,
            conv1_b: params.register("enc/conv1/b", Array::zeros(vec![d.conv_channels]))?,
            conv2_w: params.register_init(
                "enc/conv2/w",
                vec![d.temporal_feat, d.conv_channels, d.conv_kernel],
                d.conv_channels * d.conv_kernel,
                seed,
            )?,
            conv2_b: params.register("enc/conv2/b", Array::zeros(vec![d.temporal_feat]))?,
            spec_w: params.register_init("enc/spec/w", vec![bins, d.spectral_feat], bins, seed)?,
            spec_b: params.register("enc/spec/b", Array::zeros(vec![d.spectral_feat]))?,
            pos_w1: params.register_init("enc/pos/w1", vec![3, d.pos_hidden], 3, seed)?,
            pos_b1: params.register("enc/pos/b1", Array::zeros(vec![d.pos_hidden]))?,
            pos_w2: params.register_init(
                "enc/pos/w2",
                vec![d.pos_hidden, d.pos_feat],
                d.pos_hidden,
                seed,
            )?,
            pos_b2: params.register("enc/pos/b2", Array::zeros(vec![d.pos_feat]))?,
            fuse_w: params.register_init("enc/fuse/w", vec![fuse_in, e], fuse_in, seed)?,
            fuse_b: params.register("enc/fuse/b", Array::zeros(vec![e]))?,
            mask_token: params.register_init("enc/mask_token", vec![content], content, seed)?,
            unify_q: params.register_init("unify/queries", vec![d.queries, e], e, seed)?,
            unify_wk: params.register_init("unify/wk", vec![e, e], e, seed)?,
            unify_wv: params.register_init("unify/wv", vec![e, e], e, seed)?,
            unify_wo: params.register_init("unify/wo", vec![e, e], e, seed)?,
            ln_g: params.register("unify/ln/g", Array::full(vec![e], 1.0))?,
            ln_b: params.register("unify/ln/b", Array::zeros(vec![e]))?,
            ffn_w1: params.register_init("unify/ffn/w1", vec![e, 2 * e], e, seed)?,
            ffn_b1: params.register("unify/ffn/b1", Array::zeros(vec![2 * e]))?,
            ffn_w2: params.register_init("unify/ffn/w2", vec![2 * e, e], 2 * e, seed)?,
            ffn_b2: params.register("unify/ffn/b2", Array::zeros(vec![e]))?,
        })
    }
}

impl DecoderParams {
    pub fn register(params: &mut Params, d: &EncoderDims, seed: u64) -> Result<Self> {
        let e = d.embed;
        Ok(DecoderParams {
            base_query: params.register_init("dec/base_query", vec![e], e, seed)?,
            pos_proj: params.register_init("dec/pos_proj", vec![d.pos_feat, e], d.pos_feat, seed)?,
            wq: params.register_init("dec/wq", vec![e, e], e, seed)?,
            wk: params.register_init("dec/wk", vec![e, e], e, seed)?,
            wv: params.register_init("dec/wv", vec![e, e], e, seed)?,
            wo: params.register_init("dec/wo", vec![e, e], e, seed)?,
            head_w: params.register_init("dec/head/w", vec![e, d.patch_len], e, seed)?,
            head_b: params.register("dec/head/b", Array::zeros(vec![d.patch_len]))?,
        })
    }
}

/// Positional path: montage coordinates through the two-layer perceptron,
/// shared between the encoder fusion and the decoder query generator.
fn positional_features(
    t: &Tape,
    b: &Binding,
    p: &EncoderParams,
    montage: &Montage,
) -> Result<Var> {
    let c = montage.channels();
    let coords = t.leaf(&Array::from_vec(vec![c, 3], montage.coords_flat())?);
    let h = t.linear(coords, b.var(p.pos_w1), Some(b.var(p.pos_b1)))?;
    let h = t.silu(h);
    t.linear(h, b.var(p.pos_w2), Some(b.var(p.pos_b2)))
}

/// Fused patch embedding: temporal conv features, fixed spectral features
/// and positional features, concatenated and linearly fused to width E.
///
/// `mask` (one flag per `(b,s)` row) replaces the *content* features
/// (temporal + spectral) of masked patches with the learned mask token on
/// every channel; the positional part is kept so the decoder still knows
/// where each token sits.
pub fn embed(
    t: &Tape,
    b: &Binding,
    p: &EncoderParams,
    d: &EncoderDims,
    grid: &PatchGrid,
    montage: &Montage,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let shape = grid.patches.shape();
    let (groups, c, plen) = (shape[0], shape[1], shape[2]);
    let rows = groups * c;
    if !grid.patches.is_finite() {
        return Err(Error::NonFinite("embed input patches".into()));
    }

    // temporal path
    let x = t.leaf(&grid.patches.clone().reshaped(vec![rows, 1, plen])?);
    let h = t.conv1d(x, b.var(p.conv1_w), Some(b.var(p.conv1_b)))?;
    let h = t.silu(h);
    let h = t.conv1d(h, b.var(p.conv2_w), Some(b.var(p.conv2_b)))?;
    let h = t.silu(h);
    let temporal = t.mean_axis(h, 2)?; // [rows, E_t]

    // spectral path (fixed feature of the input)
    let spec = spectral_features(&grid.patches)?;
    let spec = t.leaf(&spec.reshaped(vec![rows, plen / 2 + 1])?);
    let spectral = t.linear(spec, b.var(p.spec_w), Some(b.var(p.spec_b)))?;

    let mut content = t.concat(&[temporal, spectral], 1)?; // [rows, E_t+E_f]
    if let Some(flags) = mask {
        if flags.len() != groups {
            return Err(Error::invalid(format!(
                "mask has {} entries for {groups} patch groups",
                flags.len()
            )));
        }
        let mut m = Vec::with_capacity(rows);
        for &f in flags {
            m.extend(std::iter::repeat(if f { 1.0 } else { 0.0 }).take(c));
        }
        let m = t.constant_f64(vec![rows, 1], m)?;
        let keep = t.mul_scalar(m, -1.0)?;
        let keep = t.add_scalar(keep, 1.0)?;
        let kept = t.mul(content, keep)?;
        let tok = t.reshape(b.var(p.mask_token), vec![1, d.temporal_feat + d.spectral_feat])?;
        let masked = t.mul(tok, m)?;
        content = t.add(kept, masked)?;
    }

    // positional path, replicated across patch groups
    let pos = positional_features(t, b, p, montage)?; // [C, E_p]
    let pos = t.reshape(pos, vec![1, c, d.pos_feat])?;
    let pos = t.broadcast_to(pos, vec![groups, c, d.pos_feat])?;
    let pos = t.reshape(pos, vec![rows, d.pos_feat])?;

    let fused = t.concat(&[content, pos], 1)?;
    let tokens = t.linear(fused, b.var(p.fuse_w), Some(b.var(p.fuse_b)))?;
    t.reshape(tokens, vec![groups, c, d.embed])
}

/// Single-head scaled-dot-product cross-attention from Q learned queries
/// over the channel axis, plus a residual feed-forward sublayer. Output
/// shape `(B*S) x Q x E` for any channel count.
pub fn unify(t: &Tape, b: &Binding, p: &EncoderParams, d: &EncoderDims, tokens: Var) -> Result<Var> {
    let shape = t.shape_of(tokens);
    let (groups, _c, e) = (shape[0], shape[1], shape[2]);
    let keys = t.linear(tokens, b.var(p.unify_wk), None)?;
    let values = t.linear(tokens, b.var(p.unify_wv), None)?;
    let q = t.reshape(b.var(p.unify_q), vec![1, d.queries, e])?;
    let q = t.broadcast_to(q, vec![groups, d.queries, e])?;
    let scores = t.bmm(q, t.transpose_last(keys)?)?;
    let scores = t.mul_scalar(scores, 1.0 / (e as f64).sqrt())?;
    let attn = t.softmax_last(scores)?;
    let ctx = t.bmm(attn, values)?;
    let y = t.linear(ctx, b.var(p.unify_wo), None)?;

    let normed = t.layer_norm_last(y)?;
    let normed = t.add(t.mul(normed, b.var(p.ln_g))?, b.var(p.ln_b))?;
    let f = t.linear(normed, b.var(p.ffn_w1), Some(b.var(p.ffn_b1)))?;
    let f = t.silu(f);
    let f = t.linear(f, b.var(p.ffn_w2), Some(b.var(p.ffn_b2)))?;
    t.add(y, f)
}

/// Cross-attention back to channel space. Decoder queries are generated
/// from montage coordinates (positional perceptron output projected to E,
/// plus a learned base query), so any channel count is supported — montages
/// unseen at pre-training included.
pub fn decode(
    t: &Tape,
    b: &Binding,
    enc: &EncoderParams,
    dec: &DecoderParams,
    latents: Var,
    montage: &Montage,
) -> Result<Var> {
    let shape = t.shape_of(latents);
    let (groups, _q, e) = (shape[0], shape[1], shape[2]);
    let c = montage.channels();

    let pos = positional_features(t, b, enc, montage)?; // [C, E_p]
    let queries = t.linear(pos, b.var(dec.pos_proj), None)?;
    let base = t.reshape(b.var(dec.base_query), vec![1, e])?;
    let queries = t.add(queries, base)?; // [C, E]
    let queries = t.reshape(queries, vec![1, c, e])?;
    let queries = t.broadcast_to(queries, vec![groups, c, e])?;

    let q = t.linear(queries, b.var(dec.wq), None)?;
    let k = t.linear(latents, b.var(dec.wk), None)?;
    let v = t.linear(latents, b.var(dec.wv), None)?;
    let scores = t.bmm(q, t.transpose_last(k)?)?;
    let scores = t.mul_scalar(scores, 1.0 / (e as f64).sqrt())?;
    let attn = t.softmax_last(scores)?;
    let ctx = t.bmm(attn, v)?;
    let y = t.linear(ctx, b.var(dec.wo), None)?;
    t.linear(y, b.var(dec.head_w), Some(b.var(dec.head_b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::Montage;
    use crate::recording::WindowBatch;

    fn toy_batch(b: usize, c: usize, t_w: usize) -> WindowBatch {
        let montage = Montage::template(c).unwrap();
        let windows: Vec<f32> = (0..b * c * t_w).map(|i| ((i * 37 % 101) as f32) * 0.01).collect();
        WindowBatch {
            montage,
            windows,
            window_len: t_w,
            labels: None,
            provenance: (0..b).map(|i| ("t".to_string(), i * t_w)).collect(),
        }
    }

    #[test]
    fn tokenize_partitions_exactly() {
        let batch = toy_batch(2, 16, 1280);
        let grid = tokenize(&batch, 64).unwrap();
        assert_eq!(grid.patches_per_window, 20);
        assert_eq!(grid.patches.shape(), &[40, 16, 64]);
        // flattening patches along s restores the window
        let win = batch.window(1);
        for s in 0..20 {
            for c in 0..16 {
                let row = ((1 * 20 + s) * 16 + c) * 64;
                let patch = &grid.patches.data()[row..row + 64];
                assert_eq!(patch, &win[c * 1280 + s * 64..c * 1280 + (s + 1) * 64]);
            }
        }
        assert!(tokenize(&batch, 100).is_err());
    }

    #[test]
    fn spectral_peak_at_tone_bin() {
        let p = 64;
        let k = 5;
        let data: Vec<f32> = (0..p)
            .map(|i| (2.0 * std::f32::consts::PI * k as f32 * i as f32 / p as f32).sin())
            .collect();
        let arr = Array::from_vec(vec![1, 1, p], data).unwrap();
        let feats = spectral_features(&arr).unwrap();
        let row = feats.data();
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, k);
    }
}
