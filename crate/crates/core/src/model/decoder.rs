//! GPT-2 style decoder with per-block cross-attention; the output head is
//! tied to the token embedding.

use std::rc::Rc;

use super::{DecoderConfig, InitKind, Layout, Model, Registry, INIT_STD};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) const WTE: &str = "decoder.transformer.wte.weight";
pub(crate) const WPE: &str = "decoder.transformer.wpe.weight";

pub(crate) fn register(cfg: &DecoderConfig, reg: &mut Registry) {
    let d = cfg.d_model;
    // output projections get the depth-scaled init
    let proj_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    reg.add(WTE.into(), &[cfg.vocab_size, d], InitKind::Normal(INIT_STD));
    reg.add(WPE.into(), &[cfg.max_positions, d], InitKind::Normal(INIT_STD));
    for l in 0..cfg.n_layers {
        let pre = format!("decoder.transformer.h.{l}");
        reg.layer_norm(&format!("{pre}.ln_1"), d);
        reg.linear(&format!("{pre}.attn.c_attn"), d, 3 * d, Layout::Conv1D, true, INIT_STD);
        reg.linear(&format!("{pre}.attn.c_proj"), d, d, Layout::Conv1D, true, proj_std);
        reg.layer_norm(&format!("{pre}.ln_2"), d);
        reg.linear(&format!("{pre}.crossattention.c_attn"), d, 2 * d, Layout::Conv1D, true, INIT_STD);
        reg.linear(&format!("{pre}.crossattention.q_attn"), d, d, Layout::Conv1D, true, INIT_STD);
        reg.linear(&format!("{pre}.crossattention.c_proj"), d, d, Layout::Conv1D, true, proj_std);
        reg.layer_norm(&format!("{pre}.ln_cross_attn"), d);
        reg.linear(&format!("{pre}.mlp.c_fc"), d, 4 * d, Layout::Conv1D, true, INIT_STD);
        reg.linear(&format!("{pre}.mlp.c_proj"), 4 * d, d, Layout::Conv1D, true, proj_std);
    }
    reg.layer_norm("decoder.transformer.ln_f", d);
}

/// `[rows, parts·d]` into `parts` separate `[rows, d]` vars.
fn split_last<T: Scalar>(g: &mut Graph<'_, T>, x: Var, rows: usize, parts: usize, d: usize) -> Result<Vec<Var>> {
    let x = g.reshape(x, &[rows, parts, d])?;
    let x = g.permute(x, &[1, 0, 2]);
    (0..parts)
        .map(|i| {
            let p = g.narrow0(x, i, 1)?;
            g.reshape(p, &[rows, d])
        })
        .collect()
}

/// `[B·T, H·hd]` to `[B·H, T, hd]`.
fn heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, b: usize, t: usize, h: usize, hd: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, t, h, hd])?;
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * h, t, hd])
}

fn merge_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, b: usize, t: usize, h: usize, hd: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, h, t, hd])?;
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * t, h * hd])
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    b: usize,
    tq: usize,
    tk: usize,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let h = cfg.n_heads;
    let hd = cfg.d_model / h;
    let q = heads(g, q, b, tq, h, hd)?;
    let k = heads(g, k, b, tk, h, hd)?;
    let v = heads(g, v, b, tk, h, hd)?;
    let s = g.bmm(q, k, true)?;
    let mut s = g.scale(s, 1.0 / (hd as f64).sqrt());
    if let Some(m) = mask {
        s = g.add(s, m)?;
    }
    let p = g.softmax(s);
    let p = g.dropout(p, cfg.dropout);
    let ctx = g.bmm(p, v, false)?;
    merge_heads(g, ctx, b, tq, h, hd)
}

/// Logits `[B·T, V]`. `enc` holds `B·L` visual tokens at the decoder width.
pub(crate) fn forward<T: Scalar>(model: &Model<T>, g: &mut Graph<'_, T>, enc: Var, batch: usize, ids: &[u32]) -> Result<Var> {
    let cfg = &model.config.decoder;
    let (d, eps) = (cfg.d_model, cfg.layer_norm_eps);
    if batch == 0 || ids.len() % batch != 0 {
        return Err(Error::Shape(format!("{} ids do not form {batch} rows", ids.len())));
    }
    let t = ids.len() / batch;
    if t == 0 || t > cfg.max_positions {
        return Err(Error::Shape(format!("sequence length {t} outside 1..={}", cfg.max_positions)));
    }
    let enc_rows = g.shape(enc)[0];
    if enc_rows % batch != 0 {
        return Err(Error::Shape(format!("{enc_rows} encoder rows for batch {batch}")));
    }
    let l = enc_rows / batch;
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }

    let wte = g.param(WTE)?;
    let wpe = g.param(WPE)?;
    let tok = g.gather_rows(wte, ids.iter().map(|&i| i as usize).collect())?;
    let pos = g.gather_rows(wpe, (0..batch).flat_map(|_| 0..t).collect::<Rc<[usize]>>())?;
    let x = g.add(tok, pos)?;
    let mut x = g.dropout(x, cfg.dropout);

    let mut causal = vec![T::zero(); t * t];
    for i in 0..t {
        for j in i + 1..t {
            causal[i * t + j] = T::neg_infinity();
        }
    }
    let causal = g.constant(Tensor::from_vec(&[t, t], causal)?);
    let rows = batch * t;

    for layer in 0..cfg.n_layers {
        let pre = format!("decoder.transformer.h.{layer}");

        let h = model.layer_norm(g, x, &format!("{pre}.ln_1"), eps)?;
        let qkv = model.linear(g, h, &format!("{pre}.attn.c_attn"), Layout::Conv1D)?;
        let parts = split_last(g, qkv, rows, 3, d)?;
        let a = attention(g, parts[0], parts[1], parts[2], Some(causal), batch, t, t, cfg)?;
        let a = model.linear(g, a, &format!("{pre}.attn.c_proj"), Layout::Conv1D)?;
        let a = g.dropout(a, cfg.dropout);
        x = g.add(x, a)?;

        let h = model.layer_norm(g, x, &format!("{pre}.ln_cross_attn"), eps)?;
        let q = model.linear(g, h, &format!("{pre}.crossattention.q_attn"), Layout::Conv1D)?;
        let kv = model.linear(g, enc, &format!("{pre}.crossattention.c_attn"), Layout::Conv1D)?;
        let kv = split_last(g, kv, enc_rows, 2, d)?;
        let a = attention(g, q, kv[0], kv[1], None, batch, t, l, cfg)?;
        let a = model.linear(g, a, &format!("{pre}.crossattention.c_proj"), Layout::Conv1D)?;
        let a = g.dropout(a, cfg.dropout);
        x = g.add(x, a)?;

        let h = model.layer_norm(g, x, &format!("{pre}.ln_2"), eps)?;
        let h = model.linear(g, h, &format!("{pre}.mlp.c_fc"), Layout::Conv1D)?;
        let h = g.gelu_tanh(h);
        let h = model.linear(g, h, &format!("{pre}.mlp.c_proj"), Layout::Conv1D)?;
        let h = g.dropout(h, cfg.dropout);
        x = g.add(x, h)?;
    }
    let x = model.layer_norm(g, x, "decoder.transformer.ln_f", eps)?;
    g.matmul(x, wte, true)
}
