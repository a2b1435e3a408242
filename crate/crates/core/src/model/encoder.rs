//! Hierarchical shifted-window encoder.
//!
//! Tokens are kept as rows of a `[B·H·W, C]` matrix. Cyclic shift plus window
//! partition is one row permutation (and its inverse undoes both), patch
//! merging is a row gather followed by a reshape, so the whole encoder is
//! expressed with the generic graph ops.

use std::rc::Rc;
use std::sync::Arc;

use super::{EncoderConfig, InitKind, Layout, Model, Registry, INIT_STD};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mask value between tokens that came from different regions of the
/// shifted image.
const SHIFT_MASK: f64 = -100.0;

pub(crate) fn block_prefix(stage: usize, block: usize) -> String {
    format!("encoder.encoder.layers.{stage}.blocks.{block}")
}

pub(crate) fn register(cfg: &EncoderConfig, reg: &mut Registry) {
    let (c, p) = (cfg.embed_dim, cfg.patch_size);
    reg.add(
        "encoder.embeddings.patch_embeddings.projection.weight".into(),
        &[c, 3, p, p],
        InitKind::Normal(INIT_STD),
    );
    reg.add("encoder.embeddings.patch_embeddings.projection.bias".into(), &[c], InitKind::Zeros);
    reg.layer_norm("encoder.embeddings.norm", c);
    let table = (2 * cfg.window_size - 1).pow(2);
    for stage in 0..cfg.stages() {
        let d = cfg.stage_dim(stage);
        let hidden = d * cfg.mlp_ratio;
        for block in 0..cfg.depths[stage] {
            let pre = block_prefix(stage, block);
            reg.layer_norm(&format!("{pre}.layernorm_before"), d);
            reg.add(
                format!("{pre}.attention.self.relative_position_bias_table"),
                &[table, cfg.num_heads[stage]],
                InitKind::Zeros,
            );
            for proj in ["query", "key", "value"] {
                reg.linear(&format!("{pre}.attention.self.{proj}"), d, d, Layout::Linear, true, INIT_STD);
            }
            reg.linear(&format!("{pre}.attention.output.dense"), d, d, Layout::Linear, true, INIT_STD);
            reg.layer_norm(&format!("{pre}.layernorm_after"), d);
            reg.linear(&format!("{pre}.intermediate.dense"), d, hidden, Layout::Linear, true, INIT_STD);
            reg.linear(&format!("{pre}.output.dense"), hidden, d, Layout::Linear, true, INIT_STD);
        }
        if stage + 1 < cfg.stages() {
            let down = format!("encoder.encoder.layers.{stage}.downsample");
            reg.linear(&format!("{down}.reduction"), 4 * d, 2 * d, Layout::Linear, false, INIT_STD);
            reg.layer_norm(&format!("{down}.norm"), 4 * d);
        }
    }
    reg.layer_norm("encoder.layernorm", cfg.output_dim());
}

/// Static index tables for one window layout (one shift setting).
#[derive(Debug)]
struct WindowLayout {
    /// Window-partitioned row -> source token row, per image.
    perm: Vec<usize>,
    inverse: Vec<usize>,
    /// `[nW, N, N]` additive mask, present for shifted layouts.
    mask: Option<Vec<f64>>,
}

#[derive(Debug)]
struct StagePlan {
    res: usize,
    window: usize,
    rel_index: Vec<usize>,
    plain: WindowLayout,
    shifted: Option<WindowLayout>,
    merge: Option<Vec<usize>>,
}

/// Precomputed encoder index tables, plus whether query/key/value run as one
/// fused matmul. Built on every forward unless cached by the compile hook.
#[derive(Debug)]
pub struct EncoderPlan {
    stages: Vec<StagePlan>,
    pub fused_qkv: bool,
}

impl EncoderPlan {
    pub fn new(cfg: &EncoderConfig, fused_qkv: bool) -> Self {
        let stages = (0..cfg.stages())
            .map(|s| {
                let res = cfg.stage_resolution(s);
                let w = cfg.window_size;
                let shift = w / 2;
                StagePlan {
                    res,
                    window: w,
                    rel_index: relative_position_index(w),
                    plain: window_layout(res, w, 0),
                    shifted: (res > w && cfg.depths[s] > 1 && shift > 0).then(|| window_layout(res, w, shift)),
                    merge: (s + 1 < cfg.stages()).then(|| merge_index(res)),
                }
            })
            .collect();
        Self { stages, fused_qkv }
    }
}

fn relative_position_index(w: usize) -> Vec<usize> {
    let n = w * w;
    let mut idx = Vec::with_capacity(n * n);
    for p in 0..n {
        let (i1, j1) = (p / w, p % w);
        for q in 0..n {
            let (i2, j2) = (q / w, q % w);
            idx.push((i1 + w - 1 - i2) * (2 * w - 1) + (j1 + w - 1 - j2));
        }
    }
    idx
}

fn window_layout(res: usize, w: usize, shift: usize) -> WindowLayout {
    let nw_side = res / w;
    let n = w * w;
    let mut perm = Vec::with_capacity(res * res);
    for wh in 0..nw_side {
        for ww in 0..nw_side {
            for i in 0..w {
                for j in 0..w {
                    let h = (wh * w + i + shift) % res;
                    let x = (ww * w + j + shift) % res;
                    perm.push(h * res + x);
                }
            }
        }
    }
    let mut inverse = vec![0; perm.len()];
    for (r, &src) in perm.iter().enumerate() {
        inverse[src] = r;
    }
    let mask = (shift > 0).then(|| {
        // region label of each position in shifted coordinates
        let band = |v: usize| {
            if v < res - w {
                0
            } else if v < res - shift {
                1
            } else {
                2
            }
        };
        let mut mask = Vec::with_capacity(nw_side * nw_side * n * n);
        for wh in 0..nw_side {
            for ww in 0..nw_side {
                let labels: Vec<usize> = (0..n)
                    .map(|p| band(wh * w + p / w) * 3 + band(ww * w + p % w))
                    .collect();
                for &a in &labels {
                    for &b in &labels {
                        mask.push(if a == b { 0.0 } else { SHIFT_MASK });
                    }
                }
            }
        }
        mask
    });
    WindowLayout { perm, inverse, mask }
}

/// Per-image gather for patch merging: each output token takes rows
/// (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1) in that order.
fn merge_index(res: usize) -> Vec<usize> {
    let half = res / 2;
    let mut idx = Vec::with_capacity(res * res);
    for i in 0..half {
        for j in 0..half {
            for (dh, dw) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * i + dh) * res + 2 * j + dw);
            }
        }
    }
    idx
}

fn batched(per_image: &[usize], rows_per_image: usize, batch: usize) -> Rc<[usize]> {
    (0..batch)
        .flat_map(|b| per_image.iter().map(move |&r| b * rows_per_image + r))
        .collect()
}

/// `[B, 3, S, S]` images to `[B·(S/p)², 3·p·p]` patch rows.
fn im2col<T: Scalar>(images: &Tensor<f32>, p: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::Shape(format!("encoder expects [B, 3, S, S] images, got {s:?}")));
    }
    let (b, side) = (s[0], s[2]);
    let hp = side / p;
    let data = images.data();
    let mut out = Vec::with_capacity(b * hp * hp * 3 * p * p);
    for bi in 0..b {
        for ph in 0..hp {
            for pw in 0..hp {
                for c in 0..3 {
                    for kh in 0..p {
                        let row = ((bi * 3 + c) * side + ph * p + kh) * side + pw * p;
                        out.extend(data[row..row + p].iter().map(|&v| T::from_f32(v)));
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b * hp * hp, 3 * p * p], out)
}

pub(crate) fn forward<T: Scalar>(model: &Model<T>, g: &mut Graph<'_, T>, images: &Tensor<f32>) -> Result<Var> {
    let cfg = &model.config.encoder;
    if images.dim(2) != cfg.input_side {
        return Err(Error::Shape(format!(
            "image side {} does not match encoder input_side {}",
            images.dim(2),
            cfg.input_side
        )));
    }
    let owned;
    let plan: &EncoderPlan = match model.plan() {
        Some(p) => p,
        None => {
            owned = Arc::new(EncoderPlan::new(cfg, false));
            &owned
        }
    };
    let batch = images.dim(0);
    let (c, p, eps) = (cfg.embed_dim, cfg.patch_size, cfg.layer_norm_eps);

    let cols = g.constant(im2col::<T>(images, p)?);
    let w = g.param("encoder.embeddings.patch_embeddings.projection.weight")?;
    let w = g.reshape(w, &[c, 3 * p * p])?;
    let b = g.param("encoder.embeddings.patch_embeddings.projection.bias")?;
    let x = g.matmul(cols, w, true)?;
    let x = g.add(x, b)?;
    let x = model.layer_norm(g, x, "encoder.embeddings.norm", eps)?;
    let mut x = g.dropout(x, cfg.dropout);

    for (s, sp) in plan.stages.iter().enumerate() {
        for blk in 0..cfg.depths[s] {
            let layout = match (&sp.shifted, blk % 2) {
                (Some(l), 1) => l,
                _ => &sp.plain,
            };
            x = block(model, g, x, batch, s, blk, sp, layout, plan.fused_qkv)?;
        }
        if let Some(merge) = &sp.merge {
            let d = cfg.stage_dim(s);
            let idx = batched(merge, sp.res * sp.res, batch);
            let rows = idx.len() / 4;
            let m = g.gather_rows(x, idx)?;
            let m = g.reshape(m, &[rows, 4 * d])?;
            let down = format!("encoder.encoder.layers.{s}.downsample");
            let m = model.layer_norm(g, m, &format!("{down}.norm"), eps)?;
            x = model.linear(g, m, &format!("{down}.reduction"), Layout::Linear)?;
        }
    }
    model.layer_norm(g, x, "encoder.layernorm", eps)
}

#[allow(clippy::too_many_arguments)]
fn block<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    x: Var,
    batch: usize,
    stage: usize,
    blk: usize,
    sp: &StagePlan,
    layout: &WindowLayout,
    fused_qkv: bool,
) -> Result<Var> {
    let cfg = &model.config.encoder;
    let pre = block_prefix(stage, blk);
    let eps = cfg.layer_norm_eps;
    let d = cfg.stage_dim(stage);
    let heads = cfg.num_heads[stage];
    let hd = d / heads;
    let n = sp.window * sp.window;
    let hw = sp.res * sp.res;
    let nw = hw / n;
    let bw = batch * nw;

    let h = model.layer_norm(g, x, &format!("{pre}.layernorm_before"), eps)?;
    let h = g.gather_rows(h, batched(&layout.perm, hw, batch))?;

    // query / key / value, each [B·nW·N, d]
    let att = format!("{pre}.attention.self");
    let adapted = ["query", "key", "value"]
        .iter()
        .any(|m| model.adapters.contains_key(&format!("{att}.{m}")));
    let (q, k, v) = if fused_qkv && !adapted {
        let ws: Vec<Var> = ["query", "key", "value"]
            .iter()
            .map(|m| g.param(&format!("{att}.{m}.weight")))
            .collect::<Result<_>>()?;
        let bs: Vec<Var> = ["query", "key", "value"]
            .iter()
            .map(|m| g.param(&format!("{att}.{m}.bias")))
            .collect::<Result<_>>()?;
        let w = g.concat0(&ws)?;
        let bias = g.concat0(&bs)?;
        let qkv = g.matmul(h, w, true)?;
        let qkv = g.add(qkv, bias)?;
        let rows = bw * n;
        let qkv = g.reshape(qkv, &[rows, 3, d])?;
        let qkv = g.permute(qkv, &[1, 0, 2]);
        let q = g.narrow0(qkv, 0, 1)?;
        let k = g.narrow0(qkv, 1, 1)?;
        let v = g.narrow0(qkv, 2, 1)?;
        (q, k, v)
    } else {
        (
            model.linear(g, h, &format!("{att}.query"), Layout::Linear)?,
            model.linear(g, h, &format!("{att}.key"), Layout::Linear)?,
            model.linear(g, h, &format!("{att}.value"), Layout::Linear)?,
        )
    };
    let split = |g: &mut Graph<'_, T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[bw, n, heads, hd])?;
        let t = g.permute(t, &[0, 2, 1, 3]);
        g.reshape(t, &[bw * heads, n, hd])
    };
    let q = split(g, q)?;
    let q = g.scale(q, 1.0 / (hd as f64).sqrt());
    let k = split(g, k)?;
    let v = split(g, v)?;

    let scores = g.bmm(q, k, true)?;
    let scores = g.reshape(scores, &[bw, heads, n, n])?;
    let table = g.param(&format!("{att}.relative_position_bias_table"))?;
    let bias = g.gather_rows(table, Rc::from(sp.rel_index.as_slice()))?;
    let bias = g.permute(bias, &[1, 0]);
    let bias = g.reshape(bias, &[heads, n, n])?;
    let mut scores = g.add(scores, bias)?;
    if let Some(mask) = &layout.mask {
        let mut m = Vec::with_capacity(nw * heads * n * n);
        for win in mask.chunks(n * n) {
            for _ in 0..heads {
                m.extend(win.iter().map(|&v| T::from_f64(v)));
            }
        }
        let m = g.constant(Tensor::from_vec(&[nw, heads, n, n], m)?);
        let s5 = g.reshape(scores, &[batch, nw, heads, n, n])?;
        scores = g.add(s5, m)?;
    }
    let scores = g.reshape(scores, &[bw * heads, n, n])?;
    let probs = g.softmax(scores);
    let probs = g.dropout(probs, cfg.dropout);
    let ctx = g.bmm(probs, v, false)?;
    let ctx = g.reshape(ctx, &[bw, heads, n, hd])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[bw * n, d])?;
    let out = model.linear(g, ctx, &format!("{pre}.attention.output.dense"), Layout::Linear)?;
    let out = g.dropout(out, cfg.dropout);
    let out = g.gather_rows(out, batched(&layout.inverse, hw, batch))?;
    let x = g.add(x, out)?;

    let h = model.layer_norm(g, x, &format!("{pre}.layernorm_after"), eps)?;
    let h = model.linear(g, h, &format!("{pre}.intermediate.dense"), Layout::Linear)?;
    let h = g.gelu(h);
    let h = model.linear(g, h, &format!("{pre}.output.dense"), Layout::Linear)?;
    let h = g.dropout(h, cfg.dropout);
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_permutation_round_trips() {
        for shift in [0, 3] {
            let l = window_layout(14, 7, shift);
            let mut seen = l.perm.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..196).collect::<Vec<_>>());
            for (r, &src) in l.perm.iter().enumerate() {
                assert_eq!(l.inverse[src], r);
            }
        }
    }

    #[test]
    fn shifted_window_matches_roll_then_partition() {
        // roll by -shift then cut windows, done directly on a labelled grid
        let (res, w, shift) = (14usize, 7usize, 3usize);
        let rolled: Vec<usize> = (0..res * res)
            .map(|t| {
                let (h, x) = (t / res, t % res);
                ((h + shift) % res) * res + (x + shift) % res
            })
            .collect();
        let mut expect = Vec::new();
        for wh in 0..res / w {
            for ww in 0..res / w {
                for i in 0..w {
                    for j in 0..w {
                        expect.push(rolled[(wh * w + i) * res + ww * w + j]);
                    }
                }
            }
        }
        assert_eq!(window_layout(res, w, shift).perm, expect);
    }

    #[test]
    fn shift_mask_blocks_cross_region_pairs() {
        let l = window_layout(14, 7, 3);
        let mask = l.mask.unwrap();
        let n = 49;
        // the first window lies entirely in region 0
        assert!(mask[..n * n].iter().all(|&v| v == 0.0));
        // the last window mixes regions: token (0,0) and (6,6) of that window differ
        let last = &mask[3 * n * n..];
        assert_eq!(last[48], SHIFT_MASK);
        assert_eq!(last[0], 0.0);
    }

    #[test]
    fn relative_index_covers_table() {
        let idx = relative_position_index(7);
        assert_eq!(idx.len(), 49 * 49);
        assert_eq!(*idx.iter().max().unwrap(), 168);
        // diagonal is the zero offset, the table centre
        assert!((0..49).all(|p| idx[p * 49 + p] == 84));
    }

    #[test]
    fn merge_order_matches_strided_concat() {
        let idx = merge_index(4);
        assert_eq!(&idx[..4], &[0, 4, 1, 5]);
        assert_eq!(&idx[4..8], &[2, 6, 3, 7]);
    }
}
