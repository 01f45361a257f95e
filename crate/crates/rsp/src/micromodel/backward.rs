//! Reverse-mode pass. Walks the cached activations backwards and produces
//! gradients with respect to the parameters and, when the input carried a
//! continuous prefix, the relaxed one-hot matrix or pixel grid.

use super::forward::{gelu_derivative, Cache, PrefixInput, SeqInput};
use super::layout::{BlockLayout, Layout};
use super::{MicroLm, MicroVlm};

pub(crate) struct InputGrads {
    pub d_params: Vec<f64>,
    pub d_relaxed: Option<Vec<f64>>,
    pub d_pixels: Option<Vec<f64>>,
    pub d_patch_params: Option<Vec<f64>>,
}

/// Backward through a language-model forward. `d_logits` is `T x V`.
pub(crate) fn run(
    model: &MicroLm,
    input: &SeqInput<'_>,
    cache: &Cache,
    d_logits: &[f64],
) -> InputGrads {
    let layout = model.layout();
    let mut d_params = vec![0.0; layout.total()];
    let d_x0 = blocks_backward(&model.params, &layout, model.config(), cache, d_logits, &mut d_params);
    let d = model.config().dim;
    let v = model.config().vocab_size;
    let t = cache.len();

    // positional rows
    for p in 0..t {
        let src = &d_x0[p * d..(p + 1) * d];
        let dst = &mut d_params[layout.pos_emb.clone()][p * d..(p + 1) * d];
        for (o, &g) in dst.iter_mut().zip(src) {
            *o += g;
        }
    }

    let mut d_relaxed = None;
    let mut pos = 0usize;
    if let PrefixInput::Relaxed { matrix, rows } = input.prefix {
        let tok_emb_range = layout.tok_emb.clone();
        let mut dr = vec![0.0; rows * v];
        for r in 0..rows {
            let gx = &d_x0[r * d..(r + 1) * d];
            for tok in 0..v {
                let row = &model.params[tok_emb_range.clone()][tok * d..(tok + 1) * d];
                dr[r * v + tok] = gx.iter().zip(row).map(|(&a, &b)| a * b).sum();
                let w = matrix[r * v + tok];
                if w != 0.0 {
                    let dst = &mut d_params[tok_emb_range.clone()][tok * d..(tok + 1) * d];
                    for (o, &g) in dst.iter_mut().zip(gx) {
                        *o += w * g;
                    }
                }
            }
        }
        d_relaxed = Some(dr);
        pos = rows;
    }
    for &tok in input.tokens {
        let gx = &d_x0[pos * d..(pos + 1) * d];
        let dst = &mut d_params[layout.tok_emb.clone()][tok * d..(tok + 1) * d];
        for (o, &g) in dst.iter_mut().zip(gx) {
            *o += g;
        }
        pos += 1;
    }

    InputGrads {
        d_params,
        d_relaxed,
        d_pixels: None,
        d_patch_params: None,
    }
}

/// Backward through a vision-language forward; additionally yields pixel
/// gradients in 0-255 units (the forward's 1/255 scaling is folded in).
pub(crate) fn run_vlm(
    vlm: &MicroVlm,
    input: &SeqInput<'_>,
    cache: &Cache,
    d_logits: &[f64],
) -> InputGrads {
    let model = vlm.base();
    let layout = model.layout();
    let cfg = model.config();
    let mut d_params = vec![0.0; layout.total()];
    let d_x0 = blocks_backward(&model.params, &layout, cfg, cache, d_logits, &mut d_params);
    let d = cfg.dim;
    let t = cache.len();

    for p in 0..t {
        let src = &d_x0[p * d..(p + 1) * d];
        let dst = &mut d_params[layout.pos_emb.clone()][p * d..(p + 1) * d];
        for (o, &g) in dst.iter_mut().zip(src) {
            *o += g;
        }
    }

    let mut d_pixels = None;
    let mut d_patch = None;
    let mut prefix_len = 0usize;
    if let PrefixInput::Pixels { scaled, h, w } = input.prefix {
        let patch = vlm.patch();
        let pin = patch * patch * 3;
        let pw = &vlm.patch_params[..pin * d];
        let mut d_pp = vec![0.0; vlm.patch_params.len()];
        let mut d_px = vec![0.0; scaled.len()];
        let (ph, pw_count) = (h / patch, w / patch);
        for py in 0..ph {
            for px in 0..pw_count {
                let pos = py * pw_count + px;
                let g_emb = &d_x0[pos * d..(pos + 1) * d];
                for (o, &g) in d_pp[pin * d..].iter_mut().zip(g_emb) {
                    *o += g;
                }
                let mut i = 0usize;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let pix = ((py * patch + dy) * w + (px * patch + dx)) * 3;
                        for c in 0..3 {
                            let val = scaled[pix + c];
                            let wrow = &pw[i * d..(i + 1) * d];
                            d_px[pix + c] =
                                g_emb.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<f64>() / 255.0;
                            if val != 0.0 {
                                let dst = &mut d_pp[i * d..(i + 1) * d];
                                for (o, &g) in dst.iter_mut().zip(g_emb) {
                                    *o += val * g;
                                }
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
        d_pixels = Some(d_px);
        d_patch = Some(d_pp);
        prefix_len = ph * pw_count;
    }
    for (i, &tok) in input.tokens.iter().enumerate() {
        let pos = prefix_len + i;
        let gx = &d_x0[pos * d..(pos + 1) * d];
        let dst = &mut d_params[layout.tok_emb.clone()][tok * d..(tok + 1) * d];
        for (o, &g) in dst.iter_mut().zip(gx) {
            *o += g;
        }
    }

    InputGrads {
        d_params,
        d_relaxed: None,
        d_pixels,
        d_patch_params: d_patch,
    }
}

/// Shared trunk: unembedding, final norm, and the transformer blocks in
/// reverse. Returns the gradient flowing into the embedded input `x0`.
fn blocks_backward(
    params: &[f64],
    layout: &Layout,
    cfg: &super::ModelConfig,
    cache: &Cache,
    d_logits: &[f64],
    d_params: &mut [f64],
) -> Vec<f64> {
    let (v, d) = (cfg.vocab_size, cfg.dim);
    let m = 4 * d;
    let t = cache.len();

    // unembedding
    let mut d_lnf = vec![0.0; t * d];
    matmul_bwd(
        &mut d_lnf,
        d_params,
        layout.unemb_w.clone(),
        layout.unemb_b.clone(),
        d_logits,
        &cache.lnf_out,
        &params[layout.unemb_w.clone()],
        t,
        d,
        v,
    );

    // final layer norm; its input is the last block's residual stream
    let lnf_in = cache.blocks.last().map_or(&cache.x0, |b| &b.x2);
    let mut d_x = vec![0.0; t * d];
    layernorm_bwd(
        &mut d_x,
        d_params,
        layout.lnf_g.clone(),
        layout.lnf_b.clone(),
        &d_lnf,
        lnf_in,
        &params[layout.lnf_g.clone()],
        &cache.lnf_mean,
        &cache.lnf_rstd,
        t,
        d,
    );

    for (bi, bl) in layout.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[bi];
        let x_in = if bi == 0 { &cache.x0 } else { &cache.blocks[bi - 1].x2 };

        // mlp branch: x2 = x1 + out(gelu(fc(ln2(x1))))
        let mut d_fca = vec![0.0; t * m];
        matmul_bwd(
            &mut d_fca,
            d_params,
            bl.out_w.clone(),
            bl.out_b.clone(),
            &d_x,
            &c.fca,
            &params[bl.out_w.clone()],
            t,
            m,
            d,
        );
        let mut d_fch = d_fca;
        for (g, &x) in d_fch.iter_mut().zip(&c.fch) {
            *g *= gelu_derivative(x);
        }
        let mut d_ln2 = vec![0.0; t * d];
        matmul_bwd(
            &mut d_ln2,
            d_params,
            bl.fc_w.clone(),
            bl.fc_b.clone(),
            &d_fch,
            &c.ln2_out,
            &params[bl.fc_w.clone()],
            t,
            d,
            m,
        );
        // d_x currently holds grad wrt x2; the residual passes it to x1
        // and the mlp path adds the layer-norm contribution.
        let mut d_x1 = d_x;
        layernorm_bwd(
            &mut d_x1,
            d_params,
            bl.ln2_g.clone(),
            bl.ln2_b.clone(),
            &d_ln2,
            &c.x1,
            &params[bl.ln2_g.clone()],
            &c.ln2_mean,
            &c.ln2_rstd,
            t,
            d,
        );

        // attention branch: x1 = x_in + proj(attend(qkv(ln1(x_in))))
        let mut d_atty = vec![0.0; t * d];
        matmul_bwd(
            &mut d_atty,
            d_params,
            bl.proj_w.clone(),
            bl.proj_b.clone(),
            &d_x1,
            &c.atty,
            &params[bl.proj_w.clone()],
            t,
            d,
            d,
        );
        let mut d_qkv = vec![0.0; t * 3 * d];
        attention_bwd(&mut d_qkv, &d_atty, &c.att, &c.qkv, t, d, cfg.heads);
        let mut d_ln1 = vec![0.0; t * d];
        matmul_bwd(
            &mut d_ln1,
            d_params,
            bl.qkv_w.clone(),
            bl.qkv_b.clone(),
            &d_qkv,
            &c.ln1_out,
            &params[bl.qkv_w.clone()],
            t,
            d,
            3 * d,
        );
        let mut d_x_in = d_x1;
        layernorm_bwd(
            &mut d_x_in,
            d_params,
            bl.ln1_g.clone(),
            bl.ln1_b.clone(),
            &d_ln1,
            x_in,
            &params[bl.ln1_g.clone()],
            &c.ln1_mean,
            &c.ln1_rstd,
            t,
            d,
        );
        d_x = d_x_in;
    }
    d_x
}

/// Backward of `out = inp @ w + b`. Accumulates into `dinp` and the weight
/// and bias slices of `d_params`.
#[allow(clippy::too_many_arguments)]
fn matmul_bwd(
    dinp: &mut [f64],
    d_params: &mut [f64],
    w_range: std::ops::Range<usize>,
    b_range: std::ops::Range<usize>,
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    t: usize,
    din: usize,
    dout_dim: usize,
) {
    {
        let db = &mut d_params[b_range];
        for p in 0..t {
            let go = &dout[p * dout_dim..(p + 1) * dout_dim];
            for (o, &g) in db.iter_mut().zip(go) {
                *o += g;
            }
        }
    }
    let dw = &mut d_params[w_range];
    for p in 0..t {
        let go = &dout[p * dout_dim..(p + 1) * dout_dim];
        let xrow = &inp[p * din..(p + 1) * din];
        let drow = &mut dinp[p * din..(p + 1) * din];
        for i in 0..din {
            let wrow = &w[i * dout_dim..(i + 1) * dout_dim];
            drow[i] += go.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<f64>();
            let x = xrow[i];
            if x != 0.0 {
                let dwrow = &mut dw[i * dout_dim..(i + 1) * dout_dim];
                for (o, &g) in dwrow.iter_mut().zip(go) {
                    *o += x * g;
                }
            }
        }
    }
}

/// Backward of layer norm `y = (x - mean) * rstd * g + b`; accumulates into
/// `dinp` and the gain/bias slices.
#[allow(clippy::too_many_arguments)]
fn layernorm_bwd(
    dinp: &mut [f64],
    d_params: &mut [f64],
    g_range: std::ops::Range<usize>,
    b_range: std::ops::Range<usize>,
    dout: &[f64],
    inp: &[f64],
    gain: &[f64],
    mean: &[f64],
    rstd: &[f64],
    t: usize,
    d: usize,
) {
    for p in 0..t {
        let go = &dout[p * d..(p + 1) * d];
        let xrow = &inp[p * d..(p + 1) * d];
        let (m, r) = (mean[p], rstd[p]);
        let mut sum_gy = 0.0;
        let mut sum_gyx = 0.0;
        for i in 0..d {
            let gy = go[i] * gain[i];
            let xhat = (xrow[i] - m) * r;
            sum_gy += gy;
            sum_gyx += gy * xhat;
        }
        let inv_d = 1.0 / d as f64;
        let drow = &mut dinp[p * d..(p + 1) * d];
        {
            let dg = &mut d_params[g_range.clone()];
            for i in 0..d {
                let xhat = (xrow[i] - m) * r;
                dg[i] += go[i] * xhat;
            }
        }
        {
            let db = &mut d_params[b_range.clone()];
            for (o, &g) in db.iter_mut().zip(go) {
                *o += g;
            }
        }
        for i in 0..d {
            let gy = go[i] * gain[i];
            let xhat = (xrow[i] - m) * r;
            drow[i] += r * (gy - inv_d * sum_gy - xhat * inv_d * sum_gyx);
        }
    }
}

/// Backward of causal multi-head attention.
fn attention_bwd(
    d_qkv: &mut [f64],
    d_atty: &[f64],
    att: &[f64],
    qkv: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    let mut datt = vec![0.0; t];
    for a in 0..heads {
        let ho = a * hd;
        for p in 0..t {
            let go = &d_atty[p * d + ho..p * d + ho + hd];
            let arow = &att[a * t * t + p * t..a * t * t + (p + 1) * t];
            // value grads and attention-weight grads
            let mut dot_sum = 0.0;
            for s in 0..=p {
                let v = &qkv[s * stride + 2 * d + ho..s * stride + 2 * d + ho + hd];
                let da: f64 = go.iter().zip(v).map(|(&x, &y)| x * y).sum();
                datt[s] = da;
                dot_sum += arow[s] * da;
                let dv = &mut d_qkv[s * stride + 2 * d + ho..s * stride + 2 * d + ho + hd];
                let w = arow[s];
                for (o, &g) in dv.iter_mut().zip(go) {
                    *o += w * g;
                }
            }
            // softmax backward, then score -> q, k
            for s in 0..=p {
                let ds = arow[s] * (datt[s] - dot_sum) * scale;
                if ds == 0.0 {
                    continue;
                }
                let k = &qkv[s * stride + d + ho..s * stride + d + ho + hd];
                let q = &qkv[p * stride + ho..p * stride + ho + hd];
                let dq = &mut d_qkv[p * stride + ho..p * stride + ho + hd];
                for (o, &kv) in dq.iter_mut().zip(k) {
                    *o += ds * kv;
                }
                let dk = &mut d_qkv[s * stride + d + ho..s * stride + d + ho + hd];
                for (o, &qv) in dk.iter_mut().zip(q) {
                    *o += ds * qv;
                }
            }
        }
    }
}
