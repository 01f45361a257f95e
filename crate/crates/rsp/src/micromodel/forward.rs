//! Forward pass. Pre-norm transformer blocks with causal attention; every
//! intermediate activation is cached so the backward pass can replay it.

use super::layout::Layout;
use super::{MicroLm, MicroVlm, ModelConfig, ModelError};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C3: f64 = 0.044_715;

/// One input sequence: an optional continuous prefix (relaxed one-hot rows
/// or a scaled pixel grid) followed by hard tokens.
pub(crate) struct SeqInput<'a> {
    pub prefix: PrefixInput<'a>,
    pub tokens: &'a [usize],
}

pub(crate) enum PrefixInput<'a> {
    None,
    Relaxed { matrix: &'a [f64], rows: usize },
    Pixels { scaled: &'a [f64], h: usize, w: usize },
}

impl<'a> SeqInput<'a> {
    pub fn tokens(tokens: &'a [usize]) -> Self {
        Self {
            prefix: PrefixInput::None,
            tokens,
        }
    }

    pub fn relaxed(matrix: &'a [f64], rows: usize, tokens: &'a [usize]) -> Self {
        Self {
            prefix: PrefixInput::Relaxed { matrix, rows },
            tokens,
        }
    }

    pub fn pixels(scaled: &'a [f64], h: usize, w: usize, tokens: &'a [usize]) -> Self {
        Self {
            prefix: PrefixInput::Pixels { scaled, h, w },
            tokens,
        }
    }
}

pub(crate) struct Cache {
    pub t: usize,
    pub x0: Vec<f64>, // T x d, embeddings with positions added
    pub blocks: Vec<BlockCache>,
    pub lnf_out: Vec<f64>,
    pub lnf_mean: Vec<f64>,
    pub lnf_rstd: Vec<f64>,
    /// Full `T x V` logits; only populated when the caller asks.
    pub logits: Option<Vec<f64>>,
}

impl Cache {
    pub fn len(&self) -> usize {
        self.t
    }
}

pub(crate) struct BlockCache {
    pub ln1_out: Vec<f64>,
    pub ln1_mean: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub qkv: Vec<f64>, // T x 3d
    pub att: Vec<f64>, // heads x T x T softmax weights
    pub atty: Vec<f64>, // T x d, concatenated head outputs before projection
    pub x1: Vec<f64>,  // T x d residual stream after attention
    pub ln2_out: Vec<f64>,
    pub ln2_mean: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub fch: Vec<f64>, // T x 4d pre-activation
    pub fca: Vec<f64>, // T x 4d after gelu
    pub x2: Vec<f64>,  // T x d residual stream after the mlp
}

fn seq_len(cfg: &ModelConfig, input: &SeqInput<'_>, patch: usize) -> Result<usize, ModelError> {
    let prefix_len = match input.prefix {
        PrefixInput::None => 0,
        PrefixInput::Relaxed { rows, .. } => rows,
        PrefixInput::Pixels { h, w, .. } => (h / patch) * (w / patch),
    };
    let t = prefix_len + input.tokens.len();
    if t == 0 {
        return Err(ModelError::EmptyInput);
    }
    if t > cfg.context {
        return Err(ModelError::OverlongInput {
            len: t,
            max: cfg.context,
        });
    }
    Ok(t)
}

/// Token / relaxed-row embedding plus positional embedding.
fn embed_lm(model: &MicroLm, layout: &Layout, input: &SeqInput<'_>, t: usize) -> Vec<f64> {
    let cfg = model.config();
    let (v, d) = (cfg.vocab_size, cfg.dim);
    let tok_emb = &model.params[layout.tok_emb.clone()];
    let pos_emb = &model.params[layout.pos_emb.clone()];
    let mut x0 = vec![0.0; t * d];
    let mut pos = 0usize;
    if let PrefixInput::Relaxed { matrix, rows } = input.prefix {
        for r in 0..rows {
            let out = &mut x0[pos * d..(pos + 1) * d];
            for tok in 0..v {
                let w = matrix[r * v + tok];
                if w != 0.0 {
                    let row = &tok_emb[tok * d..(tok + 1) * d];
                    for (o, &e) in out.iter_mut().zip(row) {
                        *o += w * e;
                    }
                }
            }
            pos += 1;
        }
    }
    for &tok in input.tokens {
        x0[pos * d..(pos + 1) * d].copy_from_slice(&tok_emb[tok * d..(tok + 1) * d]);
        pos += 1;
    }
    for p in 0..t {
        let row = &pos_emb[p * d..(p + 1) * d];
        let out = &mut x0[p * d..(p + 1) * d];
        for (o, &e) in out.iter_mut().zip(row) {
            *o += e;
        }
    }
    x0
}

/// Patch embedding: each `patch x patch` tile (3 channels) flattens row-major
/// to a vector that a single linear layer maps to model width.
fn embed_patches(vlm: &MicroVlm, scaled: &[f64], h: usize, w: usize, x0: &mut [f64]) {
    let d = vlm.config().dim;
    let patch = vlm.patch();
    let pin = patch * patch * 3;
    let pw = &vlm.patch_params[..pin * d];
    let pb = &vlm.patch_params[pin * d..];
    let (ph, pw_count) = (h / patch, w / patch);
    for py in 0..ph {
        for px in 0..pw_count {
            let pos = py * pw_count + px;
            let out = &mut x0[pos * d..(pos + 1) * d];
            out.copy_from_slice(pb);
            let mut i = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    let pix = ((py * patch + dy) * w + (px * patch + dx)) * 3;
                    for c in 0..3 {
                        let val = scaled[pix + c];
                        if val != 0.0 {
                            let wrow = &pw[i * d..(i + 1) * d];
                            for (o, &e) in out.iter_mut().zip(wrow) {
                                *o += val * e;
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn run(
    model: &MicroLm,
    input: &SeqInput<'_>,
    want_logits: bool,
) -> Result<Cache, ModelError> {
    let layout = model.layout();
    let t = seq_len(model.config(), input, 1)?;
    let x0 = embed_lm(model, &layout, input, t);
    Ok(run_blocks(&model.params, &layout, model.config(), x0, t, want_logits))
}

pub(crate) fn run_vlm(vlm: &MicroVlm, input: &SeqInput<'_>) -> Result<Cache, ModelError> {
    let model = vlm.base();
    let layout = model.layout();
    let cfg = model.config();
    let t = seq_len(cfg, input, vlm.patch())?;
    let d = cfg.dim;
    let mut x0 = vec![0.0; t * d];
    let prefix_len = match input.prefix {
        PrefixInput::Pixels { scaled, h, w } => {
            embed_patches(vlm, scaled, h, w, &mut x0);
            (h / vlm.patch()) * (w / vlm.patch())
        }
        _ => 0,
    };
    let tok_emb = &model.params[layout.tok_emb.clone()];
    for (i, &tok) in input.tokens.iter().enumerate() {
        let pos = prefix_len + i;
        x0[pos * d..(pos + 1) * d].copy_from_slice(&tok_emb[tok * d..(tok + 1) * d]);
    }
    let pos_emb = &model.params[layout.pos_emb.clone()];
    for p in 0..t {
        let row = &pos_emb[p * d..(p + 1) * d];
        for (o, &e) in x0[p * d..(p + 1) * d].iter_mut().zip(row) {
            *o += e;
        }
    }
    Ok(run_blocks(&model.params, &layout, cfg, x0, t, false))
}

pub(crate) fn last_logits(model: &MicroLm, input: &SeqInput<'_>) -> Result<Vec<f64>, ModelError> {
    let cache = run(model, input, false)?;
    Ok(logits_at(model, &cache, cache.len() - 1))
}

pub(crate) fn last_logits_vlm(vlm: &MicroVlm, input: &SeqInput<'_>) -> Result<Vec<f64>, ModelError> {
    let cache = run_vlm(vlm, input)?;
    Ok(logits_at(vlm.base(), &cache, cache.len() - 1))
}

/// Unembed a single cached position.
pub(crate) fn logits_at(model: &MicroLm, cache: &Cache, pos: usize) -> Vec<f64> {
    let layout = model.layout();
    let cfg = model.config();
    let (v, d) = (cfg.vocab_size, cfg.dim);
    let w = &model.params[layout.unemb_w.clone()];
    let b = &model.params[layout.unemb_b.clone()];
    let x = &cache.lnf_out[pos * d..(pos + 1) * d];
    let mut logits = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * v..(i + 1) * v];
        for (l, &wv) in logits.iter_mut().zip(row) {
            *l += xi * wv;
        }
    }
    logits
}

fn run_blocks(
    params: &[f64],
    layout: &Layout,
    cfg: &ModelConfig,
    x0: Vec<f64>,
    t: usize,
    want_logits: bool,
) -> Cache {
    let (v, d) = (cfg.vocab_size, cfg.dim);
    let m = 4 * d;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    let mut x_in = x0.clone();
    for bl in &layout.blocks {
        let mut c = BlockCache {
            ln1_out: vec![0.0; t * d],
            ln1_mean: vec![0.0; t],
            ln1_rstd: vec![0.0; t],
            qkv: vec![0.0; t * 3 * d],
            att: vec![0.0; cfg.heads * t * t],
            atty: vec![0.0; t * d],
            x1: vec![0.0; t * d],
            ln2_out: vec![0.0; t * d],
            ln2_mean: vec![0.0; t],
            ln2_rstd: vec![0.0; t],
            fch: vec![0.0; t * m],
            fca: vec![0.0; t * m],
            x2: vec![0.0; t * d],
        };
        layernorm_fwd(
            &mut c.ln1_out,
            &mut c.ln1_mean,
            &mut c.ln1_rstd,
            &x_in,
            &params[bl.ln1_g.clone()],
            &params[bl.ln1_b.clone()],
            t,
            d,
        );
        matmul_fwd(
            &mut c.qkv,
            &c.ln1_out,
            &params[bl.qkv_w.clone()],
            &params[bl.qkv_b.clone()],
            t,
            d,
            3 * d,
        );
        attention_fwd(&mut c.atty, &mut c.att, &c.qkv, t, d, cfg.heads);
        matmul_fwd(
            &mut c.x1,
            &c.atty,
            &params[bl.proj_w.clone()],
            &params[bl.proj_b.clone()],
            t,
            d,
            d,
        );
        add_in_place(&mut c.x1, &x_in);
        layernorm_fwd(
            &mut c.ln2_out,
            &mut c.ln2_mean,
            &mut c.ln2_rstd,
            &c.x1,
            &params[bl.ln2_g.clone()],
            &params[bl.ln2_b.clone()],
            t,
            d,
        );
        matmul_fwd(
            &mut c.fch,
            &c.ln2_out,
            &params[bl.fc_w.clone()],
            &params[bl.fc_b.clone()],
            t,
            d,
            m,
        );
        gelu_fwd(&mut c.fca, &c.fch);
        matmul_fwd(
            &mut c.x2,
            &c.fca,
            &params[bl.out_w.clone()],
            &params[bl.out_b.clone()],
            t,
            m,
            d,
        );
        add_in_place(&mut c.x2, &c.x1);
        x_in = c.x2.clone();
        blocks.push(c);
    }
    let mut lnf_out = vec![0.0; t * d];
    let mut lnf_mean = vec![0.0; t];
    let mut lnf_rstd = vec![0.0; t];
    layernorm_fwd(
        &mut lnf_out,
        &mut lnf_mean,
        &mut lnf_rstd,
        &x_in,
        &params[layout.lnf_g.clone()],
        &params[layout.lnf_b.clone()],
        t,
        d,
    );
    let logits = want_logits.then(|| {
        let mut out = vec![0.0; t * v];
        matmul_fwd(
            &mut out,
            &lnf_out,
            &params[layout.unemb_w.clone()],
            &params[layout.unemb_b.clone()],
            t,
            d,
            v,
        );
        out
    });
    Cache {
        t,
        x0,
        blocks,
        lnf_out,
        lnf_mean,
        lnf_rstd,
        logits,
    }
}

pub(crate) fn add_in_place(a: &mut [f64], b: &[f64]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(crate) fn layernorm_fwd(
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
    inp: &[f64],
    gain: &[f64],
    bias: &[f64],
    t: usize,
    d: usize,
) {
    for p in 0..t {
        let row = &inp[p * d..(p + 1) * d];
        let m: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        mean[p] = m;
        rstd[p] = r;
        let o = &mut out[p * d..(p + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - m) * r * gain[i] + bias[i];
        }
    }
}

/// `out[t][o] = sum_i inp[t][i] * w[i*dout+o] + bias[o]`
pub(crate) fn matmul_fwd(
    out: &mut [f64],
    inp: &[f64],
    w: &[f64],
    bias: &[f64],
    t: usize,
    din: usize,
    dout: usize,
) {
    for p in 0..t {
        let o = &mut out[p * dout..(p + 1) * dout];
        o.copy_from_slice(bias);
        let row = &inp[p * din..(p + 1) * din];
        for (i, &x) in row.iter().enumerate() {
            if x != 0.0 {
                let wrow = &w[i * dout..(i + 1) * dout];
                for (ov, &wv) in o.iter_mut().zip(wrow) {
                    *ov += x * wv;
                }
            }
        }
    }
}

/// Causal multi-head attention over a packed `T x 3d` qkv buffer.
/// `att` receives the post-softmax weights, `out` the concatenated head
/// mixes (before the output projection).
pub(crate) fn attention_fwd(
    out: &mut [f64],
    att: &mut [f64],
    qkv: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    for a in 0..heads {
        let ho = a * hd;
        for p in 0..t {
            let q = &qkv[p * stride + ho..p * stride + ho + hd];
            let arow = &mut att[a * t * t + p * t..a * t * t + (p + 1) * t];
            let mut maxv = f64::NEG_INFINITY;
            for s in 0..=p {
                let k = &qkv[s * stride + d + ho..s * stride + d + ho + hd];
                let dot: f64 = q.iter().zip(k).map(|(&x, &y)| x * y).sum();
                arow[s] = dot * scale;
                maxv = maxv.max(arow[s]);
            }
            let mut sum = 0.0;
            for s in 0..=p {
                arow[s] = (arow[s] - maxv).exp();
                sum += arow[s];
            }
            for s in 0..=p {
                arow[s] /= sum;
            }
            let o = &mut out[p * d + ho..p * d + ho + hd];
            for s in 0..=p {
                let v = &qkv[s * stride + 2 * d + ho..s * stride + 2 * d + ho + hd];
                let w = arow[s];
                for (ov, &vv) in o.iter_mut().zip(v) {
                    *ov += w * vv;
                }
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C3 * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C3 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C3 * x * x)
}

pub(crate) fn gelu_fwd(out: &mut [f64], inp: &[f64]) {
    for (o, &x) in out.iter_mut().zip(inp) {
        *o = gelu(x);
    }
}
