//! Offsets of the named tensors inside the flat parameter buffer.
//!
//! Weight matrices are row-major `[input][output]`, so `y[o] = sum_i x[i] *
//! w[i*out + o] + b[o]`. The flat order below is also the checkpoint order.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>, // V x d
    pub pos_emb: Range<usize>, // ctx x d
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub unemb_w: Range<usize>, // d x V
    pub unemb_b: Range<usize>, // V
    total: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>, // d x 3d
    pub qkv_b: Range<usize>, // 3d
    pub proj_w: Range<usize>, // d x d
    pub proj_b: Range<usize>, // d
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc_w: Range<usize>, // d x 4d
    pub fc_b: Range<usize>, // 4d
    pub out_w: Range<usize>, // 4d x d
    pub out_b: Range<usize>, // d
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, ctx) = (cfg.vocab_size, cfg.dim, cfg.context);
        let m = 4 * d;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let tok_emb = take(v * d);
        let pos_emb = take(ctx * d);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                qkv_w: take(d * 3 * d),
                qkv_b: take(3 * d),
                proj_w: take(d * d),
                proj_b: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                fc_w: take(d * m),
                fc_b: take(m),
                out_w: take(m * d),
                out_b: take(d),
            });
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        let unemb_w = take(d * v);
        let unemb_b = take(v);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            unemb_w,
            unemb_b,
            total: at,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Seeded initialization: Gaussian(0, 0.02) weights, unit layer-norm
    /// gains, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        let mut rng = rng::stream(seed, "lm-init", &[]);
        for r in [&self.tok_emb, &self.pos_emb, &self.unemb_w] {
            fill_gaussian(&mut params[r.clone()], &mut rng);
        }
        for b in &self.blocks {
            for r in [&b.qkv_w, &b.proj_w, &b.fc_w, &b.out_w] {
                fill_gaussian(&mut params[r.clone()], &mut rng);
            }
            params[b.ln1_g.clone()].fill(1.0);
            params[b.ln2_g.clone()].fill(1.0);
        }
        params[self.lnf_g.clone()].fill(1.0);
        params
    }
}

pub(crate) fn patch_param_len(cfg: &ModelConfig, patch: usize) -> usize {
    (patch * patch * 3 + 1) * cfg.dim
}

/// Patch embedding weights `(patch*patch*3) x d` followed by a `d` bias.
pub(crate) fn init_patch_params(cfg: &ModelConfig, patch: usize, seed: u64) -> Vec<f64> {
    let mut params = vec![0.0; patch_param_len(cfg, patch)];
    let mut rng = rng::stream(seed, "patch-init", &[]);
    let w_len = patch * patch * 3 * cfg.dim;
    fill_gaussian(&mut params[..w_len], &mut rng);
    params
}

fn fill_gaussian(slice: &mut [f64], rng: &mut ChaCha8Rng) {
    for v in slice {
        *v = INIT_STD * box_muller(rng);
    }
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::default();
        let l = Layout::new(&cfg);
        assert_eq!(l.tok_emb.start, 0);
        assert_eq!(l.unemb_b.end, l.total());
        let params = l.init_params(1);
        assert_eq!(params.len(), l.total());
        // layer-norm gains start at one
        assert!(params[l.lnf_g.clone()].iter().all(|&g| g == 1.0));
    }
}
