//! Pre-norm residual transformer (the layout both CLIP towers use): per
//! block, multi-head self-attention and a GELU MLP, each behind a layer norm
//! and a residual connection. Weights are frozen; what training needs is the
//! forward pass plus the vector-Jacobian product with respect to the *input
//! tokens*, which carries gradients onto soft-prompt tokens and tap
//! activations when a checkpoint-export backend is in use.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{self, Mat};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Causal attention mask (text tower) or full attention (vision tower).
    pub causal: bool,
    /// `x * sigmoid(1.702 x)` instead of exact GELU.
    pub quick_gelu: bool,
    pub ln_eps: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("transformer dimensions must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config("width must divide evenly into heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// One residual block's parameters. The attention input projection is packed
/// as `[q; k; v]` rows, matching the usual checkpoint layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub qkv_weight: Mat,
    pub qkv_bias: Vec<f64>,
    pub out_weight: Mat,
    pub out_bias: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub fc1_weight: Mat,
    pub fc1_bias: Vec<f64>,
    pub fc2_weight: Mat,
    pub fc2_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub blocks: Vec<BlockWeights>,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / math::sqrt(var + eps);
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv + b)
        .collect()
}

/// VJP of `layer_norm` at forward input `x`.
pub fn layer_norm_vjp(x: &[f64], gamma: &[f64], eps: f64, upstream: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / math::sqrt(var + eps);
    let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
    let gg: Vec<f64> = upstream.iter().zip(gamma).map(|(&u, &g)| u * g).collect();
    let mean_gg: f64 = gg.iter().sum::<f64>() / n;
    let mean_gg_xhat: f64 = gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    xhat.iter()
        .zip(&gg)
        .map(|(&xh, &g)| inv * (g - mean_gg - xh * mean_gg_xhat))
        .collect()
}

fn gelu(x: f64, quick: bool) -> f64 {
    if quick {
        x * sigmoid(1.702 * x)
    } else {
        0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
    }
}

fn gelu_grad(x: f64, quick: bool) -> f64 {
    if quick {
        let s = sigmoid(1.702 * x);
        s + x * 1.702 * s * (1.0 - s)
    } else {
        let phi = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
        let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
        phi + x * pdf
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

/// `x * W^T + b` for row-major tokens (one output row per input row).
fn linear_rows(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let y = w.matvec(x.row(r));
        let row = out.row_mut(r);
        for (i, (yi, bi)) in y.iter().zip(b).enumerate() {
            row[i] = yi + bi;
        }
    }
    out
}

fn linear_rows_vjp(upstream: &Mat, w: &Mat) -> Mat {
    let mut out = Mat::zeros(upstream.rows, w.cols);
    for r in 0..upstream.rows {
        out.row_mut(r).copy_from_slice(&w.matvec_t(upstream.row(r)));
    }
    out
}

struct BlockCache {
    input: Mat,
    /// Per head: softmaxed attention rows, T x T.
    attn: Vec<Mat>,
    qkv: Mat,
    after_attn: Mat,
    fc1_pre: Mat,
}

impl Transformer {
    /// Random weights for tests and toy-scale checks.
    pub fn random(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let hidden = w * config.mlp_ratio;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scale = 1.0 / math::sqrt(w as f64);
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1_gamma: vec![1.0; w],
                ln1_beta: vec![0.0; w],
                qkv_weight: math::gaussian_mat(&mut rng, 3 * w, w, scale),
                qkv_bias: math::gaussian_vec(&mut rng, 3 * w, 0.02),
                out_weight: math::gaussian_mat(&mut rng, w, w, scale),
                out_bias: math::gaussian_vec(&mut rng, w, 0.02),
                ln2_gamma: vec![1.0; w],
                ln2_beta: vec![0.0; w],
                fc1_weight: math::gaussian_mat(&mut rng, hidden, w, scale),
                fc1_bias: math::gaussian_vec(&mut rng, hidden, 0.02),
                fc2_weight: math::gaussian_mat(&mut rng, w, hidden, 1.0 / math::sqrt(hidden as f64)),
                fc2_bias: math::gaussian_vec(&mut rng, w, 0.02),
            })
            .collect();
        Ok(Transformer { config, blocks })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.layers {
            return Err(Error::config("block count does not match config"));
        }
        let w = self.config.width;
        for b in &self.blocks {
            if b.qkv_weight.rows != 3 * w
                || b.qkv_weight.cols != w
                || b.out_weight.rows != w
                || b.fc2_weight.rows != w
            {
                return Err(Error::config("block weight shapes are inconsistent"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(tokens)?.0)
    }

    fn forward_cached(&self, tokens: &Mat) -> Result<(Mat, Vec<BlockCache>)> {
        if tokens.cols != self.config.width {
            return Err(Error::contract("token width does not match transformer"));
        }
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = self.block_forward(block, &x);
            caches.push(cache);
            x = next;
        }
        Ok((x, caches))
    }

    fn block_forward(&self, w: &BlockWeights, x: &Mat) -> (Mat, BlockCache) {
        let cfg = &self.config;
        let t = x.rows;
        let width = cfg.width;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / math::sqrt(hd as f64);

        let mut ln1 = Mat::zeros(t, width);
        for r in 0..t {
            ln1.row_mut(r)
                .copy_from_slice(&layer_norm(x.row(r), &w.ln1_gamma, &w.ln1_beta, cfg.ln_eps));
        }
        let qkv = linear_rows(&ln1, &w.qkv_weight, &w.qkv_bias);

        let mut attn_mats = Vec::with_capacity(heads);
        let mut concat = Mat::zeros(t, width);
        for h in 0..heads {
            let q_off = h * hd;
            let k_off = width + h * hd;
            let v_off = 2 * width + h * hd;
            let mut attn = Mat::zeros(t, t);
            for i in 0..t {
                let limit = if cfg.causal { i + 1 } else { t };
                let qi = &qkv.row(i)[q_off..q_off + hd];
                let mut logits = vec![f64::NEG_INFINITY; t];
                for (j, logit) in logits.iter_mut().enumerate().take(limit) {
                    let kj = &qkv.row(j)[k_off..k_off + hd];
                    *logit = math::dot(qi, kj) * scale;
                }
                let probs = masked_softmax(&logits, limit);
                attn.row_mut(i).copy_from_slice(&probs);
                let out = &mut concat.row_mut(i)[q_off..q_off + hd];
                for (j, &a) in probs.iter().enumerate().take(limit) {
                    let vj = &qkv.row(j)[v_off..v_off + hd];
                    for (o, vi) in out.iter_mut().zip(vj) {
                        *o += a * vi;
                    }
                }
            }
            attn_mats.push(attn);
        }
        let attn_out = linear_rows(&concat, &w.out_weight, &w.out_bias);
        let mut after_attn = x.clone();
        after_attn.add_assign(&attn_out);

        let mut ln2 = Mat::zeros(t, width);
        for r in 0..t {
            ln2.row_mut(r).copy_from_slice(&layer_norm(
                after_attn.row(r),
                &w.ln2_gamma,
                &w.ln2_beta,
                cfg.ln_eps,
            ));
        }
        let fc1_pre = linear_rows(&ln2, &w.fc1_weight, &w.fc1_bias);
        let mut act = fc1_pre.clone();
        for v in &mut act.data {
            *v = gelu(*v, cfg.quick_gelu);
        }
        let mlp_out = linear_rows(&act, &w.fc2_weight, &w.fc2_bias);
        let mut out = after_attn.clone();
        out.add_assign(&mlp_out);

        (
            out,
            BlockCache {
                input: x.clone(),
                attn: attn_mats,
                qkv,
                after_attn,
                fc1_pre,
            },
        )
    }

    /// `dL/d tokens` given `dL/d output`.
    pub fn vjp(&self, tokens: &Mat, upstream: &Mat) -> Result<Mat> {
        let (out, caches) = self.forward_cached(tokens)?;
        if upstream.rows != out.rows || upstream.cols != out.cols {
            return Err(Error::contract("upstream shape mismatch in transformer vjp"));
        }
        let mut grad = upstream.clone();
        for (block, cache) in self.blocks.iter().zip(&caches).rev() {
            grad = self.block_vjp(block, cache, &grad);
        }
        Ok(grad)
    }

    fn block_vjp(&self, w: &BlockWeights, cache: &BlockCache, upstream: &Mat) -> Mat {
        let cfg = &self.config;
        let t = cache.input.rows;
        let width = cfg.width;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / math::sqrt(hd as f64);

        // MLP branch: out = after_attn + fc2(gelu(fc1(ln2(after_attn)))).
        let mut g_after_attn = upstream.clone();
        let g_act = linear_rows_vjp(upstream, &w.fc2_weight);
        let mut g_fc1_pre = g_act;
        for (g, pre) in g_fc1_pre.data.iter_mut().zip(&cache.fc1_pre.data) {
            *g *= gelu_grad(*pre, cfg.quick_gelu);
        }
        let g_ln2 = linear_rows_vjp(&g_fc1_pre, &w.fc1_weight);
        for r in 0..t {
            let g = layer_norm_vjp(cache.after_attn.row(r), &w.ln2_gamma, cfg.ln_eps, g_ln2.row(r));
            math::axpy(g_after_attn.row_mut(r), 1.0, &g);
        }

        // Attention branch: after_attn = input + out_proj(concat).
        let mut g_input = g_after_attn.clone();
        let g_concat = linear_rows_vjp(&g_after_attn, &w.out_weight);

        let mut g_qkv = Mat::zeros(t, 3 * width);
        for h in 0..heads {
            let q_off = h * hd;
            let k_off = width + h * hd;
            let v_off = 2 * width + h * hd;
            let attn = &cache.attn[h];
            for i in 0..t {
                let limit = if cfg.causal { i + 1 } else { t };
                let g_out = &g_concat.row(i)[q_off..q_off + hd];
                // dV and dA.
                let mut g_attn_row = vec![0.0; limit];
                for j in 0..limit {
                    let vj = &cache.qkv.row(j)[v_off..v_off + hd];
                    g_attn_row[j] = math::dot(g_out, vj);
                    let a = attn.get(i, j);
                    let gv = &mut g_qkv.row_mut(j)[v_off..v_off + hd];
                    for (g, o) in gv.iter_mut().zip(g_out) {
                        *g += a * o;
                    }
                }
                // Through the softmax row.
                let probs = &attn.row(i)[..limit];
                let g_logits = math::softmax_vjp(probs, &g_attn_row);
                // dQ and dK.
                let qi = cache.qkv.row(i)[q_off..q_off + hd].to_vec();
                for (j, &gl) in g_logits.iter().enumerate() {
                    if gl == 0.0 {
                        continue;
                    }
                    let kj = cache.qkv.row(j)[k_off..k_off + hd].to_vec();
                    let gq = &mut g_qkv.row_mut(i)[q_off..q_off + hd];
                    for (g, k) in gq.iter_mut().zip(&kj) {
                        *g += gl * scale * k;
                    }
                    let gk = &mut g_qkv.row_mut(j)[k_off..k_off + hd];
                    for (g, q) in gk.iter_mut().zip(&qi) {
                        *g += gl * scale * q;
                    }
                }
            }
        }

        let g_ln1 = linear_rows_vjp(&g_qkv, &w.qkv_weight);
        for r in 0..t {
            let g = layer_norm_vjp(cache.input.row(r), &w.ln1_gamma, cfg.ln_eps, g_ln1.row(r));
            math::axpy(g_input.row_mut(r), 1.0, &g);
        }
        g_input
    }
}

fn masked_softmax(logits: &[f64], limit: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    let max = logits[..limit]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for j in 0..limit {
        let e = math::exp(logits[j] - max);
        out[j] = e;
        sum += e;
    }
    for v in out[..limit].iter_mut() {
        *v /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(causal: bool, quick: bool) -> Transformer {
        Transformer::random(
            TransformerConfig {
                layers: 2,
                width: 8,
                heads: 2,
                mlp_ratio: 2,
                causal,
                quick_gelu: quick,
                ln_eps: 1e-5,
            },
            99,
        )
        .unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let t = tiny(true, true);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = math::gaussian_mat(&mut rng, 5, 8, 1.0);
        let a = t.forward(&x).unwrap();
        let b = t.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows, 5);
        assert_eq!(a.cols, 8);
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let t = tiny(true, true);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = math::gaussian_mat(&mut rng, 4, 8, 1.0);
        let base = t.forward(&x).unwrap();
        // Changing the last token must not affect earlier rows.
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.set(3, c, x2.get(3, c) + 1.0);
        }
        let out = t.forward(&x2).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert_relative_eq!(base.get(r, c), out.get(r, c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn non_causal_attention_mixes_all_positions() {
        let t = tiny(false, false);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = math::gaussian_mat(&mut rng, 4, 8, 1.0);
        let base = t.forward(&x).unwrap();
        let mut x2 = x.clone();
        x2.set(3, 0, x2.get(3, 0) + 1.0);
        let out = t.forward(&x2).unwrap();
        let mut changed = false;
        for c in 0..8 {
            if (base.get(0, c) - out.get(0, c)).abs() > 1e-9 {
                changed = true;
            }
        }
        assert!(changed);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (causal, quick) in [(true, true), (false, false), (true, false)] {
            let t = tiny(causal, quick);
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            let x = math::gaussian_mat(&mut rng, 4, 8, 0.8);
            let upstream = math::gaussian_mat(&mut rng, 4, 8, 1.0);
            let grad = t.vjp(&x, &upstream).unwrap();

            let f = |m: &Mat| -> f64 {
                let out = t.forward(m).unwrap();
                math::dot(&out.data, &upstream.data)
            };
            let h = 1e-6;
            for (r, c) in [(0usize, 0usize), (1, 3), (2, 7), (3, 4)] {
                let mut xp = x.clone();
                xp.set(r, c, xp.get(r, c) + h);
                let mut xm = x.clone();
                xm.set(r, c, xm.get(r, c) - h);
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert_relative_eq!(grad.get(r, c), fd, max_relative = 2e-4, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn layer_norm_vjp_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = math::gaussian_vec(&mut rng, 6, 1.0);
        let gamma = math::gaussian_vec(&mut rng, 6, 0.5);
        let beta = math::gaussian_vec(&mut rng, 6, 0.5);
        let upstream = math::gaussian_vec(&mut rng, 6, 1.0);
        let grad = layer_norm_vjp(&x, &gamma, 1e-5, &upstream);
        let h = 1e-6;
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let f = |v: &[f64]| math::dot(&layer_norm(v, &gamma, &beta, 1e-5), &upstream);
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, max_relative = 2e-5, epsilon = 1e-9);
        }
    }
}
