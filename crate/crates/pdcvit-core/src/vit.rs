//! Vision transformer classifier over feature maps: patch embedding, class
//! token, learned positional embeddings, pre-norm multi-head-attention
//! encoder blocks, and a class-token head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::{component_seed, seeded, trunc_normal, Prng};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_SIGMA: f64 = 0.02;

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub emb_dropout: f64,
    pub num_classes: usize,
}

impl VitConfig {
    /// Full-scale preset: patch 64, dim 1024, depth 6, heads 16, mlp 2048.
    pub fn full_scale(num_classes: usize) -> Self {
        VitConfig {
            patch_size: 64,
            dim: 1024,
            depth: 6,
            heads: 16,
            mlp_dim: 2048,
            dropout: 0.1,
            emb_dropout: 0.1,
            num_classes,
        }
    }

    /// Desk preset: small enough to train on a laptop CPU in minutes.
    pub fn desk(num_classes: usize) -> Self {
        VitConfig {
            patch_size: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_dim: 128,
            dropout: 0.1,
            emb_dropout: 0.1,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CoreError::InvalidParam {
                op: "VitConfig",
                detail: format!("dim {} must be divisible by heads {}", self.dim, self.heads),
            });
        }
        for (name, p) in [("dropout", self.dropout), ("emb_dropout", self.emb_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(CoreError::InvalidParam {
                    op: "VitConfig",
                    detail: format!("{name} = {p}, need 0 <= rate < 1"),
                });
            }
        }
        if self.patch_size == 0 || self.depth == 0 || self.num_classes == 0 || self.mlp_dim == 0 {
            return Err(CoreError::InvalidParam {
                op: "VitConfig",
                detail: "patch_size, depth, mlp_dim, num_classes must be positive".into(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderBlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderBlockParams {
    /// Projections start truncated-normal; the residual output projections
    /// (attention out and second MLP linear) start at zero so a fresh block
    /// is the identity.
    fn init(dim: usize, mlp_dim: usize, base_seed: u64, tag: &str) -> Self {
        let rng_at = |name: &str| seeded(component_seed(base_seed, &format!("{tag}.{name}")));
        EncoderBlockParams {
            ln1_gain: Tensor::full(&[dim], 1.0),
            ln1_bias: Tensor::zeros(&[dim]),
            wq: trunc_normal(&[dim, dim], INIT_SIGMA, &mut rng_at("wq")),
            bq: Tensor::zeros(&[dim]),
            wk: trunc_normal(&[dim, dim], INIT_SIGMA, &mut rng_at("wk")),
            bk: Tensor::zeros(&[dim]),
            wv: trunc_normal(&[dim, dim], INIT_SIGMA, &mut rng_at("wv")),
            bv: Tensor::zeros(&[dim]),
            wo: Tensor::zeros(&[dim, dim]),
            bo: Tensor::zeros(&[dim]),
            ln2_gain: Tensor::full(&[dim], 1.0),
            ln2_bias: Tensor::zeros(&[dim]),
            w1: trunc_normal(&[dim, mlp_dim], INIT_SIGMA, &mut rng_at("w1")),
            b1: Tensor::zeros(&[mlp_dim]),
            w2: Tensor::zeros(&[mlp_dim, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn visit<'a>(&'a self, tag: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{tag}.ln1_gain"), &self.ln1_gain);
        f(format!("{tag}.ln1_bias"), &self.ln1_bias);
        f(format!("{tag}.wq"), &self.wq);
        f(format!("{tag}.bq"), &self.bq);
        f(format!("{tag}.wk"), &self.wk);
        f(format!("{tag}.bk"), &self.bk);
        f(format!("{tag}.wv"), &self.wv);
        f(format!("{tag}.bv"), &self.bv);
        f(format!("{tag}.wo"), &self.wo);
        f(format!("{tag}.bo"), &self.bo);
        f(format!("{tag}.ln2_gain"), &self.ln2_gain);
        f(format!("{tag}.ln2_bias"), &self.ln2_bias);
        f(format!("{tag}.w1"), &self.w1);
        f(format!("{tag}.b1"), &self.b1);
        f(format!("{tag}.w2"), &self.w2);
        f(format!("{tag}.b2"), &self.b2);
    }

    fn visit_mut<'a>(&'a mut self, tag: &str, f: &mut impl FnMut(String, &'a mut Tensor)) {
        f(format!("{tag}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{tag}.ln1_bias"), &mut self.ln1_bias);
        f(format!("{tag}.wq"), &mut self.wq);
        f(format!("{tag}.bq"), &mut self.bq);
        f(format!("{tag}.wk"), &mut self.wk);
        f(format!("{tag}.bk"), &mut self.bk);
        f(format!("{tag}.wv"), &mut self.wv);
        f(format!("{tag}.bv"), &mut self.bv);
        f(format!("{tag}.wo"), &mut self.wo);
        f(format!("{tag}.bo"), &mut self.bo);
        f(format!("{tag}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{tag}.ln2_bias"), &mut self.ln2_bias);
        f(format!("{tag}.w1"), &mut self.w1);
        f(format!("{tag}.b1"), &mut self.b1);
        f(format!("{tag}.w2"), &mut self.w2);
        f(format!("{tag}.b2"), &mut self.b2);
    }

    fn register(&self, tape: &mut GradTape, trainable: bool) -> EncoderBlockVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t) } else { tape.input(t.clone()) };
        EncoderBlockVars {
            ln1_gain: reg(&self.ln1_gain),
            ln1_bias: reg(&self.ln1_bias),
            wq: reg(&self.wq),
            bq: reg(&self.bq),
            wk: reg(&self.wk),
            bk: reg(&self.bk),
            wv: reg(&self.wv),
            bv: reg(&self.bv),
            wo: reg(&self.wo),
            bo: reg(&self.bo),
            ln2_gain: reg(&self.ln2_gain),
            ln2_bias: reg(&self.ln2_bias),
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
        }
    }
}

/// All transformer parameters, sized for a fixed token count.
#[derive(Debug, Clone)]
pub struct VitParams {
    pub config: VitConfig,
    pub patch_dim: usize,
    pub num_patches: usize,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<EncoderBlockParams>,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct VitVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<EncoderBlockVars>,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl VitParams {
    /// `patch_dim` is c·p² of the incoming feature map, `num_patches` its
    /// (h/p)·(w/p) grid size.
    pub fn init(config: VitConfig, patch_dim: usize, num_patches: usize, base_seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = config.dim;
        let rng_at = |name: &str| seeded(component_seed(base_seed, &format!("vit.{name}")));
        Ok(VitParams {
            config,
            patch_dim,
            num_patches,
            embed_w: trunc_normal(&[patch_dim, dim], INIT_SIGMA, &mut rng_at("embed_w")),
            embed_b: Tensor::zeros(&[dim]),
            cls: trunc_normal(&[1, dim], INIT_SIGMA, &mut rng_at("cls")),
            pos: trunc_normal(&[num_patches + 1, dim], INIT_SIGMA, &mut rng_at("pos")),
            blocks: (0..config.depth)
                .map(|i| EncoderBlockParams::init(dim, config.mlp_dim, base_seed, &format!("vit.block{i}")))
                .collect(),
            ln_gain: Tensor::full(&[dim], 1.0),
            ln_bias: Tensor::zeros(&[dim]),
            head_w: trunc_normal(&[dim, config.num_classes], INIT_SIGMA, &mut rng_at("head_w")),
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("vit.embed_w".into(), &self.embed_w);
        f("vit.embed_b".into(), &self.embed_b);
        f("vit.cls".into(), &self.cls);
        f("vit.pos".into(), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("vit.block{i}"), f);
        }
        f("vit.ln_gain".into(), &self.ln_gain);
        f("vit.ln_bias".into(), &self.ln_bias);
        f("vit.head_w".into(), &self.head_w);
        f("vit.head_b".into(), &self.head_b);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor)) {
        f("vit.embed_w".into(), &mut self.embed_w);
        f("vit.embed_b".into(), &mut self.embed_b);
        f("vit.cls".into(), &mut self.cls);
        f("vit.pos".into(), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("vit.block{i}"), f);
        }
        f("vit.ln_gain".into(), &mut self.ln_gain);
        f("vit.ln_bias".into(), &mut self.ln_bias);
        f("vit.head_w".into(), &mut self.head_w);
        f("vit.head_b".into(), &mut self.head_b);
    }

    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> VitVars {
        let reg = |tape: &mut GradTape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.input(t.clone())
            }
        };
        VitVars {
            embed_w: reg(tape, &self.embed_w),
            embed_b: reg(tape, &self.embed_b),
            cls: reg(tape, &self.cls),
            pos: reg(tape, &self.pos),
            blocks: self.blocks.iter().map(|b| b.register(tape, trainable)).collect(),
            ln_gain: reg(tape, &self.ln_gain),
            ln_bias: reg(tape, &self.ln_bias),
            head_w: reg(tape, &self.head_w),
            head_b: reg(tape, &self.head_b),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Linear patch embedding, class token prepend, positional embeddings, and
/// embedding dropout. patches: [N, patch_dim] → tokens [N+1, dim].
pub fn embed(
    tape: &mut GradTape,
    patches: Var,
    vars: &VitVars,
    emb_dropout: f64,
    training: bool,
    rng: &mut Prng,
) -> Result<Var> {
    let x = tape.matmul(patches, vars.embed_w)?;
    let x = tape.add_row_bias(x, vars.embed_b)?;
    let tokens = tape.concat_rows(&[vars.cls, x])?;
    let tokens = tape.add(tokens, vars.pos)?;
    tape.dropout(tokens, emb_dropout, training, rng)
}

/// Scaled dot-product attention with `heads` heads over [T, dim] tokens.
pub fn multi_head_attention(
    tape: &mut GradTape,
    tokens: Var,
    vars: &EncoderBlockVars,
    heads: usize,
    dropout: f64,
    training: bool,
    rng: &mut Prng,
) -> Result<Var> {
    let dim = tape.value(tokens).shape()[1];
    if !dim.is_multiple_of(heads) {
        return Err(CoreError::InvalidParam {
            op: "multi_head_attention",
            detail: format!("dim {dim} not divisible by {heads} heads"),
        });
    }
    let dh = dim / heads;
    let q = tape.matmul(tokens, vars.wq)?;
    let q = tape.add_row_bias(q, vars.bq)?;
    let k = tape.matmul(tokens, vars.wk)?;
    let k = tape.add_row_bias(k, vars.bk)?;
    let v = tape.matmul(tokens, vars.wv)?;
    let v = tape.add_row_bias(v, vars.bv)?;

    let scale = 1.0 / crate::math::sqrt(dh as f64);
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose2d(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores, 1)?;
        let attn = tape.dropout(attn, dropout, training, rng)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(merged, vars.wo)?;
    let out = tape.add_row_bias(out, vars.bo)?;
    tape.dropout(out, dropout, training, rng)
}

/// Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(·)).
pub fn encoder_block(
    tape: &mut GradTape,
    x: Var,
    vars: &EncoderBlockVars,
    heads: usize,
    dropout: f64,
    training: bool,
    rng: &mut Prng,
) -> Result<Var> {
    let normed = tape.layernorm(x, vars.ln1_gain, vars.ln1_bias, LN_EPS)?;
    let attn = multi_head_attention(tape, normed, vars, heads, dropout, training, rng)?;
    let x = tape.add(x, attn)?;

    let normed = tape.layernorm(x, vars.ln2_gain, vars.ln2_bias, LN_EPS)?;
    let hidden = tape.matmul(normed, vars.w1)?;
    let hidden = tape.add_row_bias(hidden, vars.b1)?;
    let hidden = tape.gelu(hidden)?;
    let hidden = tape.dropout(hidden, dropout, training, rng)?;
    let mlp = tape.matmul(hidden, vars.w2)?;
    let mlp = tape.add_row_bias(mlp, vars.b2)?;
    let mlp = tape.dropout(mlp, dropout, training, rng)?;
    tape.add(x, mlp)
}

/// Full transformer over a [c, h, w] feature map. Returns the post-norm
/// class-token representation [1, dim] and the logits [1, num_classes].
pub fn vit_forward(
    tape: &mut GradTape,
    features: Var,
    params: &VitParams,
    vars: &VitVars,
    training: bool,
    rng: &mut Prng,
) -> Result<(Var, Var)> {
    let cfg = &params.config;
    let patches = tape.patchify(features, cfg.patch_size)?;
    let n = tape.value(patches).shape()[0];
    if n != params.num_patches {
        return Err(CoreError::ShapeMismatch {
            op: "vit_forward",
            detail: format!("{n} patches vs positional table for {}", params.num_patches),
        });
    }
    let mut tokens = embed(tape, patches, vars, cfg.emb_dropout, training, rng)?;
    for block in &vars.blocks {
        tokens = encoder_block(tape, tokens, block, cfg.heads, cfg.dropout, training, rng)?;
    }
    let normed = tape.layernorm(tokens, vars.ln_gain, vars.ln_bias, LN_EPS)?;
    let cls = tape.slice_rows(normed, 0, 1)?;
    let logits = tape.matmul(cls, vars.head_w)?;
    let logits = tape.add_row_bias(logits, vars.head_b)?;
    Ok((cls, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;

    #[test]
    fn presets_are_pinned() {
        let full = VitConfig::full_scale(35);
        assert_eq!(
            (full.patch_size, full.dim, full.depth, full.heads, full.mlp_dim),
            (64, 1024, 6, 16, 2048)
        );
        assert_eq!((full.dropout, full.emb_dropout), (0.1, 0.1));
        let desk = VitConfig::desk(8);
        assert_eq!(
            (desk.patch_size, desk.dim, desk.depth, desk.heads, desk.mlp_dim),
            (4, 64, 2, 4, 128)
        );
        full.validate().unwrap();
        desk.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = VitConfig::desk(8);
        c.heads = 3; // 64 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = VitConfig::desk(8);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_enumeration_and_shape() {
        let mut tape = GradTape::inference();
        // 1×4×4 map with values 0..16 row-major.
        let x = tape.input(Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap());
        let p = tape.patchify(x, 2).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 4]);
        // Patch 0 is the top-left 2×2 block.
        assert_eq!(&tape.value(p).data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // Patch 3 is the bottom-right block.
        assert_eq!(&tape.value(p).data()[12..16], &[10.0, 11.0, 14.0, 15.0]);

        let x2 = tape.input(Tensor::zeros(&[3, 8, 8]));
        let p2 = tape.patchify(x2, 4).unwrap();
        assert_eq!(tape.value(p2).shape(), &[4, 48]);

        // Indivisible sizes are an error, never a silent crop.
        let x3 = tape.input(Tensor::zeros(&[3, 224, 224]));
        assert!(tape.patchify(x3, 64).is_err());
    }

    #[test]
    fn patchify_roundtrip_reassembles() {
        let mut rng = crate::rng::seeded(3);
        let original = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::inference();
        let x = tape.input(original.clone());
        let p = tape.patchify(x, 3).unwrap();
        // Independent inverse assembled from the documented layout.
        let (c, h, w, ps) = (2usize, 6usize, 6usize, 3usize);
        let gw = w / ps;
        let plen = c * ps * ps;
        let patches = tape.value(p).data();
        let mut rebuilt = alloc::vec![0.0; c * h * w];
        for (n, patch) in patches.chunks(plen).enumerate() {
            let (gy, gx) = (n / gw, n % gw);
            for ci in 0..c {
                for py in 0..ps {
                    for px in 0..ps {
                        rebuilt[(ci * h + gy * ps + py) * w + gx * ps + px] =
                            patch[ci * ps * ps + py * ps + px];
                    }
                }
            }
        }
        assert_eq!(rebuilt, original.data());
    }

    #[test]
    fn embed_additive_structure() {
        // Zero patches and zero cls token leave exactly the positional table.
        let cfg = VitConfig { patch_size: 2, dim: 6, depth: 1, heads: 2, mlp_dim: 8, dropout: 0.0, emb_dropout: 0.0, num_classes: 3 };
        let mut params = VitParams::init(cfg, 8, 4, 1).unwrap();
        params.embed_b = Tensor::zeros(&[6]);
        params.cls = Tensor::zeros(&[1, 6]);
        let mut tape = GradTape::inference();
        let vars = params.register(&mut tape, false);
        let patches = tape.input(Tensor::zeros(&[4, 8]));
        let mut rng = crate::rng::seeded(0);
        let tokens = embed(&mut tape, patches, &vars, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(tokens).shape(), &[5, 6]);
        assert_eq!(tape.value(tokens).data(), params.pos.data());
    }

    #[test]
    fn embed_is_row_permutation_equivariant_before_pos() {
        // Permuting patch rows permutes embedded rows the same way.
        let mut rng = crate::rng::seeded(5);
        let w = uniform(&[8, 6], -1.0, 1.0, &mut rng);
        let b = uniform(&[6], -0.5, 0.5, &mut rng);
        let patches = uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = alloc::vec![0.0; 32];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&patches.data()[src * 8..(src + 1) * 8]);
        }
        let mut tape = GradTape::inference();
        let wv = tape.input(w);
        let bv = tape.input(b);
        let p1 = tape.input(patches);
        let p2 = tape.input(Tensor::from_vec(&[4, 8], permuted).unwrap());
        let e1 = tape.matmul(p1, wv).unwrap();
        let e1 = tape.add_row_bias(e1, bv).unwrap();
        let e2 = tape.matmul(p2, wv).unwrap();
        let e2 = tape.add_row_bias(e2, bv).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &tape.value(e2).data()[dst * 6..(dst + 1) * 6],
                &tape.value(e1).data()[src * 6..(src + 1) * 6]
            );
        }
    }

    fn tiny_block_params(dim: usize, mlp: usize, seed: u64) -> EncoderBlockParams {
        let mut p = EncoderBlockParams::init(dim, mlp, seed, "t");
        // Give the residual projections real values for behavioral tests.
        let mut rng = crate::rng::seeded(seed ^ 0xabcd);
        p.wo = uniform(&[dim, dim], -0.3, 0.3, &mut rng);
        p.w2 = uniform(&[mlp, dim], -0.3, 0.3, &mut rng);
        p
    }

    #[test]
    fn attention_single_token_is_out_projection_of_v() {
        let dim = 6;
        let params = tiny_block_params(dim, 8, 2);
        let mut rng = crate::rng::seeded(1);
        let token = uniform(&[1, dim], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::inference();
        let vars = params.register(&mut tape, false);
        let x = tape.input(token.clone());
        let out = multi_head_attention(&mut tape, x, &vars, 2, 0.0, false, &mut rng).unwrap();
        // With T = 1 the attention weight is exactly [1], so the output is
        // (v·Wo + bo) for that token's value vector.
        let mut tape2 = GradTape::inference();
        let vars2 = params.register(&mut tape2, false);
        let x2 = tape2.input(token);
        let v = tape2.matmul(x2, vars2.wv).unwrap();
        let v = tape2.add_row_bias(v, vars2.bv).unwrap();
        let want = tape2.matmul(v, vars2.wo).unwrap();
        let want = tape2.add_row_bias(want, vars2.bo).unwrap();
        let diff = tape.value(out).max_abs_diff(tape2.value(want)).unwrap();
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn attention_identical_tokens_identical_rows() {
        let dim = 8;
        let params = tiny_block_params(dim, 8, 3);
        let mut rng = crate::rng::seeded(4);
        let row = uniform(&[1, dim], -1.0, 1.0, &mut rng);
        let mut two = row.data().to_vec();
        two.extend_from_slice(row.data());
        let mut tape = GradTape::inference();
        let vars = params.register(&mut tape, false);
        let x = tape.input(Tensor::from_vec(&[2, dim], two).unwrap());
        let out = multi_head_attention(&mut tape, x, &vars, 2, 0.0, false, &mut rng).unwrap();
        let d = tape.value(out).data();
        assert_eq!(&d[0..dim], &d[dim..2 * dim]);
    }

    #[test]
    fn attention_matches_dense_loop_oracle() {
        // Single head so the oracle is a direct transcription of
        // softmax(QKᵀ/√d)·V with explicit loops.
        let dim = 6;
        let t = 5;
        let params = tiny_block_params(dim, 8, 7);
        let mut rng = crate::rng::seeded(8);
        let tokens = uniform(&[t, dim], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::inference();
        let vars = params.register(&mut tape, false);
        let x = tape.input(tokens.clone());
        let got = multi_head_attention(&mut tape, x, &vars, 1, 0.0, false, &mut rng).unwrap();

        // Oracle.
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = alloc::vec![0.0; t * dim];
            for i in 0..t {
                for j in 0..dim {
                    let mut acc = b.data()[j];
                    for p in 0..dim {
                        acc += x[i * dim + p] * w.data()[p * dim + j];
                    }
                    out[i * dim + j] = acc;
                }
            }
            out
        };
        let q = lin(tokens.data(), &params.wq, &params.bq);
        let k = lin(tokens.data(), &params.wk, &params.bk);
        let v = lin(tokens.data(), &params.wv, &params.bv);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut ctx = alloc::vec![0.0; t * dim];
        for i in 0..t {
            let mut scores = alloc::vec![0.0; t];
            for j in 0..t {
                let mut acc = 0.0;
                for p in 0..dim {
                    acc += q[i * dim + p] * k[j * dim + p];
                }
                scores[j] = acc * scale;
            }
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..t {
                let a = exps[j] / sum;
                for p in 0..dim {
                    ctx[i * dim + p] += a * v[j * dim + p];
                }
            }
        }
        let want = lin(&ctx, &params.wo, &params.bo);
        let got = tape.value(got).data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn zeroed_block_is_exact_identity() {
        let dim = 8;
        let mut params = EncoderBlockParams::init(dim, 16, 5, "z");
        // Zero every weight; the residual path is all that remains.
        params.visit_mut("z", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        let mut rng = crate::rng::seeded(6);
        let x = uniform(&[5, dim], -2.0, 2.0, &mut rng);
        let mut tape = GradTape::inference();
        let vars = params.register(&mut tape, false);
        let xv = tape.input(x.clone());
        let out = encoder_block(&mut tape, xv, &vars, 2, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn fresh_block_is_identity_by_init() {
        // Zero-initialized residual projections make a fresh block identity
        // even though Q/K/V and the MLP first linear are random.
        let dim = 8;
        let params = EncoderBlockParams::init(dim, 16, 9, "f");
        let mut rng = crate::rng::seeded(10);
        let x = uniform(&[4, dim], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::inference();
        let vars = params.register(&mut tape, false);
        let xv = tape.input(x.clone());
        let out = encoder_block(&mut tape, xv, &vars, 2, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn block_preserves_shape() {
        let dim = 12;
        let params = tiny_block_params(dim, 16, 11);
        let mut rng = crate::rng::seeded(12);
        for t in [1usize, 3, 9] {
            let x = uniform(&[t, dim], -1.0, 1.0, &mut rng);
            let mut tape = GradTape::inference();
            let vars = params.register(&mut tape, false);
            let xv = tape.input(x);
            let out = encoder_block(&mut tape, xv, &vars, 3, 0.0, false, &mut rng).unwrap();
            assert_eq!(tape.value(out).shape(), &[t, dim]);
        }
    }
}
