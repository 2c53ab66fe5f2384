//! The full classifier: PDC backbone feeding a vision transformer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::pdc::{self, BackboneParams, BackboneVars, Variant};
use crate::rng::Prng;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use crate::vit::{self, VitConfig, VitParams, VitVars};

/// Everything needed to build the model deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub branch_channels: usize,
    pub image_size: usize,
    pub vit: VitConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, image_size: usize, branch_channels: usize, vit: VitConfig) -> Self {
        ModelConfig { variant, in_channels: 3, branch_channels, image_size, vit }
    }

    /// Channels of the backbone output fed to the transformer.
    pub fn feature_channels(&self) -> usize {
        match self.variant {
            Variant::Pdc => 2 * self.branch_channels,
            _ => self.branch_channels,
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if !self.image_size.is_multiple_of(4) {
            return Err(CoreError::InvalidParam {
                op: "ModelConfig",
                detail: format!("image_size {} must be divisible by 4", self.image_size),
            });
        }
        if !self.feature_size().is_multiple_of(self.vit.patch_size) {
            return Err(CoreError::InvalidParam {
                op: "ModelConfig",
                detail: format!(
                    "feature map {} not divisible by patch size {}",
                    self.feature_size(),
                    self.vit.patch_size
                ),
            });
        }
        if self.in_channels == 0 || self.branch_channels == 0 {
            return Err(CoreError::InvalidParam {
                op: "ModelConfig",
                detail: "channel counts must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PdcVitModel {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub vit: VitParams,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub vit: VitVars,
}

impl PdcVitModel {
    /// Deterministic init: every tensor draws from its own stream keyed by
    /// (seed, parameter name).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(
            config.variant,
            config.in_channels,
            config.branch_channels,
            seed,
        );
        let grid = config.feature_size() / config.vit.patch_size;
        let patch_dim = config.feature_channels() * config.vit.patch_size * config.vit.patch_size;
        let vit = VitParams::init(config.vit, patch_dim, grid * grid, seed)?;
        Ok(PdcVitModel { config, backbone, vit })
    }

    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(tape, trainable),
            vit: self.vit.register(tape, trainable),
        }
    }

    /// Forward pass on an already-registered image var. Returns the post-norm
    /// class token [1, dim] and logits [1, num_classes].
    pub fn forward(
        &self,
        tape: &mut GradTape,
        image: Var,
        vars: &ModelVars,
        training: bool,
        rng: &mut Prng,
    ) -> Result<(Var, Var)> {
        let features = pdc::pdc_backbone(tape, image, &self.backbone, &vars.backbone)?;
        vit::vit_forward(tape, features, &self.vit, &vars.vit, training, rng)
    }

    /// Eval-mode logits for one image, as a flat [num_classes] tensor.
    pub fn forward_eval(&self, image: &Tensor) -> Result<Tensor> {
        let (_, logits) = self.forward_eval_full(image)?;
        Ok(logits)
    }

    /// Eval-mode (class-token representation [dim], logits [num_classes]).
    pub fn forward_eval_full(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = GradTape::inference();
        let vars = self.register(&mut tape, false);
        let img = tape.input(image.clone());
        // Dropout is disabled in eval mode, so the rng is never consulted.
        let mut rng = crate::rng::seeded(0);
        let (cls, logits) = self.forward(&mut tape, img, &vars, false, &mut rng)?;
        let dim = tape.value(cls).numel();
        let classes = tape.value(logits).numel();
        let cls = Tensor::from_vec(&[dim], tape.value(cls).data().to_vec())?;
        let logits = Tensor::from_vec(&[classes], tape.value(logits).data().to_vec())?;
        Ok((cls, logits))
    }

    /// Parameter tensors with stable names, in registration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        for (branch, name) in [(&self.backbone.angular, "angular"), (&self.backbone.radial, "radial")] {
            if let Some(b) = branch {
                for (i, blk) in b.blocks.iter().enumerate() {
                    f(format!("{name}.block{i}.weights"), &blk.weights);
                    f(format!("{name}.block{i}.gain"), &blk.gain);
                    f(format!("{name}.block{i}.bias"), &blk.bias);
                }
            }
        }
        self.vit.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor)) {
        for (branch, name) in [
            (&mut self.backbone.angular, "angular"),
            (&mut self.backbone.radial, "radial"),
        ] {
            if let Some(b) = branch {
                for (i, blk) in b.blocks.iter_mut().enumerate() {
                    f(format!("{name}.block{i}.weights"), &mut blk.weights);
                    f(format!("{name}.block{i}.gain"), &mut blk.gain);
                    f(format!("{name}.block{i}.bias"), &mut blk.bias);
                }
            }
        }
        self.vit.visit_mut(f);
    }

    /// Tape vars for every parameter, in `named_params` order. Keep the
    /// traversals in `register`/`visit` aligned; `ordered_vars` is what ties
    /// gradients back to parameters after backward.
    pub fn ordered_vars(vars: &ModelVars) -> Vec<Var> {
        let mut out = Vec::new();
        for blocks in [&vars.backbone.angular, &vars.backbone.radial].into_iter().flatten() {
            for blk in blocks {
                out.push(blk.weights);
                out.push(blk.gain);
                out.push(blk.bias);
            }
        }
        let v = &vars.vit;
        out.push(v.embed_w);
        out.push(v.embed_b);
        out.push(v.cls);
        out.push(v.pos);
        for b in &v.blocks {
            out.extend_from_slice(&[
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gain, b.ln2_bias, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.push(v.ln_gain);
        out.push(v.ln_bias);
        out.push(v.head_w);
        out.push(v.head_b);
        out
    }
}
