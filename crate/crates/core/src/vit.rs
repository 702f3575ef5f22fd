//! Vision Transformer encoder: patchify, linear patch embedding with learned
//! positional encodings and class token, pre-norm transformer blocks, final
//! LayerNorm.
//!
//! Token tensors are `[B, N + 1, D]` with the class token at index 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, trunc_normal, LayerNorm, Linear, Parameterized, Scope, INIT_STD};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl ViTConfig {
    /// Desk-scale student: 64px images, 8px patches, D=32, 4 blocks, 2 heads.
    pub fn desk_student() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 32,
            depth: 4,
            num_heads: 2,
            mlp_ratio: 4.0,
        }
    }

    /// Desk-scale teacher: D=64, 4 blocks, 4 heads.
    pub fn desk_teacher() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            ..Self::desk_student()
        }
    }

    /// ViT-Tiny at 224px.
    pub fn vit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 192,
            depth: 12,
            num_heads: 3,
            mlp_ratio: 4.0,
        }
    }

    /// ViT-Base at 224px.
    pub fn vit_base() -> Self {
        Self {
            embed_dim: 768,
            num_heads: 12,
            ..Self::vit_tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.in_channels == 0 || !(self.mlp_ratio > 0.0) {
            return Err(Error::config("in_channels and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count N = H W / P^2.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// Split `[B, C, H, W]` images into `[B, N, C * P * P]` patches.
///
/// Patches run row-major from the top-left; within a patch the layout is
/// channel-major, then row, then column.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = *images.shape() else {
        return Err(Error::dim("patchify", images.shape(), &[0, 0, 0, 0]));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let mut out = Vec::with_capacity(images.numel());
    let src = images.data();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..patch {
                        let row = ((bi * c + ch) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, channels: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let [b, n, pd] = *patches.shape() else {
        return Err(Error::dim("unpatchify", patches.shape(), &[0, 0, 0]));
    };
    let patch = ((pd / channels.max(1)) as f64).sqrt().round() as usize;
    if patch == 0
        || channels * patch * patch != pd
        || height % patch != 0
        || width % patch != 0
        || (height / patch) * (width / patch) != n
    {
        return Err(Error::dim("unpatchify", patches.shape(), &[channels, height, width]));
    }
    let gw = width / patch;
    let mut out = vec![T::zero(); patches.numel()];
    let src = patches.data();
    let mut i = 0;
    for bi in 0..b {
        for pi in 0..n {
            let (py, px) = (pi / gw, pi % gw);
            for ch in 0..channels {
                for dy in 0..patch {
                    let row = ((bi * channels + ch) * height + py * patch + dy) * width + px * patch;
                    out[row..row + patch].copy_from_slice(&src[i..i + patch]);
                    i += patch;
                }
            }
        }
    }
    Tensor::new(vec![b, channels, height, width], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Block<T> {
    fn new(cfg: &ViTConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(d),
            attn: Attention {
                wq: Linear::new(d, d, rng),
                wk: Linear::new(d, d, rng),
                wv: Linear::new(d, d, rng),
                wo: Linear::new(d, d, rng),
            },
            norm2: LayerNorm::new(d),
            fc1: Linear::new(d, cfg.mlp_hidden(), rng),
            fc2: Linear::new(cfg.mlp_hidden(), d, rng),
        }
    }

    /// `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
    pub fn forward(&self, tape: &mut Tape<T>, scope: &Scope, x: Var, heads: usize) -> Result<Var> {
        let [b, t, d] = *tape.shape(x) else {
            return Err(Error::dim("block", tape.shape(x), &[0, 0, 0]));
        };
        let dh = d / heads;
        let h = self.norm1.forward(tape, &scope.child("norm1"), x)?;
        let a = scope.child("attn");
        let q = self.attn.wq.forward(tape, &a.child("wq"), h)?;
        let k = self.attn.wk.forward(tape, &a.child("wk"), h)?;
        let v = self.attn.wv.forward(tape, &a.child("wv"), h)?;
        let q = tape.reshape(q, &[b, t, heads, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = tape.reshape(k, &[b, t, heads, dh])?;
        let kt = tape.permute(k, &[0, 2, 3, 1])?;
        let v = tape.reshape(v, &[b, t, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 1.0)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let attn_out = self.attn.wo.forward(tape, &a.child("wo"), ctx)?;
        let x = tape.add(x, attn_out)?;

        let h = self.norm2.forward(tape, &scope.child("norm2"), x)?;
        let h = self.fc1.forward(tape, &scope.child("fc1"), h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, &scope.child("fc2"), h)?;
        tape.add(x, h)
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm1.visit(&join(p, "norm1"), f);
        self.attn.wq.visit(&join(p, "attn.wq"), f);
        self.attn.wk.visit(&join(p, "attn.wk"), f);
        self.attn.wv.visit(&join(p, "attn.wv"), f);
        self.attn.wo.visit(&join(p, "attn.wo"), f);
        self.norm2.visit(&join(p, "norm2"), f);
        self.fc1.visit(&join(p, "fc1"), f);
        self.fc2.visit(&join(p, "fc2"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(p, "norm1"), f);
        self.attn.wq.visit_mut(&join(p, "attn.wq"), f);
        self.attn.wk.visit_mut(&join(p, "attn.wk"), f);
        self.attn.wv.visit_mut(&join(p, "attn.wv"), f);
        self.attn.wo.visit_mut(&join(p, "attn.wo"), f);
        self.norm2.visit_mut(&join(p, "norm2"), f);
        self.fc1.visit_mut(&join(p, "fc1"), f);
        self.fc2.visit_mut(&join(p, "fc2"), f);
    }
}

/// Full parameter set of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTEncoder<T> {
    pub config: ViTConfig,
    pub patch_proj: Linear<T>,
    /// `[N + 1, D]`; row 0 belongs to the class token.
    pub pos_embed: Tensor<T>,
    /// `[D]`
    pub class_token: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    pub frozen: bool,
}

impl<T: Scalar> ViTEncoder<T> {
    pub fn new(config: ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            patch_proj: Linear::new(config.patch_dim(), d, rng),
            pos_embed: trunc_normal(&[config.num_tokens(), d], INIT_STD, rng),
            class_token: trunc_normal(&[d], INIT_STD, rng),
            blocks: (0..config.depth).map(|_| Block::new(&config, rng)).collect(),
            final_norm: LayerNorm::new(d),
            frozen: false,
            config,
        })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn scope(&self, prefix: &str) -> Scope {
        Scope::new(prefix, !self.frozen)
    }

    /// `z_n = W_proj p_n + e_n` for every patch, with `z_0 + e_0` prepended.
    /// Returns `[B, N + 1, D]`.
    pub fn embed(&self, tape: &mut Tape<T>, scope: &Scope, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        let n = self.config.num_patches();
        if shape.len() != 3 || shape[1] != n || shape[2] != self.patch_proj.in_dim() {
            return Err(Error::dim("embed", &shape, &[0, n, self.patch_proj.in_dim()]));
        }
        let (b, d) = (shape[0], self.embed_dim());
        let proj = self.patch_proj.forward(tape, &scope.child("patch_proj"), patches)?;
        let pos = scope.bind(tape, "pos_embed", &self.pos_embed);
        let patch_pos = tape.slice(pos, 0, 1, n + 1)?;
        let tokens = tape.add(proj, patch_pos)?;

        let cls = scope.bind(tape, "class_token", &self.class_token);
        let cls = tape.reshape(cls, &[1, d])?;
        let cls_pos = tape.slice(pos, 0, 0, 1)?;
        let cls = tape.add(cls, cls_pos)?;
        let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
        let cls = tape.add(zeros, cls)?;
        tape.concat(&[cls, tokens], 1)
    }

    /// Run the blocks and final norm over `[B, N + 1, D]` tokens.
    pub fn forward(&self, tape: &mut Tape<T>, scope: &Scope, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens);
        if shape.len() != 3 || shape[2] != self.embed_dim() {
            return Err(Error::dim("encoder forward", shape, &[0, 0, self.embed_dim()]));
        }
        let mut x = tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block
                .forward(tape, &scope.child(&format!("blocks.{i}")), x, self.config.num_heads)
                .map_err(|e| e.in_stage(&format!("block {i}")))?;
        }
        self.final_norm
            .forward(tape, &scope.child("final_norm"), x)
            .map_err(|e| e.in_stage("final_norm"))
    }

    /// Plain inference: images in, output tokens out.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let scope = Scope::new("", false);
        let patches = tape.constant(patchify(images, self.config.patch_size)?);
        let tokens = self.embed(&mut tape, &scope, patches)?;
        let out = self.forward(&mut tape, &scope, tokens)?;
        Ok(tape.value(out).clone())
    }
}

impl<T: Scalar> Parameterized<T> for ViTEncoder<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.patch_proj.visit(&join(p, "patch_proj"), f);
        f(join(p, "pos_embed"), &self.pos_embed);
        f(join(p, "class_token"), &self.class_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(p, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(p, "final_norm"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.patch_proj.visit_mut(&join(p, "patch_proj"), f);
        f(join(p, "pos_embed"), &mut self.pos_embed);
        f(join(p, "class_token"), &mut self.class_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(p, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(p, "final_norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(depth: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 8,
            depth,
            num_heads: 2,
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn reference_geometries() {
        let cfg = ViTConfig::vit_base();
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.grid(), 14);
        assert_eq!(cfg.patch_dim(), 16 * 16 * 3);
        assert_eq!(ViTConfig::desk_student().num_patches(), 64);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(1);
        c.patch_size = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny(1);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_whole_image_is_one_patch() {
        let img = Tensor::<f32>::from_fn(&[1, 3, 4, 4], |i| i as f32);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 48]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patchify_224_gives_196() {
        let img = Tensor::<f32>::zeros(&[1, 3, 224, 224]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[1, 196, 768]);
        assert!(matches!(patchify(&img, 15), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_order() {
        // 1 channel 4x4, P=2: patch 1 is the top-right block
        let img = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn embed_zero_and_pos_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = ViTEncoder::<f64>::new(tiny(0), &mut rng).unwrap();
        enc.patch_proj.weight = Tensor::zeros(enc.patch_proj.weight.shape());
        enc.class_token = Tensor::zeros(&[8]);
        let mut tape = Tape::new();
        let scope = enc.scope("s");
        let patches = tape.constant(Tensor::from_fn(&[2, 4, 48], |i| i as f64));
        let out = enc.embed(&mut tape, &scope, patches).unwrap();
        let out = tape.value(out);
        assert_eq!(out.shape(), &[2, 5, 8]);
        for b in 0..2 {
            for n in 0..5 {
                for d in 0..8 {
                    assert_eq!(out.get(&[b, n, d]), enc.pos_embed.get(&[n, d]));
                }
            }
        }
    }

    #[test]
    fn embed_hand_projection() {
        // single 1x1x... patch: 3-dim patch vector into D=2
        let cfg = ViTConfig {
            image_size: 1,
            patch_size: 1,
            in_channels: 3,
            embed_dim: 2,
            depth: 0,
            num_heads: 1,
            mlp_ratio: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = ViTEncoder::<f64>::new(cfg, &mut rng).unwrap();
        enc.patch_proj.weight = Tensor::from_f64s(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        enc.patch_proj.bias = Tensor::zeros(&[2]);
        enc.pos_embed = Tensor::from_f64s(&[2, 2], &[0.0, 0.0, 0.25, -0.25]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_f64s(&[1, 1, 3], &[1.0, 1.0, 2.0]).unwrap());
        let out = enc.embed(&mut tape, &enc.scope(""), p).unwrap();
        // W p = (1 + 2 + 6, -1 + 0.5 + 0) = (9, -0.5), plus e_1
        assert_eq!(&tape.value(out).data()[2..], &[9.25, -0.75]);
    }

    #[test]
    fn depth_zero_forward_is_final_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ViTEncoder::<f64>::new(tiny(0), &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 5, 8], |i| (i as f64 * 0.3).sin());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = enc.forward(&mut tape, &enc.scope(""), xv).unwrap();
        let want = crate::ops::layer_norm(&x, &enc.final_norm.gamma, &enc.final_norm.beta, crate::ops::LAYER_NORM_EPS).unwrap();
        assert!(tape.value(out).bit_eq(&want));
    }

    #[test]
    fn frozen_encoder_registers_no_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ViTEncoder::<f32>::new(tiny(1), &mut rng).unwrap().frozen();
        let mut tape = Tape::new();
        let scope = enc.scope("teacher");
        let p = tape.constant(Tensor::ones(&[1, 4, 48]));
        let t = enc.embed(&mut tape, &scope, p).unwrap();
        let out = enc.forward(&mut tape, &scope, t).unwrap();
        assert!(tape.params().is_empty());
        assert!(!tape.requires_grad(out));
    }

    #[test]
    fn param_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ViTEncoder::<f32>::new(tiny(2), &mut rng).unwrap();
        let names: Vec<_> = enc.named_params("student").into_iter().map(|(n, _)| n).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"student.blocks.1.attn.wq.weight".to_string()));
    }
}
