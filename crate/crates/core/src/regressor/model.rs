use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::layers::{
    gelu, gelu_grad, Attention, AttnCache, Builder, Init, LayerNorm, Linear, LnCache, Mlp,
    MlpCache, TensorInfo,
};
use super::train::TrainingPair;
use super::{HeadMode, RegressorError, Result, ToyModelConfig, MLP_RATIO};
use crate::geometry::{
    rotation_from_3d, rotation_from_3d_backward, rotation_from_4d, rotation_from_4d_backward,
    rotation_loss_grad, translation_loss_grad, DirectionalPose, Mat3, Pose, Rotation9D,
    RotationMatrix, So3Projection, Vec3,
};

/// `H × W × 3` image.
pub type Image = Array3<f64>;

/// Token matrix (`T × d`) with the grid position of every token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub positions: Vec<(usize, usize)>,
}

/// Splits an image into non-overlapping `p × p` patches, row-major. Each
/// patch is flattened in (row, column, channel) order.
pub fn extract_patches(
    image: &ArrayView3<f64>,
    patch: usize,
) -> Result<(Array2<f64>, Vec<(usize, usize)>)> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(RegressorError::DimensionMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return Err(RegressorError::DimensionMismatch(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Array2::zeros((rows * cols, patch * patch * 3));
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let t = positions.len();
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..3 {
                        out[(t, k)] = image[(r * patch + dy, c * patch + dx, ch)];
                        k += 1;
                    }
                }
            }
            positions.push((r, c));
        }
    }
    Ok((out, positions))
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

struct EncoderCache {
    norm1: LnCache,
    attn: AttnCache,
    norm2: LnCache,
    mlp: MlpCache,
}

type Positions = [(usize, usize)];

impl EncoderBlock {
    fn new(b: &mut Builder, name: &str, cfg: &ToyModelConfig) -> Self {
        let d = cfg.token_dim;
        Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d),
            attn: Attention::new(
                b,
                &format!("{name}.attn"),
                d,
                cfg.attention_heads,
                cfg.rope_base,
            ),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d),
            mlp: Mlp::new(b, &format!("{name}.mlp"), d, MLP_RATIO * d),
        }
    }

    fn forward(&self, p: &[f64], x: Array2<f64>, pos: &Positions) -> (Array2<f64>, EncoderCache) {
        let (h, norm1) = self.norm1.forward(p, &x.view());
        let (a, attn) = self.attn.forward(p, h.clone(), pos, h, pos);
        let x = x + &a;
        let (h, norm2) = self.norm2.forward(p, &x.view());
        let (m, mlp) = self.mlp.forward(p, h);
        (
            x + &m,
            EncoderCache {
                norm1,
                attn,
                norm2,
                mlp,
            },
        )
    }

    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &EncoderCache,
        pos: &Positions,
        dy: Array2<f64>,
    ) -> Array2<f64> {
        let dh = self.mlp.backward(p, g, &c.mlp, &dy.view());
        let dx = dy + &self.norm2.backward(p, g, &c.norm2, &dh.view());
        let (dq, dkv) = self.attn.backward(p, g, &c.attn, pos, pos, &dx.view());
        let dh = dq + &dkv;
        dx + &self.norm1.backward(p, g, &c.norm1, &dh.view())
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    norm_mem: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
}

struct DecoderCache {
    norm1: LnCache,
    self_attn: AttnCache,
    norm2: LnCache,
    norm_mem: LnCache,
    cross_attn: AttnCache,
    norm3: LnCache,
    mlp: MlpCache,
}

impl DecoderBlock {
    fn new(b: &mut Builder, name: &str, cfg: &ToyModelConfig) -> Self {
        let (d, heads, base) = (cfg.token_dim, cfg.attention_heads, cfg.rope_base);
        Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d),
            self_attn: Attention::new(b, &format!("{name}.self_attn"), d, heads, base),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d),
            norm_mem: LayerNorm::new(b, &format!("{name}.norm_mem"), d),
            cross_attn: Attention::new(b, &format!("{name}.cross_attn"), d, heads, base),
            norm3: LayerNorm::new(b, &format!("{name}.norm3"), d),
            mlp: Mlp::new(b, &format!("{name}.mlp"), d, MLP_RATIO * d),
        }
    }

    fn forward(
        &self,
        p: &[f64],
        x: Array2<f64>,
        pos: &Positions,
        mem: &ArrayView2<f64>,
        mem_pos: &Positions,
    ) -> (Array2<f64>, DecoderCache) {
        let (h, norm1) = self.norm1.forward(p, &x.view());
        let (a, self_attn) = self.self_attn.forward(p, h.clone(), pos, h, pos);
        let x = x + &a;
        let (h, norm2) = self.norm2.forward(p, &x.view());
        let (m, norm_mem) = self.norm_mem.forward(p, mem);
        let (a, cross_attn) = self.cross_attn.forward(p, h, pos, m, mem_pos);
        let x = x + &a;
        let (h, norm3) = self.norm3.forward(p, &x.view());
        let (m, mlp) = self.mlp.forward(p, h);
        (
            x + &m,
            DecoderCache {
                norm1,
                self_attn,
                norm2,
                norm_mem,
                cross_attn,
                norm3,
                mlp,
            },
        )
    }

    /// Returns gradients for the block input and for the memory tokens.
    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &DecoderCache,
        pos: &Positions,
        mem_pos: &Positions,
        dy: Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dh = self.mlp.backward(p, g, &c.mlp, &dy.view());
        let dx = dy + &self.norm3.backward(p, g, &c.norm3, &dh.view());
        let (dq, dm) = self
            .cross_attn
            .backward(p, g, &c.cross_attn, pos, mem_pos, &dx.view());
        let dmem = self.norm_mem.backward(p, g, &c.norm_mem, &dm.view());
        let dx = dx + &self.norm2.backward(p, g, &c.norm2, &dq.view());
        let (dq, dkv) = self
            .self_attn
            .backward(p, g, &c.self_attn, pos, pos, &dx.view());
        let dh = dq + &dkv;
        (dx + &self.norm1.backward(p, g, &c.norm1, &dh.view()), dmem)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    patch_embed: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    head: Vec<Linear>,
    rotation: Linear,
    translation: Linear,
    scale: Option<Linear>,
}

impl Arch {
    fn build(cfg: &ToyModelConfig) -> (Self, Builder) {
        let d = cfg.token_dim;
        let mut b = Builder::default();
        let patch_embed = Linear::new(
            &mut b,
            "patch_embed",
            cfg.patch_size * cfg.patch_size * 3,
            d,
        );
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| EncoderBlock::new(&mut b, &format!("encoder.{i}"), cfg))
            .collect();
        let encoder_norm = LayerNorm::new(&mut b, "encoder.norm", d);
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| DecoderBlock::new(&mut b, &format!("decoder.{i}"), cfg))
            .collect();
        let decoder_norm = LayerNorm::new(&mut b, "decoder.norm", d);
        let head = (0..cfg.head_layers)
            .map(|i| Linear::new(&mut b, &format!("head.{i}"), d, d))
            .collect();
        // Saturated GELUs can zero the pooled features, leaving only the
        // output biases; they start at the identity rotation and a random
        // direction so that such outputs are still well defined.
        let identity: &'static [f64] = match cfg.head_mode.rotation_dim() {
            9 => &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            4 => &[1.0, 0.0, 0.0, 0.0],
            _ => &[0.0, 0.0, 0.0],
        };
        let rotation = Linear::with_bias(
            &mut b,
            "head.rotation",
            d,
            cfg.head_mode.rotation_dim(),
            Init::Values(identity),
        );
        let translation = Linear::with_bias(&mut b, "head.translation", d, 3, Init::Normal(1.0));
        let scale = cfg
            .head_mode
            .is_metric()
            .then(|| Linear::new(&mut b, "head.scale", d, 1));
        (
            Self {
                patch_embed,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                head,
                rotation,
                translation,
                scale,
            },
            b,
        )
    }
}

/// Raw head outputs before mapping to a pose.
#[derive(Debug, Clone, PartialEq)]
struct HeadOutput {
    rotation: Vec<f64>,
    translation: Vec3,
    scale: Option<f64>,
}

struct HeadCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pooled: Array2<f64>,
}

struct BranchCache {
    patches: Array2<f64>,
    positions: Vec<(usize, usize)>,
    encoder: Vec<EncoderCache>,
    encoder_norm: LnCache,
    features: Array2<f64>,
}

struct DecodeCache {
    blocks: Vec<DecoderCache>,
    norm: LnCache,
}

/// Pose predicted for one branch. `scale` is present in metric mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyPrediction {
    pub pose: DirectionalPose,
    pub scale: Option<f64>,
}

impl ToyPrediction {
    /// Metric pose (`direction * scale`), or the unit-translation pose in
    /// directional modes.
    pub fn pose(&self) -> Pose {
        Pose::new(
            self.pose.rotation,
            self.pose.direction() * self.scale.unwrap_or(1.0),
        )
    }
}

/// Loss terms averaged over branches and pairs. In metric mode `translation`
/// also carries the L1 direction and scale terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rotation: f64,
    pub translation: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.rotation + self.translation
    }

    fn add_scaled(&mut self, other: &LossParts, w: f64) {
        self.rotation += w * other.rotation;
        self.translation += w * other.translation;
    }
}

enum RotationMap {
    Svd(So3Projection),
    Quaternion([f64; 4]),
    AxisAngle(Vec3),
}

impl RotationMap {
    fn new(mode: HeadMode, raw: &[f64]) -> Result<(RotationMatrix, Self)> {
        Ok(match mode {
            HeadMode::Directional9d | HeadMode::Metric9d => {
                let raw: [f64; 9] = raw.try_into().expect("9 rotation outputs");
                let proj = So3Projection::new(&Rotation9D(raw).matrix())?;
                (*proj.rotation(), RotationMap::Svd(proj))
            }
            HeadMode::Directional4d => {
                let raw: [f64; 4] = raw.try_into().expect("4 rotation outputs");
                (rotation_from_4d(&raw)?, RotationMap::Quaternion(raw))
            }
            HeadMode::Directional3d => {
                let omega = Vec3::from_column_slice(raw);
                (rotation_from_3d(&omega), RotationMap::AxisAngle(omega))
            }
        })
    }

    fn backward(&self, grad: &Mat3) -> Vec<f64> {
        match self {
            RotationMap::Svd(p) => Rotation9D::from_matrix(&p.backward(grad)).0.to_vec(),
            RotationMap::Quaternion(raw) => rotation_from_4d_backward(raw, grad).to_vec(),
            RotationMap::AxisAngle(omega) => {
                rotation_from_3d_backward(omega, grad).as_slice().to_vec()
            }
        }
    }
}

/// Smallest predicted translation scale; softplus alone underflows to zero.
const MIN_SCALE: f64 = 1e-6;

fn positive_scale(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p() + MIN_SCALE
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of one branch and the gradient with respect to its raw head outputs.
fn branch_loss(mode: HeadMode, out: &HeadOutput, gt: &Pose) -> Result<(LossParts, HeadOutput)> {
    let (rotation, map) = RotationMap::new(mode, &out.rotation)?;
    let (loss_r, grad_r) = rotation_loss_grad(&rotation, &gt.rotation);
    let (mut loss_t, mut grad_t) = translation_loss_grad(&out.translation, &gt.translation)?;
    let mut grad_s = None;
    if let Some(raw) = out.scale {
        let n = out.translation.norm();
        let dir = out.translation / n;
        let target_norm = gt.translation.norm();
        let diff = dir - gt.translation / target_norm;
        loss_t += diff.abs().sum();
        let g_dir = diff.map(sign);
        grad_t += (g_dir - dir * dir.dot(&g_dir)) / n;
        let s = positive_scale(raw);
        loss_t += (s - target_norm).abs();
        grad_s = Some(sign(s - target_norm) * sigmoid(raw));
    }
    Ok((
        LossParts {
            rotation: loss_r,
            translation: loss_t,
        },
        HeadOutput {
            rotation: map.backward(&grad_r),
            translation: grad_t,
            scale: grad_s,
        },
    ))
}

/// The shared-weight two-view regressor. All parameters live in one flat
/// buffer described by `tensors()`.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    tensors: Vec<TensorInfo>,
    params: Vec<f64>,
    arch: Arch,
}

impl PartialEq for ToyModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl ToyModel {
    /// Randomly initialized model, deterministic in `config.seed`.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let (arch, builder) = Arch::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; builder.len];
        for (info, init) in builder.tensors.iter().zip(&builder.inits) {
            let dst = &mut params[info.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Values(v) => dst.copy_from_slice(v),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    dst.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            config,
            tensors: builder.tensors,
            params,
            arch,
        })
    }

    /// Model with the given configuration and parameter values.
    pub fn from_parameters(config: ToyModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (arch, builder) = Arch::build(&config);
        if params.len() != builder.len {
            return Err(RegressorError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                builder.len,
                params.len()
            )));
        }
        Ok(Self {
            config,
            tensors: builder.tensors,
            params,
            arch,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let info = self.tensors.iter().find(|t| t.name == name)?;
        Some(&self.params[info.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let info = self.tensors.iter().find(|t| t.name == name)?;
        Some(&mut self.params[info.range()])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter count of the same model with a separate decoder per branch.
    pub fn asymmetric_parameter_count(&self) -> usize {
        let decoder: usize = self
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("decoder."))
            .map(TensorInfo::len)
            .sum();
        self.params.len() + decoder
    }

    /// Patches of `image` embedded into `d`-dimensional tokens.
    pub fn patchify(&self, image: &Image) -> Result<TokenSequence> {
        let (patches, positions) = extract_patches(&image.view(), self.config.patch_size)?;
        Ok(TokenSequence {
            tokens: self.arch.patch_embed.forward(&self.params, &patches.view()),
            positions,
        })
    }

    /// Encoder features of an embedded sequence. The positions are carried over.
    pub fn encode(&self, seq: &TokenSequence) -> TokenSequence {
        let (features, _, _) = self.encode_cached(seq.tokens.clone(), &seq.positions);
        TokenSequence {
            tokens: features,
            positions: seq.positions.clone(),
        }
    }

    /// Decoder tokens of the `own` branch, cross-attending to `other`.
    pub fn decode(&self, own: &TokenSequence, other: &TokenSequence) -> Array2<f64> {
        self.decode_cached(own, &other.tokens.view(), &other.positions)
            .0
    }

    pub fn pose_head(&self, tokens: &Array2<f64>) -> Result<ToyPrediction> {
        let (out, _) = self.head_cached(tokens);
        self.predict(&out)
    }

    /// Predictions `(P̂₁₂, P̂₂₁)`. `P̂₁₂` estimates `relative_pose(pose₁, pose₂)`,
    /// the transform from camera 1 to camera 2 coordinates.
    pub fn forward_pair(&self, a: &Image, b: &Image) -> Result<(ToyPrediction, ToyPrediction)> {
        let fa = self.encode(&self.patchify(a)?);
        let fb = self.encode(&self.patchify(b)?);
        let pa = self.pose_head(&self.decode(&fa, &fb))?;
        let pb = self.pose_head(&self.decode(&fb, &fa))?;
        Ok((pa, pb))
    }

    fn predict(&self, out: &HeadOutput) -> Result<ToyPrediction> {
        let (rotation, _) = RotationMap::new(self.config.head_mode, &out.rotation)?;
        Ok(ToyPrediction {
            pose: DirectionalPose::new(rotation, out.translation)?,
            scale: out.scale.map(positive_scale),
        })
    }

    fn encode_cached(
        &self,
        mut x: Array2<f64>,
        pos: &Positions,
    ) -> (Array2<f64>, Vec<EncoderCache>, LnCache) {
        let p = &self.params;
        let mut caches = Vec::with_capacity(self.arch.encoder.len());
        for block in &self.arch.encoder {
            let (y, c) = block.forward(p, x, pos);
            caches.push(c);
            x = y;
        }
        let (f, norm) = self.arch.encoder_norm.forward(p, &x.view());
        (f, caches, norm)
    }

    fn branch_forward(&self, image: &Image) -> Result<BranchCache> {
        let (patches, positions) = extract_patches(&image.view(), self.config.patch_size)?;
        let x = self.arch.patch_embed.forward(&self.params, &patches.view());
        let (features, encoder, encoder_norm) = self.encode_cached(x, &positions);
        Ok(BranchCache {
            patches,
            positions,
            encoder,
            encoder_norm,
            features,
        })
    }

    fn branch_backward(&self, g: &mut [f64], c: &BranchCache, df: Array2<f64>) {
        let p = &self.params;
        let mut dx = self
            .arch
            .encoder_norm
            .backward(p, g, &c.encoder_norm, &df.view());
        for (block, cache) in self.arch.encoder.iter().zip(&c.encoder).rev() {
            dx = block.backward(p, g, cache, &c.positions, dx);
        }
        self.arch
            .patch_embed
            .backward(p, g, &c.patches.view(), &dx.view());
    }

    fn decode_cached(
        &self,
        own: &TokenSequence,
        mem: &ArrayView2<f64>,
        mem_pos: &Positions,
    ) -> (Array2<f64>, DecodeCache) {
        let p = &self.params;
        let mut x = own.tokens.clone();
        let mut blocks = Vec::with_capacity(self.arch.decoder.len());
        for block in &self.arch.decoder {
            let (y, c) = block.forward(p, x, &own.positions, mem, mem_pos);
            blocks.push(c);
            x = y;
        }
        let (out, norm) = self.arch.decoder_norm.forward(p, &x.view());
        (out, DecodeCache { blocks, norm })
    }

    fn decode_backward(
        &self,
        g: &mut [f64],
        c: &DecodeCache,
        pos: &Positions,
        mem_pos: &Positions,
        dy: Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let p = &self.params;
        let mut dx = self.arch.decoder_norm.backward(p, g, &c.norm, &dy.view());
        let mut dmem: Option<Array2<f64>> = None;
        for (block, cache) in self.arch.decoder.iter().zip(&c.blocks).rev() {
            let (d, m) = block.backward(p, g, cache, pos, mem_pos, dx);
            dx = d;
            dmem = Some(match dmem {
                Some(acc) => acc + &m,
                None => m,
            });
        }
        (dx, dmem.expect("at least one decoder block"))
    }

    fn head_cached(&self, tokens: &Array2<f64>) -> (HeadOutput, HeadCache) {
        let p = &self.params;
        let mut z = tokens.clone();
        let mut inputs = Vec::with_capacity(self.arch.head.len());
        let mut pre = Vec::with_capacity(self.arch.head.len());
        for layer in &self.arch.head {
            let h = layer.forward(p, &z.view());
            inputs.push(z);
            z = h.mapv(gelu);
            pre.push(h);
        }
        let pooled = z
            .mean_axis(Axis(0))
            .expect("non-empty token set")
            .insert_axis(Axis(0));
        let rotation = self
            .arch
            .rotation
            .forward(p, &pooled.view())
            .into_raw_vec_and_offset()
            .0;
        let t = self.arch.translation.forward(p, &pooled.view());
        let scale = self
            .arch
            .scale
            .as_ref()
            .map(|l| l.forward(p, &pooled.view())[(0, 0)]);
        (
            HeadOutput {
                rotation,
                translation: Vec3::new(t[(0, 0)], t[(0, 1)], t[(0, 2)]),
                scale,
            },
            HeadCache {
                inputs,
                pre,
                pooled,
            },
        )
    }

    fn head_backward(&self, g: &mut [f64], c: &HeadCache, grad: &HeadOutput) -> Array2<f64> {
        let p = &self.params;
        let pooled = c.pooled.view();
        let d_rot = Array2::from_shape_vec((1, grad.rotation.len()), grad.rotation.clone())
            .expect("row vector");
        let d_t = Array2::from_shape_vec((1, 3), grad.translation.as_slice().to_vec())
            .expect("row vector");
        let mut dpooled = self.arch.rotation.backward(p, g, &pooled, &d_rot.view());
        dpooled += &self.arch.translation.backward(p, g, &pooled, &d_t.view());
        if let (Some(layer), Some(ds)) = (&self.arch.scale, grad.scale) {
            let d_s = Array2::from_elem((1, 1), ds);
            dpooled += &layer.backward(p, g, &pooled, &d_s.view());
        }
        let rows = c.inputs.first().map_or(0, |x| x.nrows());
        let row: Array1<f64> = dpooled.row(0).to_owned() / rows as f64;
        let mut dz = row
            .broadcast((rows, row.len()))
            .expect("broadcast")
            .to_owned();
        for ((layer, input), pre) in self.arch.head.iter().zip(&c.inputs).zip(&c.pre).rev() {
            dz.zip_mut_with(pre, |d, &x| *d *= gelu_grad(x));
            dz = layer.backward(p, g, &input.view(), &dz.view());
        }
        dz
    }

    fn run_pair(&self, pair: &TrainingPair, grad: Option<&mut [f64]>) -> Result<LossParts> {
        let mode = self.config.head_mode;
        let a = self.branch_forward(&pair.image1)?;
        let b = self.branch_forward(&pair.image2)?;
        let seq_a = TokenSequence {
            tokens: a.features.clone(),
            positions: a.positions.clone(),
        };
        let seq_b = TokenSequence {
            tokens: b.features.clone(),
            positions: b.positions.clone(),
        };
        let (ga, dec_a) = self.decode_cached(&seq_a, &b.features.view(), &b.positions);
        let (gb, dec_b) = self.decode_cached(&seq_b, &a.features.view(), &a.positions);
        let (out_a, head_a) = self.head_cached(&ga);
        let (out_b, head_b) = self.head_cached(&gb);
        let gt21 = pair.relative.inverse();
        let (loss_a, grad_a) = branch_loss(mode, &out_a, &pair.relative)?;
        let (loss_b, grad_b) = branch_loss(mode, &out_b, &gt21)?;
        let mut loss = LossParts::default();
        loss.add_scaled(&loss_a, 0.5);
        loss.add_scaled(&loss_b, 0.5);
        if let Some(g) = grad {
            let half = |h: HeadOutput| HeadOutput {
                rotation: h.rotation.iter().map(|v| 0.5 * v).collect(),
                translation: h.translation * 0.5,
                scale: h.scale.map(|s| 0.5 * s),
            };
            let dga = self.head_backward(g, &head_a, &half(grad_a));
            let dgb = self.head_backward(g, &head_b, &half(grad_b));
            let (dfa, dfb_mem) = self.decode_backward(g, &dec_a, &a.positions, &b.positions, dga);
            let (dfb, dfa_mem) = self.decode_backward(g, &dec_b, &b.positions, &a.positions, dgb);
            self.branch_backward(g, &a, dfa + &dfa_mem);
            self.branch_backward(g, &b, dfb + &dfb_mem);
        }
        Ok(loss)
    }

    /// Symmetric loss of one pair: the mean of both branch losses, with
    /// `P̂₂₁` supervised by the inverse of the ground truth.
    pub fn pair_loss(&self, pair: &TrainingPair) -> Result<LossParts> {
        self.run_pair(pair, None)
    }

    pub fn pair_loss_grad(&self, pair: &TrainingPair) -> Result<(LossParts, Vec<f64>)> {
        let mut g = vec![0.0; self.params.len()];
        let loss = self.run_pair(pair, Some(&mut g))?;
        Ok((loss, g))
    }

    /// Mean loss over the batch. Pairs are evaluated in parallel and reduced
    /// in batch order, so the result does not depend on the thread count.
    pub fn batch_loss(&self, batch: &[TrainingPair]) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(RegressorError::EmptyBatch);
        }
        let parts: Vec<LossParts> = batch
            .par_iter()
            .map(|pair| self.pair_loss(pair))
            .collect::<Result<_>>()?;
        let w = 1.0 / batch.len() as f64;
        let mut total = LossParts::default();
        parts.iter().for_each(|l| total.add_scaled(l, w));
        Ok(total)
    }

    pub fn batch_loss_grad(&self, batch: &[TrainingPair]) -> Result<(LossParts, Vec<f64>)> {
        if batch.is_empty() {
            return Err(RegressorError::EmptyBatch);
        }
        let parts: Vec<(LossParts, Vec<f64>)> = batch
            .par_iter()
            .map(|pair| self.pair_loss_grad(pair))
            .collect::<Result<_>>()?;
        let w = 1.0 / batch.len() as f64;
        let mut total = LossParts::default();
        let mut grad = vec![0.0; self.params.len()];
        for (l, g) in &parts {
            total.add_scaled(l, w);
            grad.iter_mut().zip(g).for_each(|(acc, v)| *acc += w * v);
        }
        Ok((total, grad))
    }
}
