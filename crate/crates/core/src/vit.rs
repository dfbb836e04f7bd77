//! Compact pre-norm Vision Transformer: patch embedding with learned
//! positions and optional CLS token, MHSA + MLP blocks with stochastic
//! depth, attention readouts, and pooling heads.
//!
//! The backbone works on one image at a time (tokens are an M x D tensor);
//! batches are loops at the training layer. Token positions ride alongside
//! as plain metadata so pruning and reinsertion can restore raster order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CroprError, Result};
use crate::nn::{param_elems, Linear, LayerNorm, Mlp, NamedParams};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Raster-position sentinel carried by the CLS token.
pub const CLS_POSITION: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Maximum stochastic-depth rate; per-block rates ramp linearly from 0
    /// at the first block to this value at the last.
    pub drop_path_max: f64,
    pub pooling: Pooling,
    pub num_classes: usize,
    pub cls_token: bool,
}

impl ViTConfig {
    /// Small test configuration: 64x64 single-channel images, 8x8 patches
    /// (64 patch tokens), 8 blocks of width 64 with 4 heads.
    pub fn toy() -> Self {
        ViTConfig {
            image_side: 64,
            patch_size: 8,
            channels: 1,
            depth: 8,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            drop_path_max: 0.0,
            pooling: Pooling::Avg,
            num_classes: 2,
            cls_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.patch_size == 0 || self.image_side % self.patch_size != 0
        {
            return Err(CroprError::config(format!(
                "image side {} must be a positive multiple of patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(CroprError::config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(CroprError::config(
                "depth, channels, mlp_ratio, and num_classes must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return Err(CroprError::config(format!(
                "drop_path_max {} must lie in [0, 1)",
                self.drop_path_max
            )));
        }
        if self.pooling == Pooling::Cls && !self.cls_token {
            return Err(CroprError::config("cls pooling requires the cls token"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Initial patch-token count M0.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Stochastic-depth rate per block: 0 at block 0 rising linearly to
    /// `drop_path_max` at the last block.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        if self.depth == 1 {
            return vec![self.drop_path_max];
        }
        (0..self.depth)
            .map(|i| self.drop_path_max * i as f64 / (self.depth - 1) as f64)
            .collect()
    }
}

/// One image in channel-major layout (`pixels[c][y][x]` flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub side: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, side: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != channels * side * side {
            return Err(CroprError::dimension(format!(
                "image with {channels} channels and side {side} needs {} pixels, got {}",
                channels * side * side,
                pixels.len()
            )));
        }
        Ok(Image { channels, side, pixels })
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> T {
        self.pixels[(c * self.side + y) * self.side + x]
    }
}

/// Flatten an image into per-patch rows (raster order; each row is the
/// patch's pixels ordered channel, then y, then x).
pub fn image_to_patch_rows<T: Scalar>(img: &Image<T>, patch: usize) -> Result<Vec<T>> {
    if img.side % patch != 0 {
        return Err(CroprError::config(format!(
            "image side {} is not a multiple of patch size {patch}",
            img.side
        )));
    }
    let per_side = img.side / patch;
    let mut rows = Vec::with_capacity(per_side * per_side * img.channels * patch * patch);
    for py in 0..per_side {
        for px in 0..per_side {
            for c in 0..img.channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        rows.push(img.pixel(c, py * patch + dy, px * patch + dx));
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// A token sequence with its raster-position metadata.
#[derive(Debug, Clone)]
pub struct TokenBatch<T: Scalar> {
    pub tokens: Tensor<T>,
    /// Original raster index per token; the CLS token carries
    /// [`CLS_POSITION`] and always sits at row 0.
    pub positions: Vec<usize>,
    pub cls_present: bool,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn new(tokens: Tensor<T>, positions: Vec<usize>, cls_present: bool) -> Result<Self> {
        let batch = TokenBatch { tokens, positions, cls_present };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.rows() != self.positions.len() {
            return Err(CroprError::contract(format!(
                "{} tokens but {} positions",
                self.tokens.rows(),
                self.positions.len()
            )));
        }
        if self.cls_present {
            if self.positions.first() != Some(&CLS_POSITION) {
                return Err(CroprError::contract("cls_present but row 0 is not the CLS token"));
            }
        } else if self.positions.contains(&CLS_POSITION) {
            return Err(CroprError::contract("CLS sentinel present without cls_present"));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in &self.positions {
            if !seen.insert(p) {
                return Err(CroprError::contract(format!("duplicate token position {p}")));
            }
        }
        Ok(())
    }

    /// Row indices of the patch tokens (everything but CLS).
    pub fn patch_rows(&self) -> Vec<usize> {
        (usize::from(self.cls_present)..self.len()).collect()
    }
}

/// A stochastic-depth decision for one residual branch: sampled up front so
/// block forwards stay deterministic functions of their inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropPath {
    pub rate: f64,
    pub drop: bool,
}

impl DropPath {
    /// Inference mode / disabled: the identity.
    pub fn keep() -> Self {
        DropPath { rate: 0.0, drop: false }
    }

    /// Sample a training-mode decision.
    pub fn sample(rate: f64, rng: &mut impl Rng) -> Self {
        let drop = rate > 0.0 && rng.random::<f64>() < rate;
        DropPath { rate, drop }
    }

    /// Apply to a residual branch: dropped branches become zero, survivors
    /// are rescaled by 1/(1-rate) so the expectation is unchanged.
    pub fn apply<T: Scalar>(&self, branch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.drop {
            branch.scale(T::zero())
        } else if self.rate > 0.0 {
            branch.scale(T::from_f64(1.0 / (1.0 - self.rate)))
        } else {
            Ok(branch.clone())
        }
    }
}

/// Multi-head self-attention with learned Q/K/V/output projections.
pub struct Mhsa<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    heads: usize,
}

impl<T: Scalar> Mhsa<T> {
    pub fn new(tape: &Tape<T>, rng: &mut impl Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CroprError::config(format!(
                "width {dim} must be divisible by heads {heads}"
            )));
        }
        Ok(Mhsa {
            wq: Linear::new(tape, rng, dim, dim, true)?,
            wk: Linear::new(tape, rng, dim, dim, true)?,
            wv: Linear::new(tape, rng, dim, dim, true)?,
            wo: Linear::new(tape, rng, dim, dim, true)?,
            heads,
        })
    }

    /// Returns the mixed tokens and the head-averaged attention matrix
    /// (M x M, row-major values) for training-free score readouts.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let m = x.rows();
        let dim = x.cols();
        let dh = dim / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;

        let mut attn_avg = vec![T::zero(); m * m];
        let mut mixed: Option<Tensor<T>> = None;
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax_rows()?;
            for (acc, &p) in attn_avg.iter_mut().zip(&attn.value()) {
                *acc = *acc + p;
            }
            let oh = attn.matmul(&vh)?;
            mixed = Some(match mixed {
                Some(prev) => prev.concat_cols(&oh)?,
                None => oh,
            });
        }
        let inv_heads = T::one() / T::from_usize(self.heads);
        attn_avg.iter_mut().for_each(|v| *v = *v * inv_heads);

        let out = self.wo.forward(&mixed.expect("heads >= 1"))?;
        Ok((out, attn_avg))
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

/// Pre-norm transformer block: x + DropPath(MHSA(LN(x))), then
/// x + DropPath(MLP(LN(x))).
pub struct Block<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Mhsa<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(
        tape: &Tape<T>,
        rng: &mut impl Rng,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(tape, dim)?,
            attn: Mhsa::new(tape, rng, dim, heads)?,
            ln2: LayerNorm::new(tape, dim)?,
            mlp: Mlp::new(tape, rng, dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, dp: DropPath) -> Result<(Tensor<T>, Vec<T>)> {
        let (attn_out, attn_avg) = self.attn.forward(&self.ln1.forward(x)?)?;
        let x = x.add(&dp.apply(&attn_out)?)?;
        let mlp_out = self.mlp.forward(&self.ln2.forward(&x)?)?;
        let x = x.add(&dp.apply(&mlp_out)?)?;
        Ok((x, attn_avg))
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }
}

/// Which attention readout scores the tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnReadout {
    /// Head-averaged CLS row: how much CLS attends to each token.
    Cls,
    /// Column means of the head-averaged attention: how much everything
    /// attends to each token.
    Avg,
}

/// Training-free per-token scores from a head-averaged attention matrix.
pub fn attention_scores<T: Scalar>(
    attn_avg: &[T],
    m: usize,
    readout: AttnReadout,
    cls_present: bool,
) -> Result<Vec<T>> {
    if attn_avg.len() != m * m {
        return Err(CroprError::dimension(format!(
            "attention matrix has {} entries, expected {m}x{m}",
            attn_avg.len()
        )));
    }
    match readout {
        AttnReadout::Cls => {
            if !cls_present {
                return Err(CroprError::contract(
                    "CLS attention readout needs a CLS token",
                ));
            }
            Ok(attn_avg[..m].to_vec())
        }
        AttnReadout::Avg => {
            let inv = T::one() / T::from_usize(m);
            let mut scores = vec![T::zero(); m];
            for r in 0..m {
                for c in 0..m {
                    scores[c] = scores[c] + attn_avg[r * m + c];
                }
            }
            scores.iter_mut().for_each(|s| *s = *s * inv);
            Ok(scores)
        }
    }
}

/// LN + linear head; applied to one pooled row for classification or to
/// every token row for dense prediction.
pub struct Head<T: Scalar> {
    pub ln: LayerNorm<T>,
    pub linear: Linear<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(tape: &Tape<T>, rng: &mut impl Rng, dim: usize, classes: usize) -> Result<Self> {
        Ok(Head {
            ln: LayerNorm::new(tape, dim)?,
            linear: Linear::new(tape, rng, dim, classes, true)?,
        })
    }

    /// Per-row logits: works for pooled (1 x D) and dense (M x D) inputs.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.linear.forward(&self.ln.forward(x)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln.collect(&format!("{prefix}.ln"), out);
        self.linear.collect(&format!("{prefix}.linear"), out);
    }
}

/// The backbone: embedding, blocks, and the final head. Pruning, fusion,
/// and training wiring live in the pipeline layer.
pub struct ViT<T: Scalar> {
    pub config: ViTConfig,
    tape: Tape<T>,
    pub embed: Linear<T>,
    pub pos: Tensor<T>,
    pub cls: Option<Tensor<T>>,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> ViT<T> {
    pub fn new(tape: &Tape<T>, rng: &mut impl Rng, config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let seq = config.num_patches() + usize::from(config.cls_token);
        let embed = Linear::new(tape, rng, config.patch_dim(), d, true)?;
        let pos = tape.param(seq, d, crate::nn::trunc_normal(rng, seq * d, 0.02))?;
        let cls = if config.cls_token {
            Some(tape.param(1, d, crate::nn::trunc_normal(rng, d, 0.02))?)
        } else {
            None
        };
        let blocks = (0..config.depth)
            .map(|_| Block::new(tape, rng, d, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(tape, rng, d, config.num_classes)?;
        Ok(ViT { config, tape: tape.clone(), embed, pos, cls, blocks, head })
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Patch embedding: image -> projected patch tokens (+CLS) with learned
    /// positional embeddings added, positions in raster order.
    pub fn embed_image(&self, img: &Image<T>) -> Result<TokenBatch<T>> {
        if img.side != self.config.image_side || img.channels != self.config.channels {
            return Err(CroprError::config(format!(
                "image is {}x{}x{} but the model expects {}x{}x{}",
                img.channels,
                img.side,
                img.side,
                self.config.channels,
                self.config.image_side,
                self.config.image_side
            )));
        }
        let m0 = self.config.num_patches();
        let rows = image_to_patch_rows(img, self.config.patch_size)?;
        let patches = self.tape.input(m0, self.config.patch_dim(), rows)?;
        let embedded = self.embed.forward(&patches)?;

        let (tokens, positions) = match &self.cls {
            Some(cls) => {
                let seq = cls.concat_rows(&embedded)?;
                let mut pos = Vec::with_capacity(m0 + 1);
                pos.push(CLS_POSITION);
                pos.extend(0..m0);
                (seq, pos)
            }
            None => (embedded, (0..m0).collect()),
        };
        let tokens = tokens.add(&self.pos)?;
        TokenBatch::new(tokens, positions, self.config.cls_token)
    }

    /// Mean over patch tokens (CLS excluded) or the CLS row, per config.
    pub fn pool(&self, batch: &TokenBatch<T>) -> Result<Tensor<T>> {
        match self.config.pooling {
            Pooling::Avg => {
                let rows = batch.patch_rows();
                if rows.is_empty() {
                    return Err(CroprError::contract("no patch tokens to pool"));
                }
                batch.tokens.gather_rows(&rows)?.mean_over_rows()
            }
            Pooling::Cls => {
                if !batch.cls_present {
                    return Err(CroprError::contract("cls pooling without a CLS token"));
                }
                batch.tokens.slice_rows(0, 1)
            }
        }
    }

    /// Pool then head: 1 x num_classes logits.
    pub fn pool_and_head(&self, batch: &TokenBatch<T>) -> Result<Tensor<T>> {
        self.head.forward(&self.pool(batch)?)
    }

    pub fn collect_params(&self, out: &mut NamedParams<T>) {
        self.embed.collect("embed", out);
        out.push(("pos".to_string(), self.pos.clone()));
        if let Some(cls) = &self.cls {
            out.push(("cls".to_string(), cls.clone()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), out);
        }
        self.head.collect("head", out);
    }

    pub fn param_count(&self) -> usize {
        let mut p = NamedParams::new();
        self.collect_params(&mut p);
        param_elems(&p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::gradcheck_params;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_side: 8,
            patch_size: 4,
            channels: 1,
            depth: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            drop_path_max: 0.0,
            pooling: Pooling::Avg,
            num_classes: 3,
            cls_token: true,
        }
    }

    fn ramp_image(channels: usize, side: usize) -> Image<f64> {
        let n = channels * side * side;
        Image::new(channels, side, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::toy().validate().is_ok());
        let mut c = ViTConfig::toy();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy();
        c.drop_path_max = 1.0;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy();
        c.pooling = Pooling::Cls;
        c.cls_token = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn drop_path_rates_ramp_linearly() {
        let mut c = ViTConfig::toy();
        c.drop_path_max = 0.3;
        let rates = c.drop_path_rates();
        assert_eq!(rates.len(), 8);
        assert_eq!(rates[0], 0.0);
        assert!((rates[7] - 0.3).abs() < 1e-12);
        assert!(rates.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn patch_row_extraction_layout() {
        // 4x4 image, 2x2 patches: patch 1 (top-right) holds pixels (0,2),(0,3),(1,2),(1,3).
        let img = Image::new(1, 4, (0..16).map(f64::from).collect()).unwrap();
        let rows = image_to_patch_rows(&img, 2).unwrap();
        assert_eq!(rows.len(), 4 * 4);
        assert_eq!(&rows[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn patch_counts_match_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape: Tape<f64> = Tape::new();
        let mut cfg = tiny_config();
        cfg.image_side = 32;
        cfg.patch_size = 16;
        cfg.width = 8;
        cfg.cls_token = false;
        let vit = ViT::new(&tape, &mut rng, cfg).unwrap();
        let batch = vit.embed_image(&ramp_image(1, 32)).unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.positions, vec![0, 1, 2, 3]);

        // The standard 224/16 geometry yields 196 patch tokens.
        let cfg224 = ViTConfig { image_side: 224, patch_size: 16, ..tiny_config() };
        assert_eq!(cfg224.num_patches(), 196);
    }

    #[test]
    fn cls_token_leads_with_sentinel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape: Tape<f64> = Tape::new();
        let vit = ViT::new(&tape, &mut rng, tiny_config()).unwrap();
        let batch = vit.embed_image(&ramp_image(1, 8)).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(batch.cls_present);
        assert_eq!(batch.positions[0], CLS_POSITION);
        assert_eq!(&batch.positions[1..], &[0, 1, 2, 3]);
    }

    #[test]
    fn block_is_identity_with_zero_output_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape: Tape<f64> = Tape::new();
        let block = Block::new(&tape, &mut rng, 8, 2, 2).unwrap();
        block.attn.wo.weight.set_value(&vec![0.0; 64]).unwrap();
        block.mlp.fc2.weight.set_value(&vec![0.0; 16 * 8]).unwrap();
        let x = tape.input(3, 8, (0..24).map(|i| 0.1 * i as f64).collect()).unwrap();
        let (y, _) = block.forward(&x, DropPath::keep()).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape: Tape<f64> = Tape::new();
        let mhsa = Mhsa::new(&tape, &mut rng, 6, 1).unwrap();
        let x = tape.input(1, 6, vec![0.5; 6]).unwrap();
        let (_, attn) = mhsa.forward(&x).unwrap();
        assert_eq!(attn, vec![1.0]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape: Tape<f64> = Tape::new();
        let mhsa = Mhsa::new(&tape, &mut rng, 8, 2).unwrap();
        let x = tape.input(5, 8, (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (_, attn) = mhsa.forward(&x).unwrap();
        for r in 0..5 {
            let sum: f64 = attn[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
            assert!(attn[r * 5..(r + 1) * 5].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn attention_score_readouts() {
        // Hand-built 3x3 attention matrix.
        let attn: Vec<f64> = vec![
            0.6, 0.3, 0.1, //
            0.2, 0.5, 0.3, //
            0.4, 0.4, 0.2,
        ];
        let cls = attention_scores(&attn, 3, AttnReadout::Cls, true).unwrap();
        assert_eq!(cls, vec![0.6, 0.3, 0.1]);
        let avg = attention_scores(&attn, 3, AttnReadout::Avg, false).unwrap();
        assert!((avg[0] - 0.4).abs() < 1e-12);
        assert!((avg[1] - 0.4).abs() < 1e-12);
        assert!((avg[2] - 0.2).abs() < 1e-12);
        assert!(attention_scores(&attn, 3, AttnReadout::Cls, false).is_err());

        // Uniform attention scores every token equally in both readouts.
        let uniform: Vec<f64> = vec![1.0 / 3.0; 9];
        for readout in [AttnReadout::Cls, AttnReadout::Avg] {
            let s = attention_scores(&uniform, 3, readout, true).unwrap();
            assert!(s.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn avg_readout_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape: Tape<f64> = Tape::new();
        let mhsa = Mhsa::new(&tape, &mut rng, 8, 4).unwrap();
        let x = tape.input(6, 8, (0..48).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let (_, attn) = mhsa.forward(&x).unwrap();
        let scores = attention_scores(&attn, 6, AttnReadout::Avg, false).unwrap();
        for c in 0..6 {
            let mut acc = 0.0;
            for r in 0..6 {
                acc += attn[r * 6 + c];
            }
            assert!((scores[c] - acc / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn drop_path_semantics() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Identity when disabled or surviving at rate 0.
        assert_eq!(DropPath::keep().apply(&x).unwrap().value(), x.value());
        // Dropped branch is exactly zero.
        let dropped = DropPath { rate: 0.5, drop: true };
        assert_eq!(dropped.apply(&x).unwrap().value(), vec![0.0; 4]);
        // Survivor is rescaled to keep the expectation.
        let kept = DropPath { rate: 0.5, drop: false };
        assert_eq!(kept.apply(&x).unwrap().value(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn drop_path_survival_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let survivors = (0..n)
            .filter(|_| !DropPath::sample(0.5, &mut rng).drop)
            .count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "survivor fraction {frac}");

        // Rate 0 never drops.
        assert!((0..1000).all(|_| !DropPath::sample(0.0, &mut rng).drop));
    }

    #[test]
    fn pooling_and_head_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape: Tape<f64> = Tape::new();
        let vit = ViT::new(&tape, &mut rng, tiny_config()).unwrap();

        // Two identical patch tokens: average pooling returns that token.
        let tok = tape
            .input(3, 8, [vec![9.0; 8], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]].concat())
            .unwrap();
        let batch = TokenBatch::new(tok, vec![CLS_POSITION, 0, 1], true).unwrap();
        let pooled = vit.pool(&batch).unwrap();
        assert_eq!(pooled.value(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

        // CLS pooling reads row 0; without CLS it must refuse.
        let mut cfg = tiny_config();
        cfg.pooling = Pooling::Cls;
        let tape2: Tape<f64> = Tape::new();
        let vit_cls = ViT::new(&tape2, &mut rng, cfg).unwrap();
        let tok2 = tape2.input(2, 8, [vec![5.0; 8], vec![1.0; 8]].concat()).unwrap();
        let b2 = TokenBatch::new(tok2, vec![CLS_POSITION, 0], true).unwrap();
        assert_eq!(vit_cls.pool(&b2).unwrap().value(), vec![5.0; 8]);
        let tok3 = tape2.input(1, 8, vec![1.0; 8]).unwrap();
        let b3 = TokenBatch::new(tok3, vec![0], false).unwrap();
        assert!(vit_cls.pool(&b3).is_err());
    }

    #[test]
    fn head_reads_coordinates_through_one_hot_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape: Tape<f64> = Tape::new();
        let head = Head::new(&tape, &mut rng, 3, 3).unwrap();
        // Identity LN effect: feed an already-normalized row.
        let sqrt32 = (3.0f64 / 2.0).sqrt();
        let x = tape.input(1, 3, vec![0.0, sqrt32, -sqrt32]).unwrap();
        let mut w = vec![0.0; 9];
        w[0] = 1.0; // class 0 reads coordinate 0
        w[3 + 1] = 1.0; // class 1 reads coordinate 1
        w[6 + 2] = 1.0; // class 2 reads coordinate 2
        head.linear.weight.set_value(&w).unwrap();
        head.linear.bias.as_ref().unwrap().set_value(&[0.0; 3]).unwrap();
        // The LN epsilon shrinks values by ~5e-7, hence the loose tolerance.
        let logits = head.forward(&x).unwrap().value();
        assert!(logits[0].abs() < 1e-5);
        assert!((logits[1] - sqrt32).abs() < 1e-5);
        assert!((logits[2] + sqrt32).abs() < 1e-5);
    }

    #[test]
    fn permuting_patch_tokens_keeps_avg_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape: Tape<f64> = Tape::new();
        let vit = ViT::new(&tape, &mut rng, tiny_config()).unwrap();
        let batch = vit.embed_image(&ramp_image(1, 8)).unwrap();
        let logits = vit.pool_and_head(&batch).unwrap().value();

        let perm = [0usize, 3, 1, 4, 2]; // keep CLS first, shuffle patches
        let permuted = TokenBatch::new(
            batch.tokens.gather_rows(&perm).unwrap(),
            perm.iter().map(|&i| batch.positions[i]).collect(),
            true,
        )
        .unwrap();
        let logits_perm = vit.pool_and_head(&permuted).unwrap().value();
        for (a, b) in logits.iter().zip(&logits_perm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_reproducible_for_fixed_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let tape: Tape<f64> = Tape::new();
            let vit = ViT::new(&tape, &mut rng, tiny_config()).unwrap();
            let batch = vit.embed_image(&ramp_image(1, 8)).unwrap();
            let mut x = batch.tokens.clone();
            for b in &vit.blocks {
                x = b.forward(&x, DropPath::keep()).unwrap().0;
            }
            let fin = TokenBatch::new(x, batch.positions.clone(), true).unwrap();
            vit.pool_and_head(&fin).unwrap().value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape: Tape<f64> = Tape::new();
        let block = Block::new(&tape, &mut rng, 6, 2, 2).unwrap();
        let mut named = NamedParams::new();
        block.collect("b", &mut named);
        for (_, t) in &named {
            let jit: Vec<f64> =
                t.value().iter().enumerate().map(|(i, v)| v + 0.01 * ((i % 7) as f64)).collect();
            t.set_value(&jit).unwrap();
        }
        let params: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
        gradcheck_params(&tape, &params, |t| {
            let x = t.input(3, 6, (0..18).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
            let (y, _) = block.forward(&x, DropPath::keep()).unwrap();
            y.mul(&y).unwrap().mean_all().unwrap()
        });
    }

    #[test]
    fn vit_param_count_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape: Tape<f64> = Tape::new();
        let cfg = tiny_config();
        let vit = ViT::new(&tape, &mut rng, cfg.clone()).unwrap();
        let d = cfg.width;
        let per_block = 2 * (2 * d) // two LNs
            + 4 * (d * d + d) // q, k, v, o
            + d * (d * cfg.mlp_ratio) + d * cfg.mlp_ratio // fc1
            + (d * cfg.mlp_ratio) * d + d; // fc2
        let expected = cfg.patch_dim() * d + d // embed
            + (cfg.num_patches() + 1) * d // pos
            + d // cls
            + cfg.depth * per_block
            + 2 * d + d * cfg.num_classes + cfg.num_classes; // head
        assert_eq!(vit.param_count(), expected);
    }
}
