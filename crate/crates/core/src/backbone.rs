//! Patch-attention encoder, classification head and class activation maps.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            channels: 48,
            blocks: 4,
            heads: 4,
            num_classes: 2,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.num_classes == 0 || self.num_classes > 8 {
            return bad(format!("num_classes {} outside 1..=8", self.num_classes));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return bad("blocks and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Side of the feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of tokens, `grid²`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Register encoder and classifier parameters.
pub fn init_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let c = cfg.channels;
    let hidden = c * cfg.mlp_ratio;
    store.insert("backbone.patch.w", trunc_normal([cfg.patch_dim(), c], INIT_STD, rng));
    store.insert("backbone.patch.b", Tensor::zeros([c]));
    store.insert("backbone.pos", trunc_normal([cfg.tokens(), c], INIT_STD, rng));
    for b in 0..cfg.blocks {
        let p = format!("backbone.block{b}");
        store.insert(format!("{p}.ln1.g"), Tensor::ones([c]));
        store.insert(format!("{p}.ln1.b"), Tensor::zeros([c]));
        store.insert(format!("{p}.qkv.w"), trunc_normal([c, 3 * c], INIT_STD, rng));
        store.insert(format!("{p}.qkv.b"), Tensor::zeros([3 * c]));
        store.insert(format!("{p}.proj.w"), trunc_normal([c, c], INIT_STD, rng));
        store.insert(format!("{p}.proj.b"), Tensor::zeros([c]));
        store.insert(format!("{p}.ln2.g"), Tensor::ones([c]));
        store.insert(format!("{p}.ln2.b"), Tensor::zeros([c]));
        store.insert(format!("{p}.fc1.w"), trunc_normal([c, hidden], INIT_STD, rng));
        store.insert(format!("{p}.fc1.b"), Tensor::zeros([hidden]));
        store.insert(format!("{p}.fc2.w"), trunc_normal([hidden, c], INIT_STD, rng));
        store.insert(format!("{p}.fc2.b"), Tensor::zeros([c]));
    }
    store.insert("backbone.ln_f.g", Tensor::ones([c]));
    store.insert("backbone.ln_f.b", Tensor::zeros([c]));
    store.insert("cls_head.W", trunc_normal([c, cfg.num_classes], INIT_STD, rng));
}

/// Flatten a `[3×H×W]` image into one row per patch, `[n × 3p²]`, patches
/// in row-major order and each patch laid out channel, row, column.
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (ch, h, w) = image.dims3()?;
    if ch != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Param(format!(
            "image shape {:?} does not match configured 3x{s}x{s}",
            image.shape(),
            s = cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let mut out = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for c in 0..3 {
                for i in 0..p {
                    let row = &image.data()[c * h * w + (pr * p + i) * w + pc * p..];
                    out.extend_from_slice(&row[..p]);
                }
            }
        }
    }
    Tensor::new([cfg.tokens(), cfg.patch_dim()], out)
}

/// Linear patch embedding plus learned position embedding: `[n × C]`.
pub fn patch_embed<'t>(image: &Tensor, cfg: &EncoderConfig, p: &Bound<'t>) -> Result<Var<'t>> {
    let tape = p.get("backbone.pos")?.tape();
    let patches = tape.constant(patchify(image, cfg)?);
    patches
        .matmul(p.get("backbone.patch.w")?)?
        .add_row_vector(p.get("backbone.patch.b")?)?
        .add(p.get("backbone.pos")?)
}

pub struct EncoderOutput<'t> {
    /// Feature map as `[C × n]` (channels by flattened grid).
    pub z: Var<'t>,
    /// Post-softmax attention, `attn[block][head]` each `[n × n]`.
    pub attn: Vec<Vec<Var<'t>>>,
}

impl EncoderOutput<'_> {
    /// Attention of one block as a `[heads × n × n]` tensor.
    pub fn attention_tensor(&self, block: usize) -> Tensor {
        let heads = &self.attn[block];
        let n = heads[0].shape()[0];
        let data = heads.iter().flat_map(|h| h.value().data().to_vec()).collect();
        Tensor::new([heads.len(), n, n], data).expect("square heads")
    }
}

/// Multi-head self-attention over `x [n × C]`; returns the output and the
/// per-head attention maps.
fn self_attention<'t>(
    x: Var<'t>,
    cfg: &EncoderConfig,
    p: &Bound<'t>,
    prefix: &str,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let c = cfg.channels;
    let d = c / cfg.heads;
    let qkv = x
        .matmul(p.get(&format!("{prefix}.qkv.w"))?)?
        .add_row_vector(p.get(&format!("{prefix}.qkv.b"))?)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = qkv.narrow_cols(h * d, d)?;
        let k = qkv.narrow_cols(c + h * d, d)?;
        let v = qkv.narrow_cols(2 * c + h * d, d)?;
        let a = q
            .matmul(k.transpose()?)?
            .mul_scalar(scale)
            .softmax_lastdim(1.0)?;
        outs.push(a.matmul(v)?);
        maps.push(a);
    }
    let merged = Var::concat_cols(&outs)?
        .matmul(p.get(&format!("{prefix}.proj.w"))?)?
        .add_row_vector(p.get(&format!("{prefix}.proj.b"))?)?;
    Ok((merged, maps))
}

/// Pre-norm transformer blocks over `tokens [n × C]`, then a final layer
/// norm. Every block's attention maps are kept.
pub fn encoder_forward<'t>(
    tokens: Var<'t>,
    cfg: &EncoderConfig,
    p: &Bound<'t>,
) -> Result<EncoderOutput<'t>> {
    let mut x = tokens;
    let mut attn = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let pre = format!("backbone.block{b}");
        let h = x.layer_norm(
            p.get(&format!("{pre}.ln1.g"))?,
            p.get(&format!("{pre}.ln1.b"))?,
            LN_EPS,
        )?;
        let (a, maps) = self_attention(h, cfg, p, &pre)?;
        x = x.add(a)?;
        attn.push(maps);
        let h = x.layer_norm(
            p.get(&format!("{pre}.ln2.g"))?,
            p.get(&format!("{pre}.ln2.b"))?,
            LN_EPS,
        )?;
        let m = h
            .matmul(p.get(&format!("{pre}.fc1.w"))?)?
            .add_row_vector(p.get(&format!("{pre}.fc1.b"))?)?
            .gelu()
            .matmul(p.get(&format!("{pre}.fc2.w"))?)?
            .add_row_vector(p.get(&format!("{pre}.fc2.b"))?)?;
        x = x.add(m)?;
    }
    let x = x.layer_norm(p.get("backbone.ln_f.g")?, p.get("backbone.ln_f.b")?, LN_EPS)?;
    Ok(EncoderOutput {
        z: x.transpose()?,
        attn,
    })
}

/// Classifier projection `Wᵀ·features`: `[M × n]`.
pub fn class_maps<'t>(features: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    w.transpose()?.matmul(features)
}

/// Global max pooled logits, `z_j = max_pos (Wᵀ·features)_j`.
pub fn gmp_logits<'t>(features: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    class_maps(features, w)?.max_lastdim()
}

/// Multi-label soft margin loss averaged over classes.
pub fn classification_loss<'t>(logits: Var<'t>, labels: &[bool]) -> Result<Var<'t>> {
    let m = logits.value().numel();
    if labels.len() != m {
        return Err(Error::shape("classification_loss", &[m], &[labels.len()]));
    }
    let tape = logits.tape();
    let y = tape.constant(Tensor::from_vec(
        labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let one_minus_y = y.neg().add_scalar(1.0);
    let prob = logits.sigmoid();
    let pos = y.mul(prob.log_clamped(PROB_FLOOR))?;
    let neg = one_minus_y.mul(prob.neg().add_scalar(1.0).log_clamped(PROB_FLOOR))?;
    Ok(pos.add(neg)?.mean().neg())
}

/// Per-class activation maps over a feature grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    /// `[M × H × W]`, channel `c` belongs to class `c + 1`.
    pub maps: Tensor,
}

impl CamStack {
    pub fn new(maps: Tensor) -> Result<Self> {
        maps.dims3()?;
        Ok(CamStack { maps })
    }

    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn class_map(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.maps.data()[c * n..(c + 1) * n]
    }

    /// Divide each class map by its maximum; all-zero maps stay zero.
    pub fn max_normalized(mut self) -> Self {
        let n = self.height() * self.width();
        for chunk in self.maps.data_mut().chunks_mut(n) {
            let mx = chunk.iter().copied().fold(0.0, f64::max);
            if mx > 0.0 {
                chunk.iter_mut().for_each(|v| *v /= mx);
            }
        }
        self
    }

    /// Zero the maps of classes absent from the image-level labels.
    pub fn masked(mut self, labels: &[bool]) -> Self {
        let n = self.height() * self.width();
        for (chunk, &present) in self.maps.data_mut().chunks_mut(n).zip(labels) {
            if !present {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self
    }

    /// Nearest-neighbour resize to `h × w`, sampling each output cell's
    /// centre.
    pub fn resized(&self, h: usize, w: usize) -> CamStack {
        let (m, sh, sw) = (self.num_classes(), self.height(), self.width());
        let mut out = Vec::with_capacity(m * h * w);
        for c in 0..m {
            let src = self.class_map(c);
            for i in 0..h {
                let si = (2 * i + 1) * sh / (2 * h);
                for j in 0..w {
                    out.push(src[si * sw + (2 * j + 1) * sw / (2 * w)]);
                }
            }
        }
        CamStack {
            maps: Tensor::new([m, h, w], out).expect("resized shape"),
        }
    }
}

/// `relu(Wᵀ·features)` per position, max-normalised per class. `features`
/// is `[C × H × W]`.
pub fn cam(features: &Tensor, w: &Tensor) -> Result<CamStack> {
    let (c, h, wd) = features.dims3()?;
    let (wc, m) = w.dims2()?;
    if wc != c {
        return Err(Error::shape("cam", features.shape(), w.shape()));
    }
    let flat = features.reshape([c, h * wd])?;
    let maps = w.transpose2()?.matmul(&flat)?.map(|v| v.max(0.0));
    Ok(CamStack::new(maps.reshape([m, h, wd])?)?.max_normalized())
}
