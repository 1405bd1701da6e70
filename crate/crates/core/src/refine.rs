//! Pseudo masks, mutual complementing refinement and the contrastive
//! affinity loss.
//!
//! Mask values are `0` (background), `1..=M` (classes) and [`IGNORE`].
//! "In 𝒴" below means a class label, i.e. neither 0 nor 255.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityMatrix, CamRefiner, RefineInputs};
use crate::backbone::CamStack;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const IGNORE: u8 = 255;

#[inline]
pub fn is_class(v: u8) -> bool {
    v != 0 && v != IGNORE
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl PseudoMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("pseudo_mask", &[labels.len()], &[height, width]));
        }
        Ok(PseudoMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        PseudoMask {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Error if any label is neither background, a class `≤ m`, nor ignore.
    pub fn check_classes(&self, m: usize) -> Result<()> {
        match self.labels.iter().find(|&&v| v != IGNORE && v as usize > m) {
            Some(v) => Err(Error::Data(format!("mask label {v} exceeds class count {m}"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resize sampling each output cell's centre.
    pub fn resized(&self, h: usize, w: usize) -> PseudoMask {
        let mut labels = Vec::with_capacity(h * w);
        for i in 0..h {
            let si = (2 * i + 1) * self.height / (2 * h);
            for j in 0..w {
                labels.push(self.labels[si * self.width + (2 * j + 1) * self.width / (2 * w)]);
            }
        }
        PseudoMask { height: h, width: w, labels }
    }

    fn same_shape(&self, other: &PseudoMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }

    fn zip_with(&self, other: &PseudoMask, op: &'static str, f: impl Fn(u8, u8) -> u8) -> Result<PseudoMask> {
        self.same_shape(other, op)?;
        Ok(PseudoMask {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().zip(&other.labels).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// Threshold class scores: the best present class labels the pixel above
/// `λ_fg`, background below `λ_bg`, ignore in between.
pub fn mask_from_scores(scores: &CamStack, labels: &[bool], lambda_fg: f64, lambda_bg: f64) -> Result<PseudoMask> {
    if !(0.0 < lambda_bg && lambda_bg < lambda_fg && lambda_fg < 1.0) {
        return Err(Error::Param(format!(
            "thresholds need 0 < lambda_bg ({lambda_bg}) < lambda_fg ({lambda_fg}) < 1"
        )));
    }
    let (m, h, w) = scores.maps.dims3()?;
    if labels.len() != m {
        return Err(Error::shape("mask_from_scores", scores.maps.shape(), &[labels.len()]));
    }
    if m > IGNORE as usize - 1 {
        return Err(Error::Param(format!("{m} classes do not fit 8-bit masks")));
    }
    let n = h * w;
    let present: Vec<usize> = (0..m).filter(|&c| labels[c]).collect();
    let mut out = vec![0u8; n];
    if present.is_empty() {
        return PseudoMask::new(h, w, out);
    }
    for (px, slot) in out.iter_mut().enumerate() {
        let mut best = present[0];
        for &c in &present[1..] {
            if scores.maps.data()[c * n + px] > scores.maps.data()[best * n + px] {
                best = c;
            }
        }
        let s = scores.maps.data()[best * n + px];
        *slot = if s > lambda_fg {
            best as u8 + 1
        } else if s < lambda_bg {
            0
        } else {
            IGNORE
        };
    }
    PseudoMask::new(h, w, out)
}

/// `S_F`: classes of `P₂` where `P₃` has only background or ignore.
pub fn compute_sf(p2: &PseudoMask, p3: &PseudoMask) -> Result<PseudoMask> {
    p2.zip_with(p3, "compute_sf", |a, b| if is_class(a) && !is_class(b) { a } else { 0 })
}

/// `P_F = M_F⊗P₃ + S_F` with `M_F = 1(S_F ∉ 𝒴)`.
pub fn apply_sf(p3: &PseudoMask, sf: &PseudoMask) -> Result<PseudoMask> {
    p3.zip_with(sf, "apply_sf", |p, s| if is_class(s) { s } else { p })
}

/// `S_C`: `P₁` where `P₁` and `P₂` agree (background and ignore included).
pub fn compute_sc(p1: &PseudoMask, p2: &PseudoMask) -> Result<PseudoMask> {
    p1.zip_with(p2, "compute_sc", |a, b| if a == b { a } else { 0 })
}

/// `P = M_C⊗P_F + S_C` with `M_C = 1(S_C ∉ 𝒴)`. Where `S_C` is not a class
/// it contributes nothing, so an agreed ignore value cannot push a label out
/// of range.
pub fn apply_sc(pf: &PseudoMask, sc: &PseudoMask) -> Result<PseudoMask> {
    pf.zip_with(sc, "apply_sc", |p, s| if is_class(s) { s } else { p })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McrOutput {
    pub sf: PseudoMask,
    pub pf: PseudoMask,
    pub sc: PseudoMask,
    pub p: PseudoMask,
}

/// `S_F → P_F → S_C → P`.
pub fn mcr(p1: &PseudoMask, p2: &PseudoMask, p3: &PseudoMask) -> Result<McrOutput> {
    p1.same_shape(p2, "mcr")?;
    p1.same_shape(p3, "mcr")?;
    let sf = compute_sf(p2, p3)?;
    let pf = apply_sf(p3, &sf)?;
    let sc = compute_sc(p1, p2)?;
    let p = apply_sc(&pf, &sc)?;
    Ok(McrOutput { sf, pf, sc, p })
}

/// The three MCR inputs for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSources {
    pub p1: PseudoMask,
    pub p2: PseudoMask,
    pub p3: PseudoMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub fg: f64,
    pub bg: f64,
}

impl MaskSources {
    /// `P₁` from the reweighted CAM, `P₂` from `p2_refiner(M_re)`, `P₃` from
    /// `p3_refiner(M_CAM)`; all on the CAM grid.
    pub fn build(
        m_cam: &CamStack,
        m_re: &CamStack,
        labels: &[bool],
        th: Thresholds,
        p2_refiner: &dyn CamRefiner,
        p3_refiner: &dyn CamRefiner,
        inputs: &RefineInputs<'_>,
    ) -> Result<Self> {
        let p1 = mask_from_scores(m_re, labels, th.fg, th.bg)?;
        let p2 = mask_from_scores(&p2_refiner.refine(m_re, inputs)?, labels, th.fg, th.bg)?;
        let p3 = mask_from_scores(&p3_refiner.refine(m_cam, inputs)?, labels, th.fg, th.bg)?;
        Ok(MaskSources { p1, p2, p3 })
    }
}

/// Ordered pixel pairs split by label agreement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSample {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
    /// `M_aff[p, q]` for each positive pair.
    pub positive_logits: Vec<f64>,
    pub negative_logits: Vec<f64>,
}

impl PairSample {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Up to `budget` ordered pairs of distinct non-ignored pixels. When every
/// ordered pair fits in the budget they are all taken; otherwise pairs are
/// drawn uniformly with replacement.
pub fn sample_pairs(p: &PseudoMask, m_aff: &AffinityMatrix, budget: usize, seed: u64) -> Result<PairSample> {
    if budget == 0 {
        return Err(Error::Param("pair budget must be at least 1".into()));
    }
    if m_aff.size() != p.len() {
        return Err(Error::shape("sample_pairs", &[p.height, p.width], m_aff.a.shape()));
    }
    let valid: Vec<usize> = (0..p.len()).filter(|&i| p.labels[i] != IGNORE).collect();
    let nv = valid.len();
    let mut pairs = Vec::new();
    if nv >= 2 {
        if nv * (nv - 1) <= budget {
            for &a in &valid {
                for &b in &valid {
                    if a != b {
                        pairs.push((a, b));
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..budget {
                let i = rng.random_range(0..nv);
                let mut j = rng.random_range(0..nv - 1);
                if j >= i {
                    j += 1;
                }
                pairs.push((valid[i], valid[j]));
            }
        }
    }
    let n = m_aff.size();
    let mut out = PairSample::default();
    for (a, b) in pairs {
        let logit = m_aff.a.data()[a * n + b];
        if p.labels[a] == p.labels[b] {
            out.positive.push((a, b));
            out.positive_logits.push(logit);
        } else {
            out.negative.push((a, b));
            out.negative_logits.push(logit);
        }
    }
    Ok(out)
}

/// How positive ratios are turned into the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityLossForm {
    /// `−mean ratio`, in `[−1, 0]`.
    #[default]
    Literal,
    /// `−mean log ratio`, in `[0, ∞)`.
    Log,
}

impl AffinityLossForm {
    pub fn from_flag(log: bool) -> Self {
        if log {
            AffinityLossForm::Log
        } else {
            AffinityLossForm::Literal
        }
    }
}

/// Contrastive affinity loss on the tape. `positive` and `negative` are the
/// affinity logits of the sampled pairs (`[N⁺]`, `[N⁻]`). Each positive's
/// ratio `e^{q/τ} / (e^{q/τ} + Σ e^{k/τ})` is evaluated as
/// `sigmoid(q/τ − logsumexp(k/τ))`.
pub fn affinity_loss_var<'t>(
    tape: &'t Tape,
    positive: Option<Var<'t>>,
    negative: Option<Var<'t>>,
    tau: f64,
    form: AffinityLossForm,
) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature {tau} must be positive")));
    }
    let Some(pos) = positive.filter(|v| v.value().numel() > 0) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let scaled = pos.mul_scalar(1.0 / tau);
    let Some(neg) = negative.filter(|v| v.value().numel() > 0) else {
        // no competitors: every ratio is exactly 1
        let v = match form {
            AffinityLossForm::Literal => -1.0,
            AffinityLossForm::Log => 0.0,
        };
        return Ok(tape.constant(Tensor::scalar(v)));
    };
    let margin = scaled.sub(neg.mul_scalar(1.0 / tau).logsumexp())?;
    Ok(match form {
        AffinityLossForm::Literal => margin.sigmoid().mean().neg(),
        AffinityLossForm::Log => margin.log_sigmoid().mean().neg(),
    })
}

/// Gather the pair logits from a differentiable `M_aff [n × n]`.
pub fn pair_logits<'t>(pairs: &PairSample, m_aff: Var<'t>) -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
    let n = m_aff.shape()[1];
    let flat = m_aff.reshape([n * n])?;
    let gather = |list: &[(usize, usize)]| -> Result<Option<Var<'t>>> {
        if list.is_empty() {
            return Ok(None);
        }
        let idx: Vec<usize> = list.iter().map(|&(a, b)| a * n + b).collect();
        flat.gather(&idx).map(Some)
    };
    Ok((gather(&pairs.positive)?, gather(&pairs.negative)?))
}

/// Loss value from the logits stored in the sample.
pub fn contrastive_affinity_loss(pairs: &PairSample, tau: f64, form: AffinityLossForm) -> Result<f64> {
    let tape = Tape::new();
    let lift = |v: &[f64]| (!v.is_empty()).then(|| tape.constant(Tensor::from_vec(v.to_vec())));
    let l = affinity_loss_var(&tape, lift(&pairs.positive_logits), lift(&pairs.negative_logits), tau, form)?;
    Ok(l.item())
}
