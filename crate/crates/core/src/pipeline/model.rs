//! Parameters, checkpointing and the per-image forward pass.
//!
//! Everything discrete in a step (pseudo labels, the binary mask, pair
//! draws, Gaussian noise, the detached uncertainty, Sinkhorn's iteration
//! count) is collected in a [`StepPlan`]. A forward pass either records a
//! fresh plan from its own intermediate values or replays a given one, which
//! keeps the objective a fixed smooth function for finite-difference checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::Config;
use super::synth::write_json;
use crate::affinity::{
    aggregate_attention, aggregate_attention_var, sinkhorn_normalize, sinkhorn_var, symmetrize, symmetrize_var,
    AffinityMatrix, RefineInputs, RefinerRegistry,
};
use crate::backbone::{self, cam, classification_loss, encoder_forward, gmp_logits, patch_embed, CamStack};
use crate::error::{Error, Result};
use crate::params::{derive_seed, Bound, ParamStore};
use crate::refine::{
    affinity_loss_var, contrastive_affinity_loss, mask_from_scores, mcr, pair_logits, sample_pairs, MaskSources,
    PairSample, PseudoMask,
};
use crate::seg_head::{self, consistency_reg, decoder_forward, seg_loss, SegOutput, REG_WEIGHT};
use crate::tensor::{read_blob, write_blob, Tensor, Var};
use crate::uncertainty::{
    self, distribution_loss, reweight_cam, sample_noise, sample_with_noise, soft_ambiguity_masking,
    uncertainty_from_sigma, GaussianField, UncertaintyMap,
};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: Config,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        backbone::init_params(&cfg.encoder, &mut rng, &mut params);
        uncertainty::init_params(cfg.encoder.channels, &mut rng, &mut params);
        seg_head::init_params(cfg.encoder.channels, cfg.encoder.num_classes, &mut rng, &mut params);
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Write `manifest.json`, `weights.bin` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_blob(dir, self.params.as_map())?;
        write_json(&dir.join(CONFIG_FILE), &self.cfg)
    }

    /// Load a checkpoint directory (or its manifest path); every tensor the
    /// configuration calls for must be present with the right shape.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.extension().is_some_and(|e| e == "json") {
            path.parent().unwrap_or(Path::new("."))
        } else {
            path
        };
        let cpath = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let cfg: Config = serde_json::from_str(&text)?;
        let template = Model::init(&cfg)?;
        let loaded = read_blob(path)?;
        for (name, t) in template.params.iter() {
            let got = loaded
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint", got.shape(), t.shape()));
            }
        }
        Ok(Model {
            cfg,
            params: ParamStore::from_map(loaded),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.cfg.encoder.grid();
        (g, g)
    }
}

/// Per-step random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub noise: u64,
    pub pairs: u64,
}

impl StepSeeds {
    pub fn for_iter(seed: u64, iter: usize) -> Self {
        let base = derive_seed(seed, iter as u64);
        StepSeeds {
            noise: derive_seed(base, 1),
            pairs: derive_seed(base, 2),
        }
    }
}

/// The non-differentiable choices of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub warm: bool,
    /// Class maps of the final features, absent classes zeroed.
    pub cam: CamStack,
    pub target: PseudoMask,
    pub sources: Option<MaskSources>,
    pub noise: Option<Tensor>,
    pub uncertainty: Option<UncertaintyMap>,
    pub m_bin: Option<Tensor>,
    pub pairs: Option<PairSample>,
    pub sinkhorn_iters: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub cls: f64,
    pub dis: Option<f64>,
    pub aff: Option<f64>,
    pub seg: f64,
    /// Already scaled by the fixed regulariser weight.
    pub reg: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [Some(self.cls), self.dis, self.aff, Some(self.seg), Some(self.reg)]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

/// Per-part weights: `(cls, dis, aff, seg, reg)`. Before warm-up only the
/// classification, segmentation and regularisation terms count.
pub fn loss_weights(cfg: &Config, warm: bool) -> [f64; 5] {
    let on = if warm { 1.0 } else { 0.0 };
    [1.0, cfg.alpha * on, cfg.beta * on, cfg.gamma, 1.0]
}

/// `L_cls + αL_dis + βL_aff + γL_seg + L_reg` (the middle two only once
/// warm), on plain values.
pub fn total_loss(parts: &LossValues, cfg: &Config, warm: bool) -> f64 {
    let w = loss_weights(cfg, warm);
    let terms = [Some(parts.cls), parts.dis, parts.aff, Some(parts.seg), Some(parts.reg)];
    w.iter()
        .zip(terms)
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, t)| w * t.unwrap_or(0.0))
        .sum()
}

pub struct LossParts<'t> {
    pub cls: Var<'t>,
    pub dis: Option<Var<'t>>,
    pub aff: Option<Var<'t>>,
    pub seg: Var<'t>,
    pub reg: Var<'t>,
}

/// Tape counterpart of [`total_loss`]; zero-weight terms are left off the
/// graph entirely.
pub fn total_loss_var<'t>(parts: &LossParts<'t>, cfg: &Config, warm: bool) -> Result<Var<'t>> {
    let w = loss_weights(cfg, warm);
    let terms = [Some(parts.cls), parts.dis, parts.aff, Some(parts.seg), Some(parts.reg)];
    let mut total = parts.cls;
    for (wi, term) in w.iter().zip(terms).skip(1) {
        if let (true, Some(t)) = (*wi != 0.0, term) {
            total = total.add(t.mul_scalar(*wi))?;
        }
    }
    Ok(total)
}

pub struct Forward<'t> {
    pub parts: LossParts<'t>,
    pub values: LossValues,
    pub total: Var<'t>,
    pub seg: SegOutput<'t>,
    pub plan: StepPlan,
    /// Differentiable `M_aff`, built only when the affinity loss is on.
    pub m_aff: Option<Var<'t>>,
    pub features: Var<'t>,
    pub sigma: Option<Var<'t>>,
}

/// Full training objective for one image. `plan` replays recorded
/// decisions; `None` records new ones from this pass.
pub fn forward<'t>(
    cfg: &Config,
    p: &Bound<'t>,
    image: &Tensor,
    labels: &[bool],
    warm: bool,
    seeds: StepSeeds,
    plan: Option<&StepPlan>,
) -> Result<Forward<'t>> {
    let enc_cfg = &cfg.encoder;
    if labels.len() != enc_cfg.num_classes {
        return Err(Error::shape("forward labels", &[labels.len()], &[enc_cfg.num_classes]));
    }
    if let Some(plan) = plan {
        if plan.warm != warm {
            return Err(Error::Contract("replayed plan belongs to the other training phase".into()));
        }
    }
    let grid = (enc_cfg.grid(), enc_cfg.grid());
    let (c, n) = (enc_cfg.channels, enc_cfg.tokens());
    let enc = encoder_forward(patch_embed(image, enc_cfg, p)?, enc_cfg, p)?;
    let z = enc.z;
    let w_cls = p.get("cls_head.W")?;

    let mut field = None;
    let mut u_map = None;
    let features = if warm {
        let f = GaussianField::build(z, grid, cfg.window, p)?;
        let u = match plan {
            Some(pl) => pl.uncertainty.clone().ok_or_else(|| missing("uncertainty"))?,
            None => uncertainty_from_sigma(&f.sigma.value())?,
        };
        let zf = soft_ambiguity_masking(z, &u, p)?;
        field = Some(f);
        u_map = Some(u);
        zf
    } else {
        z
    };

    let cls = classification_loss(gmp_logits(features, w_cls)?, labels)?;
    let m_cam = match plan {
        Some(pl) => pl.cam.clone(),
        None => cam(&features.value().reshape([c, grid.0, grid.1])?, &w_cls.value())?.masked(labels),
    };

    let mut dis = None;
    let mut noise = None;
    let mut m_bin = None;
    let mut aff = None;
    let mut aff_value = None;
    let mut m_aff_var = None;
    let mut pairs = None;
    let mut sources = None;
    let mut sinkhorn_iters = 0;
    let target;

    if let (true, Some(f)) = (warm, &field) {
        let (m_re, bin) = reweight_cam(&m_cam, cfg.lambda_conf)?;
        let bin = match plan {
            Some(pl) => pl.m_bin.clone().ok_or_else(|| missing("m_bin"))?,
            None => bin,
        };
        let eps = match plan {
            Some(pl) => pl.noise.clone().ok_or_else(|| missing("noise"))?,
            None => sample_noise(cfg.k_samples, &[c, n], seeds.noise),
        };
        let batch = sample_with_noise(f.mu, f.sigma, eps)?;
        dis = Some(distribution_loss(batch.samples, &bin, f.mu, f.sigma)?.total);
        noise = Some(batch.noise);
        m_bin = Some(bin);

        let (p_target, sample, iters) = match plan {
            Some(pl) => (
                pl.target.clone(),
                pl.pairs.clone().ok_or_else(|| missing("pairs"))?,
                pl.sinkhorn_iters,
            ),
            None => {
                let attn: Vec<Tensor> = (0..enc.attn.len()).map(|b| enc.attention_tensor(b)).collect();
                let raw = aggregate_attention(&attn)?;
                let ds = sinkhorn_normalize(&raw, cfg.affinity.sinkhorn_iters, cfg.affinity.sinkhorn_tol)?;
                let m_aff = symmetrize(&ds.matrix)?;
                let reg = RefinerRegistry::default();
                let p2 = reg.build(&cfg.p2_refiner, &cfg.affinity)?;
                let p3 = reg.build(&cfg.p3_refiner, &cfg.affinity)?;
                let inputs = RefineInputs {
                    affinity: Some(&m_aff),
                    image: Some(image),
                };
                let src = MaskSources::build(&m_cam, &m_re, labels, cfg.thresholds(), &*p2, &*p3, &inputs)?;
                let out = mcr(&src.p1, &src.p2, &src.p3)?;
                let sample = sample_pairs(&out.p, &m_aff, cfg.pair_budget, seeds.pairs)?;
                sources = Some(src);
                (out.p, sample, ds.iterations)
            }
        };
        if cfg.beta > 0.0 {
            let m = symmetrize_var(sinkhorn_var(aggregate_attention_var(&enc.attn)?, iters)?)?;
            let (pos, neg) = pair_logits(&sample, m)?;
            aff = Some(affinity_loss_var(z.tape(), pos, neg, cfg.tau, cfg.loss_form())?);
            m_aff_var = Some(m);
        } else {
            aff_value = Some(contrastive_affinity_loss(&sample, cfg.tau, cfg.loss_form())?);
        }
        pairs = Some(sample);
        sinkhorn_iters = iters;
        target = p_target;
    } else {
        target = match plan {
            Some(pl) => pl.target.clone(),
            None => mask_from_scores(&m_cam, labels, cfg.lambda_fg, cfg.lambda_bg)?,
        };
    }

    let seg = decoder_forward(features, grid, p)?;
    let seg_l = seg_loss(&seg, &target)?;
    let reg = consistency_reg(&seg, &m_cam)?.mul_scalar(REG_WEIGHT);
    let parts = LossParts {
        cls,
        dis,
        aff,
        seg: seg_l,
        reg,
    };
    let total = total_loss_var(&parts, cfg, warm)?;
    let values = LossValues {
        cls: cls.item(),
        dis: dis.map(|v| v.item()),
        aff: aff.map(|v| v.item()).or(aff_value),
        seg: seg_l.item(),
        reg: reg.item(),
    };
    let plan = StepPlan {
        warm,
        cam: m_cam,
        target,
        sources,
        noise,
        uncertainty: u_map,
        m_bin,
        pairs,
        sinkhorn_iters,
    };
    Ok(Forward {
        parts,
        values,
        total,
        seg,
        plan,
        m_aff: m_aff_var,
        features,
        sigma: field.map(|f| f.sigma),
    })
}

fn missing(what: &str) -> Error {
    Error::Contract(format!("replayed plan has no {what}"))
}

/// Inference output on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: PseudoMask,
    /// `[(M+1) × n]`.
    pub probs: Tensor,
    /// Sigmoid of the pooled class logits.
    pub class_scores: Vec<f64>,
    /// Channel-mean uncertainty `[n]`, when the model uses masking.
    pub uncertainty: Option<Tensor>,
    pub cam: CamStack,
    /// `M_aff` of the image.
    pub affinity: AffinityMatrix,
}

impl Model {
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let cfg = &self.cfg;
        let enc_cfg = &cfg.encoder;
        let tape = crate::tensor::Tape::new();
        let p = self.params.bind_with(&tape, |_| false);
        let grid = (enc_cfg.grid(), enc_cfg.grid());
        let enc = encoder_forward(patch_embed(image, enc_cfg, &p)?, enc_cfg, &p)?;
        let mut uncertainty = None;
        let features = if cfg.uses_masking() {
            let f = GaussianField::build(enc.z, grid, cfg.window, &p)?;
            let u = uncertainty_from_sigma(&f.sigma.value())?;
            let zf = soft_ambiguity_masking(enc.z, &u, &p)?;
            uncertainty = Some(u.spatial);
            zf
        } else {
            enc.z
        };
        let w = p.get("cls_head.W")?;
        let class_scores = gmp_logits(features, w)?.sigmoid().value().data().to_vec();
        let cam = cam(&features.value().reshape([enc_cfg.channels, grid.0, grid.1])?, &w.value())?;
        let seg = decoder_forward(features, grid, &p)?;
        let attn: Vec<Tensor> = (0..enc.attn.len()).map(|b| enc.attention_tensor(b)).collect();
        let raw = aggregate_attention(&attn)?;
        let ds = sinkhorn_normalize(&raw, cfg.affinity.sinkhorn_iters, cfg.affinity.sinkhorn_tol)?;
        Ok(Prediction {
            mask: seg.predict(),
            probs: (*seg.probs.value()).clone(),
            class_scores,
            uncertainty,
            cam,
            affinity: symmetrize(&ds.matrix)?,
        })
    }

    /// Pseudo-label sources and the refined mask for a labelled image, as
    /// training would produce them with the current weights.
    pub fn pseudo_labels(&self, image: &Tensor, labels: &[bool]) -> Result<PseudoLabels> {
        let cfg = &self.cfg;
        let warm = cfg.uses_masking();
        let tape = crate::tensor::Tape::new();
        let p = self.params.bind_with(&tape, |_| false);
        // the masks do not depend on the loss weights; skip the tape affinity
        let probe = Config {
            beta: 0.0,
            ..cfg.clone()
        };
        let fwd = forward(&probe, &p, image, labels, warm, StepSeeds::for_iter(cfg.seed, 0), None)?;
        let raw = mask_from_scores(&fwd.plan.cam, labels, cfg.lambda_fg, cfg.lambda_bg)?;
        Ok(PseudoLabels {
            raw_cam: raw,
            sources: fwd.plan.sources,
            refined: fwd.plan.target,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// Direct threshold of the class maps.
    pub raw_cam: PseudoMask,
    pub sources: Option<MaskSources>,
    /// The training target (MCR output once warm).
    pub refined: PseudoMask,
}

/// Gradients keyed by parameter name (parameters off the graph are absent).
pub fn named_gradients(
    params: &ParamStore,
    p: &Bound<'_>,
    grads: &crate::tensor::Gradients,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for name in params.names() {
        if let Some(g) = grads.get(p.get(name)?) {
            out.insert(name.clone(), g.clone());
        }
    }
    Ok(out)
}
