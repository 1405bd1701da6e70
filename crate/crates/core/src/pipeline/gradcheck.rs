//! Finite-difference checks of every differentiable op and of the full
//! objective at toy shapes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::Config;
use super::model::{forward, Model, StepSeeds};
use crate::affinity::{sinkhorn_var, symmetrize_var};
use crate::backbone::{classification_loss, EncoderConfig};
use crate::error::Result;
use crate::params::{derive_seed, Bound};
use crate::refine::{affinity_loss_var, AffinityLossForm};
use crate::tensor::{grad_check, grad_check_many, Tape, Tensor, Var};
use crate::uncertainty::distribution_loss;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_err < TOLERANCE)
    }
}

/// 16×16 image, 4×4 patches (16 tokens), 8 channels, two classes.
pub fn toy_config() -> Config {
    Config {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            channels: 8,
            blocks: 2,
            heads: 2,
            num_classes: 2,
            mlp_ratio: 2,
        },
        k_samples: 3,
        pair_budget: 64,
        iterations: 10,
        warmup_frac: 0.0,
        ..Config::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights, turning any output into a scalar
/// whose gradient exercises every output entry.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = y.tape().constant(random(&mut rng, &y.shape(), -1.0, 1.0));
    Ok(y.mul(w)?.sum())
}

type UnaryOp = for<'t> fn(Var<'t>) -> Result<Var<'t>>;

/// Checks of the primitive ops and the loss building blocks.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let pos = random(&mut rng, &[3, 4], 0.3, 1.5);
    let map = random(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
        })
    };

    let unary: [(&str, UnaryOp, &Tensor); 24] = [
        ("neg", |v| Ok(v.neg()), &x),
        ("add_scalar", |v| Ok(v.add_scalar(0.3)), &x),
        ("mul_scalar", |v| Ok(v.mul_scalar(-1.7)), &x),
        ("relu", |v| Ok(v.relu()), &x),
        ("sigmoid", |v| Ok(v.sigmoid()), &x),
        ("softplus", |v| Ok(v.softplus()), &x),
        ("log_sigmoid", |v| Ok(v.log_sigmoid()), &x),
        ("exp", |v| Ok(v.exp()), &x),
        ("gelu", |v| Ok(v.gelu()), &x),
        ("abs", |v| Ok(v.abs()), &x),
        ("square", |v| Ok(v.square()), &x),
        ("log", |v| v.log(), &pos),
        ("log_clamped", |v| Ok(v.log_clamped(1e-12)), &pos),
        ("sum", |v| Ok(v.sum()), &x),
        ("mean", |v| Ok(v.mean()), &x),
        ("mean_rows", |v| v.mean_rows(), &x),
        ("transpose", |v| v.transpose(), &x),
        ("reshape", |v| v.reshape([4, 3]), &x),
        ("softmax_lastdim", |v| v.softmax_lastdim(0.7), &x),
        ("log_softmax_lastdim", |v| Ok(v.log_softmax_lastdim()), &x),
        ("logsumexp", |v| Ok(v.logsumexp()), &x),
        ("max_lastdim", |v| v.max_lastdim(), &x),
        ("normalize_rows", |v| v.normalize_rows(), &pos),
        ("narrow", |v| Var::concat_cols(&[v.narrow_cols(2, 2)?, v.narrow_rows(0, 3)?.narrow_cols(0, 1)?]), &x),
    ];
    for (i, (name, op, input)) in unary.into_iter().enumerate() {
        push(name, grad_check(move |_, v| project(op(v)?, i as u64), input, STEP)?);
    }
    push("gather", grad_check(|_, v| project(v.gather(&[0, 5, 5, 11])?, 90), &x, STEP)?);
    push("window_max_pool", grad_check(|_, v| project(v.window_max_pool(2, 2)?, 91), &map, STEP)?);
    push("im2col", grad_check(|_, v| project(v.im2col(3, 2)?, 92), &map, STEP)?);

    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    let row = random(&mut rng, &[4], -1.0, 1.0);
    let col = random(&mut rng, &[3], 0.5, 1.5);
    push(
        "add_sub_mul",
        grad_check_many(|_, v| project(v[0].add(v[1])?.mul(v[0])?.sub(v[1])?, 93), &[x.clone(), a.clone()], STEP)?,
    );
    push("matmul", grad_check_many(|_, v| project(v[0].matmul(v[1])?, 94), &[a.clone(), b], STEP)?);
    push(
        "broadcast_vectors",
        grad_check_many(
            |_, v| project(v[0].add_row_vector(v[1])?.add_col_vector(v[2])?.mul_col_vector(v[2])?, 95),
            &[a.clone(), row.clone(), col],
            STEP,
        )?,
    );
    let gamma = row.map(|v| v + 1.5);
    push(
        "layer_norm",
        grad_check_many(|_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, 96), &[a, gamma, row], STEP)?,
    );

    let mu = random(&mut rng, &[2, 4], -1.0, 1.0);
    let sigma = random(&mut rng, &[2, 4], 0.2, 1.2);
    let noise = random(&mut rng, &[3, 2, 4], -2.0, 2.0);
    push(
        "reparameterize",
        grad_check_many(|_, v| project(Var::reparameterize(v[0], v[1], &noise)?, 97), &[mu.clone(), sigma.clone()], STEP)?,
    );
    let m_bin = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
    push(
        "distribution_loss",
        grad_check_many(
            |_, v| {
                let s = Var::reparameterize(v[0], v[1], &noise)?;
                Ok(distribution_loss(s, &m_bin, v[0], v[1])?.total)
            },
            &[mu, sigma],
            STEP,
        )?,
    );

    let attn = random(&mut rng, &[5, 5], 0.05, 1.0);
    push("sinkhorn", grad_check(|_, v| project(symmetrize_var(sinkhorn_var(v, 6)?)?, 98), &attn, STEP)?);

    let logits = random(&mut rng, &[3], -2.0, 2.0);
    push(
        "classification_loss",
        grad_check(|_, v| classification_loss(v, &[true, false, true]), &logits, STEP)?,
    );
    let q = random(&mut rng, &[4], 0.0, 1.0);
    let k = random(&mut rng, &[6], 0.0, 1.0);
    for (name, form) in [("affinity_loss", AffinityLossForm::Literal), ("affinity_loss_log", AffinityLossForm::Log)] {
        push(
            name,
            grad_check_many(|t, v| affinity_loss_var(t, Some(v[0]), Some(v[1]), 0.1, form), &[q.clone(), k.clone()], STEP)?,
        );
    }
    Ok(out)
}

/// The whole training objective as a function of every parameter, with the
/// step's discrete choices recorded once and replayed for each probe.
pub fn composite_check(cfg: &Config, warm: bool, seed: u64) -> Result<f64> {
    let model = Model::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 17));
    let s = cfg.encoder.image_size;
    let image = random(&mut rng, &[3, s, s], 0.0, 1.0);
    let labels: Vec<bool> = (0..cfg.encoder.num_classes).map(|c| c == 0 || rng.random_bool(0.5)).collect();
    let seeds = StepSeeds::for_iter(seed, 0);
    let plan = {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        forward(cfg, &p, &image, &labels, warm, seeds, None)?.plan
    };
    let names: Vec<String> = model.params.names().cloned().collect();
    let values: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    grad_check_many(
        |_, vars| {
            let p = Bound::from_vars(&names, vars);
            Ok(forward(cfg, &p, &image, &labels, warm, seeds, Some(&plan))?.total)
        },
        &values,
        STEP,
    )
}

/// Op checks plus the composite objective before and after warm-up.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut results = op_checks(seed)?;
    let cfg = toy_config();
    for (name, warm) in [("composite_warmup", false), ("composite_full", true)] {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: composite_check(&cfg, warm, seed)?,
        });
    }
    Ok(GradcheckReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        let cfg = toy_config();
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder.tokens(), 16);
    }

    #[test]
    fn ops_pass() {
        for r in op_checks(3).unwrap() {
            assert!(r.max_rel_err < TOLERANCE, "{}: {}", r.name, r.max_rel_err);
        }
    }
}
