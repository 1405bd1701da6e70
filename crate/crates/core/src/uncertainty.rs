//! Gaussian feature field, variance-based uncertainty, CAM reweighting,
//! distribution loss and soft ambiguity masking.
//!
//! All maps here are stored flattened as `[C × n]` with `n = H·W` of the
//! feature grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::CamStack;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Tensor, Var};

const INIT_STD: f64 = 0.02;
const MINMAX_EPS: f64 = 1e-8;

/// Register the parameters of both distribution branches and of the
/// masking attention.
///
/// The masking attention starts with identity query, key and value
/// projections so that the masked features begin close to the input
/// features instead of collapsing to a spatial average.
pub fn init_params(channels: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let c = channels;
    store.insert("uncertainty.mu_c.scale", Tensor::ones([c]));
    store.insert("uncertainty.mu_c.shift", Tensor::zeros([c]));
    store.insert("uncertainty.sigma_c.scale", trunc_normal([c], INIT_STD, rng));
    store.insert("uncertainty.sigma_c.shift", Tensor::zeros([c]));
    for branch in ["mu_s", "sigma_s"] {
        for proj in ["q", "k", "v"] {
            store.insert(
                format!("uncertainty.{branch}.{proj}.w"),
                trunc_normal([c, c], INIT_STD, rng),
            );
            store.insert(format!("uncertainty.{branch}.{proj}.b"), Tensor::zeros([c]));
        }
    }
    for proj in ["q", "k", "v"] {
        store.insert(format!("uncertainty.mask.{proj}.w"), Tensor::eye(c));
        store.insert(format!("uncertainty.mask.{proj}.b"), Tensor::zeros([c]));
    }
}

/// Depth-wise 1×1 convolution pair: `μ_c = a⊙Z + b`, `σ_c` likewise.
pub fn channel_params<'t>(z: Var<'t>, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let mu = z
        .mul_col_vector(p.get("uncertainty.mu_c.scale")?)?
        .add_col_vector(p.get("uncertainty.mu_c.shift")?)?;
    let sigma = z
        .mul_col_vector(p.get("uncertainty.sigma_c.scale")?)?
        .add_col_vector(p.get("uncertainty.sigma_c.shift")?)?;
    Ok((mu, sigma))
}

/// Single-head cross-attention with queries from `query [n × C]` and keys
/// and values from `context [N × C]`, logits scaled by `1/√C`. Returns the
/// attended values `[n × C]` and the attention weights `[n × N]`.
pub fn cross_attention<'t>(
    query: Var<'t>,
    context: Var<'t>,
    p: &Bound<'t>,
    prefix: &str,
) -> Result<(Var<'t>, Var<'t>)> {
    let c = query.shape()[1];
    let proj = |x: Var<'t>, name: &str| -> Result<Var<'t>> {
        x.matmul(p.get(&format!("{prefix}.{name}.w"))?)?
            .add_row_vector(p.get(&format!("{prefix}.{name}.b"))?)
    };
    let q = proj(query, "q")?;
    let k = proj(context, "k")?;
    let v = proj(context, "v")?;
    let weights = q
        .matmul(k.transpose()?)?
        .mul_scalar(1.0 / (c as f64).sqrt())
        .softmax_lastdim(1.0)?;
    Ok((weights.matmul(v)?, weights))
}

/// Window prototypes `[C × N]` of a `[C × n]` map on an `h × w` grid.
pub fn window_prototypes<'t>(z: Var<'t>, h: usize, w: usize, window: usize) -> Result<Var<'t>> {
    if window == 0 || window > h || window > w {
        return Err(Error::Param(format!(
            "window {window} does not fit the {h}x{w} feature grid"
        )));
    }
    let c = z.shape()[0];
    z.reshape([c, h, w])?.window_max_pool(window, window)
}

/// Spatial branch: window-max prototypes attended to by every token,
/// through separate cross-attentions for the mean and the variance.
pub fn spatial_params<'t>(
    z: Var<'t>,
    grid: (usize, usize),
    window: usize,
    p: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let prototypes = window_prototypes(z, grid.0, grid.1, window)?.transpose()?;
    let tokens = z.transpose()?;
    let (mu, _) = cross_attention(tokens, prototypes, p, "uncertainty.mu_s")?;
    let (sigma, _) = cross_attention(tokens, prototypes, p, "uncertainty.sigma_s")?;
    Ok((mu.transpose()?, sigma.transpose()?))
}

/// Mean and variance fields of the feature distribution.
pub struct GaussianField<'t> {
    pub mu_c: Var<'t>,
    pub sigma_c: Var<'t>,
    pub mu_s: Var<'t>,
    pub sigma_s: Var<'t>,
    /// `μ_c + μ_s`.
    pub mu: Var<'t>,
    /// `softplus(σ_c + σ_s)`, strictly positive.
    pub sigma: Var<'t>,
}

impl<'t> GaussianField<'t> {
    pub fn from_parts(
        (mu_c, sigma_c): (Var<'t>, Var<'t>),
        (mu_s, sigma_s): (Var<'t>, Var<'t>),
    ) -> Result<Self> {
        let mu = mu_c.add(mu_s)?;
        let sigma = sigma_c.add(sigma_s)?.softplus();
        Ok(GaussianField {
            mu_c,
            sigma_c,
            mu_s,
            sigma_s,
            mu,
            sigma,
        })
    }

    pub fn build(z: Var<'t>, grid: (usize, usize), window: usize, p: &Bound<'t>) -> Result<Self> {
        Self::from_parts(channel_params(z, p)?, spatial_params(z, grid, window, p)?)
    }
}

/// Standard normal noise of shape `[k, ..shape]` from a seeded stream.
pub fn sample_noise(k: usize, shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    let data = (0..k * per).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut full = vec![k];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("noise shape")
}

/// `K` reparameterised draws `S_k = μ + ε_k ⊗ σ`.
pub struct SampleBatch<'t> {
    /// `[K × C × n]`.
    pub samples: Var<'t>,
    pub noise: Tensor,
}

pub fn sample_distribution<'t>(
    mu: Var<'t>,
    sigma: Var<'t>,
    k: usize,
    seed: u64,
) -> Result<SampleBatch<'t>> {
    if k == 0 {
        return Err(Error::Param("at least one sample is required".into()));
    }
    let noise = sample_noise(k, &mu.shape(), seed);
    sample_with_noise(mu, sigma, noise)
}

/// Draws with caller-supplied noise (used to hold ε fixed).
pub fn sample_with_noise<'t>(mu: Var<'t>, sigma: Var<'t>, noise: Tensor) -> Result<SampleBatch<'t>> {
    let samples = Var::reparameterize(mu, sigma, &noise)?;
    Ok(SampleBatch { samples, noise })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    /// `[C × n]`, each channel min-max normalised to `[0, 1]`.
    pub u: Tensor,
    /// Channel mean, `[n]`.
    pub spatial: Tensor,
}

/// Per-channel min-max normalisation of σ over spatial positions.
pub fn uncertainty_from_sigma(sigma: &Tensor) -> Result<UncertaintyMap> {
    let (c, n) = sigma.dims2()?;
    let mut u = Vec::with_capacity(c * n);
    for row in sigma.data().chunks(n) {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        u.extend(row.iter().map(|v| ((v - lo) / (hi - lo + MINMAX_EPS)).clamp(0.0, 1.0)));
    }
    let mut spatial = vec![0.0; n];
    for row in u.chunks(n) {
        for (s, v) in spatial.iter_mut().zip(row) {
            *s += v / c as f64;
        }
    }
    Ok(UncertaintyMap {
        u: Tensor::new([c, n], u)?,
        spatial: Tensor::from_vec(spatial),
    })
}

/// `Z_c = (1−U)⊗Z`, then `softmax(Q_Z K_Zcᵀ/√C)·V_Zc`; returns `[C × n]`.
pub fn soft_ambiguity_masking<'t>(z: Var<'t>, u: &UncertaintyMap, p: &Bound<'t>) -> Result<Var<'t>> {
    if z.shape() != u.u.shape() {
        return Err(Error::shape("soft_ambiguity_masking", &z.shape(), u.u.shape()));
    }
    let certain = z.tape().constant(u.u.map(|v| 1.0 - v));
    let zc = z.mul(certain)?;
    let (out, _) = cross_attention(z.transpose()?, zc.transpose()?, p, "uncertainty.mask")?;
    out.transpose()
}

/// `M_re = 1(M_CAM > λ) ⊗ M_CAM` and the foreground mask `M_bin [n]`
/// (1 where any class of `M_re` is positive).
pub fn reweight_cam(cams: &CamStack, lambda: f64) -> Result<(CamStack, Tensor)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Param(format!("confidence threshold {lambda} outside (0, 1)")));
    }
    let re = cams.maps.map(|v| if v > lambda { v } else { 0.0 });
    let n = cams.height() * cams.width();
    let mut bin = vec![0.0; n];
    for chunk in re.data().chunks(n) {
        for (b, &v) in bin.iter_mut().zip(chunk) {
            if v > 0.0 {
                *b = 1.0;
            }
        }
    }
    Ok((CamStack::new(re)?, Tensor::from_vec(bin)))
}

pub struct DistributionLoss<'t> {
    /// Per-pixel binary cross-entropy of `S_dis` against `M_bin`.
    pub fit: Var<'t>,
    /// `½·mean(μ² + σ² − log σ² − 1)`.
    pub kl: Var<'t>,
    pub total: Var<'t>,
}

/// `S_dis = sigmoid(mean_{K,C} S)`; loss = BCE(S_dis, M_bin) + KL to N(0, I).
pub fn distribution_loss<'t>(
    samples: Var<'t>,
    m_bin: &Tensor,
    mu: Var<'t>,
    sigma: Var<'t>,
) -> Result<DistributionLoss<'t>> {
    let shape = samples.shape();
    let n = *shape.last().unwrap_or(&0);
    if m_bin.numel() != n {
        return Err(Error::shape("distribution_loss", &shape, m_bin.shape()));
    }
    let rows = samples.value().numel() / n.max(1);
    let logit = samples.reshape([rows, n])?.mean_rows()?;
    let tape = samples.tape();
    let y = tape.constant(m_bin.reshape([n])?);
    let not_y = tape.constant(m_bin.reshape([n])?.map(|v| 1.0 - v));
    let fit = y
        .mul(logit.log_sigmoid())?
        .add(not_y.mul(logit.neg().log_sigmoid())?)?
        .mean()
        .neg();
    let kl = mu
        .square()
        .add(sigma.square())?
        .sub(sigma.log()?.mul_scalar(2.0))?
        .add_scalar(-1.0)
        .mean()
        .mul_scalar(0.5);
    let total = fit.add(kl)?;
    Ok(DistributionLoss { fit, kl, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, Tape};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(c: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        init_params(c, &mut rng, &mut s);
        s
    }

    #[test]
    fn channel_identity_and_zero_input() {
        let s = store(3);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let z = random(&[3, 4], 2);
        let (mu, _) = channel_params(tape.constant(z.clone()), &p).unwrap();
        assert_eq!(*mu.value(), z);

        let mut s = store(3);
        *s.get_mut("uncertainty.mu_c.shift").unwrap() = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let p = s.bind(&tape);
        let (mu, _) = channel_params(tape.constant(Tensor::zeros([3, 4])), &p).unwrap();
        assert_eq!(mu.value().row(2), &[0.3; 4]);
    }

    #[test]
    fn channel_params_gradcheck() {
        let z = random(&[3, 4], 3);
        let a = random(&[3], 4);
        let b = random(&[3], 5);
        let w = random(&[3, 4], 6);
        let err = grad_check_many(
            |t, v| {
                let names = vec![
                    "uncertainty.mu_c.scale".to_string(),
                    "uncertainty.mu_c.shift".to_string(),
                    "uncertainty.sigma_c.scale".to_string(),
                    "uncertainty.sigma_c.shift".to_string(),
                ];
                let p = Bound::from_vars(&names, &[v[1], v[2], v[2], v[1]]);
                let (mu, sigma) = channel_params(v[0], &p)?;
                mu.add(sigma.square())?.mul(t.constant(w.clone())).map(|y| y.sum())
            },
            &[z, a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn single_window_gives_value_projection() {
        let s = store(4);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let z = tape.constant(random(&[4, 4], 7));
        let (mu_s, _) = spatial_params(z, (2, 2), 2, &p).unwrap();
        let proto = window_prototypes(z, 2, 2, 2).unwrap().transpose().unwrap();
        let v = proto
            .matmul(p.get("uncertainty.mu_s.v.w").unwrap())
            .unwrap()
            .add_row_vector(p.get("uncertainty.mu_s.v.b").unwrap())
            .unwrap()
            .value();
        let mu = mu_s.value();
        for ch in 0..4 {
            for pos in 0..4 {
                assert!((mu.data()[ch * 4 + pos] - v.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_features_give_constant_spatial_mean() {
        let s = store(3);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let z = tape.constant(Tensor::new([3, 16], (0..48).map(|i| (i / 16) as f64).collect()).unwrap());
        let (mu_s, _) = spatial_params(z, (4, 4), 2, &p).unwrap();
        for row in mu_s.value().data().chunks(16) {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn prototype_attention_rows_sum_to_one() {
        let mut s = store(4);
        for name in ["uncertainty.mu_s.q.w", "uncertainty.mu_s.k.w"] {
            *s.get_mut(name).unwrap() = random(&[4, 4], 9);
        }
        let tape = Tape::new();
        let p = s.bind(&tape);
        for seed in 0..10 {
            let z = tape.constant(random(&[4, 16], 20 + seed));
            let proto = window_prototypes(z, 4, 4, 2).unwrap().transpose().unwrap();
            assert_eq!(proto.shape(), vec![4, 4]);
            let (_, w) = cross_attention(z.transpose().unwrap(), proto, &p, "uncertainty.mu_s").unwrap();
            for row in w.value().data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oversized_window_rejected() {
        let s = store(2);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let z = tape.constant(Tensor::zeros([2, 4]));
        assert!(matches!(spatial_params(z, (2, 2), 3, &p), Err(Error::Param(_))));
    }

    #[test]
    fn zero_sigma_samples_equal_mu() {
        let tape = Tape::new();
        let mu = tape.leaf(random(&[2, 3], 10));
        let sigma = tape.leaf(Tensor::zeros([2, 3]));
        let s = sample_distribution(mu, sigma, 5, 42).unwrap();
        for chunk in s.samples.value().data().chunks(6) {
            assert_eq!(chunk, mu.value().data());
        }
    }

    #[test]
    fn monte_carlo_mean_and_variance() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(vec![2.0]));
        let sigma = tape.constant(Tensor::from_vec(vec![1.0]));
        let k = 10_000;
        let s = sample_distribution(mu, sigma, k, 7).unwrap().samples.value();
        let mean = s.mean();
        let var = s.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        assert!((mean - 2.0).abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_noise(3, &[2, 2], 9);
        let b = sample_noise(3, &[2, 2], 9);
        let c = sample_noise(3, &[2, 2], 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn expected_sample_has_unit_gradient_in_mu() {
        let mu = random(&[2, 2], 11);
        let sigma = random(&[2, 2], 12).map(|v| v.abs() + 0.2);
        let noise = sample_noise(8, &[2, 2], 13);
        let tape = Tape::new();
        let m = tape.leaf(mu.clone());
        let s = tape.leaf(sigma.clone());
        let batch = sample_with_noise(m, s, noise.clone()).unwrap();
        let mean = batch.samples.reshape([8, 4]).unwrap().mean_rows().unwrap().sum();
        let g = tape.backward(mean).unwrap().wrt(m);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let err = grad_check_many(
            |_, v| {
                let b = sample_with_noise(v[0], v[1], noise.clone())?;
                b.samples.reshape([8, 4])?.mean_rows().map(|y| y.sum())
            },
            &[mu, sigma],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn uncertainty_normalisation() {
        let u = uncertainty_from_sigma(&Tensor::full([2, 4], 0.7)).unwrap();
        assert!(u.u.data().iter().all(|&v| v == 0.0));
        let u = uncertainty_from_sigma(&Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        for (got, want) in u.u.data().iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-6);
        }
        for seed in 0..10 {
            let sigma = random(&[3, 9], seed).map(|v| v.abs() + 0.01);
            let u = uncertainty_from_sigma(&sigma).unwrap();
            assert!(u.u.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(u.spatial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn masking_with_no_uncertainty_is_self_attention() {
        let mut s = store(3);
        *s.get_mut("uncertainty.mask.q.w").unwrap() = random(&[3, 3], 14);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let z = tape.constant(random(&[3, 4], 15));
        let u = uncertainty_from_sigma(&Tensor::ones([3, 4])).unwrap();
        let got = soft_ambiguity_masking(z, &u, &p).unwrap().value();
        let zt = z.transpose().unwrap();
        let (want, _) = cross_attention(zt, zt, &p, "uncertainty.mask").unwrap();
        assert_eq!(*got, *want.transpose().unwrap().value());
    }

    #[test]
    fn full_uncertainty_gives_constant_output() {
        let mut s = store(3);
        *s.get_mut("uncertainty.mask.v.b").unwrap() = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let z = tape.constant(random(&[3, 4], 16));
        let u = UncertaintyMap {
            u: Tensor::ones([3, 4]),
            spatial: Tensor::ones([4]),
        };
        let out = soft_ambiguity_masking(z, &u, &p).unwrap().value();
        assert_eq!(out.row(0), &[0.5; 4]);
        assert_eq!(out.row(1), &[-1.0; 4]);
        assert_eq!(out.row(2), &[2.0; 4]);
    }

    #[test]
    fn masking_gradcheck() {
        let s = store(4);
        let names: Vec<String> = s.names().filter(|n| n.contains(".mask.")).cloned().collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| s.get(n).unwrap().map(|v| v * 0.7 + 0.05)).collect();
        inputs.push(random(&[4, 4], 17));
        let u = uncertainty_from_sigma(&random(&[4, 4], 18)).unwrap();
        let w = random(&[4, 4], 19);
        let err = grad_check_many(
            |t, v| {
                let p = Bound::from_vars(&names, &v[..names.len()]);
                soft_ambiguity_masking(v[names.len()], &u, &p)?
                    .mul(t.constant(w.clone()))
                    .map(|y| y.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reweight_thresholds() {
        let cams = CamStack::new(Tensor::new([1, 1, 2], vec![0.9, 0.3]).unwrap()).unwrap();
        let (re, bin) = reweight_cam(&cams, 0.7).unwrap();
        assert_eq!(re.maps.data(), &[0.9, 0.0]);
        assert_eq!(bin.data(), &[1.0, 0.0]);
        let (re, bin) = reweight_cam(&cams, 0.999_999).unwrap();
        assert!(re.maps.data().iter().all(|&v| v == 0.0));
        assert!(bin.data().iter().all(|&v| v == 0.0));
        assert!(reweight_cam(&cams, 1.0).is_err());
    }

    #[test]
    fn m_bin_matches_any_class_scan() {
        for seed in 0..20 {
            let maps = random(&[3, 4, 4], 30 + seed).map(|v| v.abs());
            let cams = CamStack::new(maps.clone()).unwrap();
            let (_, bin) = reweight_cam(&cams, 0.6).unwrap();
            for pos in 0..16 {
                let any = (0..3).any(|c| maps.data()[c * 16 + pos] > 0.6);
                assert_eq!(bin.data()[pos] == 1.0, any);
            }
        }
    }

    #[test]
    fn kl_is_zero_at_standard_normal() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::zeros([2, 3]));
        let sigma = tape.constant(Tensor::ones([2, 3]));
        let samples = tape.constant(Tensor::zeros([4, 2, 3]));
        let l = distribution_loss(samples, &Tensor::zeros([3]), mu, sigma).unwrap();
        assert!(l.kl.item().abs() < 1e-12);
        // S_dis = sigmoid(0) = 0.5 everywhere
        assert!((l.fit.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fit_term_decreases_toward_target() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::zeros([1, 2]));
        let sigma = tape.constant(Tensor::ones([1, 2]));
        let target = Tensor::from_vec(vec![1.0, 0.0]);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let x = i as f64 * 0.25;
            let samples = tape.constant(Tensor::new([1, 1, 2], vec![x, -x]).unwrap());
            let l = distribution_loss(samples, &target, mu, sigma).unwrap();
            assert!(l.fit.item() < prev);
            prev = l.fit.item();
        }
    }
}
