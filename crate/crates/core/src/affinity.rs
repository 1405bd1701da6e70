//! Attention-derived affinity: head/block aggregation, Sinkhorn
//! normalisation, symmetrisation, random-walk propagation and the
//! colour/position-aware refinement of CAMs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::CamStack;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Added to every entry before Sinkhorn so all entries are positive.
pub const SINKHORN_EPS: f64 = 1e-8;
/// Number of trailing encoder blocks averaged into the affinity.
pub const AGGREGATED_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParConfig {
    pub sigma_rgb: f64,
    pub sigma_pos: f64,
    pub dilations: Vec<usize>,
    pub iters: usize,
}

impl Default for ParConfig {
    fn default() -> Self {
        ParConfig {
            sigma_rgb: 0.1,
            sigma_pos: 6.0,
            dilations: vec![1, 2, 4],
            iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub rw_iters: usize,
    pub par: ParConfig,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            sinkhorn_iters: 50,
            sinkhorn_tol: 1e-6,
            rw_iters: 2,
            par: ParConfig::default(),
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sinkhorn_iters == 0 {
            return Err(Error::Param("sinkhorn_iters must be at least 1".into()));
        }
        if !(self.sinkhorn_tol > 0.0) {
            return Err(Error::Param(format!("sinkhorn_tol {} must be positive", self.sinkhorn_tol)));
        }
        if !(self.par.sigma_rgb > 0.0 && self.par.sigma_pos > 0.0) {
            return Err(Error::Param("PAR bandwidths must be positive".into()));
        }
        if self.par.dilations.contains(&0) {
            return Err(Error::Param("PAR dilations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    /// `[n × n]`.
    pub a: Tensor,
    pub row_stochastic: bool,
    pub doubly_stochastic: bool,
    pub symmetric: bool,
}

impl AffinityMatrix {
    /// Wrap a square matrix with no structural flags set.
    pub fn new(a: Tensor) -> Result<Self> {
        let (r, c) = a.dims2()?;
        if r != c {
            return Err(Error::shape("affinity", a.shape(), &[c, r]));
        }
        Ok(AffinityMatrix {
            a,
            row_stochastic: false,
            doubly_stochastic: false,
            symmetric: false,
        })
    }

    pub fn size(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Indices of the blocks that feed the affinity, warning on short stacks.
fn aggregated_range(blocks: usize) -> Result<std::ops::Range<usize>> {
    if blocks == 0 {
        return Err(Error::Param("no attention blocks to aggregate".into()));
    }
    if blocks < AGGREGATED_BLOCKS {
        log::warn!("only {blocks} attention block(s); using the last one for affinity");
    }
    Ok(blocks.saturating_sub(AGGREGATED_BLOCKS)..blocks)
}

/// Mean over heads of the last two blocks; `attn[b]` is `[heads × n × n]`.
pub fn aggregate_attention(attn: &[Tensor]) -> Result<AffinityMatrix> {
    let range = aggregated_range(attn.len())?;
    let (_, n, n2) = attn[range.start].dims3()?;
    if n != n2 {
        return Err(Error::shape("aggregate_attention", attn[range.start].shape(), &[n, n]));
    }
    let mut acc = vec![0.0; n * n];
    let mut count = 0usize;
    for block in &attn[range] {
        let (h, bn, bn2) = block.dims3()?;
        if (bn, bn2) != (n, n) {
            return Err(Error::shape("aggregate_attention", block.shape(), &[h, n, n]));
        }
        for head in block.data().chunks(n * n) {
            acc.iter_mut().zip(head).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    let mut m = AffinityMatrix::new(Tensor::new([n, n], acc)?)?;
    m.row_stochastic = true;
    Ok(m)
}

/// Differentiable counterpart of [`aggregate_attention`] over
/// `attn[block][head]`, each `[n × n]`.
pub fn aggregate_attention_var<'t>(attn: &[Vec<Var<'t>>]) -> Result<Var<'t>> {
    let range = aggregated_range(attn.len())?;
    let heads: Vec<Var<'t>> = attn[range].iter().flatten().copied().collect();
    let count = heads.len();
    let mut acc = *heads
        .first()
        .ok_or_else(|| Error::Param("attention block without heads".into()))?;
    for h in &heads[1..] {
        acc = acc.add(*h)?;
    }
    Ok(acc.mul_scalar(1.0 / count as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutcome {
    pub matrix: AffinityMatrix,
    /// Row+column sweeps performed.
    pub iterations: usize,
    pub converged: bool,
}

fn sums_deviation(data: &[f64], n: usize) -> f64 {
    let mut cols = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for row in data.chunks(n) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        cols.iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    cols.iter().fold(worst, |w, c| w.max((c - 1.0).abs()))
}

fn normalize_rows_in_place(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn normalize_cols_in_place(data: &mut [f64], n: usize) {
    let mut cols = vec![0.0; n];
    for row in data.chunks(n) {
        cols.iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    for row in data.chunks_mut(n) {
        row.iter_mut().zip(&cols).for_each(|(v, c)| *v /= c);
    }
}

/// Alternate row and column normalisation until both sum deviations fall
/// below `tol` or `iters` sweeps have run. Non-convergence is reported in
/// the outcome and logged, not raised.
pub fn sinkhorn_normalize(a: &AffinityMatrix, iters: usize, tol: f64) -> Result<SinkhornOutcome> {
    let n = a.size();
    if iters == 0 {
        return Err(Error::Param("sinkhorn needs at least one iteration".into()));
    }
    if a.a.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain("sinkhorn input has negative or NaN entries".into()));
    }
    let mut data: Vec<f64> = a.a.data().iter().map(|v| v + SINKHORN_EPS).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < iters {
        normalize_rows_in_place(&mut data, n);
        normalize_cols_in_place(&mut data, n);
        iterations += 1;
        if sums_deviation(&data, n) < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("sinkhorn did not reach tolerance {tol} within {iters} iterations");
    }
    let matrix = AffinityMatrix {
        a: Tensor::new([n, n], data)?,
        row_stochastic: converged,
        doubly_stochastic: converged,
        symmetric: false,
    };
    Ok(SinkhornOutcome {
        matrix,
        iterations,
        converged,
    })
}

/// Exactly `iterations` Sinkhorn sweeps on the tape.
pub fn sinkhorn_var<'t>(a: Var<'t>, iterations: usize) -> Result<Var<'t>> {
    let mut x = a.add_scalar(SINKHORN_EPS);
    for _ in 0..iterations {
        x = x.normalize_rows()?.transpose()?.normalize_rows()?.transpose()?;
    }
    Ok(x)
}

/// `(M + Mᵀ) / 2`, exactly symmetric.
pub fn symmetrize(m: &AffinityMatrix) -> Result<AffinityMatrix> {
    let n = m.size();
    let d = m.a.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = if i <= j {
                (d[i * n + j] + d[j * n + i]) / 2.0
            } else {
                out[j * n + i]
            };
        }
    }
    Ok(AffinityMatrix {
        a: Tensor::new([n, n], out)?,
        row_stochastic: m.doubly_stochastic,
        doubly_stochastic: m.doubly_stochastic,
        symmetric: true,
    })
}

pub fn symmetrize_var(m: Var<'_>) -> Result<Var<'_>> {
    Ok(m.add(m.transpose()?)?.mul_scalar(0.5))
}

/// Aggregated attention to `M_aff`: Sinkhorn then symmetrisation.
pub fn affinity_from_attention(attn: &[Tensor], cfg: &AffinityConfig) -> Result<(AffinityMatrix, SinkhornOutcome)> {
    let raw = aggregate_attention(attn)?;
    let ds = sinkhorn_normalize(&raw, cfg.sinkhorn_iters, cfg.sinkhorn_tol)?;
    Ok((symmetrize(&ds.matrix)?, ds))
}

/// `t` steps of `v ← D⁻¹M·v` on every flattened class map (`[M × n]`),
/// without renormalisation.
pub fn propagate(maps: &Tensor, m_aff: &AffinityMatrix, t: usize) -> Result<Tensor> {
    let (k, n) = maps.dims2()?;
    if n != m_aff.size() {
        return Err(Error::shape("propagate", maps.shape(), m_aff.a.shape()));
    }
    let mut trans = m_aff.a.data().to_vec();
    normalize_rows_in_place(&mut trans, n);
    let trans_t = Tensor::new([n, n], trans)?.transpose2()?;
    let mut v = maps.clone();
    for _ in 0..t {
        v = v.matmul(&trans_t)?;
    }
    debug_assert_eq!(v.shape(), &[k, n]);
    Ok(v)
}

/// Random-walk refinement at the feature grid, re-max-normalised.
pub fn random_walk_refine(cams: &CamStack, m_aff: &AffinityMatrix, t: usize) -> Result<CamStack> {
    let (m, h, w) = cams.maps.dims3()?;
    let walked = propagate(&cams.maps.reshape([m, h * w])?, m_aff, t)?;
    Ok(CamStack::new(walked.reshape([m, h, w])?)?.max_normalized())
}

/// Per-pixel neighbour lists with normalised weights for one image; self is
/// included with weight `exp(0) = 1` before normalisation, out-of-bounds
/// neighbours are dropped.
#[derive(Debug, Clone)]
pub struct ParKernel {
    pub height: usize,
    pub width: usize,
    /// `neighbours[p]` = `(index, weight)`, weights summing to 1.
    pub neighbours: Vec<Vec<(usize, f64)>>,
}

impl ParKernel {
    pub fn new(image: &Tensor, cfg: &ParConfig) -> Result<Self> {
        let (ch, h, w) = image.dims3()?;
        if ch != 3 {
            return Err(Error::shape("pixel_adaptive_refine", image.shape(), &[3, h, w]));
        }
        let px = image.data();
        let rgb = |i: usize| [px[i], px[h * w + i], px[2 * h * w + i]];
        let two_rgb = 2.0 * cfg.sigma_rgb * cfg.sigma_rgb;
        let two_pos = 2.0 * cfg.sigma_pos * cfg.sigma_pos;
        let mut offsets = vec![(0isize, 0isize)];
        for &d in &cfg.dilations {
            let d = d as isize;
            for dy in [-d, 0, d] {
                for dx in [-d, 0, d] {
                    if (dy, dx) != (0, 0) {
                        offsets.push((dy, dx));
                    }
                }
            }
        }
        let mut neighbours = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = (y as usize) * w + x as usize;
                let cp = rgb(p);
                let mut list: Vec<(usize, f64)> = Vec::with_capacity(offsets.len());
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    let cq = rgb(q);
                    let dc: f64 = (0..3).map(|k| (cp[k] - cq[k]).powi(2)).sum();
                    let dp = (dy * dy + dx * dx) as f64;
                    list.push((q, (-dc / two_rgb).exp() * (-dp / two_pos).exp()));
                }
                let total: f64 = list.iter().map(|(_, w)| w).sum();
                list.iter_mut().for_each(|(_, w)| *w /= total);
                neighbours.push(list);
            }
        }
        Ok(ParKernel {
            height: h,
            width: w,
            neighbours,
        })
    }

    /// One weighted-averaging pass over a flattened map.
    pub fn step(&self, map: &[f64]) -> Vec<f64> {
        self.neighbours
            .iter()
            .map(|list| list.iter().map(|&(q, w)| w * map[q]).sum())
            .collect()
    }
}

/// Upsample `cams` to the image grid (nearest) and run `cfg.iters` passes
/// of colour/position-weighted neighbour averaging.
pub fn pixel_adaptive_refine(cams: &CamStack, image: &Tensor, cfg: &ParConfig) -> Result<CamStack> {
    let kernel = ParKernel::new(image, cfg)?;
    let (h, w) = (kernel.height, kernel.width);
    let up = cams.resized(h, w);
    let mut out = Vec::with_capacity(up.maps.numel());
    for c in 0..up.num_classes() {
        let mut map = up.class_map(c).to_vec();
        for _ in 0..cfg.iters {
            map = kernel.step(&map);
        }
        out.extend(map);
    }
    CamStack::new(Tensor::new([up.num_classes(), h, w], out)?)
}

/// Optional context a refiner may need.
#[derive(Default, Clone, Copy)]
pub struct RefineInputs<'a> {
    pub affinity: Option<&'a AffinityMatrix>,
    /// `[3 × H × W]` in `[0, 1]`.
    pub image: Option<&'a Tensor>,
}

/// A CAM refinement strategy.
pub trait CamRefiner: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns maps on the same grid as `cams`.
    fn refine(&self, cams: &CamStack, inputs: &RefineInputs<'_>) -> Result<CamStack>;
}

struct Identity;

impl CamRefiner for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn refine(&self, cams: &CamStack, _: &RefineInputs<'_>) -> Result<CamStack> {
        Ok(cams.clone())
    }
}

struct RandomWalk {
    steps: usize,
}

impl CamRefiner for RandomWalk {
    fn name(&self) -> &'static str {
        "random-walk"
    }

    fn refine(&self, cams: &CamStack, inputs: &RefineInputs<'_>) -> Result<CamStack> {
        let aff = inputs
            .affinity
            .ok_or_else(|| Error::Param("random-walk refinement needs an affinity matrix".into()))?;
        random_walk_refine(cams, aff, self.steps)
    }
}

/// PAR at image resolution, resampled back to the input grid.
struct PixelAdaptive {
    cfg: ParConfig,
}

impl CamRefiner for PixelAdaptive {
    fn name(&self) -> &'static str {
        "par"
    }

    fn refine(&self, cams: &CamStack, inputs: &RefineInputs<'_>) -> Result<CamStack> {
        let image = inputs
            .image
            .ok_or_else(|| Error::Param("par refinement needs the input image".into()))?;
        Ok(pixel_adaptive_refine(cams, image, &self.cfg)?.resized(cams.height(), cams.width()))
    }
}

type Factory = Box<dyn Fn(&AffinityConfig) -> Box<dyn CamRefiner> + Send + Sync>;

/// Refiners by name, built from an [`AffinityConfig`].
pub struct RefinerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl fmt::Debug for RefinerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for RefinerRegistry {
    fn default() -> Self {
        let mut r = RefinerRegistry {
            factories: BTreeMap::new(),
        };
        r.register("identity", |_| Box::new(Identity));
        r.register("random-walk", |c| Box::new(RandomWalk { steps: c.rw_iters }));
        r.register("par", |c| Box::new(PixelAdaptive { cfg: c.par.clone() }));
        r
    }
}

impl RefinerRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&AffinityConfig) -> Box<dyn CamRefiner> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, cfg: &AffinityConfig) -> Result<Box<dyn CamRefiner>> {
        let f = self.factories.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::Param(format!("unknown refiner {name:?}; known: {}", known.join(", ")))
        })?;
        Ok(f(cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn positive(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([n, n], (0..n * n).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
    }

    fn softmax_rows(t: &Tensor) -> Tensor {
        let n = t.shape()[t.ndim() - 1];
        let mut d = t.data().to_vec();
        for row in d.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(t.shape().to_vec(), d).unwrap()
    }

    fn reference_sinkhorn(a: &Tensor, iters: usize) -> Tensor {
        let n = a.shape()[0];
        let mut d = a.data().to_vec();
        for _ in 0..iters {
            normalize_rows_in_place(&mut d, n);
            normalize_cols_in_place(&mut d, n);
        }
        Tensor::new([n, n], d).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let head = softmax_rows(&positive(3, 1));
        let block = Tensor::new([2, 3, 3], [head.data(), head.data()].concat()).unwrap();
        let m = aggregate_attention(&[block.clone(), block]).unwrap();
        assert!(m.a.max_abs_diff(&head).unwrap() < 1e-15);

        let a = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = aggregate_attention(&[a, b]).unwrap();
        assert_eq!(m.a.data(), &[0.5; 4]);
    }

    #[test]
    fn aggregation_uses_last_two_blocks_and_stays_row_stochastic() {
        let blocks: Vec<Tensor> = (0..4)
            .map(|s| softmax_rows(&Tensor::new([3, 5, 5], positive(15, s).data()[..75].to_vec()).unwrap()))
            .collect();
        let m = aggregate_attention(&blocks).unwrap();
        let tail = aggregate_attention(&blocks[2..]).unwrap();
        assert_eq!(m, tail);
        for row in m.a.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let single = aggregate_attention(&blocks[..1]).unwrap();
        assert!(single.a.data().chunks(5).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn aggregation_var_matches_plain() {
        let tape = Tape::new();
        let blocks: Vec<Vec<Var<'_>>> = (0..3)
            .map(|b| (0..2).map(|h| tape.constant(softmax_rows(&positive(4, b * 10 + h)))).collect())
            .collect();
        let plain: Vec<Tensor> = blocks
            .iter()
            .map(|heads| {
                let data = heads.iter().flat_map(|h| h.value().data().to_vec()).collect();
                Tensor::new([2, 4, 4], data).unwrap()
            })
            .collect();
        let v = aggregate_attention_var(&blocks).unwrap().value();
        assert!(v.max_abs_diff(&aggregate_attention(&plain).unwrap().a).unwrap() < 1e-15);
    }

    #[test]
    fn sinkhorn_fixed_points() {
        let half = AffinityMatrix::new(Tensor::full([2, 2], 0.5)).unwrap();
        let out = sinkhorn_normalize(&half, 50, 1e-6).unwrap();
        assert!(out.converged);
        assert!(out.matrix.a.max_abs_diff(&half.a).unwrap() < 1e-12);

        let e = 1e-3;
        let near_id = AffinityMatrix::new(Tensor::new([2, 2], vec![1.0 - e, e, e, 1.0 - e]).unwrap()).unwrap();
        let out = sinkhorn_normalize(&near_id, 50, 1e-6).unwrap();
        assert!(out.matrix.a.max_abs_diff(&near_id.a).unwrap() < 1e-6);
    }

    #[test]
    fn sinkhorn_matches_long_reference() {
        let a = Tensor::new([2, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let out = sinkhorn_normalize(&AffinityMatrix::new(a.clone()).unwrap(), 50, 1e-6).unwrap();
        assert!(out.converged);
        let want = reference_sinkhorn(&a, 1000);
        assert!(out.matrix.a.max_abs_diff(&want).unwrap() < 1e-6);
    }

    #[test]
    fn sinkhorn_rejects_non_square_and_reports_exhaustion() {
        assert!(AffinityMatrix::new(Tensor::zeros([2, 3])).is_err());
        let hard = Tensor::new([2, 2], vec![1.0, 1e-6, 1e-6, 1e-6]).unwrap();
        let out = sinkhorn_normalize(&AffinityMatrix::new(hard).unwrap(), 2, 1e-12).unwrap();
        assert!(!out.converged);
        assert!(!out.matrix.doubly_stochastic);
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn sinkhorn_var_matches_plain() {
        let a = positive(5, 3);
        let out = sinkhorn_normalize(&AffinityMatrix::new(a.clone()).unwrap(), 50, 1e-6).unwrap();
        let tape = Tape::new();
        let v = sinkhorn_var(tape.constant(a), out.iterations).unwrap().value();
        assert!(v.max_abs_diff(&out.matrix.a).unwrap() < 1e-14);
    }

    #[test]
    fn sinkhorn_var_gradcheck() {
        let a = positive(3, 4);
        let w = positive(3, 5);
        let err = grad_check(
            |t, x| {
                let s = symmetrize_var(sinkhorn_var(x, 4)?)?;
                s.mul(t.constant(w.clone())).map(|y| y.sum())
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn symmetrize_examples() {
        let m = AffinityMatrix::new(Tensor::new([2, 2], vec![0.9, 0.1, 0.3, 0.7]).unwrap()).unwrap();
        let s = symmetrize(&m).unwrap();
        assert!(s.a.max_abs_diff(&Tensor::new([2, 2], vec![0.9, 0.2, 0.2, 0.7]).unwrap()).unwrap() < 1e-15);
        for seed in 0..20 {
            let m = AffinityMatrix::new(positive(7, seed)).unwrap();
            let s = symmetrize(&m).unwrap();
            assert_eq!(s.a, s.a.transpose2().unwrap());
            assert_eq!(symmetrize(&s).unwrap().a, s.a);
        }
    }

    #[test]
    fn walk_identity_and_uniform() {
        let cams = CamStack::new(positive(4, 6).reshape([1, 4, 4]).unwrap()).unwrap().max_normalized();
        let mut id = Tensor::eye(16).map(|v| v + 1e-12);
        normalize_rows_in_place(id.data_mut(), 16);
        let id = AffinityMatrix::new(id).unwrap();
        let out = random_walk_refine(&cams, &id, 2).unwrap();
        assert!(out.maps.max_abs_diff(&cams.maps).unwrap() < 1e-6);

        let uniform = AffinityMatrix::new(Tensor::full([16, 16], 1.0 / 16.0)).unwrap();
        let walked = propagate(&cams.maps.reshape([1, 16]).unwrap(), &uniform, 1).unwrap();
        let mean = cams.maps.mean();
        assert!(walked.data().iter().all(|v| (v - mean).abs() < 1e-12));
        let out = random_walk_refine(&cams, &uniform, 1).unwrap();
        assert!(out.maps.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn walk_matches_matrix_power() {
        let maps = positive(4, 7).reshape([1, 4, 4]).unwrap();
        let maps = Tensor::new([2, 4, 4], [maps.data(), &maps.data().iter().rev().copied().collect::<Vec<_>>()[..]].concat()).unwrap();
        let raw = positive(16, 8);
        // tight tolerance so the transition is doubly stochastic to ~1e-13
        let ds = sinkhorn_normalize(&AffinityMatrix::new(raw).unwrap(), 1000, 1e-13).unwrap();
        assert!(ds.converged);
        let aff = symmetrize(&ds.matrix).unwrap();
        let got = propagate(&maps.reshape([2, 16]).unwrap(), &aff, 3).unwrap();

        // (D⁻¹M)³ built explicitly, applied to each column vector
        let n = 16;
        let mut t = aff.a.data().to_vec();
        normalize_rows_in_place(&mut t, n);
        let t = Tensor::new([n, n], t).unwrap();
        let p3 = t.matmul(&t).unwrap().matmul(&t).unwrap();
        let want = p3.matmul(&maps.reshape([2, 16]).unwrap().transpose2().unwrap()).unwrap().transpose2().unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-9);
        for c in 0..2 {
            let before: f64 = maps.data()[c * 16..(c + 1) * 16].iter().sum();
            let after: f64 = got.data()[c * 16..(c + 1) * 16].iter().sum();
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn par_constant_fixed_point_and_weights() {
        let cfg = ParConfig::default();
        let image = Tensor::full([3, 8, 8], 0.4);
        let cams = CamStack::new(Tensor::full([2, 2, 2], 0.6)).unwrap();
        let out = pixel_adaptive_refine(&cams, &image, &cfg).unwrap();
        assert!(out.maps.data().iter().all(|v| (v - 0.6).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = Tensor::new([3, 8, 8], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let k = ParKernel::new(&image, &cfg).unwrap();
        for list in &k.neighbours {
            assert!((list.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn par_two_pixel_closed_form() {
        let cfg = ParConfig {
            iters: 1,
            ..ParConfig::default()
        };
        let delta = 0.15;
        let image = Tensor::new([3, 1, 2], vec![0.2, 0.2 + delta, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let cams = CamStack::new(Tensor::new([1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let out = pixel_adaptive_refine(&cams, &image, &cfg).unwrap();
        let w = (-delta * delta / (2.0 * 0.01)).exp() * (-1.0 / 72.0f64).exp();
        assert!((out.maps.data()[1] - w / (1.0 + w)).abs() < 1e-12);
        assert!((out.maps.data()[0] - 1.0 / (1.0 + w)).abs() < 1e-12);
    }

    #[test]
    fn par_stays_within_input_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let image = Tensor::new([3, 8, 8], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let cams = CamStack::new(positive(4, 11).reshape([1, 4, 4]).unwrap()).unwrap();
        let (lo, hi) = (cams.maps.min(), cams.maps.max());
        let out = pixel_adaptive_refine(&cams, &image, &ParConfig::default()).unwrap();
        assert!(out.maps.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn registry_builds_by_name() {
        let reg = RefinerRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["identity", "par", "random-walk"]);
        let cfg = AffinityConfig::default();
        let cams = CamStack::new(Tensor::full([1, 2, 2], 0.3)).unwrap();
        let id = reg.build("identity", &cfg).unwrap();
        assert_eq!(id.name(), "identity");
        assert_eq!(id.refine(&cams, &RefineInputs::default()).unwrap(), cams);
        let rw = reg.build("random-walk", &cfg).unwrap();
        assert!(matches!(rw.refine(&cams, &RefineInputs::default()), Err(Error::Param(_))));
        assert!(matches!(reg.build("crf", &cfg), Err(Error::Param(_))));
    }
}
