//! Dilated-convolution segmentation head, pixel cross-entropy against
//! pseudo labels, and a CAM consistency term.
//!
//! The consistency term is a simple surrogate: mean absolute difference
//! between foreground probabilities and the (detached) CAM.

use rand_chacha::ChaCha8Rng;

use crate::backbone::CamStack;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::refine::{PseudoMask, IGNORE};
use crate::tensor::{Tensor, Var};

pub const KERNEL: usize = 3;
pub const DILATION: usize = 2;
pub const CONV_LAYERS: usize = 2;
/// Weight of [`consistency_reg`] in the total loss.
pub const REG_WEIGHT: f64 = 0.05;

pub fn init_params(channels: usize, num_classes: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let c = channels;
    let fan_in = c * KERNEL * KERNEL;
    for l in 1..=CONV_LAYERS {
        store.insert(
            format!("seg_head.conv{l}.w"),
            trunc_normal([c, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
        );
        store.insert(format!("seg_head.conv{l}.b"), Tensor::zeros([c]));
    }
    store.insert("seg_head.cls.w", trunc_normal([num_classes + 1, c], 0.02, rng));
    store.insert("seg_head.cls.b", Tensor::zeros([num_classes + 1]));
}

pub struct SegOutput<'t> {
    /// `[(M+1) × n]`, channel 0 is background.
    pub logits: Var<'t>,
    /// Softmax over the class axis, same layout as `logits`.
    pub probs: Var<'t>,
    pub height: usize,
    pub width: usize,
}

impl SegOutput<'_> {
    pub fn num_classes(&self) -> usize {
        self.logits.shape()[0] - 1
    }

    /// Per-pixel argmax (lowest index wins ties).
    pub fn predict(&self) -> PseudoMask {
        let probs = self.probs.value();
        let (k, n) = (probs.shape()[0], probs.shape()[1]);
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if probs.data()[c * n + p] > probs.data()[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        PseudoMask {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Two relu'd 3×3 dilation-2 convolutions then a 1×1 projection.
/// `features` is `[C × n]` on an `h × w` grid.
pub fn decoder_forward<'t>(features: Var<'t>, grid: (usize, usize), p: &Bound<'t>) -> Result<SegOutput<'t>> {
    let (h, w) = grid;
    let c = features.shape()[0];
    if features.shape() != [c, h * w] {
        return Err(Error::shape("decoder_forward", &features.shape(), &[c, h * w]));
    }
    let mut x = features;
    for l in 1..=CONV_LAYERS {
        let cols = x.reshape([c, h, w])?.im2col(KERNEL, DILATION)?;
        x = p
            .get(&format!("seg_head.conv{l}.w"))?
            .matmul(cols)?
            .add_col_vector(p.get(&format!("seg_head.conv{l}.b"))?)?
            .relu();
    }
    let logits = p
        .get("seg_head.cls.w")?
        .matmul(x)?
        .add_col_vector(p.get("seg_head.cls.b")?)?;
    let probs = logits.transpose()?.softmax_lastdim(1.0)?.transpose()?;
    Ok(SegOutput {
        logits,
        probs,
        height: h,
        width: w,
    })
}

/// Mean of `−log p[label]` over non-ignored pixels; zero if every pixel is
/// ignored. `target` is aligned to the logit grid by nearest sampling.
pub fn seg_loss<'t>(out: &SegOutput<'t>, target: &PseudoMask) -> Result<Var<'t>> {
    let m = out.num_classes();
    target.check_classes(m)?;
    let aligned;
    let target = if (target.height, target.width) == (out.height, out.width) {
        target
    } else {
        aligned = target.resized(out.height, out.width);
        &aligned
    };
    let k = m + 1;
    let idx: Vec<usize> = target
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != IGNORE)
        .map(|(px, &v)| px * k + v as usize)
        .collect();
    if idx.is_empty() {
        return Ok(out.logits.tape().constant(Tensor::scalar(0.0)));
    }
    let n = out.height * out.width;
    let logp = out.logits.transpose()?.log_softmax_lastdim().reshape([n * k])?;
    Ok(logp.gather(&idx)?.mean().neg())
}

/// Unweighted mean `|p_fg − CAM|` over classes and pixels.
pub fn consistency_reg<'t>(out: &SegOutput<'t>, cams: &CamStack) -> Result<Var<'t>> {
    let m = out.num_classes();
    let n = out.height * out.width;
    if cams.maps.shape() != [m, out.height, out.width] {
        return Err(Error::shape("consistency_reg", cams.maps.shape(), &[m, out.height, out.width]));
    }
    let cam = out.logits.tape().constant(cams.maps.reshape([m, n])?);
    Ok(out.probs.narrow_rows(1, m)?.sub(cam)?.abs().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, Tape};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(c: usize, m: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(c, m, &mut ChaCha8Rng::seed_from_u64(0), &mut s);
        s
    }

    /// Output whose logits are the given `[(M+1) × n]` constant.
    fn from_logits<'t>(tape: &'t Tape, logits: Tensor, h: usize, w: usize) -> SegOutput<'t> {
        let l = tape.leaf(logits);
        let probs = l.transpose().unwrap().softmax_lastdim(1.0).unwrap().transpose().unwrap();
        SegOutput {
            logits: l,
            probs,
            height: h,
            width: w,
        }
    }

    #[test]
    fn zero_weights_give_uniform_probs_and_keep_grid() {
        let mut s = store(4, 2);
        let names: Vec<String> = s.names().cloned().collect();
        for n in names {
            let t = s.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let tape = Tape::new();
        let out = decoder_forward(tape.constant(random(&[4, 15], 1)), (3, 5), &s.bind(&tape)).unwrap();
        assert_eq!(out.logits.shape(), vec![3, 15]);
        assert!(out.probs.value().data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn probs_sum_to_one() {
        let s = store(4, 3);
        let tape = Tape::new();
        let out = decoder_forward(tape.constant(random(&[4, 16], 2)), (4, 4), &s.bind(&tape)).unwrap();
        let probs = out.probs.value();
        for px in 0..16 {
            let total: f64 = (0..4).map(|c| probs.data()[c * 16 + px]).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_gradcheck() {
        let s = store(8, 2);
        let names: Vec<String> = s.names().cloned().collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
        inputs.push(random(&[8, 16], 3));
        let target = PseudoMask::new(4, 4, (0..16).map(|i| [0, 1, 2, 255][i % 4]).collect()).unwrap();
        let err = grad_check_many(
            |_, v| {
                let p = Bound::from_vars(&names, &v[..names.len()]);
                let out = decoder_forward(v[names.len()], (4, 4), &p)?;
                seg_loss(&out, &target)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn uniform_probs_cost_log_three() {
        let tape = Tape::new();
        let out = from_logits(&tape, Tensor::zeros([3, 4]), 2, 2);
        let t = PseudoMask::new(2, 2, vec![0, 1, 2, 255]).unwrap();
        assert!((seg_loss(&out, &t).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let all_ignored = PseudoMask::filled(2, 2, 255);
        assert_eq!(seg_loss(&out, &all_ignored).unwrap().item(), 0.0);
        assert!(matches!(seg_loss(&out, &PseudoMask::filled(2, 2, 3)), Err(Error::Data(_))));
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let tape = Tape::new();
        let mut prev = f64::INFINITY;
        for scale in [0.0, 1.0, 5.0, 20.0, 60.0] {
            // class 1 at pixel 0, class 0 at pixel 1
            let out = from_logits(&tape, Tensor::new([2, 2], vec![0.0, scale, scale, 0.0]).unwrap(), 1, 2);
            let l = seg_loss(&out, &PseudoMask::new(1, 2, vec![1, 0]).unwrap()).unwrap().item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn seg_loss_matches_scalar_oracle_and_ignores_255() {
        let logits = random(&[3, 16], 4).map(|v| 3.0 * v);
        let labels: Vec<u8> = (0..16).map(|i| [0, 1, 2, 255, 1][i % 5]).collect();
        let tape = Tape::new();
        let out = from_logits(&tape, logits.clone(), 4, 4);
        let got = seg_loss(&out, &PseudoMask::new(4, 4, labels.clone()).unwrap()).unwrap().item();
        let mut total = 0.0;
        let mut count = 0.0;
        for px in 0..16 {
            if labels[px] == 255 {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|c| logits.data()[c * 16 + px]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[labels[px] as usize];
            count += 1.0;
        }
        assert!((got - total / count).abs() < 1e-12);

        let mut perturbed = logits.clone();
        for c in 0..3 {
            perturbed.data_mut()[c * 16 + 3] += 7.0;
        }
        let out = from_logits(&tape, perturbed, 4, 4);
        let again = seg_loss(&out, &PseudoMask::new(4, 4, labels).unwrap()).unwrap().item();
        assert_eq!(got, again);
    }

    #[test]
    fn consistency_examples() {
        let tape = Tape::new();
        // probs (0.5, 0.5) per pixel for M=1
        let out = from_logits(&tape, Tensor::zeros([2, 4]), 2, 2);
        let cam = CamStack::new(Tensor::full([1, 2, 2], 0.5)).unwrap();
        assert!(consistency_reg(&out, &cam).unwrap().item().abs() < 1e-15);
        let cam = CamStack::new(Tensor::full([1, 2, 2], 0.4)).unwrap();
        assert!((consistency_reg(&out, &cam).unwrap().item() - 0.1).abs() < 1e-12);
        for seed in 0..10 {
            let out = from_logits(&tape, random(&[3, 4], seed), 2, 2);
            let cam = CamStack::new(random(&[2, 2, 2], seed + 50).map(f64::abs)).unwrap();
            assert!(consistency_reg(&out, &cam).unwrap().item() >= 0.0);
        }
    }
}
