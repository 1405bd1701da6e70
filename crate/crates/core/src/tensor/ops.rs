//! Differentiable operations on [`Var`].
//!
//! Every op computes its value eagerly and records a backward rule that
//! captures whatever forward state it needs.

use std::rc::Rc;

use super::{matmul_nt, matmul_tn, Tensor, Var};
use crate::error::{Error, Result};

fn same(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 {
        Ok(Broadcast::RhsScalar)
    } else if a.numel() == 1 {
        Ok(Broadcast::LhsScalar)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn binary_value(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match kind {
        Broadcast::Same => same(a, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()),
        Broadcast::RhsScalar => {
            let y = b.data()[0];
            same(a, a.data().iter().map(|&x| f(x, y)).collect())
        }
        Broadcast::LhsScalar => {
            let x = a.data()[0];
            same(b, b.data().iter().map(|&y| f(x, y)).collect())
        }
    }
}

/// Reduce an output-shaped gradient to an operand that was broadcast.
fn reduce_to(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::new(operand.shape().to_vec(), vec![g.sum()]).expect("scalar operand")
    }
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, back: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape.record(value, &[self], move |g| vec![Some(back(g))])
    }

    fn elementwise(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            same(
                g,
                x.data()
                    .iter()
                    .zip(yc.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect(),
            )
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind("add", &a, &b)?;
        let value = binary_value(&a, &b, kind, |x, y| x + y);
        Ok(self.tape.record(value, &[self, other], move |g| {
            vec![
                Some(reduce_to(g.clone(), &a)),
                Some(reduce_to(g.clone(), &b)),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind("sub", &a, &b)?;
        let value = binary_value(&a, &b, kind, |x, y| x - y);
        Ok(self.tape.record(value, &[self, other], move |g| {
            vec![
                Some(reduce_to(g.clone(), &a)),
                Some(reduce_to(g.map(|v| -v), &b)),
            ]
        }))
    }

    /// Hadamard product, with scalar broadcast on either side.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind("mul", &a, &b)?;
        let value = binary_value(&a, &b, kind, |x, y| x * y);
        Ok(self.tape.record(value, &[self, other], move |g| {
            let ga = binary_value(g, &b, broadcast_kind("mul", g, &b).unwrap(), |x, y| x * y);
            let gb = binary_value(g, &a, broadcast_kind("mul", g, &a).unwrap(), |x, y| x * y);
            vec![Some(reduce_to(ga, &a)), Some(reduce_to(gb, &b))]
        }))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let x = self.value();
        self.unary(x.map(|v| v + c), |g| g.clone())
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let x = self.value();
        self.unary(x.map(|v| v * c), move |g| g.map(|v| v * c))
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = a.matmul(&b)?;
        let (m, k) = a.dims2()?;
        let n = b.dims2()?.1;
        Ok(self.tape.record(value, &[self, other], move |g| {
            let ga = matmul_nt(g.data(), b.data(), m, n, k);
            let gb = matmul_tn(a.data(), g.data(), m, k, n);
            vec![
                Some(Tensor::new([m, k], ga).unwrap()),
                Some(Tensor::new([k, n], gb).unwrap()),
            ]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose2()?;
        Ok(self.unary(value, |g| g.transpose2().expect("2-D gradient")))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.unary(value, move |g| g.reshape(orig.clone()).unwrap()))
    }

    /// `x[m×n] + v[n]` on every row.
    pub fn add_row_vector(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, vv) = (self.value(), v.value());
        let (m, n) = x.dims2()?;
        if vv.numel() != n {
            return Err(Error::shape("add_row_vector", x.shape(), vv.shape()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        let vshape = vv.shape().to_vec();
        Ok(self.tape.record(same(&x, out), &[self, v], move |g| {
            let mut gv = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (a, b) in gv.iter_mut().zip(row) {
                    *a += b;
                }
            }
            debug_assert_eq!(g.numel(), m * n);
            vec![Some(g.clone()), Some(Tensor::new(vshape.clone(), gv).unwrap())]
        }))
    }

    /// `x[m×n] + v[m]` on every column.
    pub fn add_col_vector(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, vv) = (self.value(), v.value());
        let (m, n) = x.dims2()?;
        if vv.numel() != m {
            return Err(Error::shape("add_col_vector", x.shape(), vv.shape()));
        }
        let mut out = x.data().to_vec();
        for (row, b) in out.chunks_mut(n).zip(vv.data()) {
            row.iter_mut().for_each(|o| *o += b);
        }
        let vshape = vv.shape().to_vec();
        Ok(self.tape.record(same(&x, out), &[self, v], move |g| {
            let gv = g.data().chunks(n).map(|r| r.iter().sum()).collect();
            vec![Some(g.clone()), Some(Tensor::new(vshape.clone(), gv).unwrap())]
        }))
    }

    /// `x[m×n] * v[m]` on every column (per-row scale).
    pub fn mul_col_vector(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, vv) = (self.value(), v.value());
        let (m, n) = x.dims2()?;
        if vv.numel() != m {
            return Err(Error::shape("mul_col_vector", x.shape(), vv.shape()));
        }
        let mut out = x.data().to_vec();
        for (row, s) in out.chunks_mut(n).zip(vv.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.tape.record(same(&x, out), &[self, v], move |g| {
            let mut gx = g.data().to_vec();
            for (row, s) in gx.chunks_mut(n).zip(vv.data()) {
                row.iter_mut().for_each(|o| *o *= s);
            }
            let gv = g
                .data()
                .chunks(n)
                .zip(x.data().chunks(n))
                .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                .collect();
            vec![
                Some(same(&x, gx)),
                Some(Tensor::new(vv.shape().to_vec(), gv).unwrap()),
            ]
        }))
    }

    /// Subgradient 0 at 0.
    pub fn relu(self) -> Var<'t> {
        self.elementwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.elementwise(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.elementwise(softplus, |x, _| sigmoid(x))
    }

    /// `log σ(x)`, computed without overflow.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.elementwise(|x| -softplus(-x), |x, _| sigmoid(-x))
    }

    pub fn exp(self) -> Var<'t> {
        self.elementwise(f64::exp, |_, y| y)
    }

    pub fn gelu(self) -> Var<'t> {
        self.elementwise(gelu, |x, _| gelu_grad(x))
    }

    /// Subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        self.elementwise(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of nonpositive value {bad}")));
        }
        Ok(self.elementwise(f64::ln, |x, _| 1.0 / x))
    }

    /// `log(max(x, floor))`; no gradient where the floor is active.
    pub fn log_clamped(self, floor: f64) -> Var<'t> {
        self.elementwise(
            move |x| x.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel() as f64;
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum() / n), move |g| {
            Tensor::full(shape.clone(), g.item() / n)
        })
    }

    /// Mean over the rows of a 2-D tensor: `[m×n] → [n]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / m as f64;
            }
        }
        Ok(self.unary(Tensor::from_vec(out), move |g| {
            let data = (0..m).flat_map(|_| g.data().iter().map(|v| v / m as f64)).collect();
            Tensor::new([m, n], data).unwrap()
        }))
    }

    /// Softmax of `x / temperature` along the last axis (max-shifted).
    pub fn softmax_lastdim(self, temperature: f64) -> Result<Var<'t>> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!("softmax temperature {temperature} must be > 0")));
        }
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut y = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - mx) / temperature).exp()).collect();
            let s: f64 = e.iter().sum();
            y.extend(e.into_iter().map(|v| v / s));
        }
        let y = Rc::new(same(&x, y));
        let yc = Rc::clone(&y);
        Ok(self.unary((*y).clone(), move |g| {
            let mut gx = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks(n).zip(yc.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot) / temperature));
            }
            same(g, gx)
        }))
    }

    pub fn log_softmax_lastdim(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut y = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            y.extend(row.iter().map(|v| v - lse));
        }
        let y = same(&x, y);
        let soft = y.map(f64::exp);
        self.unary(y, move |g| {
            let mut gx = Vec::with_capacity(g.numel());
            for (gr, sr) in g.data().chunks(n).zip(soft.data().chunks(n)) {
                let total: f64 = gr.iter().sum();
                gx.extend(gr.iter().zip(sr).map(|(gv, sv)| gv - sv * total));
            }
            same(g, gx)
        })
    }

    /// `log Σ exp(x)` over all entries.
    pub fn logsumexp(self) -> Var<'t> {
        let x = self.value();
        let mx = x.max();
        let lse = mx + x.data().iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let soft = x.map(|v| (v - lse).exp());
        self.unary(Tensor::scalar(lse), move |g| soft.map(|s| s * g.item()))
    }

    /// Layer normalisation over the last axis of a 2-D tensor.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (m, n) = x.dims2()?;
        if gm.numel() != n || bt.numel() != n {
            return Err(Error::shape("layer_norm", x.shape(), gm.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mu) * is;
            }
        }
        let y: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(idx, &h)| h * gm.data()[idx % n] + bt.data()[idx % n])
            .collect();
        let gshape = gm.shape().to_vec();
        let bshape = bt.shape().to_vec();
        Ok(self.tape.record(same(&x, y), &[self, gamma, beta], move |g| {
            let mut gx = vec![0.0; m * n];
            let mut ggamma = vec![0.0; n];
            let mut gbeta = vec![0.0; n];
            for i in 0..m {
                let gr = &g.data()[i * n..(i + 1) * n];
                let hr = &xhat[i * n..(i + 1) * n];
                let mut mean_gh = 0.0;
                let mut mean_ghh = 0.0;
                for j in 0..n {
                    ggamma[j] += gr[j] * hr[j];
                    gbeta[j] += gr[j];
                    let gh = gr[j] * gm.data()[j];
                    mean_gh += gh;
                    mean_ghh += gh * hr[j];
                }
                mean_gh /= n as f64;
                mean_ghh /= n as f64;
                for j in 0..n {
                    let gh = gr[j] * gm.data()[j];
                    gx[i * n + j] = inv_std[i] * (gh - mean_gh - hr[j] * mean_ghh);
                }
            }
            vec![
                Some(Tensor::new([m, n], gx).unwrap()),
                Some(Tensor::new(gshape.clone(), ggamma).unwrap()),
                Some(Tensor::new(bshape.clone(), gbeta).unwrap()),
            ]
        }))
    }

    /// Max over the last axis of a 2-D tensor, `[m×n] → [m]`. The gradient
    /// goes to the first occurrence of the maximum.
    pub fn max_lastdim(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let mut arg = vec![0usize; m];
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg[i] = i * n + best;
            out[i] = row[best];
        }
        Ok(self.unary(Tensor::from_vec(out), move |g| {
            let mut gx = vec![0.0; m * n];
            for (i, &a) in arg.iter().enumerate() {
                gx[a] += g.data()[i];
            }
            Tensor::new([m, n], gx).unwrap()
        }))
    }

    /// Per-channel max over `h×w` windows of a `[C×H×W]` map, giving
    /// `[C×N]` with windows in row-major order. Grids that do not divide
    /// evenly are replicate-padded on the right and bottom. Ties resolve to
    /// the first position in window scan order.
    pub fn window_max_pool(self, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, hh, ww) = x.dims3()?;
        let (out, arg) = window_max_pool_raw(x.data(), c, hh, ww, h, w)?;
        let n_windows = out.len() / c.max(1);
        let numel = x.numel();
        let value = Tensor::new([c, n_windows], out)?;
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; numel];
            for (gv, &a) in g.data().iter().zip(&arg) {
                gx[a] += gv;
            }
            Tensor::new([c, hh, ww], gx).unwrap()
        }))
    }

    /// Unfold `k×k` patches (dilated, zero padded to keep the spatial size)
    /// of a `[C×H×W]` map into `[C·k·k × H·W]`.
    pub fn im2col(self, k: usize, dilation: usize) -> Result<Var<'t>> {
        if k == 0 || k % 2 == 0 || dilation == 0 {
            return Err(Error::Param(format!(
                "im2col needs odd kernel and positive dilation, got k={k}, d={dilation}"
            )));
        }
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        let pad = (dilation * (k - 1) / 2) as isize;
        let hw = h * w;
        // source index for each output entry, or usize::MAX for padding
        let mut src = vec![usize::MAX; c * k * k * hw];
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    for i in 0..h {
                        let si = i as isize + (ki * dilation) as isize - pad;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + (kj * dilation) as isize - pad;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            src[row * hw + i * w + j] = ch * hw + si as usize * w + sj as usize;
                        }
                    }
                }
            }
        }
        let data = src
            .iter()
            .map(|&s| if s == usize::MAX { 0.0 } else { x.data()[s] })
            .collect();
        let value = Tensor::new([c * k * k, hw], data)?;
        let numel = x.numel();
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; numel];
            for (gv, &s) in g.data().iter().zip(&src) {
                if s != usize::MAX {
                    gx[s] += gv;
                }
            }
            Tensor::new([c, h, w], gx).unwrap()
        }))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn narrow_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        if start + len > m {
            return Err(Error::shape("narrow_rows", x.shape(), &[start + len, n]));
        }
        let value = Tensor::new([len, n], x.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; m * n];
            gx[start * n..(start + len) * n].copy_from_slice(g.data());
            Tensor::new([m, n], gx).unwrap()
        }))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        if start + len > n {
            return Err(Error::shape("narrow_cols", x.shape(), &[m, start + len]));
        }
        let data = x
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new([m, len], data)?;
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; m * n];
            for (i, gr) in g.data().chunks(len).enumerate() {
                gx[i * n + start..i * n + start + len].copy_from_slice(gr);
            }
            Tensor::new([m, n], gx).unwrap()
        }))
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_cols of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let m = values[0].dims2()?.0;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (mi, ni) = v.dims2()?;
            if mi != m {
                return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new([m, total], data)?;
        Ok(first.tape.record(value, parts, move |g| {
            let mut offset = 0;
            widths
                .iter()
                .map(|&w| {
                    let data = g
                        .data()
                        .chunks(total)
                        .flat_map(|r| r[offset..offset + w].iter().copied())
                        .collect();
                    offset += w;
                    Some(Tensor::new([m, w], data).unwrap())
                })
                .collect()
        }))
    }

    /// Flat-index gather: `out[i] = x.flat[indices[i]]`.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::shape("gather", x.shape(), &[bad]));
        }
        let value = Tensor::from_vec(indices.iter().map(|&i| x.data()[i]).collect());
        let idx = indices.to_vec();
        let shape = x.shape().to_vec();
        Ok(self.unary(value, move |g| {
            let mut gx = Tensor::zeros(shape.clone());
            for (gv, &i) in g.data().iter().zip(&idx) {
                gx.data_mut()[i] += gv;
            }
            gx
        }))
    }

    /// Reparameterised Gaussian draws: `out[k] = μ + ε[k] ⊗ σ`, with
    /// `noise` of shape `[K, ..μ.shape]` held fixed.
    pub fn reparameterize(mu: Var<'t>, sigma: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
        let (m, s) = (mu.value(), sigma.value());
        if m.shape() != s.shape() {
            return Err(Error::shape("reparameterize", m.shape(), s.shape()));
        }
        let d = m.numel();
        if noise.numel() % d.max(1) != 0 || noise.shape().get(1..) != Some(m.shape()) {
            return Err(Error::shape("reparameterize", noise.shape(), m.shape()));
        }
        let k = noise.numel() / d;
        let mut out = Vec::with_capacity(noise.numel());
        for eps in noise.data().chunks(d) {
            out.extend(
                eps.iter()
                    .zip(m.data().iter().zip(s.data()))
                    .map(|(e, (mv, sv))| mv + e * sv),
            );
        }
        let value = Tensor::new(noise.shape().to_vec(), out)?;
        let noise = noise.clone();
        let shape = m.shape().to_vec();
        Ok(mu.tape.record(value, &[mu, sigma], move |g| {
            let mut gm = vec![0.0; d];
            let mut gs = vec![0.0; d];
            for (gk, ek) in g.data().chunks(d).zip(noise.data().chunks(d)) {
                for i in 0..d {
                    gm[i] += gk[i];
                    gs[i] += gk[i] * ek[i];
                }
            }
            debug_assert_eq!(g.numel(), k * d);
            vec![
                Some(Tensor::new(shape.clone(), gm).unwrap()),
                Some(Tensor::new(shape.clone(), gs).unwrap()),
            ]
        }))
    }

    /// Divide each row of a 2-D tensor by its sum.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, n) = x.dims2()?;
        let sums: Vec<f64> = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        if let Some(bad) = sums.iter().find(|s| **s <= 0.0) {
            return Err(Error::Domain(format!("row sum {bad} is not positive")));
        }
        let y: Vec<f64> = x
            .data()
            .chunks(n)
            .zip(&sums)
            .flat_map(|(r, s)| r.iter().map(move |v| v / s))
            .collect();
        let y = same(&x, y);
        let yc = y.clone();
        Ok(self.unary(y, move |g| {
            let mut gx = Vec::with_capacity(g.numel());
            for ((gr, yr), s) in g.data().chunks(n).zip(yc.data().chunks(n)).zip(&sums) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().map(|gv| (gv - dot) / s));
            }
            same(g, gx)
        }))
    }
}

/// Window max pooling on raw data; returns pooled values `[C×N]` and the
/// flat source index of every maximum.
pub(crate) fn window_max_pool_raw(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if wh == 0 || ww == 0 {
        return Err(Error::Param(format!("window size {wh}x{ww} must be positive")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Param("window pooling of an empty grid".into()));
    }
    let rows = h.div_ceil(wh);
    let cols = w.div_ceil(ww);
    let mut out = Vec::with_capacity(c * rows * cols);
    let mut arg = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..rows {
            for q in 0..cols {
                let mut best_idx = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for i in 0..wh {
                    let si = (r * wh + i).min(h - 1);
                    for j in 0..ww {
                        let sj = (q * ww + j).min(w - 1);
                        let idx = base + si * w + sj;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    const TOL: f64 = 1e-5;

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = x.softmax_lastdim(1.0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = big.softmax_lastdim(1.0).unwrap().value();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);
        assert!(x.softmax_lastdim(0.0).is_err());
    }

    #[test]
    fn window_pool_single_window_and_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.window_max_pool(2, 2).unwrap().value().data(), &[4.0]);
        let c = tape.constant(Tensor::full([2, 4, 4], 0.7));
        let y = c.window_max_pool(2, 2).unwrap().value();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert!(matches!(c.window_max_pool(0, 2), Err(Error::Param(_))));
    }

    #[test]
    fn window_pool_replicate_pads() {
        let tape = Tape::new();
        // 1x3x3 with 2x2 windows -> 2x2 windows after padding to 4x4
        let x = tape.constant(Tensor::new([1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let y = x.window_max_pool(2, 2).unwrap().value();
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn gradcheck_matmul() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let err = grad_check_many(
            |_, v| v[0].matmul(v[1]).map(|y| y.sum()),
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradcheck_softmax_and_log_softmax() {
        let x = random(&[2, 5], 3);
        let w = random(&[2, 5], 4);
        let wc = w.clone();
        let err = grad_check(
            move |t, x| {
                let w = t.constant(wc.clone());
                x.softmax_lastdim(0.7)?.mul(w).map(|y| y.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            move |t, x| {
                let w = t.constant(w.clone());
                x.log_softmax_lastdim().mul(w).map(|y| y.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn gradcheck_elementwise_suite() {
        let x = random(&[3, 3], 5);
        let pos = x.map(|v| v.abs() + 0.5);
        let w = random(&[3, 3], 6);
        type Op = fn(Var<'_>) -> Result<Var<'_>>;
        let ops: Vec<(&str, Op, &Tensor)> = vec![
            ("softplus", |v| Ok(v.softplus()), &x),
            ("sigmoid", |v| Ok(v.sigmoid()), &x),
            ("log_sigmoid", |v| Ok(v.log_sigmoid()), &x),
            ("exp", |v| Ok(v.exp()), &x),
            ("gelu", |v| Ok(v.gelu()), &x),
            ("relu", |v| Ok(v.relu()), &x),
            ("abs", |v| Ok(v.abs()), &x),
            ("square", |v| Ok(v.square()), &x),
            ("log", |v| v.log(), &pos),
            ("log_clamped", |v| Ok(v.log_clamped(1e-12)), &pos),
            ("mul_self", |v| v.mul(v), &x),
            ("transpose", |v| v.transpose(), &x),
            ("mean_rows", |v| v.mean_rows(), &x),
            ("max_lastdim", |v| v.max_lastdim(), &x),
            ("normalize_rows", |v| v.normalize_rows(), &pos),
            ("logsumexp", |v| Ok(v.logsumexp()), &x),
        ];
        for (name, op, input) in ops {
            let wc = w.clone();
            let err = grad_check(
                move |t, v| {
                    let y = op(v)?;
                    let n = y.value().numel();
                    let wv = t.constant(Tensor::new(y.shape(), wc.data()[..n].to_vec()).unwrap());
                    y.mul(wv).map(|z| z.sum())
                },
                input,
                1e-5,
            )
            .unwrap();
            assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn gradcheck_structural_ops() {
        let x = random(&[2, 4, 4], 7);
        let err = grad_check(
            |t, v| {
                let w = t.constant(Tensor::from_vec((0..8).map(|i| i as f64 * 0.3 - 1.0).collect()));
                v.window_max_pool(2, 2)?.reshape([8])?.mul(w).map(|y| y.sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < TOL, "pool {err}");

        let err = grad_check(
            |t, v| {
                let cols = v.im2col(3, 2)?;
                let w = t.constant(random(&cols.shape(), 8));
                cols.mul(w).map(|y| y.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "im2col {err}");

        let m = random(&[3, 6], 9);
        let err = grad_check(
            |t, v| {
                let a = v.narrow_cols(0, 2)?;
                let b = v.narrow_cols(4, 2)?;
                let r = v.narrow_rows(1, 2)?;
                let cat = Var::concat_cols(&[b, a])?;
                let w = t.constant(random(&[3, 4], 10));
                let s1 = cat.mul(w)?.sum();
                let s2 = r.square().sum();
                let g = v.gather(&[0, 5, 5, 17])?.sum();
                s1.add(s2)?.add(g)
            },
            &m,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "slicing {err}");
    }

    #[test]
    fn gradcheck_broadcast_and_norm() {
        let x = random(&[3, 4], 11);
        let rv = random(&[4], 12);
        let cv = random(&[3], 13);
        let gamma = random(&[4], 14).map(|v| v + 1.0);
        let err = grad_check_many(
            |t, v| {
                let w = t.constant(random(&[3, 4], 15));
                let y = v[0]
                    .add_row_vector(v[1])?
                    .add_col_vector(v[2])?
                    .mul_col_vector(v[2])?
                    .layer_norm(v[3], v[1], 1e-5)?;
                let s = t.constant(Tensor::scalar(0.5));
                y.mul(w)?.add(s)?.sub(s.mul(v[0])?.mean())?.mean().add_scalar(1.0).mul_scalar(2.0).neg().exp().log().map(|z| z.sum())
            },
            &[x, rv, cv, gamma],
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn gradcheck_reparameterize() {
        let mu = random(&[2, 3], 16);
        let sigma = random(&[2, 3], 17).map(|v| v.abs() + 0.1);
        let noise = random(&[4, 2, 3], 18);
        let err = grad_check_many(
            |t, v| {
                let s = Var::reparameterize(v[0], v[1], &noise)?;
                let w = t.constant(random(&[4, 2, 3], 19));
                s.mul(w).map(|y| y.sum())
            },
            &[mu, sigma],
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn window_pool_matches_scan() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.random_range(1..=4);
            let h = rng.random_range(1..=8);
            let w = rng.random_range(1..=8);
            let wh = rng.random_range(1..=h);
            let ww = rng.random_range(1..=w);
            let x = random(&[c, h, w], seed + 100);
            let (got, _) = window_max_pool_raw(x.data(), c, h, w, wh, ww).unwrap();
            let mut want = Vec::new();
            for ch in 0..c {
                for r in 0..h.div_ceil(wh) {
                    for q in 0..w.div_ceil(ww) {
                        let mut best = f64::NEG_INFINITY;
                        for i in r * wh..(r + 1) * wh {
                            for j in q * ww..(q + 1) * ww {
                                let v = x.data()[ch * h * w + i.min(h - 1) * w + j.min(w - 1)];
                                best = best.max(v);
                            }
                        }
                        want.push(best);
                    }
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(random(&[4, 4], 20));
            let y = x
                .softmax_lastdim(1.0)
                .unwrap()
                .matmul(x)
                .unwrap()
                .gelu()
                .sum();
            tape.backward(y).unwrap().wrt(x)
        };
        assert_eq!(run().data(), run().data());
    }
}
