use super::{idx3, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded operation: inputs, output, and whatever the backward pass
/// needs beyond the node values themselves (only max-pool saves extra state).
#[derive(Debug, Clone)]
enum Record<T> {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Div { a: Var, b: Var, out: Var },
    Affine { x: Var, out: Var, m: T },
    Relu { x: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Log { x: Var, out: Var },
    PowConst { x: Var, out: Var, e: T },
    Clamp { x: Var, out: Var, lo: T, hi: T },
    Sum { x: Var, out: Var },
    Mean { x: Var, out: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, out: Var },
    MaxPool2x2 { x: Var, out: Var, argmax: Vec<u32> },
    Upsample2x2 { x: Var, out: Var },
    ConcatChannels { a: Var, b: Var, out: Var },
}

/// Wengert tape: eager forward evaluation with operation recording, then a
/// single reverse replay in [`Tape::backward`]. Node values and gradients
/// live in parallel arenas indexed by [`Var`].
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Registers a leaf tensor and returns its handle. Gradient starts at zero.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let id = Var(self.values.len());
        self.grads.push(Tensor::zeros(t.shape()));
        self.values.push(t);
        id
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &Tensor<T> {
        &self.grads[v.0]
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn push(&mut self, value: Tensor<T>, rec: impl FnOnce(Var) -> Record<T>) -> Var {
        let out = self.input(value);
        self.records.push(rec(out));
        out
    }

    fn binary_shape_check(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("add", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        Ok(self.push(data, |out| Record::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("sub", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        Ok(self.push(data, |out| Record::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("mul", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        Ok(self.push(data, |out| Record::Mul { a, b, out }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("div", a, b)?;
        let data = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x / y);
        Ok(self.push(data, |out| Record::Div { a, b, out }))
    }

    /// Elementwise `m·x + c`.
    pub fn affine(&mut self, x: Var, m: T, c: T) -> Var {
        let data = self.values[x.0].map(|v| m * v + c);
        self.push(data, |out| Record::Affine { x, out, m })
    }

    /// Scalar multiply.
    pub fn scale(&mut self, x: Var, m: T) -> Var {
        self.affine(x, m, T::zero())
    }

    /// Elementwise `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.values[x.0].map(|v| v.max(T::zero()));
        self.push(data, |out| Record::Relu { x, out })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.values[x.0].map(sigmoid_scalar);
        self.push(data, |out| Record::Sigmoid { x, out })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data = self.values[x.0].map(|v| v.ln());
        self.push(data, |out| Record::Log { x, out })
    }

    /// Elementwise `x^e` for a constant exponent. `e = 0` is the constant
    /// one with zero derivative everywhere.
    pub fn pow_const(&mut self, x: Var, e: T) -> Var {
        let data = if e == T::zero() {
            Tensor::filled(self.values[x.0].shape(), T::one())
        } else {
            self.values[x.0].map(|v| v.powf(e))
        };
        self.push(data, |out| Record::PowConst { x, out, e })
    }

    /// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
    /// NaN passes through unchanged so a poisoned value stays visible.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let data = self.values[x.0].map(|v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        });
        self.push(data, |out| Record::Clamp { x, out, lo, hi })
    }

    // ── Reductions ───────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.values[x.0].data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), |out| Record::Sum { x, out })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.values[x.0].numel() as f64);
        let mut acc = T::zero();
        for &v in self.values[x.0].data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc / n), |out| Record::Mean { x, out })
    }

    // ── Spatial ops ──────────────────────────────────────────────

    /// Same-padded cross-correlation: input [C,H,W] × kernel [F,C,kh,kw]
    /// (odd kh, kw) + bias [F] → [F,H,W].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ish, ksh, bsh) = (
            self.values[input.0].shape(),
            self.values[kernel.0].shape(),
            self.values[bias.0].shape(),
        );
        if ish.len() != 3 || ksh.len() != 4 || bsh.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d: expected ranks 3/4/1, got {ish:?}/{ksh:?}/{bsh:?}"
            )));
        }
        let (c, h, w) = (ish[0], ish[1], ish[2]);
        let (f, kc, kh, kw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if bsh[0] != f {
            return Err(Error::shape(format!(
                "conv2d: kernel has {f} filters, bias has {}",
                bsh[0]
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel extents must be odd, got {kh}×{kw}"
            )));
        }
        let out = conv2d_forward(
            self.values[input.0].data(),
            self.values[kernel.0].data(),
            self.values[bias.0].data(),
            c,
            h,
            w,
            f,
            kh,
            kw,
        );
        let out = Tensor::new(&[f, h, w], out)?;
        Ok(self.push(out, |out| Record::Conv2d {
            input,
            kernel,
            bias,
            out,
        }))
    }

    /// 2×2 max pooling, [C,H,W] → [C,H/2,W/2]. Ties route the gradient to
    /// the first maximal cell in row-major window order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let sh = self.values[x.0].shape();
        if sh.len() != 3 {
            return Err(Error::shape(format!("maxpool2x2: expected rank 3, got {sh:?}")));
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2x2: spatial extents must be even, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = idx3(h, w, ch, 2 * oy + dy, 2 * ox + dx);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = idx3(oh, ow, ch, oy, ox);
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(out, |out| Record::MaxPool2x2 { x, out, argmax }))
    }

    /// Nearest-neighbor 2× upsampling, [C,H,W] → [C,2H,2W].
    pub fn upsample2x2(&mut self, x: Var) -> Result<Var> {
        let sh = self.values[x.0].shape();
        if sh.len() != 3 {
            return Err(Error::shape(format!("upsample2x2: expected rank 3, got {sh:?}")));
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[idx3(h, w, ch, y, x_)];
                    out[idx3(2 * h, 2 * w, ch, 2 * y, 2 * x_)] = v;
                    out[idx3(2 * h, 2 * w, ch, 2 * y, 2 * x_ + 1)] = v;
                    out[idx3(2 * h, 2 * w, ch, 2 * y + 1, 2 * x_)] = v;
                    out[idx3(2 * h, 2 * w, ch, 2 * y + 1, 2 * x_ + 1)] = v;
                }
            }
        }
        let out = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, |out| Record::Upsample2x2 { x, out }))
    }

    /// Stacks channels, `a` first: [Ca,H,W] ++ [Cb,H,W] → [Ca+Cb,H,W].
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 3 || sb.len() != 3 {
            return Err(Error::shape(format!(
                "concat_channels: expected rank 3, got {sa:?} and {sb:?}"
            )));
        }
        if sa[1..] != sb[1..] {
            return Err(Error::shape(format!(
                "concat_channels: spatial extents {:?} and {:?} differ",
                &sa[1..],
                &sb[1..]
            )));
        }
        let shape = [sa[0] + sb[0], sa[1], sa[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(self.values[a.0].data());
        data.extend_from_slice(self.values[b.0].data());
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, |out| Record::ConcatChannels { a, b, out }))
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse replay from a scalar root. Gradients accumulate additively
    /// across fan-out; leaves untouched by the root keep zero gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        self.grads[root.0].data_mut()[0] = T::one();
        for i in (0..self.records.len()).rev() {
            let rec = self.records[i].clone();
            self.backward_record(&rec);
        }
        Ok(())
    }

    fn backward_record(&mut self, rec: &Record<T>) {
        match rec {
            Record::Add { a, b, out } => {
                let g = self.grads[out.0].clone();
                acc(&mut self.grads[a.0], g.data(), |gv, _| gv);
                acc(&mut self.grads[b.0], g.data(), |gv, _| gv);
            }
            Record::Sub { a, b, out } => {
                let g = self.grads[out.0].clone();
                acc(&mut self.grads[a.0], g.data(), |gv, _| gv);
                acc(&mut self.grads[b.0], g.data(), |gv, _| -gv);
            }
            Record::Mul { a, b, out } => {
                let g = self.grads[out.0].clone();
                let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
                acc2(&mut self.grads[a.0], g.data(), bv.data(), |gv, o| gv * o);
                acc2(&mut self.grads[b.0], g.data(), av.data(), |gv, o| gv * o);
            }
            Record::Div { a, b, out } => {
                let g = self.grads[out.0].clone();
                let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
                acc2(&mut self.grads[a.0], g.data(), bv.data(), |gv, d| gv / d);
                for i in 0..g.numel() {
                    let d = bv.data()[i];
                    self.grads[b.0].data_mut()[i] =
                        self.grads[b.0].data()[i] - g.data()[i] * av.data()[i] / (d * d);
                }
            }
            Record::Affine { x, out, m } => {
                let g = self.grads[out.0].clone();
                let m = *m;
                acc(&mut self.grads[x.0], g.data(), |gv, _| gv * m);
            }
            Record::Relu { x, out } => {
                let g = self.grads[out.0].clone();
                let xv = self.values[x.0].clone();
                acc2(&mut self.grads[x.0], g.data(), xv.data(), |gv, v| {
                    if v > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Record::Sigmoid { x, out } => {
                let g = self.grads[out.0].clone();
                let s = self.values[out.0].clone();
                acc2(&mut self.grads[x.0], g.data(), s.data(), |gv, sv| {
                    gv * sv * (T::one() - sv)
                });
            }
            Record::Log { x, out } => {
                let g = self.grads[out.0].clone();
                let xv = self.values[x.0].clone();
                acc2(&mut self.grads[x.0], g.data(), xv.data(), |gv, v| gv / v);
            }
            Record::PowConst { x, out, e } => {
                let e = *e;
                if e == T::zero() {
                    return;
                }
                let g = self.grads[out.0].clone();
                let xv = self.values[x.0].clone();
                acc2(&mut self.grads[x.0], g.data(), xv.data(), |gv, v| {
                    if e == T::one() {
                        gv
                    } else {
                        gv * e * v.powf(e - T::one())
                    }
                });
            }
            Record::Clamp { x, out, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let g = self.grads[out.0].clone();
                let xv = self.values[x.0].clone();
                acc2(&mut self.grads[x.0], g.data(), xv.data(), |gv, v| {
                    if v > lo && v < hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Record::Sum { x, out } => {
                let g = self.grads[out.0].item();
                for gv in self.grads[x.0].data_mut() {
                    *gv = *gv + g;
                }
            }
            Record::Mean { x, out } => {
                let n = T::from_f64(self.values[x.0].numel() as f64);
                let g = self.grads[out.0].item() / n;
                for gv in self.grads[x.0].data_mut() {
                    *gv = *gv + g;
                }
            }
            Record::Conv2d {
                input,
                kernel,
                bias,
                out,
            } => {
                let g = self.grads[out.0].clone();
                let ish = self.values[input.0].shape().to_vec();
                let ksh = self.values[kernel.0].shape().to_vec();
                let (c, h, w) = (ish[0], ish[1], ish[2]);
                let (f, kh, kw) = (ksh[0], ksh[2], ksh[3]);
                let iv = self.values[input.0].clone();
                let kv = self.values[kernel.0].clone();
                let (gi, gk, gb) =
                    conv2d_backward(g.data(), iv.data(), kv.data(), c, h, w, f, kh, kw);
                acc(&mut self.grads[input.0], &gi, |gv, _| gv);
                acc(&mut self.grads[kernel.0], &gk, |gv, _| gv);
                acc(&mut self.grads[bias.0], &gb, |gv, _| gv);
            }
            Record::MaxPool2x2 { x, out, argmax } => {
                let g = self.grads[out.0].clone();
                for (o, &src_idx) in argmax.iter().enumerate() {
                    let gx = self.grads[x.0].data_mut();
                    gx[src_idx as usize] = gx[src_idx as usize] + g.data()[o];
                }
            }
            Record::Upsample2x2 { x, out } => {
                let g = self.grads[out.0].clone();
                let sh = self.values[x.0].shape().to_vec();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let gx = self.grads[x.0].data_mut();
                for ch in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            let mut s = T::zero();
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    s = s + g.data()[idx3(2 * h, 2 * w, ch, 2 * y + dy, 2 * x_ + dx)];
                                }
                            }
                            let i = idx3(h, w, ch, y, x_);
                            gx[i] = gx[i] + s;
                        }
                    }
                }
            }
            Record::ConcatChannels { a, b, out } => {
                let g = self.grads[out.0].clone();
                let na = self.grads[a.0].numel();
                acc(&mut self.grads[a.0], &g.data()[..na], |gv, _| gv);
                acc(&mut self.grads[b.0], &g.data()[na..], |gv, _| gv);
            }
        }
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn acc<T: Scalar>(dst: &mut Tensor<T>, g: &[T], f: impl Fn(T, usize) -> T) {
    for (i, d) in dst.data_mut().iter_mut().enumerate() {
        *d = *d + f(g[i], i);
    }
}

fn acc2<T: Scalar>(dst: &mut Tensor<T>, g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    for (i, d) in dst.data_mut().iter_mut().enumerate() {
        *d = *d + f(g[i], other[i]);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); f * h * w];
    for fo in 0..f {
        let plane = &mut out[fo * h * w..(fo + 1) * h * w];
        for v in plane.iter_mut() {
            *v = bias[fo];
        }
        for ci in 0..c {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let wgt = kernel[((fo * c + ci) * kh + u) * kw + v];
                    if wgt == T::zero() {
                        continue;
                    }
                    // out[y][x] += wgt * in[y+u-ph][x+v-pw] over the valid span
                    for y in 0..h {
                        let iy = y as isize + u as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x0 = pw.saturating_sub(v);
                        let x1 = (w + pw).saturating_sub(v).min(w);
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut plane[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            let ix = x + v - pw;
                            out_row[x] = out_row[x] + wgt * in_row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients for all three conv operands in one pass over the output grad.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    g: &[T],
    input: &[T],
    kernel: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut g_input = vec![T::zero(); c * h * w];
    let mut g_kernel = vec![T::zero(); f * c * kh * kw];
    let mut g_bias = vec![T::zero(); f];
    for fo in 0..f {
        let g_plane = &g[fo * h * w..(fo + 1) * h * w];
        let mut bsum = T::zero();
        for &gv in g_plane {
            bsum = bsum + gv;
        }
        g_bias[fo] = g_bias[fo] + bsum;
        for ci in 0..c {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let gi_plane = &mut g_input[ci * h * w..(ci + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let kidx = ((fo * c + ci) * kh + u) * kw + v;
                    let wgt = kernel[kidx];
                    let mut ksum = T::zero();
                    for y in 0..h {
                        let iy = y as isize + u as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x0 = pw.saturating_sub(v);
                        let x1 = (w + pw).saturating_sub(v).min(w);
                        let g_row = &g_plane[y * w..(y + 1) * w];
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let gi_row = &mut gi_plane[iy as usize * w..(iy as usize + 1) * w];
                        for x in x0..x1 {
                            let ix = x + v - pw;
                            ksum = ksum + g_row[x] * in_row[ix];
                            gi_row[ix] = gi_row[ix] + wgt * g_row[x];
                        }
                    }
                    g_kernel[kidx] = g_kernel[kidx] + ksum;
                }
            }
        }
    }
    (g_input, g_kernel, g_bias)
}
