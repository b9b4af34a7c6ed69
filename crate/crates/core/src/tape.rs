//! Reverse-mode autodiff on a Wengert tape. A `Tape` owns every value of
//! one forward pass; operations append a record and return a `Var` handle.
//! `backward` walks the records in reverse and accumulates adjoints.
//!
//! The operation set is exactly what a 4-level U-Net needs: 3x3/1x1
//! zero-padded convolution, 2x2 pooling (max and average), 2x2 stride-2
//! transposed convolution, ReLU, channel concatenation, channel softmax,
//! an element-wise product, a weighted-sum scalarizer, and a fused
//! soft-Dice loss head.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value on a specific tape. Using it with any other tape is
/// a graph error, not undefined behaviour.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    tape_id: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

enum Record<T> {
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        pad: usize,
        out: Var,
    },
    MaxPool2x2 {
        input: Var,
        /// Flat index into the input data of the winning element, one per
        /// output element. Ties go to the first element in row-major order.
        argmax: Vec<u32>,
        out: Var,
    },
    AvgPool2x2 {
        input: Var,
        out: Var,
    },
    TransposedConv2x2 {
        input: Var,
        weights: Var,
        bias: Var,
        out: Var,
    },
    Relu {
        input: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        out: Var,
    },
    SoftmaxChannels {
        input: Var,
        out: Var,
    },
    WeightedSum {
        input: Var,
        coeffs: Tensor<T>,
        out: Var,
    },
    SoftDice {
        probs: Var,
        labels: Tensor<T>,
        /// Per image: (numerator, denominator) of the soft Dice ratio.
        terms: Vec<(T, T)>,
        out: Var,
    },
}

/// One forward pass: values plus the records that produced them.
pub struct Tape<T> {
    id: u32,
    values: Vec<Tensor<T>>,
    records: Vec<Record<T>>,
}

/// Adjoints for every value of a tape, produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape_id: u32,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root with respect to `v`, in the row-major
    /// layout of `v`'s tensor.
    pub fn wrt(&self, v: Var) -> Result<&[T]> {
        if v.tape_id != self.tape_id || v.index() >= self.grads.len() {
            return Err(Error::Graph(
                "variable does not belong to the differentiated tape".into(),
            ));
        }
        Ok(&self.grads[v.index()])
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Number of values currently on the tape.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Put an input tensor on the tape and get a differentiable handle.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t)
    }

    /// The tensor held by `v`.
    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.values[v.index()])
    }

    fn push(&mut self, t: Tensor<T>) -> Var {
        let index = u32::try_from(self.values.len()).expect("tape overflow");
        self.values.push(t);
        Var {
            tape_id: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape_id != self.id {
            return Err(Error::Graph(format!(
                "variable from tape {} used with tape {}",
                v.tape_id, self.id
            )));
        }
        if v.index() >= self.values.len() {
            return Err(Error::Graph(format!(
                "variable index {} out of range",
                v.index()
            )));
        }
        Ok(())
    }

    /// Zero-padded 2D convolution. `input` is `[N, Cin, H, W]`, `weights`
    /// `[Cout, Cin, k, k]` with `k` 1 or 3, `bias` `[Cout]`, and `pad` must
    /// equal `(k - 1) / 2` so spatial size is preserved.
    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, pad: usize) -> Result<Var> {
        self.check(input)?;
        self.check(weights)?;
        self.check(bias)?;
        let (_, cin, _, _) = self.values[input.index()].dims4()?;
        let (cout, wcin, kh, kw) = self.values[weights.index()].dims4()?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Shape(format!(
                "conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if pad != (kh - 1) / 2 {
            return Err(Error::Shape(format!(
                "conv2d with k={kh} requires pad {} to preserve size, got {pad}",
                (kh - 1) / 2
            )));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d weights expect {wcin} input channels, input has {cin}"
            )));
        }
        let bshape = self.values[bias.index()].shape().to_vec();
        if bshape != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must have shape [{cout}], got {bshape:?}"
            )));
        }
        let out = conv2d_fwd(
            &self.values[input.index()],
            &self.values[weights.index()],
            &self.values[bias.index()],
            pad,
        );
        let out = self.push(out);
        self.records.push(Record::Conv2d {
            input,
            weights,
            bias,
            pad,
            out,
        });
        Ok(out)
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even; ties pick
    /// the first element of the window in row-major order.
    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let (n, c, h, w) = self.values[input.index()].dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let x = self.values[input.index()].data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            let obase = p * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = (2 * oy) * w + 2 * ox;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    let mut bestv = plane[cand[0]];
                    for &i in &cand[1..] {
                        if plane[i] > bestv {
                            bestv = plane[i];
                            best = i;
                        }
                    }
                    out[obase + oy * ow + ox] = bestv;
                    argmax[obase + oy * ow + ox] = (p * h * w + best) as u32;
                }
            }
        }
        let out = self.push(Tensor::new(vec![n, c, oh, ow], out)?);
        self.records.push(Record::MaxPool2x2 { input, argmax, out });
        Ok(out)
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2x2(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let (n, c, h, w) = self.values[input.index()].dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let x = self.values[input.index()].data();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            let obase = p * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = (2 * oy) * w + 2 * ox;
                    let s = plane[i00] + plane[i00 + 1] + plane[i00 + w] + plane[i00 + w + 1];
                    out[obase + oy * ow + ox] = s * quarter;
                }
            }
        }
        let out = self.push(Tensor::new(vec![n, c, oh, ow], out)?);
        self.records.push(Record::AvgPool2x2 { input, out });
        Ok(out)
    }

    /// 2x2 stride-2 transposed convolution (learned upsampling): doubles
    /// both spatial dims. `weights` is `[Cin, Cout, 2, 2]`, `bias` `[Cout]`.
    pub fn transposed_conv2x2(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weights)?;
        self.check(bias)?;
        let (_, cin, _, _) = self.values[input.index()].dims4()?;
        let (wcin, cout, kh, kw) = self.values[weights.index()].dims4()?;
        if kh != 2 || kw != 2 {
            return Err(Error::Shape(format!(
                "transposed_conv2x2 kernel must be 2x2, got {kh}x{kw}"
            )));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "transposed_conv2x2 weights expect {wcin} input channels, input has {cin}"
            )));
        }
        let bshape = self.values[bias.index()].shape().to_vec();
        if bshape != [cout] {
            return Err(Error::Shape(format!(
                "transposed_conv2x2 bias must have shape [{cout}], got {bshape:?}"
            )));
        }
        let out = tconv2x2_fwd(
            &self.values[input.index()],
            &self.values[weights.index()],
            &self.values[bias.index()],
        );
        let out = self.push(out);
        self.records.push(Record::TransposedConv2x2 {
            input,
            weights,
            bias,
            out,
        });
        Ok(out)
    }

    /// Element-wise `max(0, x)`. The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = &self.values[input.index()];
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let out = self.push(out);
        self.records.push(Record::Relu { input, out });
        Ok(out)
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.values[a.index()], &self.values[b.index()]);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let out = self.push(out);
        self.records.push(Record::Mul { a, b, out });
        Ok(out)
    }

    /// Concatenate two `[N, C, H, W]` tensors along the channel axis;
    /// `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (na, ca, ha, wa) = self.values[a.index()].dims4()?;
        let (nb, cb, hb, wb) = self.values[b.index()].dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "concat_channels needs matching batch and spatial dims, got \
                 [{na},{ca},{ha},{wa}] vs [{nb},{cb},{hb},{wb}]"
            )));
        }
        let plane = ha * wa;
        let xa = self.values[a.index()].data();
        let xb = self.values[b.index()].data();
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for ni in 0..na {
            out.extend_from_slice(&xa[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&xb[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let out = self.push(Tensor::new(vec![na, ca + cb, ha, wa], out)?);
        self.records.push(Record::ConcatChannels { a, b, out });
        Ok(out)
    }

    /// Softmax across the channel axis, independently per pixel. Uses the
    /// max-shift for overflow safety; outputs are positive and sum to 1.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let (n, c, h, w) = self.values[input.index()].dims4()?;
        if c < 2 {
            return Err(Error::Shape(format!(
                "softmax_channels needs at least 2 channels, got {c}"
            )));
        }
        let x = self.values[input.index()].data();
        let plane = h * w;
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            let base = ni * c * plane;
            for p in 0..plane {
                let mut m = x[base + p];
                for ci in 1..c {
                    m = m.max(x[base + ci * plane + p]);
                }
                let mut s = T::zero();
                for ci in 0..c {
                    let e = (x[base + ci * plane + p] - m).exp();
                    out[base + ci * plane + p] = e;
                    s = s + e;
                }
                for ci in 0..c {
                    out[base + ci * plane + p] = out[base + ci * plane + p] / s;
                }
            }
        }
        let out = self.push(Tensor::new(vec![n, c, h, w], out)?);
        self.records.push(Record::SoftmaxChannels { input, out });
        Ok(out)
    }

    /// Scalar `sum(coeffs * x)` with constant coefficients. This is the
    /// scalarizer gradient checks use to probe non-scalar outputs.
    pub fn weighted_sum(&mut self, input: Var, coeffs: &Tensor<T>) -> Result<Var> {
        self.check(input)?;
        let x = &self.values[input.index()];
        if x.shape() != coeffs.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum shape mismatch: {:?} vs {:?}",
                x.shape(),
                coeffs.shape()
            )));
        }
        let mut s = T::zero();
        for (&v, &c) in x.data().iter().zip(coeffs.data()) {
            s = s + v * c;
        }
        let out = self.push(Tensor::scalar(s));
        self.records.push(Record::WeightedSum {
            input,
            coeffs: coeffs.clone(),
            out,
        });
        Ok(out)
    }

    /// Fused soft-Dice loss head. `probs` is `[N, 2, H, W]` (channel 1 is
    /// foreground), `labels` a constant `[N, 1, H, W]` of 0/1 values.
    /// Returns the scalar loss `1 - mean_n sDSC_n` and the per-image sDSC.
    pub fn soft_dice(&mut self, probs: Var, labels: &Tensor<T>, sigma: T) -> Result<(Var, Vec<T>)> {
        self.check(probs)?;
        if !(sigma > T::zero()) {
            return Err(Error::Validation(format!(
                "soft_dice smoothing must be positive, got {sigma}"
            )));
        }
        let (n, c, h, w) = self.values[probs.index()].dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!(
                "soft_dice expects 2 probability channels, got {c}"
            )));
        }
        let (ln, lc, lh, lw) = labels.dims4()?;
        if ln != n || lc != 1 || lh != h || lw != w {
            return Err(Error::Shape(format!(
                "soft_dice labels must be [{n},1,{h},{w}], got [{ln},{lc},{lh},{lw}]"
            )));
        }
        let p = self.values[probs.index()].data();
        let g = labels.data();
        let plane = h * w;
        let two = T::from_f64(2.0);
        let mut terms = Vec::with_capacity(n);
        let mut sdsc = Vec::with_capacity(n);
        for ni in 0..n {
            let fg = &p[(ni * 2 + 1) * plane..(ni * 2 + 2) * plane];
            let gt = &g[ni * plane..(ni + 1) * plane];
            let mut inter = T::zero();
            let mut psum = T::zero();
            let mut gsum = T::zero();
            for (&pv, &gv) in fg.iter().zip(gt) {
                inter = inter + pv * gv;
                psum = psum + pv;
                gsum = gsum + gv;
            }
            let num = two * inter + sigma;
            let den = psum + gsum + sigma;
            terms.push((num, den));
            sdsc.push(num / den);
        }
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut mean = T::zero();
        for &s in &sdsc {
            mean = mean + s;
        }
        mean = mean * inv_n;
        let out = self.push(Tensor::scalar(T::one() - mean));
        self.records.push(Record::SoftDice {
            probs,
            labels: labels.clone(),
            terms,
            out,
        });
        Ok((out, sdsc))
    }

    /// The discrete state of every kinked op on the tape: ReLU sign bits
    /// (packed 64 per word) followed by max-pool argmax indices, in record
    /// order. The forward function is smooth in a neighborhood of its inputs
    /// exactly while this pattern stays constant, which makes the pattern the
    /// validity condition for finite-difference probes: a probe that lands on
    /// a different pattern has stepped across a kink and measures the slope
    /// of a different linear piece.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut pattern = Vec::new();
        for rec in &self.records {
            match rec {
                Record::Relu { input, .. } => {
                    let mut word = 0u64;
                    let mut bits = 0u32;
                    for &x in self.values[input.index()].data() {
                        word = (word << 1) | u64::from(x > T::zero());
                        bits += 1;
                        if bits == 64 {
                            pattern.push(word);
                            word = 0;
                            bits = 0;
                        }
                    }
                    if bits > 0 {
                        pattern.push(word);
                    }
                }
                Record::MaxPool2x2 { argmax, .. } => {
                    pattern.extend(argmax.iter().map(|&i| u64::from(i)));
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse pass from a scalar `root`. Returns adjoints for every value
    /// on the tape; values that do not influence `root` get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check(root)?;
        if self.values[root.index()].len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.index()].shape()
            )));
        }
        let mut grads: Vec<Vec<T>> = self.values.iter().map(|t| vec![T::zero(); t.len()]).collect();
        grads[root.index()][0] = T::one();

        // Records are already in topological order; one reverse sweep
        // finalizes each output's adjoint before its producer runs.
        for rec in self.records.iter().rev() {
            match rec {
                Record::Conv2d {
                    input,
                    weights,
                    bias,
                    pad,
                    out,
                } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    conv2d_bwd(
                        &self.values[input.index()],
                        &self.values[weights.index()],
                        *pad,
                        &gout,
                        &mut grads,
                        *input,
                        *weights,
                        *bias,
                    );
                    grads[out.index()] = gout;
                }
                Record::MaxPool2x2 { input, argmax, out } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    {
                        let gin = &mut grads[input.index()];
                        for (o, &g) in gout.iter().enumerate() {
                            let i = argmax[o] as usize;
                            gin[i] = gin[i] + g;
                        }
                    }
                    grads[out.index()] = gout;
                }
                Record::AvgPool2x2 { input, out } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    let (_, _, h, w) = self.values[input.index()].dims4()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    {
                        let gin = &mut grads[input.index()];
                        let planes = gout.len() / (oh * ow);
                        for p in 0..planes {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gq = gout[p * oh * ow + oy * ow + ox] * quarter;
                                    let i00 = p * h * w + (2 * oy) * w + 2 * ox;
                                    gin[i00] = gin[i00] + gq;
                                    gin[i00 + 1] = gin[i00 + 1] + gq;
                                    gin[i00 + w] = gin[i00 + w] + gq;
                                    gin[i00 + w + 1] = gin[i00 + w + 1] + gq;
                                }
                            }
                        }
                    }
                    grads[out.index()] = gout;
                }
                Record::TransposedConv2x2 {
                    input,
                    weights,
                    bias,
                    out,
                } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    tconv2x2_bwd(
                        &self.values[input.index()],
                        &self.values[weights.index()],
                        &gout,
                        &mut grads,
                        *input,
                        *weights,
                        *bias,
                    );
                    grads[out.index()] = gout;
                }
                Record::Relu { input, out } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    {
                        let x = self.values[input.index()].data();
                        let gin = &mut grads[input.index()];
                        for i in 0..gout.len() {
                            if x[i] > T::zero() {
                                gin[i] = gin[i] + gout[i];
                            }
                        }
                    }
                    grads[out.index()] = gout;
                }
                Record::Mul { a, b, out } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    // Apply one factor at a time so `mul(x, x)` accumulates
                    // both contributions into the same slot.
                    {
                        let vb: Vec<T> = self.values[b.index()].data().to_vec();
                        let ga = &mut grads[a.index()];
                        for i in 0..gout.len() {
                            ga[i] = ga[i] + gout[i] * vb[i];
                        }
                    }
                    {
                        let va: Vec<T> = self.values[a.index()].data().to_vec();
                        let gb = &mut grads[b.index()];
                        for i in 0..gout.len() {
                            gb[i] = gb[i] + gout[i] * va[i];
                        }
                    }
                    grads[out.index()] = gout;
                }
                Record::ConcatChannels { a, b, out } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    let (n, ca, h, w) = self.values[a.index()].dims4()?;
                    let (_, cb, _, _) = self.values[b.index()].dims4()?;
                    let plane = h * w;
                    {
                        let ga = &mut grads[a.index()];
                        for ni in 0..n {
                            let src = ni * (ca + cb) * plane;
                            for i in 0..ca * plane {
                                ga[ni * ca * plane + i] = ga[ni * ca * plane + i] + gout[src + i];
                            }
                        }
                    }
                    {
                        let gb = &mut grads[b.index()];
                        for ni in 0..n {
                            let src = ni * (ca + cb) * plane + ca * plane;
                            for i in 0..cb * plane {
                                gb[ni * cb * plane + i] = gb[ni * cb * plane + i] + gout[src + i];
                            }
                        }
                    }
                    grads[out.index()] = gout;
                }
                Record::SoftmaxChannels { input, out } => {
                    let gout = std::mem::take(&mut grads[out.index()]);
                    let (n, c, h, w) = self.values[out.index()].dims4()?;
                    let y = self.values[out.index()].data();
                    let plane = h * w;
                    {
                        let gin = &mut grads[input.index()];
                        for ni in 0..n {
                            let base = ni * c * plane;
                            for p in 0..plane {
                                let mut dot = T::zero();
                                for ci in 0..c {
                                    let i = base + ci * plane + p;
                                    dot = dot + gout[i] * y[i];
                                }
                                for ci in 0..c {
                                    let i = base + ci * plane + p;
                                    gin[i] = gin[i] + y[i] * (gout[i] - dot);
                                }
                            }
                        }
                    }
                    grads[out.index()] = gout;
                }
                Record::WeightedSum { input, coeffs, out } => {
                    let g = grads[out.index()][0];
                    let gin = &mut grads[input.index()];
                    for (gi, &c) in gin.iter_mut().zip(coeffs.data()) {
                        *gi = *gi + g * c;
                    }
                }
                Record::SoftDice {
                    probs,
                    labels,
                    terms,
                    out,
                } => {
                    let g = grads[out.index()][0];
                    let (n, _, h, w) = self.values[probs.index()].dims4()?;
                    let plane = h * w;
                    let glab = labels.data();
                    let two = T::from_f64(2.0);
                    let inv_n = T::one() / T::from_f64(n as f64);
                    let gp = &mut grads[probs.index()];
                    for ni in 0..n {
                        let (num, den) = terms[ni];
                        // d sDSC / d p_i = (2 g_i den - num) / den^2, and the
                        // loss is 1 - mean, hence the -1/N factor.
                        let scale = g * (T::zero() - inv_n) / (den * den);
                        let fg_base = (ni * 2 + 1) * plane;
                        for i in 0..plane {
                            let gi = glab[ni * plane + i];
                            gp[fg_base + i] = gp[fg_base + i] + scale * (two * gi * den - num);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

/// Valid output range along one axis for kernel offset `d` and padding
/// `pad`: outputs `o` with `0 <= o + d - pad < len`.
#[inline]
fn conv_ranges(len: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (len + pad).saturating_sub(d).min(len);
    (lo, hi)
}

fn conv2d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4().expect("validated");
    let (cout, _, k, _) = w.dims4().expect("validated");
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let plane = h * wd;
    let mut out = vec![T::zero(); n * cout * plane];
    for ni in 0..n {
        for co in 0..cout {
            let oplane = &mut out[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            oplane.fill(bs[co]);
            for ci in 0..cin {
                let iplane = &xs[(ni * cin + ci) * plane..(ni * cin + ci + 1) * plane];
                let wbase = (co * cin + ci) * k * k;
                for dy in 0..k {
                    let (oy_lo, oy_hi) = conv_ranges(h, dy, pad);
                    for dx in 0..k {
                        let wv = ws[wbase + dy * k + dx];
                        let (ox_lo, ox_hi) = conv_ranges(wd, dx, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + dy - pad;
                            let ix0 = ox_lo + dx - pad;
                            let orow = &mut oplane[oy * wd + ox_lo..oy * wd + ox_hi];
                            let irow = &iplane[iy * wd + ix0..iy * wd + ix0 + (ox_hi - ox_lo)];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o = *o + wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, h, wd], out).expect("conv2d output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    gout: &[T],
    grads: &mut [Vec<T>],
    input: Var,
    weights: Var,
    bias: Var,
) {
    let (n, cin, h, wd) = x.dims4().expect("validated");
    let (cout, _, k, _) = w.dims4().expect("validated");
    let xs = x.data();
    let ws = w.data();
    let plane = h * wd;

    // Bias: sum of the output-channel plane.
    {
        let gb = &mut grads[bias.index()];
        for ni in 0..n {
            for co in 0..cout {
                let gplane = &gout[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
                let mut s = T::zero();
                for &g in gplane {
                    s = s + g;
                }
                gb[co] = gb[co] + s;
            }
        }
    }

    // Input: the convolution transposed; same index ranges as forward
    // with the roles of read and write swapped.
    {
        let gin = &mut grads[input.index()];
        for ni in 0..n {
            for co in 0..cout {
                let gplane = &gout[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
                for ci in 0..cin {
                    let wbase = (co * cin + ci) * k * k;
                    let gi_plane_base = (ni * cin + ci) * plane;
                    for dy in 0..k {
                        let (oy_lo, oy_hi) = conv_ranges(h, dy, pad);
                        for dx in 0..k {
                            let wv = ws[wbase + dy * k + dx];
                            let (ox_lo, ox_hi) = conv_ranges(wd, dx, pad);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy + dy - pad;
                                let ix0 = ox_lo + dx - pad;
                                let grow = &gplane[oy * wd + ox_lo..oy * wd + ox_hi];
                                let irow = &mut gin[gi_plane_base + iy * wd + ix0
                                    ..gi_plane_base + iy * wd + ix0 + (ox_hi - ox_lo)];
                                for (gi, &g) in irow.iter_mut().zip(grow) {
                                    *gi = *gi + wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Weights: per tap, a dot product of input rows with output-grad rows.
    {
        let gw = &mut grads[weights.index()];
        for ni in 0..n {
            for co in 0..cout {
                let gplane = &gout[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
                for ci in 0..cin {
                    let iplane = &xs[(ni * cin + ci) * plane..(ni * cin + ci + 1) * plane];
                    let wbase = (co * cin + ci) * k * k;
                    for dy in 0..k {
                        let (oy_lo, oy_hi) = conv_ranges(h, dy, pad);
                        for dx in 0..k {
                            let (ox_lo, ox_hi) = conv_ranges(wd, dx, pad);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let mut s = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy + dy - pad;
                                let ix0 = ox_lo + dx - pad;
                                let grow = &gplane[oy * wd + ox_lo..oy * wd + ox_hi];
                                let irow = &iplane[iy * wd + ix0..iy * wd + ix0 + (ox_hi - ox_lo)];
                                for (&g, &i) in grow.iter().zip(irow) {
                                    s = s + g * i;
                                }
                            }
                            gw[wbase + dy * k + dx] = gw[wbase + dy * k + dx] + s;
                        }
                    }
                }
            }
        }
    }
}

fn tconv2x2_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4().expect("validated");
    let (_, cout, _, _) = w.dims4().expect("validated");
    let (oh, ow) = (2 * h, 2 * wd);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![T::zero(); n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow].fill(bs[co]);
        }
        for ci in 0..cin {
            let iplane = &xs[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
            for co in 0..cout {
                let oplane = &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                let wbase = (ci * cout + co) * 4;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = ws[wbase + dy * 2 + dx];
                        for y in 0..h {
                            let orow = (2 * y + dy) * ow + dx;
                            let irow = y * wd;
                            for xx in 0..wd {
                                oplane[orow + 2 * xx] = oplane[orow + 2 * xx] + wv * iplane[irow + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).expect("tconv output shape")
}

#[allow(clippy::too_many_arguments)]
fn tconv2x2_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    grads: &mut [Vec<T>],
    input: Var,
    weights: Var,
    bias: Var,
) {
    let (n, cin, h, wd) = x.dims4().expect("validated");
    let (_, cout, _, _) = w.dims4().expect("validated");
    let (oh, ow) = (2 * h, 2 * wd);
    let xs = x.data();
    let ws = w.data();

    {
        let gb = &mut grads[bias.index()];
        for ni in 0..n {
            for co in 0..cout {
                let gplane = &gout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                let mut s = T::zero();
                for &g in gplane {
                    s = s + g;
                }
                gb[co] = gb[co] + s;
            }
        }
    }

    {
        let gin = &mut grads[input.index()];
        for ni in 0..n {
            for ci in 0..cin {
                let gi_base = (ni * cin + ci) * h * wd;
                for co in 0..cout {
                    let gplane = &gout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                    let wbase = (ci * cout + co) * 4;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let wv = ws[wbase + dy * 2 + dx];
                            for y in 0..h {
                                let orow = (2 * y + dy) * ow + dx;
                                for xx in 0..wd {
                                    gin[gi_base + y * wd + xx] =
                                        gin[gi_base + y * wd + xx] + wv * gplane[orow + 2 * xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    {
        let gw = &mut grads[weights.index()];
        for ni in 0..n {
            for ci in 0..cin {
                let iplane = &xs[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for co in 0..cout {
                    let gplane = &gout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                    let wbase = (ci * cout + co) * 4;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let mut s = T::zero();
                            for y in 0..h {
                                let orow = (2 * y + dy) * ow + dx;
                                let irow = y * wd;
                                for xx in 0..wd {
                                    s = s + iplane[irow + xx] * gplane[orow + 2 * xx];
                                }
                            }
                            gw[wbase + dy * 2 + dx] = gw[wbase + dy * 2 + dx] + s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    /// Naive O(everything) convolution used as the oracle.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Vec<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let mut out = vec![0.0; n * cout * h * wd];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..h {
                    for ox in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = oy as isize + dy as isize - pad as isize;
                                    let ix = ox as isize + dx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * cin + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((co * cin + ci) * k + dy) * k + dx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[((ni * cout + co) * h + oy) * wd + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        // Small deterministic generator for test data; range (-1, 1).
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: Vec<usize>, seed: &mut u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_kernel_counts_neighbors() {
        // 3x3 kernel of ones over a 4x4 plane of ones with zero padding:
        // corners see 4 neighbors, edges 6, interior 9.
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 4, 4, vec![1.0; 16]));
        let w = tape.leaf(t4(1, 1, 3, 3, vec![1.0; 9]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let got = tape.value(y).unwrap().data();
        let want = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut seed = 7u64;
        let xt = rand_tensor(vec![2, 1, 6, 5], &mut seed);
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let wv = tape.leaf(t4(1, 1, 3, 3, w));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, wv, b, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), xt.data());
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut seed = 99u64;
        for &(n, cin, cout, h, w, k) in &[
            (1usize, 1usize, 1usize, 4usize, 4usize, 3usize),
            (2, 3, 2, 5, 7, 3),
            (1, 2, 4, 6, 3, 3),
            (2, 4, 3, 5, 5, 1),
        ] {
            let xt = rand_tensor(vec![n, cin, h, w], &mut seed);
            let wt = rand_tensor(vec![cout, cin, k, k], &mut seed);
            let bt = rand_tensor(vec![cout], &mut seed);
            let pad = (k - 1) / 2;
            let want = conv_oracle(&xt, &wt, &bt, pad);
            let mut tape = Tape::new();
            let x = tape.leaf(xt);
            let wv = tape.leaf(wt);
            let b = tape.leaf(bt);
            let y = tape.conv2d(x, wv, b, pad).unwrap();
            let got = tape.value(y).unwrap().data();
            for (g, e) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3])); // wrong cin
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, w, b, 1), Err(Error::Shape(_))));

        let w2 = tape.leaf(Tensor::zeros(vec![1, 2, 2, 2])); // even kernel
        assert!(matches!(tape.conv2d(x, w2, b, 0), Err(Error::Shape(_))));

        let w3 = tape.leaf(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, w3, b, 0), Err(Error::Shape(_)))); // pad must be 1
    }

    #[test]
    fn max_pool_ramp_takes_block_maxima() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 4, 4, (1..=16).map(f64::from).collect()));
        let y = tape.max_pool2x2(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]));
        let y = tape.max_pool2x2(x).unwrap();
        let ones = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let s = tape.weighted_sum(y, &ones).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_ramp_takes_block_means() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 4, 4, (1..=16).map(f64::from).collect()));
        let y = tape.avg_pool2x2(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pools_reject_odd_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(matches!(tape.max_pool2x2(x), Err(Error::Shape(_))));
        assert!(matches!(tape.avg_pool2x2(x), Err(Error::Shape(_))));
    }

    #[test]
    fn tconv_single_pixel_stamps_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 1, 1, vec![3.0]));
        let w = tape.leaf(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = tape.transposed_conv2x2(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).unwrap().data(), &[3.5, 6.5, 9.5, 12.5]);
    }

    #[test]
    fn tconv_blocks_are_disjoint() {
        // Each input pixel owns its own 2x2 output block.
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 2, 2, vec![1.0, 10.0, 100.0, 1000.0]));
        let w = tape.leaf(t4(1, 1, 2, 2, vec![1.0, 1.0, 1.0, 1.0]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.transposed_conv2x2(x, w, b).unwrap();
        let want = [
            1.0, 1.0, 10.0, 10.0, //
            1.0, 1.0, 10.0, 10.0, //
            100.0, 100.0, 1000.0, 1000.0, //
            100.0, 100.0, 1000.0, 1000.0,
        ];
        assert_eq!(tape.value(y).unwrap().data(), want);
    }

    #[test]
    fn relu_clamps_and_gates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 1, 4, vec![-2.0, 0.0, 0.5, 3.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 0.5, 3.0]);
        let ones = Tensor::full(vec![1, 1, 1, 4], 1.0);
        let s = tape.weighted_sum(y, &ones).unwrap();
        let grads = tape.backward(s).unwrap();
        // Subgradient at exactly zero is zero.
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_stacks_and_splits_channels() {
        let mut tape = Tape::new();
        let a = tape.leaf(t4(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t4(2, 2, 1, 2, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[2, 3, 1, 2]);
        assert_eq!(
            tape.value(y).unwrap().data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        // Weighted sum with coefficients marking only `a`'s slice.
        let mut coef = vec![0.0; 12];
        coef[0] = 1.0;
        coef[1] = 2.0;
        coef[6] = 3.0;
        coef[7] = 4.0;
        let c = Tensor::new(vec![2, 3, 1, 2], coef).unwrap();
        let s = tape.weighted_sum(y, &c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads.wrt(b).unwrap(), &[0.0; 8]);
    }

    #[test]
    fn softmax_outputs_are_probabilities() {
        let mut seed = 3u64;
        let xt = rand_tensor(vec![2, 3, 2, 2], &mut seed);
        let mut tape = Tape::new();
        let x = tape.leaf(xt);
        let y = tape.softmax_channels(x).unwrap();
        let v = tape.value(y).unwrap();
        let (n, c, h, w) = v.dims4().unwrap();
        let plane = h * w;
        for ni in 0..n {
            for p in 0..plane {
                let mut s = 0.0;
                for ci in 0..c {
                    let val = v.data()[(ni * c + ci) * plane + p];
                    assert!(val > 0.0 && val < 1.0);
                    s += val;
                }
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 2, 1, 1, vec![1.0, 2.0]));
        let xs = tape.leaf(t4(1, 2, 1, 1, vec![1001.0, 1002.0]));
        let y = tape.softmax_channels(x).unwrap();
        let ys = tape.softmax_channels(xs).unwrap();
        let a = tape.value(y).unwrap().data().to_vec();
        let b = tape.value(ys).unwrap().data().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn softmax_gradient_matches_jacobian() {
        // For y = softmax(x), dL/dx_c = y_c (g_c - sum_j g_j y_j).
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 3, 1, 1, vec![0.3, -1.2, 0.8]));
        let y = tape.softmax_channels(x).unwrap();
        let coeffs = Tensor::new(vec![1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let s = tape.weighted_sum(y, &coeffs).unwrap();
        let grads = tape.backward(s).unwrap();
        let yv = tape.value(y).unwrap().data().to_vec();
        let g = [1.0, -2.0, 0.5];
        let dot: f64 = g.iter().zip(&yv).map(|(a, b)| a * b).sum();
        for c in 0..3 {
            let want = yv[c] * (g[c] - dot);
            assert_abs_diff_eq!(grads.wrt(x).unwrap()[c], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = 1/2 sum x^2 via mul + weighted_sum; gradient is x itself.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let half = Tensor::full(vec![3], 0.5);
        let s = tape.weighted_sum(sq, &half).unwrap();
        assert_eq!(tape.value(s).unwrap().item().unwrap(), 7.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reused_value_accumulates_both_paths() {
        // y = x + x (via two weighted sums is awkward; use concat of the
        // same var and sum everything): gradient should be 2 per element.
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 1, 2, vec![3.0, 4.0]));
        let y = tape.concat_channels(x, x).unwrap();
        let ones = Tensor::full(vec![1, 2, 1, 2], 1.0);
        let s = tape.weighted_sum(y, &ones).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn soft_dice_perfect_prediction_has_zero_loss() {
        let g = vec![1.0, 0.0, 0.0, 1.0];
        let mut probs = vec![0.0; 8];
        probs[4..8].copy_from_slice(&g); // fg channel equals labels
        for i in 0..4 {
            probs[i] = 1.0 - g[i];
        }
        let mut tape = Tape::new();
        let p = tape.leaf(t4(1, 2, 2, 2, probs));
        let labels = t4(1, 1, 2, 2, g);
        let (loss, sdsc) = tape.soft_dice(p, &labels, 1.0).unwrap();
        assert_abs_diff_eq!(tape.value(loss).unwrap().item().unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sdsc[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn soft_dice_gradient_matches_closed_form() {
        let g = vec![1.0, 0.0, 1.0, 0.0];
        let pfg = [0.8, 0.3, 0.6, 0.1];
        let mut probs = vec![0.0; 8];
        for i in 0..4 {
            probs[i] = 1.0 - pfg[i];
            probs[4 + i] = pfg[i];
        }
        let sigma = 1.0;
        let mut tape = Tape::new();
        let p = tape.leaf(t4(1, 2, 2, 2, probs));
        let labels = t4(1, 1, 2, 2, g.clone());
        let (loss, _) = tape.soft_dice(p, &labels, sigma).unwrap();
        let grads = tape.backward(loss).unwrap();
        let inter: f64 = pfg.iter().zip(&g).map(|(a, b)| a * b).sum();
        let num = 2.0 * inter + sigma;
        let den = pfg.iter().sum::<f64>() + g.iter().sum::<f64>() + sigma;
        let gp = grads.wrt(p).unwrap();
        for i in 0..4 {
            let want = -(2.0 * g[i] * den - num) / (den * den);
            assert_abs_diff_eq!(gp[4 + i], want, epsilon = 1e-12);
            assert_eq!(gp[i], 0.0); // background channel takes no gradient here
        }
    }

    #[test]
    fn soft_dice_batch_averages_per_image() {
        // Image 0 perfect, image 1 completely wrong: loss = 1 - mean(sdsc).
        let labels = t4(2, 1, 1, 2, vec![1.0, 0.0, 1.0, 1.0]);
        let probs = t4(
            2,
            2,
            1,
            2,
            vec![
                0.0, 1.0, 1.0, 0.0, // image 0: bg, fg channels (fg = labels)
                1.0, 1.0, 0.0, 0.0, // image 1: fg prediction all zero
            ],
        );
        let mut tape = Tape::new();
        let p = tape.leaf(probs);
        let (loss, sdsc) = tape.soft_dice(p, &labels, 1.0).unwrap();
        assert_abs_diff_eq!(sdsc[0], 1.0, epsilon = 1e-15);
        // image 1: num = 0 + 1, den = 0 + 2 + 1.
        assert_abs_diff_eq!(sdsc[1], 1.0 / 3.0, epsilon = 1e-15);
        let want = 1.0 - (1.0 + 1.0 / 3.0) / 2.0;
        assert_abs_diff_eq!(tape.value(loss).unwrap().item().unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn cross_tape_variables_are_graph_errors() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let xa = a.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let xb = b.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(b.relu(xa), Err(Error::Graph(_))));
        assert!(matches!(b.concat_channels(xb, xa), Err(Error::Graph(_))));
        assert!(matches!(a.value(xb), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::<f64>::new(vec![2], vec![5.0, 6.0]).unwrap());
        let ones = Tensor::full(vec![2], 1.0);
        let s = tape.weighted_sum(x, &ones).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_can_run_twice() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let ones = Tensor::full(vec![2], 1.0);
        let s = tape.weighted_sum(x, &ones).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
    }

    #[test]
    fn tconv_matches_scatter_oracle() {
        let mut seed = 11u64;
        let xt = rand_tensor(vec![2, 3, 3, 4], &mut seed);
        let wt = rand_tensor(vec![3, 2, 2, 2], &mut seed);
        let bt = rand_tensor(vec![2], &mut seed);
        // Scatter oracle.
        let (n, cin, h, wd) = xt.dims4().unwrap();
        let cout = 2;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut want = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        want[((ni * cout + co) * oh + oy) * ow + ox] = bt.data()[co];
                    }
                }
            }
            for ci in 0..cin {
                for y in 0..h {
                    for x in 0..wd {
                        let v = xt.data()[((ni * cin + ci) * h + y) * wd + x];
                        for co in 0..cout {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let wv = wt.data()[((ci * cout + co) * 2 + dy) * 2 + dx];
                                    want[((ni * cout + co) * oh + 2 * y + dy) * ow + 2 * x + dx] +=
                                        v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(xt);
        let w = tape.leaf(wt);
        let b = tape.leaf(bt);
        let y = tape.transposed_conv2x2(x, w, b).unwrap();
        let got = tape.value(y).unwrap().data();
        for (g, e) in got.iter().zip(&want) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn activation_pattern_tracks_relu_signs_and_pool_winners() {
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape
                .leaf(Tensor::new(vec![1, 1, 2, 2], data).unwrap());
            let r = tape.relu(x).unwrap();
            tape.max_pool2x2(r).unwrap();
            tape.activation_pattern()
        };
        let base = run(vec![1.0, -2.0, 3.0, -4.0]);
        // A pure value change that flips no sign and keeps the same pool
        // winner leaves the pattern untouched.
        assert_eq!(base, run(vec![1.5, -2.5, 2.9, -4.5]));
        // Flipping one ReLU sign changes it.
        assert_ne!(base, run(vec![1.0, 2.0, 3.0, -4.0]));
        // Moving the pool winner changes it even with identical signs.
        assert_ne!(base, run(vec![3.0, -2.0, 1.0, -4.0]));
        // A tape with no kinked ops has an empty pattern.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
        tape.avg_pool2x2(x).unwrap();
        assert!(tape.activation_pattern().is_empty());
    }
}
