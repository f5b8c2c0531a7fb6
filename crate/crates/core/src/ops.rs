//! Primitive kernels: forward values and the vector-Jacobian products the tape
//! replays. Every function here is pure.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Stride, dilation and zero padding of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 1, 0)
    }
}

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn resolve(input: &[usize], weight: &[usize], bias: &[usize], spec: ConvSpec) -> Result<Self> {
        let [c_in, h, w] = input[..] else {
            return Err(Error::Shape(format!("conv2d input must be C×H×W, got {input:?}")));
        };
        let [c_out, wc_in, kh, kw] = weight[..] else {
            return Err(Error::Shape(format!(
                "conv2d weight must be C_out×C_in×k×k, got {weight:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be odd and square, got {kh}×{kw}")));
        }
        if bias != [c_out] {
            return Err(Error::Shape(format!("conv2d bias must be [{c_out}], got {bias:?}")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::Shape("conv2d stride and dilation must be ≥ 1".into()));
        }
        let reach = spec.dilation * (kh - 1) + 1;
        if h + 2 * spec.padding < reach || w + 2 * spec.padding < reach {
            return Err(Error::Shape(format!(
                "conv2d receptive field {reach} exceeds padded input {h}×{w}"
            )));
        }
        let out_h = (h + 2 * spec.padding - reach) / spec.stride + 1;
        let out_w = (w + 2 * spec.padding - reach) / spec.stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            out_h,
            out_w,
            spec,
        })
    }

    /// Rows of the unfolded input matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate of kernel tap `tap` at output coordinate `o`, if inside the image.
    #[inline]
    fn source(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + tap * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `input` into a `(C_in·k·k) × (H'·W')` row-major matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_pixels();
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst_row[ix] = dst_row[ix] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward from an already unfolded input. Returns `C_out×H'×W'`.
pub fn conv2d_from_cols<T: Scalar>(cols: &[T], weight: &Tensor<T>, bias: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let mut out = Vec::with_capacity(g.c_out * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    T::gemm(
        g.c_out,
        kk,
        n,
        T::one(),
        weight.data(),
        kk as isize,
        1,
        cols,
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::new(vec![g.c_out, g.out_h, g.out_w], out).expect("conv output shape")
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = ConvGeom::resolve(input.shape(), weight.shape(), bias.shape(), spec)?;
    let cols = im2col(input.data(), &g);
    Ok(conv2d_from_cols(&cols, weight, bias, &g))
}

/// Gradients of a convolution given the upstream gradient `dout`.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    weight: &Tensor<T>,
    dout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let bias = dout
        .chunks_exact(n)
        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    // dW = dOut · colsᵀ
    let mut dweight = vec![T::zero(); g.c_out * kk];
    T::gemm(
        g.c_out,
        n,
        kk,
        T::one(),
        dout,
        n as isize,
        1,
        cols,
        1,
        n as isize,
        T::zero(),
        &mut dweight,
        kk as isize,
        1,
    );
    let input = need_input.then(|| {
        // dCols = Wᵀ · dOut
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            g.c_out,
            n,
            T::one(),
            weight.data(),
            1,
            kk as isize,
            dout,
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        col2im(&dcols, g)
    });
    ConvGrads {
        input,
        weight: dweight,
        bias,
    }
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, dout: &[T]) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(dout)
        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
        .collect()
}

/// Source index pair and weight of the far neighbour for one output coordinate
/// (half-pixel centres, edges clamped).
fn upsample_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of a `C×H×W` tensor by an integer factor.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    if factor == 0 {
        return Err(Error::Shape("upsample factor must be ≥ 1".into()));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ys = upsample_taps(oh, h, factor);
    let xs = upsample_taps(ow, w, factor);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            let wy = T::from_f64(wy);
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, wx) in &xs {
                let wx = T::from_f64(wx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * wx;
                out.push(top + (bottom - top) * wy);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Adjoint of [`bilinear_upsample`] for an input of shape `c×h×w`.
pub fn bilinear_upsample_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    if factor == 1 {
        return dout.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let ys = upsample_taps(oh, h, factor);
    let xs = upsample_taps(ow, w, factor);
    let mut din = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut din[ch * h * w..(ch + 1) * h * w];
        let src = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = T::from_f64(wy);
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = T::from_f64(wx);
                let g = src[oy * ow + ox];
                let top = g * (T::one() - wy);
                let bottom = g * wy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - wx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * wx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bottom * (T::one() - wx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bottom * wx;
            }
        }
    }
    din
}

/// Per-pixel log-softmax over the channel axis.
fn log_softmax_channel<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = logits.chw()?;
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let mut max = x[p];
        for ch in 1..c {
            max = max.max(x[ch * hw + p]);
        }
        let mut total = T::zero();
        for ch in 0..c {
            total = total + (x[ch * hw + p] - max).exp();
        }
        let log_z = max + total.ln();
        for ch in 0..c {
            out[ch * hw + p] = x[ch * hw + p] - log_z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Per-pixel softmax over the channel axis of a `C×H×W` tensor.
pub fn softmax_channel<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax_channel(logits)?.map(|v| v.exp()))
}

/// Per-pixel argmax over channels (first maximum wins) and its probability.
pub fn argmax_channel<T: Scalar>(probs: &Tensor<T>) -> Result<(Vec<u8>, Vec<T>)> {
    let (c, h, w) = probs.chw()?;
    let hw = h * w;
    let x = probs.data();
    let mut labels = Vec::with_capacity(hw);
    let mut conf = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut best = 0;
        for ch in 1..c {
            if x[ch * hw + p] > x[best * hw + p] {
                best = ch;
            }
        }
        labels.push(best as u8);
        conf.push(x[best * hw + p]);
    }
    Ok((labels, conf))
}

pub fn validate_labels(labels: &[u8], num_classes: usize) -> Result<()> {
    match labels
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
    {
        Some(&label) => Err(Error::InvalidLabel { label, num_classes }),
        None => Ok(()),
    }
}

/// Loss value together with its gradient with respect to the logits.
pub struct LossWithGrad<T> {
    pub loss: T,
    pub dlogits: Tensor<T>,
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`; 0 if all ignored.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<LossWithGrad<T>> {
    let (c, h, w) = logits.chw()?;
    let hw = h * w;
    if labels.len() != hw {
        return Err(Error::Shape(format!(
            "label map has {} pixels, logits have {hw}",
            labels.len()
        )));
    }
    validate_labels(labels, c)?;
    let counted = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut dlogits = Tensor::zeros(logits.shape());
    if counted == 0 {
        return Ok(LossWithGrad {
            loss: T::zero(),
            dlogits,
        });
    }
    let logp = log_softmax_channel(logits)?;
    let lp = logp.data();
    let scale = T::one() / T::from_f64(counted as f64);
    let mut total = T::zero();
    let d = dlogits.data_mut();
    for (p, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let y = label as usize;
        total = total - lp[y * hw + p];
        for ch in 0..c {
            let prob = lp[ch * hw + p].exp();
            let onehot = if ch == y { T::one() } else { T::zero() };
            d[ch * hw + p] = (prob - onehot) * scale;
        }
    }
    Ok(LossWithGrad {
        loss: total * scale,
        dlogits,
    })
}

/// Checks a `C×H×W` tensor holds a probability distribution at every pixel.
pub fn validate_distribution<T: Scalar>(probs: &Tensor<T>) -> Result<()> {
    let (c, h, w) = probs.chw()?;
    let hw = h * w;
    let x = probs.data();
    for p in 0..hw {
        let mut sum = 0.0f64;
        for ch in 0..c {
            let v = x[ch * hw + p].to_f64();
            if !(v >= 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "probability {v} at pixel {p}, channel {ch}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidDistribution(format!("pixel {p} sums to {sum}")));
        }
    }
    Ok(())
}

/// Mean over pixels of `KL(target ‖ softmax(student_logits))`; the target is a constant.
pub fn kl_divergence<T: Scalar>(target: &Tensor<T>, student_logits: &Tensor<T>) -> Result<LossWithGrad<T>> {
    if target.shape() != student_logits.shape() {
        return Err(Error::Shape(format!(
            "KL target {:?} vs student {:?}",
            target.shape(),
            student_logits.shape()
        )));
    }
    validate_distribution(target)?;
    let (c, h, w) = student_logits.chw()?;
    let hw = h * w;
    let logq = log_softmax_channel(student_logits)?;
    let (pt, lq) = (target.data(), logq.data());
    let scale = T::one() / T::from_f64(hw as f64);
    let mut total = T::zero();
    let mut dlogits = Tensor::zeros(student_logits.shape());
    let d = dlogits.data_mut();
    for p in 0..hw {
        for ch in 0..c {
            let i = ch * hw + p;
            if pt[i] > T::zero() {
                total = total + pt[i] * (pt[i].ln() - lq[i]);
            }
            d[i] = (lq[i].exp() - pt[i]) * scale;
        }
    }
    Ok(LossWithGrad {
        loss: total * scale,
        dlogits,
    })
}
