//! Resolution-preserving 2D convolution (cross-correlation with zero padding).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape3, Tensor3};

/// Geometry of a convolution layer, without its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_h % 2 == 0 || self.kernel_w % 2 == 0 {
            return Err(Error::EvenKernel(self.kernel_h, self.kernel_w));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("layer with zero channels".into()));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

/// A convolution layer: weights laid out `out × in × kh × kw`, one bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    shape: ConvShape,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients of one layer, same layout as the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(shape: ConvShape, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if weights.len() != shape.weight_len() || bias.len() != shape.out_channels {
            return Err(Error::Shape(format!(
                "layer {shape:?} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite layer parameter".into()));
        }
        Ok(Self {
            shape,
            weights,
            bias,
        })
    }

    pub fn zeros(shape: ConvShape) -> Result<Self> {
        Self::new(
            shape,
            vec![T::zero(); shape.weight_len()],
            vec![T::zero(); shape.out_channels],
        )
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(shape: ConvShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let area = (shape.kernel_h * shape.kernel_w) as f64;
        let fan_in = shape.in_channels as f64 * area;
        let fan_out = shape.out_channels as f64 * area;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let weights = (0..shape.weight_len())
            .map(|_| T::from_f64c(rng.gen_range(-limit..limit)))
            .collect();
        Self::new(shape, weights, vec![T::zero(); shape.out_channels])
    }

    pub fn shape(&self) -> ConvShape {
        self.shape
    }

    pub fn zero_grads(&self) -> ConvGrads<T> {
        ConvGrads {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

/// Unfolds `input` so that row `(c, dy, dx)` holds the image shifted by that
/// kernel tap, zero-filled outside the image: `(cin*kh*kw) x (h*w)`.
fn im2col<T: Real>(input: &Tensor3<T>, kh: usize, kw: usize) -> Vec<T> {
    let (h, w) = (input.height(), input.width());
    let plane = h * w;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut cols = vec![T::zero(); input.channels() * kh * kw * plane];
    for c in 0..input.channels() {
        let src = input.channel(c);
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[((c * kh + dy) * kw + dx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = pw.saturating_sub(dx);
                    let x1 = (w + pw).saturating_sub(dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    dst[y * w + x0..y * w + x1]
                        .copy_from_slice(&src[sy * w + x0 + dx - pw..sy * w + x1 + dx - pw]);
                }
            }
        }
    }
    cols
}

/// Adds the folded-back columns into `grad_in`; adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], grad_in: &mut Tensor3<T>, kh: usize, kw: usize) {
    let (h, w) = (grad_in.height(), grad_in.width());
    let plane = h * w;
    let (ph, pw) = (kh / 2, kw / 2);
    for c in 0..grad_in.channels() {
        let dst = grad_in.channel_mut(c);
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &cols[((c * kh + dy) * kw + dx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = pw.saturating_sub(dx);
                    let x1 = (w + pw).saturating_sub(dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let d = &mut dst[sy * w + x0 + dx - pw..sy * w + x1 + dx - pw];
                    for (d, &v) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(input: &Tensor3<T>, layer: &ConvLayer<T>) -> Result<Tensor3<T>> {
    let s = layer.shape;
    if input.channels() != s.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {} channels, layer expects {}",
            input.channels(),
            s.in_channels
        )));
    }
    let (h, w) = (input.height(), input.width());
    let plane = h * w;
    let taps = s.in_channels * s.kernel_h * s.kernel_w;
    let mut out = Tensor3::zeros(Shape3::new(s.out_channels, h, w));
    for o in 0..s.out_channels {
        out.channel_mut(o).fill(layer.bias[o]);
    }
    if plane == 0 {
        return Ok(out);
    }
    let cols = im2col(input, s.kernel_h, s.kernel_w);
    // out[o, p] += W[o, t] * cols[t, p]
    T::gemm(
        s.out_channels,
        taps,
        plane,
        &layer.weights,
        (taps, 1),
        &cols,
        (plane, 1),
        T::one(),
        out.as_mut_slice(),
        (plane, 1),
    );
    Ok(out)
}

/// Gradients of `Σ grad_out ⊙ conv2d_forward(input, layer)` with respect to
/// the input, the weights and the bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor3<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor3<T>,
) -> Result<(Tensor3<T>, ConvGrads<T>)> {
    let mut grads = layer.zero_grads();
    let grad_in = conv2d_backward_into(input, layer, grad_out, &mut grads, true)?
        .expect("input gradient requested");
    Ok((grad_in, grads))
}

/// Accumulates parameter gradients into `grads`; returns the input gradient
/// only when `want_input` is set (the first layer of a network skips it).
pub fn conv2d_backward_into<T: Real>(
    input: &Tensor3<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor3<T>,
    grads: &mut ConvGrads<T>,
    want_input: bool,
) -> Result<Option<Tensor3<T>>> {
    let s = layer.shape;
    let (h, w) = (input.height(), input.width());
    if input.channels() != s.in_channels
        || grad_out.shape() != Shape3::new(s.out_channels, h, w)
    {
        return Err(Error::Shape(format!(
            "conv backward: input {}, grad_out {}, layer {}->{}",
            input.shape(),
            grad_out.shape(),
            s.in_channels,
            s.out_channels
        )));
    }
    if grads.weights.len() != s.weight_len() || grads.bias.len() != s.out_channels {
        return Err(Error::Shape("gradient buffer does not match layer".into()));
    }
    let plane = h * w;
    let taps = s.in_channels * s.kernel_h * s.kernel_w;
    for o in 0..s.out_channels {
        grads.bias[o] = grads.bias[o] + grad_out.channel(o).iter().copied().sum::<T>();
    }
    if plane == 0 {
        return Ok(want_input.then(|| Tensor3::zeros(input.shape())));
    }
    let cols = im2col(input, s.kernel_h, s.kernel_w);
    // dW[o, t] += G[o, p] * cols[t, p]
    T::gemm(
        s.out_channels,
        plane,
        taps,
        grad_out.as_slice(),
        (plane, 1),
        &cols,
        (1, plane),
        T::one(),
        &mut grads.weights,
        (taps, 1),
    );
    if !want_input {
        return Ok(None);
    }
    // dcols[t, p] = W[o, t] * G[o, p]
    let mut dcols = cols;
    T::gemm(
        taps,
        s.out_channels,
        plane,
        &layer.weights,
        (1, taps),
        grad_out.as_slice(),
        (plane, 1),
        T::zero(),
        &mut dcols,
        (plane, 1),
    );
    let mut grad_in = Tensor3::zeros(input.shape());
    col2im(&dcols, &mut grad_in, s.kernel_h, s.kernel_w);
    Ok(Some(grad_in))
}
