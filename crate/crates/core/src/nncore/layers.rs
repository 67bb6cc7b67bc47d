//! The five layer primitives and their backward rules.
//!
//! Convolutions are 3×3 cross-correlations lowered to GEMM through an
//! im2col buffer whose rows are output sites and whose columns run over
//! `(ky, kx, in_channel)`. Conv weights are stored `[3, 3, in, out]`, which
//! is exactly the `K × out` matrix the GEMM needs. Fully-connected weights
//! are `[in, out]`. Parameter gradients are accumulated, never overwritten.

use std::fmt;

use crate::error::{Error, Result};
use crate::nncore::{gemm, ParamStore, Scalar, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding of `dilation` pixels, so stride-1 output keeps the
    /// input size.
    SameZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            stride: 1,
            dilation: 1,
            padding: Padding::SameZero,
        }
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::SameZero => self.dilation,
        }
    }

    /// Output extent along one spatial axis, if the kernel fits.
    pub fn out_dim(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (KERNEL - 1) + 1;
        let padded = n + 2 * self.pad();
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn fan_in(&self) -> usize {
        KERNEL * KERNEL * self.in_ch
    }

    fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || !(1..=2).contains(&self.stride) || self.dilation == 0 {
            return Err(Error::Contract(format!("invalid conv attributes {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    FullyConnected { in_width: usize, out_width: usize },
    Relu,
    Sigmoid,
    /// Channel-axis concatenation of all inputs, in order.
    Concat,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, Self::Conv2d(_) | Self::FullyConnected { .. })
    }

    /// `(weight shape, bias shape, fan_in)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            Self::Conv2d(c) => Some((vec![KERNEL, KERNEL, c.in_ch, c.out_ch], vec![c.out_ch], c.fan_in())),
            Self::FullyConnected {
                in_width,
                out_width,
            } => Some((vec![in_width, out_width], vec![out_width], in_width)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Conv2d(c) => write!(
                f,
                "conv2d in={} out={} kernel=3x3 stride={} dilation={} padding={}",
                c.in_ch,
                c.out_ch,
                c.stride,
                c.dilation,
                match c.padding {
                    Padding::Valid => "valid",
                    Padding::SameZero => "same-zero",
                }
            ),
            Self::FullyConnected {
                in_width,
                out_width,
            } => write!(f, "fully_connected in={in_width} out={out_width}"),
            Self::Relu => write!(f, "relu"),
            Self::Sigmoid => write!(f, "sigmoid"),
            Self::Concat => write!(f, "concat"),
        }
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Inputs and output of one forward call, enough to run backward.
#[derive(Clone, Debug)]
pub struct LayerCtx<T> {
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Output shape for the given input shapes, or a shape error naming `name`.
pub fn output_shape(name: &str, layer: &LayerSpec, inputs: &[[usize; 4]]) -> Result<[usize; 4]> {
    let one = |inputs: &[[usize; 4]]| -> Result<[usize; 4]> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(Error::shape(name, format!("expected 1 input, got {}", inputs.len()))),
        }
    };
    match layer {
        LayerSpec::Conv2d(c) => {
            c.validate()?;
            let [n, h, w, ch] = one(inputs)?;
            if ch != c.in_ch {
                return Err(Error::shape(name, format!("expected {} input channels, got {ch}", c.in_ch)));
            }
            let (Some(ho), Some(wo)) = (c.out_dim(h), c.out_dim(w)) else {
                return Err(Error::shape(name, format!("kernel does not fit a {h}x{w} input")));
            };
            Ok([n, ho, wo, c.out_ch])
        }
        LayerSpec::FullyConnected {
            in_width,
            out_width,
        } => {
            let [n, h, w, ch] = one(inputs)?;
            if h * w * ch != *in_width {
                return Err(Error::shape(
                    name,
                    format!("expected {in_width} input features, got {h}x{w}x{ch}"),
                ));
            }
            Ok([n, 1, 1, *out_width])
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => one(inputs),
        LayerSpec::Concat => {
            let Some(first) = inputs.first() else {
                return Err(Error::shape(name, "concat needs at least one input"));
            };
            let mut c = 0;
            for s in inputs {
                if s[..3] != first[..3] {
                    return Err(Error::shape(name, format!("concat inputs {first:?} and {s:?} disagree")));
                }
                c += s[3];
            }
            Ok([first[0], first[1], first[2], c])
        }
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, c: &ConvSpec, ho: usize, wo: usize) -> Vec<T> {
    let k = c.fan_in();
    let cin = c.in_ch;
    let pad = c.pad() as isize;
    let mut cols = vec![T::zero(); x.n * ho * wo * k];
    for n in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * k;
                for ky in 0..KERNEL {
                    let iy = (oy * c.stride + ky * c.dilation) as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * c.stride + kx * c.dilation) as isize - pad;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let src = ((n * x.h + iy as usize) * x.w + ix as usize) * cin;
                        let dst = row + (ky * KERNEL + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x.data[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], shape: [usize; 4], c: &ConvSpec, ho: usize, wo: usize) -> Tensor<T> {
    let [n_, h, w, cin] = shape;
    let k = c.fan_in();
    let pad = c.pad() as isize;
    let mut gx = Tensor::zeros(n_, h, w, cin);
    for n in 0..n_ {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * k;
                for ky in 0..KERNEL {
                    let iy = (oy * c.stride + ky * c.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * c.stride + kx * c.dilation) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + iy as usize) * w + ix as usize) * cin;
                        let src = row + (ky * KERNEL + kx) * cin;
                        for (d, s) in gx.data[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `out[i, :] = bias` for every row, then `out += a·w`.
fn affine<T: Scalar>(a: &[T], rows: usize, k: usize, w: &[T], bias: &[T], out_cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * out_cols);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(false, false, rows, out_cols, k, T::one(), a, w, T::one(), &mut out);
    out
}

/// Forward pass on borrowed inputs, without keeping a context.
pub fn forward_raw<T: Scalar>(
    name: &str,
    layer: &LayerSpec,
    inputs: &[&Tensor<T>],
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let shapes: Vec<[usize; 4]> = inputs.iter().map(|t| t.shape()).collect();
    let [n, ho, wo, co] = output_shape(name, layer, &shapes)?;
    let data = match layer {
        LayerSpec::Conv2d(c) => {
            let x = inputs[0];
            let cols = im2col(x, c, ho, wo);
            let w = &params.get(&weight_name(name))?.value;
            let b = &params.get(&bias_name(name))?.value;
            affine(&cols, n * ho * wo, c.fan_in(), w, b, co)
        }
        LayerSpec::FullyConnected { in_width, .. } => {
            let w = &params.get(&weight_name(name))?.value;
            let b = &params.get(&bias_name(name))?.value;
            affine(&inputs[0].data, n, *in_width, w, b, co)
        }
        LayerSpec::Relu => inputs[0].data.iter().map(|&v| v.max(T::zero())).collect(),
        LayerSpec::Sigmoid => inputs[0]
            .data
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect(),
        LayerSpec::Concat => {
            let sites = n * ho * wo;
            let mut out = Vec::with_capacity(sites * co);
            for s in 0..sites {
                for x in inputs {
                    out.extend_from_slice(&x.data[s * x.c..(s + 1) * x.c]);
                }
            }
            out
        }
    };
    Tensor::from_vec(n, ho, wo, co, data)
}

/// Backward pass given the forward inputs and output. Returns one gradient
/// per input and accumulates parameter gradients into `params`.
pub fn backward_raw<T: Scalar>(
    name: &str,
    layer: &LayerSpec,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    params: &mut ParamStore<T>,
) -> Result<Vec<Tensor<T>>> {
    let shapes: Vec<[usize; 4]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = output_shape(name, layer, &shapes)?;
    if output.shape() != out_shape || grad_out.shape() != out_shape {
        return Err(Error::shape(
            name,
            format!(
                "stale context: output {:?}, gradient {:?}, expected {out_shape:?}",
                output.shape(),
                grad_out.shape()
            ),
        ));
    }
    let [n, ho, wo, co] = out_shape;
    let g = &grad_out.data;
    match layer {
        LayerSpec::Conv2d(c) => {
            let x = inputs[0];
            let cols = im2col(x, c, ho, wo);
            let m = n * ho * wo;
            let k = c.fan_in();
            let entry = params.get_mut(&weight_name(name))?;
            gemm(true, false, k, co, m, T::one(), &cols, g, T::one(), &mut entry.grad);
            let mut gcols = vec![T::zero(); m * k];
            gemm(false, true, m, k, co, T::one(), g, &entry.value, T::zero(), &mut gcols);
            let bias = params.get_mut(&bias_name(name))?;
            for row in g.chunks_exact(co) {
                for (gb, v) in bias.grad.iter_mut().zip(row) {
                    *gb += *v;
                }
            }
            Ok(vec![col2im(&gcols, x.shape(), c, ho, wo)])
        }
        LayerSpec::FullyConnected {
            in_width,
            out_width,
        } => {
            let x = inputs[0];
            let entry = params.get_mut(&weight_name(name))?;
            gemm(true, false, *in_width, *out_width, n, T::one(), &x.data, g, T::one(), &mut entry.grad);
            let mut gx = vec![T::zero(); n * in_width];
            gemm(false, true, n, *in_width, *out_width, T::one(), g, &entry.value, T::zero(), &mut gx);
            let bias = params.get_mut(&bias_name(name))?;
            for row in g.chunks_exact(*out_width) {
                for (gb, v) in bias.grad.iter_mut().zip(row) {
                    *gb += *v;
                }
            }
            Ok(vec![Tensor::from_vec(x.n, x.h, x.w, x.c, gx)?])
        }
        LayerSpec::Relu => {
            let data = g
                .iter()
                .zip(&output.data)
                .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                .collect();
            Ok(vec![Tensor::from_vec(n, ho, wo, co, data)?])
        }
        LayerSpec::Sigmoid => {
            let data = g
                .iter()
                .zip(&output.data)
                .map(|(&gv, &y)| gv * y * (T::one() - y))
                .collect();
            Ok(vec![Tensor::from_vec(n, ho, wo, co, data)?])
        }
        LayerSpec::Concat => {
            let sites = n * ho * wo;
            let mut grads: Vec<Tensor<T>> = inputs.iter().map(|x| Tensor::zeros(x.n, x.h, x.w, x.c)).collect();
            for s in 0..sites {
                let mut off = s * co;
                for gx in grads.iter_mut() {
                    let c = gx.c;
                    gx.data[s * c..(s + 1) * c].copy_from_slice(&g[off..off + c]);
                    off += c;
                }
            }
            Ok(grads)
        }
    }
}

/// Forward pass that returns a context for [`backward`].
pub fn forward<T: Scalar>(
    name: &str,
    layer: &LayerSpec,
    inputs: &[&Tensor<T>],
    params: &ParamStore<T>,
) -> Result<(Tensor<T>, LayerCtx<T>)> {
    let output = forward_raw(name, layer, inputs, params)?;
    let ctx = LayerCtx {
        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        output: output.clone(),
    };
    Ok((output, ctx))
}

pub fn backward<T: Scalar>(
    name: &str,
    layer: &LayerSpec,
    grad_out: &Tensor<T>,
    ctx: &LayerCtx<T>,
    params: &mut ParamStore<T>,
) -> Result<Vec<Tensor<T>>> {
    let inputs: Vec<&Tensor<T>> = ctx.inputs.iter().collect();
    backward_raw(name, layer, &inputs, &ctx.output, grad_out, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ParamEntry;

    fn conv_params(name: &str, c: &ConvSpec, w: Vec<f64>, b: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(weight_name(name), ParamEntry::new(vec![3, 3, c.in_ch, c.out_ch], w).unwrap())
            .unwrap();
        p.insert(bias_name(name), ParamEntry::new(vec![c.out_ch], b).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let p = ParamStore::<f64>::new();
        let x = Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = forward_raw("r", &LayerSpec::Relu, &[&x], &p).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(forward_raw("s", &LayerSpec::Sigmoid, &[&z], &p).unwrap().data, vec![0.5]);
    }

    #[test]
    fn relu_backward_zeroes_negative() {
        let mut p = ParamStore::<f64>::new();
        let x = Tensor::matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        let (_, ctx) = forward("r", &LayerSpec::Relu, &[&x], &p).unwrap();
        let g = Tensor::matrix(1, 3, vec![5.0, 6.0, 7.0]).unwrap();
        let gx = backward("r", &LayerSpec::Relu, &g, &ctx, &mut p).unwrap();
        assert_eq!(gx[0].data, vec![0.0, 6.0, 7.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let ch = 3;
        let c = ConvSpec::same(ch, ch);
        let mut w = vec![0.0; 9 * ch * ch];
        for i in 0..ch {
            // center tap (ky=1, kx=1), in=i, out=i
            w[(4 * ch + i) * ch + i] = 1.0;
        }
        let p = conv_params("c", &c, w, vec![0.0; ch]);
        let x = Tensor::from_vec(2, 5, 4, ch, (0..120).map(|v| v as f64 * 0.3 - 7.0).collect()).unwrap();
        let y = forward_raw("c", &LayerSpec::Conv2d(c), &[&x], &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_geometry() {
        let s2 = ConvSpec {
            stride: 2,
            ..ConvSpec::same(1, 1)
        };
        assert_eq!(s2.out_dim(16), Some(8));
        assert_eq!(s2.out_dim(8), Some(4));
        assert_eq!(s2.out_dim(2), Some(1));
        let valid = ConvSpec {
            padding: Padding::Valid,
            ..ConvSpec::same(1, 1)
        };
        assert_eq!(valid.out_dim(4), Some(2));
        assert_eq!(valid.out_dim(2), None);
        let dil = ConvSpec {
            dilation: 4,
            ..ConvSpec::same(1, 1)
        };
        assert_eq!(dil.out_dim(1), Some(1));
        assert_eq!(dil.out_dim(23), Some(23));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let c = ConvSpec {
            in_ch: 2,
            out_ch: 3,
            stride: 2,
            dilation: 2,
            padding: Padding::SameZero,
        };
        let w: Vec<f64> = (0..9 * 2 * 3).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b = vec![0.5, -1.0, 2.0];
        let p = conv_params("c", &c, w.clone(), b.clone());
        let x = Tensor::from_vec(1, 7, 6, 2, (0..84).map(|v| (v as f64).cos()).collect()).unwrap();
        let y = forward_raw("c", &LayerSpec::Conv2d(c), &[&x], &p).unwrap();
        assert_eq!(y.shape(), [1, 4, 3, 3]);
        for oy in 0..4 {
            for ox in 0..3 {
                for o in 0..3 {
                    let mut acc = b[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky * 2) as isize - 2;
                            let ix = (ox * 2 + kx * 2) as isize - 2;
                            if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                continue;
                            }
                            for i in 0..2 {
                                acc += w[((ky * 3 + kx) * 2 + i) * 3 + o]
                                    * x.data[((iy as usize) * 6 + ix as usize) * 2 + i];
                            }
                        }
                    }
                    let got = y.data[(oy * 3 + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fc_weight_gradient_is_outer_product_sum() {
        let mut p = ParamStore::<f64>::new();
        p.insert("f.weight", ParamEntry::new(vec![2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        p.insert("f.bias", ParamEntry::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let layer = LayerSpec::FullyConnected {
            in_width: 2,
            out_width: 1,
        };
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, ctx) = forward("f", &layer, &[&x], &p).unwrap();
        let g = Tensor::matrix(2, 1, vec![10.0, 100.0]).unwrap();
        backward("f", &layer, &g, &ctx, &mut p).unwrap();
        assert_eq!(p.get("f.weight").unwrap().grad, vec![310.0, 420.0]);
        assert_eq!(p.get("f.bias").unwrap().grad, vec![110.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut p = ParamStore::<f64>::new();
        let a = Tensor::from_vec(1, 1, 2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(1, 1, 2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let (y, ctx) = forward("cat", &LayerSpec::Concat, &[&a, &b], &p).unwrap();
        assert_eq!(y.data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let g = Tensor::from_vec(1, 1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let gs = backward("cat", &LayerSpec::Concat, &g, &ctx, &mut p).unwrap();
        assert_eq!(gs[0].data, vec![0.1, 0.4]);
        assert_eq!(gs[1].data, vec![0.2, 0.3, 0.5, 0.6]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let p = ParamStore::<f64>::new();
        let layer = LayerSpec::Conv2d(ConvSpec::same(4, 2));
        let x = Tensor::<f64>::zeros(1, 4, 4, 3);
        let err = forward_raw("feat.conv9", &layer, &[&x], &p).unwrap_err().to_string();
        assert!(err.contains("feat.conv9"), "{err}");
    }

    #[test]
    fn stale_context_rejected() {
        let mut p = ParamStore::<f64>::new();
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (_, ctx) = forward("r", &LayerSpec::Relu, &[&x], &p).unwrap();
        let g = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(backward("r", &LayerSpec::Relu, &g, &ctx, &mut p).is_err());
    }

    #[test]
    fn backward_accumulates() {
        let c = ConvSpec::same(2, 2);
        let w: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut p = conv_params("c", &c, w, vec![0.1, 0.2]);
        let layer = LayerSpec::Conv2d(c);
        let x = Tensor::from_vec(1, 3, 3, 2, (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (y, ctx) = forward("c", &layer, &[&x], &p).unwrap();
        let g = Tensor::from_vec(1, 3, 3, 2, y.data.iter().map(|v| v * 0.5).collect()).unwrap();
        backward("c", &layer, &g, &ctx, &mut p).unwrap();
        let once = p.get("c.weight").unwrap().grad.clone();
        backward("c", &layer, &g, &ctx, &mut p).unwrap();
        let twice = &p.get("c.weight").unwrap().grad;
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
