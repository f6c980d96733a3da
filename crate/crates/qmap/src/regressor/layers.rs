//! Layer kernels for the from-scratch regressors: im2col convolutions (2D
//! and 3D), dense layers, leaky ReLU, global average pooling, and identity
//! -skip residual blocks.
//!
//! Everything is generic over the float type so gradient checks can run the
//! exact same code paths in f64 while training runs f32.

use crate::error::{QmapError, Result};
use ndarray::{Array2, ArrayD, NdFloat};
use serde::{Deserialize, Serialize};

/// Slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Convolution geometry; `spatial` distinguishes 2D from 3D kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, d: usize) -> usize {
        (d + 2 * self.pad).saturating_sub(self.k) / self.stride + 1
    }

    pub fn params_2d(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k + self.out_ch
    }

    pub fn params_3d(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k * self.k + self.out_ch
    }
}

/// One processing step of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d(ConvGeom),
    Conv3d(ConvGeom),
    /// Residual block: conv-lrelu-conv plus identity skip, then lrelu.
    /// Both inner convolutions share this geometry (in_ch == out_ch).
    Res2d(ConvGeom),
    Res3d(ConvGeom),
    Dense { inp: usize, out: usize },
    LeakyRelu,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn n_params(&self) -> usize {
        match self {
            LayerSpec::Conv2d(g) => g.params_2d(),
            LayerSpec::Conv3d(g) => g.params_3d(),
            LayerSpec::Res2d(g) => 2 * g.params_2d(),
            LayerSpec::Res3d(g) => 2 * g.params_3d(),
            LayerSpec::Dense { inp, out } => out * inp + out,
            LayerSpec::LeakyRelu | LayerSpec::GlobalAvgPool => 0,
        }
    }
}

/// Activations flowing between layers: channel-first spatial tensors
/// (N, C, ...) or flat feature matrices (N, D).
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor<F: NdFloat> {
    Spatial(ArrayD<F>),
    Flat(Array2<F>),
}

impl<F: NdFloat> Tensor<F> {
    pub fn flat(&self) -> Result<&Array2<F>> {
        match self {
            Tensor::Flat(a) => Ok(a),
            Tensor::Spatial(_) => Err(QmapError::Shape("expected flat activations".into())),
        }
    }

    pub fn spatial(&self) -> Result<&ArrayD<F>> {
        match self {
            Tensor::Spatial(a) => Ok(a),
            Tensor::Flat(_) => Err(QmapError::Shape("expected spatial activations".into())),
        }
    }

    pub fn batch_len(&self) -> usize {
        match self {
            Tensor::Spatial(a) => a.shape()[0],
            Tensor::Flat(a) => a.nrows(),
        }
    }
}

/// Per-layer state stashed by the forward pass for the backward pass.
pub enum Cache<F: NdFloat> {
    Conv {
        col: Array2<F>,
        x_shape: Vec<usize>,
    },
    Res {
        col1: Array2<F>,
        col2: Array2<F>,
        pre1: ArrayD<F>,
        pre_out: ArrayD<F>,
    },
    Dense {
        x: Array2<F>,
    },
    Lrelu {
        /// Output signs determine the mask (slope is positive).
        y: Tensor<F>,
    },
    Gap {
        x_shape: Vec<usize>,
    },
}

fn f<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 fits the network float")
}

/// Unrolls (N, C, sp...) patches into a (C*k^d, N*prod(out)) matrix.
/// Out-of-bounds taps read zero. Spatial rank 2 or 3.
fn im2col<F: NdFloat>(x: &ArrayD<F>, g: &ConvGeom) -> Array2<F> {
    let shape = x.shape().to_vec();
    let n = shape[0];
    let c = shape[1];
    let sp = &shape[2..];
    debug_assert_eq!(c, g.in_ch);
    let out: Vec<usize> = sp.iter().map(|&d| g.out_len(d)).collect();
    let cols: usize = n * out.iter().product::<usize>();
    let taps_per_ch: usize = g.k.pow(sp.len() as u32);
    let mut col = Array2::<F>::zeros((c * taps_per_ch, cols));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");

    match sp.len() {
        2 => {
            let (h, w) = (sp[0], sp[1]);
            let (ho, wo) = (out[0], out[1]);
            for ci in 0..c {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let row = (ci * g.k + ki) * g.k + kj;
                        let base = row * cols;
                        for ni in 0..n {
                            let xbase = (ni * c + ci) * h * w;
                            for oi in 0..ho {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                let cbase = base + (ni * ho + oi) * wo;
                                if ii < 0 || ii >= h as isize {
                                    continue; // padded row stays zero
                                }
                                let xrow = xbase + ii as usize * w;
                                for oj in 0..wo {
                                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                    if jj >= 0 && jj < w as isize {
                                        cs[cbase + oj] = xs[xrow + jj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (sp[0], sp[1], sp[2]);
            let (do_, ho, wo) = (out[0], out[1], out[2]);
            for ci in 0..c {
                for kd in 0..g.k {
                    for ki in 0..g.k {
                        for kj in 0..g.k {
                            let row = ((ci * g.k + kd) * g.k + ki) * g.k + kj;
                            let base = row * cols;
                            for ni in 0..n {
                                let xbase = (ni * c + ci) * d * h * w;
                                for od in 0..do_ {
                                    let dd = (od * g.stride + kd) as isize - g.pad as isize;
                                    if dd < 0 || dd >= d as isize {
                                        continue;
                                    }
                                    for oi in 0..ho {
                                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        let xrow =
                                            xbase + (dd as usize * h + ii as usize) * w;
                                        let cbase =
                                            base + ((ni * do_ + od) * ho + oi) * wo;
                                        for oj in 0..wo {
                                            let jj = (oj * g.stride + kj) as isize
                                                - g.pad as isize;
                                            if jj >= 0 && jj < w as isize {
                                                cs[cbase + oj] = xs[xrow + jj as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => panic!("unsupported spatial rank {r}"),
    }
    col
}

/// Scatter-adds a column matrix back onto the input layout (adjoint of
/// `im2col`).
fn col2im<F: NdFloat>(dcol: &Array2<F>, x_shape: &[usize], g: &ConvGeom) -> ArrayD<F> {
    let n = x_shape[0];
    let c = x_shape[1];
    let sp = &x_shape[2..];
    let out: Vec<usize> = sp.iter().map(|&d| g.out_len(d)).collect();
    let cols: usize = n * out.iter().product::<usize>();
    let mut dx = ArrayD::<F>::zeros(x_shape.to_vec());
    let ds = dcol.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");

    match sp.len() {
        2 => {
            let (h, w) = (sp[0], sp[1]);
            let (ho, wo) = (out[0], out[1]);
            for ci in 0..c {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let row = (ci * g.k + ki) * g.k + kj;
                        let base = row * cols;
                        for ni in 0..n {
                            let xbase = (ni * c + ci) * h * w;
                            for oi in 0..ho {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + ii as usize * w;
                                let cbase = base + (ni * ho + oi) * wo;
                                for oj in 0..wo {
                                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                    if jj >= 0 && jj < w as isize {
                                        xs[xrow + jj as usize] += ds[cbase + oj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (sp[0], sp[1], sp[2]);
            let (do_, ho, wo) = (out[0], out[1], out[2]);
            for ci in 0..c {
                for kd in 0..g.k {
                    for ki in 0..g.k {
                        for kj in 0..g.k {
                            let row = ((ci * g.k + kd) * g.k + ki) * g.k + kj;
                            let base = row * cols;
                            for ni in 0..n {
                                let xbase = (ni * c + ci) * d * h * w;
                                for od in 0..do_ {
                                    let dd = (od * g.stride + kd) as isize - g.pad as isize;
                                    if dd < 0 || dd >= d as isize {
                                        continue;
                                    }
                                    for oi in 0..ho {
                                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        let xrow =
                                            xbase + (dd as usize * h + ii as usize) * w;
                                        let cbase =
                                            base + ((ni * do_ + od) * ho + oi) * wo;
                                        for oj in 0..wo {
                                            let jj = (oj * g.stride + kj) as isize
                                                - g.pad as isize;
                                            if jj >= 0 && jj < w as isize {
                                                xs[xrow + jj as usize] += ds[cbase + oj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => panic!("unsupported spatial rank {r}"),
    }
    dx
}

/// Splits a conv parameter slice into the (out_ch, in_ch*k^d) weight matrix
/// and the bias.
fn conv_params<'a, F: NdFloat>(
    params: &'a [F],
    g: &ConvGeom,
    rank: usize,
) -> (Array2<F>, &'a [F]) {
    let taps = g.in_ch * g.k.pow(rank as u32);
    let w = Array2::from_shape_vec((g.out_ch, taps), params[..g.out_ch * taps].to_vec())
        .expect("shape matches");
    (w, &params[g.out_ch * taps..])
}

/// Core convolution: returns the output tensor and the unrolled input.
fn conv_forward<F: NdFloat>(
    x: &ArrayD<F>,
    params: &[F],
    g: &ConvGeom,
) -> (ArrayD<F>, Array2<F>) {
    let rank = x.ndim() - 2;
    let (w, bias) = conv_params(params, g, rank);
    let col = im2col(x, g);
    let out_mat = w.dot(&col); // (out_ch, n * prod(out))
    let n = x.shape()[0];
    let out_sp: Vec<usize> = x.shape()[2..].iter().map(|&d| g.out_len(d)).collect();
    let sp_len: usize = out_sp.iter().product();
    let mut y_shape = vec![n, g.out_ch];
    y_shape.extend(&out_sp);
    let mut y = ArrayD::<F>::zeros(y_shape);
    {
        let ys = y.as_slice_mut().expect("standard layout");
        let os = out_mat.as_slice().expect("standard layout");
        let cols = n * sp_len;
        for oc in 0..g.out_ch {
            let b = bias[oc];
            for ni in 0..n {
                let ybase = (ni * g.out_ch + oc) * sp_len;
                let obase = oc * cols + ni * sp_len;
                for s in 0..sp_len {
                    ys[ybase + s] = os[obase + s] + b;
                }
            }
        }
    }
    (y, col)
}

/// Gradients of a convolution given the cached unrolled input. Writes the
/// weight/bias gradients into `dparams` and returns dL/dx.
fn conv_backward<F: NdFloat>(
    dy: &ArrayD<F>,
    col: &Array2<F>,
    x_shape: &[usize],
    params: &[F],
    dparams: &mut [F],
    g: &ConvGeom,
) -> ArrayD<F> {
    let rank = x_shape.len() - 2;
    let (w, _) = conv_params(params, g, rank);
    let n = dy.shape()[0];
    let sp_len: usize = dy.shape()[2..].iter().product();
    let cols = n * sp_len;
    // permute dy (n, oc, sp) -> (oc, n*sp)
    let mut dy_mat = Array2::<F>::zeros((g.out_ch, cols));
    {
        let dm = dy_mat.as_slice_mut().expect("standard layout");
        let ds = dy.as_slice().expect("standard layout");
        for ni in 0..n {
            for oc in 0..g.out_ch {
                let src = (ni * g.out_ch + oc) * sp_len;
                let dst = oc * cols + ni * sp_len;
                dm[dst..dst + sp_len].copy_from_slice(&ds[src..src + sp_len]);
            }
        }
    }
    let dw = dy_mat.dot(&col.t()); // (out_ch, taps)
    let taps = dw.ncols();
    for (i, &v) in dw.as_slice().expect("standard layout").iter().enumerate() {
        dparams[i] += v;
    }
    for oc in 0..g.out_ch {
        let mut s = F::zero();
        for v in dy_mat.row(oc) {
            s += *v;
        }
        dparams[g.out_ch * taps + oc] += s;
    }
    let dcol = w.t().dot(&dy_mat);
    col2im(&dcol, x_shape, g)
}

fn lrelu_fwd<F: NdFloat>(x: &mut [F]) {
    let a = f::<F>(LEAKY_SLOPE);
    for v in x {
        if *v < F::zero() {
            *v *= a;
        }
    }
}

/// dL/dx from dL/dy using the post-activation signs (valid since the slope
/// is positive, so sign(y) == sign(x)).
fn lrelu_bwd<F: NdFloat>(dy: &mut [F], y: &[F]) {
    let a = f::<F>(LEAKY_SLOPE);
    for (d, &v) in dy.iter_mut().zip(y) {
        if v < F::zero() {
            *d *= a;
        }
    }
}

impl LayerSpec {
    /// Applies the layer. Returns the output and the backward cache.
    pub fn forward<F: NdFloat>(&self, params: &[F], x: &Tensor<F>) -> Result<(Tensor<F>, Cache<F>)> {
        match self {
            LayerSpec::Conv2d(g) | LayerSpec::Conv3d(g) => {
                let xin = x.spatial()?;
                let (y, col) = conv_forward(xin, params, g);
                Ok((
                    Tensor::Spatial(y),
                    Cache::Conv { col, x_shape: xin.shape().to_vec() },
                ))
            }
            LayerSpec::Res2d(g) | LayerSpec::Res3d(g) => {
                let xin = x.spatial()?;
                let half = self.n_params() / 2;
                let (pre1, col1) = conv_forward(xin, &params[..half], g);
                let mut h1 = pre1.clone();
                lrelu_fwd(h1.as_slice_mut().expect("standard layout"));
                let (mut pre2, col2) = conv_forward(&h1, &params[half..], g);
                pre2 += xin; // identity skip
                let mut y = pre2.clone();
                lrelu_fwd(y.as_slice_mut().expect("standard layout"));
                Ok((
                    Tensor::Spatial(y),
                    Cache::Res { col1, col2, pre1, pre_out: pre2 },
                ))
            }
            LayerSpec::Dense { inp, out } => {
                let xin = x.flat()?;
                if xin.ncols() != *inp {
                    return Err(QmapError::Shape(format!(
                        "dense layer expects {inp} features, got {}",
                        xin.ncols()
                    )));
                }
                let w = Array2::from_shape_vec((*out, *inp), params[..out * inp].to_vec())
                    .expect("shape matches");
                let bias = &params[out * inp..];
                let mut y = xin.dot(&w.t());
                for mut row in y.rows_mut() {
                    for (v, &b) in row.iter_mut().zip(bias) {
                        *v += b;
                    }
                }
                Ok((Tensor::Flat(y), Cache::Dense { x: xin.clone() }))
            }
            LayerSpec::LeakyRelu => {
                let mut y = x.clone();
                match &mut y {
                    Tensor::Spatial(a) => lrelu_fwd(a.as_slice_mut().expect("standard layout")),
                    Tensor::Flat(a) => lrelu_fwd(a.as_slice_mut().expect("standard layout")),
                }
                Ok((y.clone(), Cache::Lrelu { y }))
            }
            LayerSpec::GlobalAvgPool => {
                let xin = x.spatial()?;
                let n = xin.shape()[0];
                let c = xin.shape()[1];
                let sp_len: usize = xin.shape()[2..].iter().product();
                let norm = f::<F>(1.0 / sp_len as f64);
                let xs = xin.as_slice().expect("standard layout");
                let mut y = Array2::<F>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * sp_len;
                        let mut s = F::zero();
                        for v in &xs[base..base + sp_len] {
                            s += *v;
                        }
                        y[(ni, ci)] = s * norm;
                    }
                }
                Ok((
                    Tensor::Flat(y),
                    Cache::Gap { x_shape: xin.shape().to_vec() },
                ))
            }
        }
    }

    /// Propagates dL/dy back through the layer, accumulating parameter
    /// gradients into `dparams`.
    pub fn backward<F: NdFloat>(
        &self,
        params: &[F],
        dparams: &mut [F],
        dy: Tensor<F>,
        cache: &Cache<F>,
    ) -> Result<Tensor<F>> {
        match (self, cache) {
            (LayerSpec::Conv2d(g) | LayerSpec::Conv3d(g), Cache::Conv { col, x_shape }) => {
                let d = dy.spatial()?;
                Ok(Tensor::Spatial(conv_backward(d, col, x_shape, params, dparams, g)))
            }
            (
                LayerSpec::Res2d(g) | LayerSpec::Res3d(g),
                Cache::Res { col1, col2, pre1, pre_out },
            ) => {
                let half = self.n_params() / 2;
                let (dp1, dp2) = dparams.split_at_mut(half);
                let mut d_pre_out = dy.spatial()?.clone();
                lrelu_bwd(
                    d_pre_out.as_slice_mut().expect("standard layout"),
                    pre_out.as_slice().expect("standard layout"),
                );
                // through the second conv (input was lrelu(pre1))
                let mut dh1 = conv_backward(
                    &d_pre_out,
                    col2,
                    pre1.shape(),
                    &params[half..],
                    dp2,
                    g,
                );
                lrelu_bwd(
                    dh1.as_slice_mut().expect("standard layout"),
                    pre1.as_slice().expect("standard layout"),
                );
                let dx_main =
                    conv_backward(&dh1, col1, pre1.shape(), &params[..half], dp1, g);
                Ok(Tensor::Spatial(dx_main + &d_pre_out))
            }
            (LayerSpec::Dense { inp, out }, Cache::Dense { x }) => {
                let d = dy.flat()?;
                let w = Array2::from_shape_vec((*out, *inp), params[..out * inp].to_vec())
                    .expect("shape matches");
                let dw = d.t().dot(x); // (out, inp)
                for (i, &v) in dw.as_slice().expect("standard layout").iter().enumerate() {
                    dparams[i] += v;
                }
                for oc in 0..*out {
                    let mut s = F::zero();
                    for v in d.column(oc) {
                        s += *v;
                    }
                    dparams[out * inp + oc] += s;
                }
                Ok(Tensor::Flat(d.dot(&w)))
            }
            (LayerSpec::LeakyRelu, Cache::Lrelu { y }) => {
                let mut dx = dy;
                match (&mut dx, y) {
                    (Tensor::Spatial(d), Tensor::Spatial(yv)) => lrelu_bwd(
                        d.as_slice_mut().expect("standard layout"),
                        yv.as_slice().expect("standard layout"),
                    ),
                    (Tensor::Flat(d), Tensor::Flat(yv)) => lrelu_bwd(
                        d.as_slice_mut().expect("standard layout"),
                        yv.as_slice().expect("standard layout"),
                    ),
                    _ => return Err(QmapError::Shape("activation kind mismatch".into())),
                }
                Ok(dx)
            }
            (LayerSpec::GlobalAvgPool, Cache::Gap { x_shape }) => {
                let d = dy.flat()?;
                let sp_len: usize = x_shape[2..].iter().product();
                let norm = f::<F>(1.0 / sp_len as f64);
                let mut dx = ArrayD::<F>::zeros(x_shape.to_vec());
                let xs = dx.as_slice_mut().expect("standard layout");
                let (n, c) = (x_shape[0], x_shape[1]);
                for ni in 0..n {
                    for ci in 0..c {
                        let g = d[(ni, ci)] * norm;
                        let base = (ni * c + ci) * sp_len;
                        for v in &mut xs[base..base + sp_len] {
                            *v = g;
                        }
                    }
                }
                Ok(Tensor::Spatial(dx))
            }
            _ => Err(QmapError::Shape("layer/cache mismatch".into())),
        }
    }

    /// (fan_in, fan_out) for Xavier initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv2d(g) => Some((g.in_ch * g.k * g.k, g.out_ch * g.k * g.k)),
            LayerSpec::Conv3d(g) => {
                let k3 = g.k * g.k * g.k;
                Some((g.in_ch * k3, g.out_ch * k3))
            }
            LayerSpec::Res2d(g) => Some((g.in_ch * g.k * g.k, g.out_ch * g.k * g.k)),
            LayerSpec::Res3d(g) => {
                let k3 = g.k * g.k * g.k;
                Some((g.in_ch * k3, g.out_ch * k3))
            }
            LayerSpec::Dense { inp, out } => Some((*inp, *out)),
            LayerSpec::LeakyRelu | LayerSpec::GlobalAvgPool => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn im2col_identity_kernel_geometry() {
        // k=1, stride=1, pad=0: col is just a channel-major reshape
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            (0..8).map(|v| v as f64).collect(),
        )
        .unwrap();
        let g = ConvGeom { in_ch: 2, out_ch: 1, k: 1, stride: 1, pad: 0 };
        let col = im2col(&x, &g);
        assert_eq!(col.shape(), &[2, 4]);
        assert_eq!(col[(0, 0)], 0.0);
        assert_eq!(col[(1, 3)], 7.0);
    }

    #[test]
    fn conv_stride_and_padding_shapes() {
        let g = ConvGeom { in_ch: 3, out_ch: 5, k: 7, stride: 2, pad: 3 };
        assert_eq!(g.out_len(20), 10);
        assert_eq!(g.out_len(5), 3);
        let x = ArrayD::<f64>::zeros(IxDyn(&[2, 3, 20, 20]));
        let params = vec![0.0; g.params_2d()];
        let (y, _) = conv_forward(&x, &params, &g);
        assert_eq!(y.shape(), &[2, 5, 10, 10]);
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 input channel, 3x3 kernel, compare one output tap by hand
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            (1..=9).map(|v| v as f64).collect(),
        )
        .unwrap();
        let g = ConvGeom { in_ch: 1, out_ch: 1, k: 3, stride: 1, pad: 0 };
        let mut params = vec![0.0; g.params_2d()];
        for (i, p) in params.iter_mut().enumerate().take(9) {
            *p = (i + 1) as f64;
        }
        params[9] = 0.5; // bias
        let (y, _) = conv_forward(&x, &params, &g);
        // sum_{i} i * x_i = 1*1 + 2*2 + ... + 9*9 = 285
        assert_eq!(y.as_slice().unwrap(), &[285.5]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c
        let mut rng = crate::math::stream_rng(77, 0);
        use rand::Rng;
        let g = ConvGeom { in_ch: 2, out_ch: 1, k: 3, stride: 2, pad: 1 };
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 5, 5]), |_| rng.random::<f64>() - 0.5);
        let col = im2col(&x, &g);
        let c = Array2::from_shape_fn(col.dim(), |_| rng.random::<f64>() - 0.5);
        let lhs: f64 = col.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, x.shape(), &g);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
