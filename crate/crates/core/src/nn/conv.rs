use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{join, Parameterized};
use crate::Scalar;

/// Square-kernel 2-D convolution with "same" padding (`k / 2` on each side).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// (out, in, k, k)
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    /// Zero padding on each border. Defaults to `k / 2`.
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = Array4::from_shape_fn((cout, cin, k, k), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        Self { weight, bias: Array1::zeros(cout), stride, padding: k / 2 }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let p = self.padding;
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).expect("contiguous weight")
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    /// Returns the output and the input (kept for the backward pass).
    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.output_dims(h, w);
        let cout = self.out_channels();
        let wm = self.weight_matrix();
        let mut y = Array4::<T>::zeros((n, cout, ho, wo));
        for b in 0..n {
            let xb = x.index_axis(Axis(0), b);
            let mut yb = y
                .index_axis_mut(Axis(0), b)
                .into_shape_with_order((cout, ho * wo))
                .expect("contiguous output");
            for (o, mut row) in yb.outer_iter_mut().enumerate() {
                row.fill(self.bias[o]);
            }
            if self.is_pointwise() {
                let xm = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(T::one(), &wm, &xm, T::one(), &mut yb);
            } else {
                let cols = self.im2col(xb.as_slice().expect("contiguous"), c, h, w, ho, wo);
                general_mat_mul(T::one(), &wm, &cols, T::one(), &mut yb);
            }
        }
        (y, x)
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input gradient.
    pub fn backward(&self, input: &Array4<T>, dy: &Array4<T>, grads: &mut Conv2d<T>) -> Array4<T> {
        let dy = dy.as_standard_layout();
        let (n, c, h, w) = input.dim();
        let (ho, wo) = self.output_dims(h, w);
        let cout = self.out_channels();
        let k = self.kernel();
        let wm = self.weight_matrix();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let mut dwm = Array2::<T>::zeros((cout, c * k * k));
        for b in 0..n {
            let dyb = dy
                .index_axis(Axis(0), b)
                .into_shape_with_order((cout, ho * wo))
                .expect("contiguous grad");
            for o in 0..cout {
                grads.bias[o] += dyb.row(o).sum();
            }
            let xb = input.index_axis(Axis(0), b);
            if self.is_pointwise() {
                let xm = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(T::one(), &dyb, &xm.t(), T::one(), &mut dwm);
                let mut dxb = dx
                    .index_axis_mut(Axis(0), b)
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous");
                general_mat_mul(T::one(), &wm.t(), &dyb, T::zero(), &mut dxb);
            } else {
                let cols = self.im2col(xb.as_slice().expect("contiguous"), c, h, w, ho, wo);
                general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), &mut dwm);
                let mut dcols = Array2::<T>::zeros((c * k * k, ho * wo));
                general_mat_mul(T::one(), &wm.t(), &dyb, T::zero(), &mut dcols);
                let mut dxb = dx.index_axis_mut(Axis(0), b);
                self.col2im(
                    dcols.as_slice().expect("contiguous"),
                    dxb.as_slice_mut().expect("contiguous"),
                    c,
                    h,
                    w,
                    ho,
                    wo,
                );
            }
        }
        let mut gw = grads
            .weight
            .view_mut()
            .into_shape_with_order((cout, c * k * k))
            .expect("contiguous weight grad");
        gw += &dwm;
        dx
    }

    fn im2col(&self, x: &[T], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Array2<T> {
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding as isize);
        let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
        let out = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, ho: usize, wo: usize) {
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding as isize);
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        f(join(prefix, "weight"), self.weight.view().into_dyn());
        f(join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f(join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Direct (loop) convolution used to cross-check the im2col path in tests.
#[cfg(test)]
pub(crate) fn conv_direct<T: Scalar>(conv: &Conv2d<T>, x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = conv.output_dims(h, w);
    let k = conv.kernel();
    let p = conv.padding as isize;
    let mut y = Array4::zeros((n, conv.out_channels(), ho, wo));
    for b in 0..n {
        for o in 0..conv.out_channels() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky as isize - p;
                                let ix = (ox * conv.stride) as isize + kx as isize - p;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += conv.weight[[o, ci, ky, kx]]
                                        * x[[b, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[b, o, oy, ox]] = acc;
                }
            }
        }
    }
    y
}
