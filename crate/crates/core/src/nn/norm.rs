use ndarray::{Array1, Array4, ArrayViewD, ArrayViewMutD, Axis, Zip};

use super::{join, Mode, Parameterized};
use crate::Scalar;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    mode: Mode,
    /// Batch mean and unbiased variance; `None` in eval mode.
    batch_stats: Option<(Array1<T>, Array1<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ch in 0..c {
                    let plane = x.index_axis(Axis(1), ch);
                    let m = plane.sum() / T::from_usize_lossy(count);
                    let v = plane.fold(T::zero(), |acc, &z| acc + (z - m) * (z - m))
                        / T::from_usize_lossy(count);
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = if count > 1 {
                    var.mapv(|v| v * T::from_usize_lossy(count) / T::from_usize_lossy(count - 1))
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let mut xhat = x.to_owned();
        let mut y = Array4::<T>::zeros((n, c, h, w));
        for ch in 0..c {
            let (m, s, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|z| (z - m) * s);
            Zip::from(y.index_axis_mut(Axis(1), ch))
                .and(&xh)
                .for_each(|yo, &xv| *yo = g * xv + b);
        }
        (y, BnCache { xhat, inv_std, mode, batch_stats })
    }

    pub fn update_running_stats(&mut self, cache: &BnCache<T>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = self.momentum;
            Zip::from(&mut self.running_mean)
                .and(mean)
                .for_each(|r, &v| *r = (T::one() - m) * *r + m * v);
            Zip::from(&mut self.running_var)
                .and(var)
                .for_each(|r, &v| *r = (T::one() - m) * *r + m * v);
        }
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Array4<T>, grads: &mut BatchNorm2d<T>) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let count = T::from_usize_lossy(n * h * w);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = Zip::from(&dyc).and(&xh).fold(T::zero(), |acc, &d, &x| acc + d * x);
            grads.gamma[ch] += sum_dy_xh;
            grads.beta[ch] += sum_dy;
            let g = self.gamma[ch];
            let s = cache.inv_std[ch];
            let dxc = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Train => {
                    let k = g * s / count;
                    Zip::from(dxc).and(&dyc).and(&xh).for_each(|o, &d, &x| {
                        *o = k * (count * d - sum_dy - x * sum_dy_xh);
                    });
                }
                Mode::Eval => {
                    Zip::from(dxc).and(&dyc).for_each(|o, &d| *o = g * s * d);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        f(join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f(join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {
        f(join(prefix, "running_mean"), self.running_mean.view().into_dyn());
        f(join(prefix, "running_var"), self.running_var.view().into_dyn());
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>)) {
        f(join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
        f(join(prefix, "running_var"), self.running_var.view_mut().into_dyn());
    }
}
