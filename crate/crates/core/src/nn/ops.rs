use ndarray::{concatenate, s, Array4, Axis, Zip};

use crate::Scalar;

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// `y` is the forward output of [`relu`].
pub fn relu_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    in_dims: (usize, usize, usize, usize),
    /// Winner offset (0..4) inside each 2x2 window, raster order.
    argmax: Vec<u8>,
}

/// 2x2 max pooling with stride 2. Height and width must be even.
pub fn maxpool2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((n, c, ho, wo));
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = x[[b, ch, 2 * oy, 2 * ox]];
                    let mut arg = 0u8;
                    for k in 1..4u8 {
                        let v = x[[b, ch, 2 * oy + (k as usize >> 1), 2 * ox + (k as usize & 1)]];
                        if v > best {
                            best = v;
                            arg = k;
                        }
                    }
                    y[[b, ch, oy, ox]] = best;
                    argmax.push(arg);
                }
            }
        }
    }
    (y, PoolCache { in_dims: (n, c, h, w), argmax })
}

pub fn maxpool2_backward<T: Scalar>(cache: &PoolCache, dy: &Array4<T>) -> Array4<T> {
    let mut dx = Array4::<T>::zeros(cache.in_dims);
    let (n, c, ho, wo) = dy.dim();
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let k = cache.argmax[i] as usize;
                    dx[[b, ch, 2 * oy + (k >> 1), 2 * ox + (k & 1)]] += dy[[b, ch, oy, ox]];
                    i += 1;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            y.slice_mut(s![.., .., dy..;2, dx..;2]).assign(x);
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::<T>::zeros((n, c, h / 2, w / 2));
    for oy in 0..2 {
        for ox in 0..2 {
            dx += &dy.slice(s![.., .., oy..;2, ox..;2]);
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn concat_channels_backward<T: Scalar>(dy: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        dy.slice(s![.., ..first, .., ..]).to_owned(),
        dy.slice(s![.., first.., .., ..]).to_owned(),
    )
}
