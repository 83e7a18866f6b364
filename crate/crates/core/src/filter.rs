use ndarray::Array2;

/// Separable Gaussian blur with mirrored borders; kernel truncated at 4 sigma.
/// `sigma <= 0` returns a copy.
pub(crate) fn gaussian_blur(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = x.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * n;
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - 1 - m;
        }
        m as usize
    };
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * x[[i, reflect(j as isize + k as isize - radius, w)]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect(i as isize + k as isize - radius, h), j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants_and_mass() {
        let c = Array2::from_elem((5, 7), 3.0);
        let b = gaussian_blur(&c, 1.3);
        assert!(b.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let mut d = Array2::<f64>::zeros((21, 21));
        d[[10, 10]] = 1.0;
        let b = gaussian_blur(&d, 1.0);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert!((b[[10, 9]] - b[[10, 11]]).abs() < 1e-15);
        assert!(b[[10, 10]] > b[[10, 11]]);
    }
}
