//! Shifted overlapping crops with random flips, and the inverse mapping that
//! brings the two branch outputs back onto a common overlap grid.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RasterImage;
use crate::error::{ensure, Result};
use crate::Scalar;

/// Mirror flips applied to a crop after cutting it from the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flip {
    /// Mirror columns.
    pub horizontal: bool,
    /// Mirror rows.
    pub vertical: bool,
}

impl Flip {
    pub const ALL: [Flip; 4] = [
        Flip { horizontal: false, vertical: false },
        Flip { horizontal: true, vertical: false },
        Flip { horizontal: false, vertical: true },
        Flip { horizontal: true, vertical: true },
    ];

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Flip { horizontal: rng.random(), vertical: rng.random() }
    }

    /// Applies the flip to the last two axes of a (C, H, W) array.
    pub fn apply<T: Scalar>(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        let mut v = x;
        if self.vertical {
            v.invert_axis(Axis(1));
        }
        if self.horizontal {
            v.invert_axis(Axis(2));
        }
        v.to_owned()
    }

    /// Position in the flipped grid of pixel (i, j) of an h x w grid. Self-inverse.
    pub fn map(&self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        (
            if self.vertical { h - 1 - i } else { i },
            if self.horizontal { w - 1 - j } else { j },
        )
    }
}

#[derive(Debug, Clone)]
pub struct ViewPair<T> {
    /// Flipped crops, (C, S, S).
    pub view_a: Array3<T>,
    pub view_b: Array3<T>,
    /// Scene offset of crop b relative to crop a.
    pub offset: (isize, isize),
    pub flip_a: Flip,
    pub flip_b: Flip,
    pub crop_origin_a: (usize, usize),
    pub crop_origin_b: (usize, usize),
    pub size: usize,
}

/// Geometry of a view pair without the pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairGeometry {
    pub size: usize,
    pub offset: (isize, isize),
    pub flip_a: Flip,
    pub flip_b: Flip,
    pub crop_origin_a: (usize, usize),
}

impl PairGeometry {
    pub fn crop_origin_b(&self) -> (usize, usize) {
        (
            (self.crop_origin_a.0 as isize + self.offset.0) as usize,
            (self.crop_origin_a.1 as isize + self.offset.1) as usize,
        )
    }

    pub fn overlap_dims(&self) -> (usize, usize) {
        (self.size - self.offset.0.unsigned_abs(), self.size - self.offset.1.unsigned_abs())
    }

    /// Top-left of the overlap inside the unflipped crop a.
    pub fn overlap_origin_a(&self) -> (usize, usize) {
        (self.offset.0.max(0) as usize, self.offset.1.max(0) as usize)
    }

    pub fn overlap_origin_b(&self) -> (usize, usize) {
        ((-self.offset.0).max(0) as usize, (-self.offset.1).max(0) as usize)
    }

    /// Pixel of the flipped view a (or b) showing overlap pixel (i, j).
    pub fn overlap_to_view(&self, branch_b: bool, i: usize, j: usize) -> (usize, usize) {
        let (o, f) = if branch_b {
            (self.overlap_origin_b(), self.flip_b)
        } else {
            (self.overlap_origin_a(), self.flip_a)
        };
        f.map(o.0 + i, o.1 + j, self.size, self.size)
    }

    /// Scene coordinate of pixel (i, j) of the flipped view a (or b).
    pub fn view_to_scene(&self, branch_b: bool, i: usize, j: usize) -> (usize, usize) {
        let (o, f) = if branch_b {
            (self.crop_origin_b(), self.flip_b)
        } else {
            (self.crop_origin_a, self.flip_a)
        };
        let (u, v) = f.map(i, j, self.size, self.size);
        (o.0 + u, o.1 + v)
    }

    /// Overlap crop of the unflipped branch output.
    pub fn align_one<T: Scalar>(&self, f: ArrayView3<'_, T>, branch_b: bool) -> Array3<T> {
        let (flip, o) = if branch_b {
            (self.flip_b, self.overlap_origin_b())
        } else {
            (self.flip_a, self.overlap_origin_a())
        };
        let (oh, ow) = self.overlap_dims();
        let unflipped = flip.apply(f);
        unflipped.slice(s![.., o.0..o.0 + oh, o.1..o.1 + ow]).to_owned()
    }

    /// Adjoint of [`align_one`](Self::align_one): scatters an overlap gradient
    /// back onto the (C, S, S) branch output grid.
    pub fn scatter_one<T: Scalar>(&self, g: ArrayView3<'_, T>, branch_b: bool) -> Array3<T> {
        let (flip, o) = if branch_b {
            (self.flip_b, self.overlap_origin_b())
        } else {
            (self.flip_a, self.overlap_origin_a())
        };
        let (oh, ow) = self.overlap_dims();
        let mut full = Array3::<T>::zeros((g.dim().0, self.size, self.size));
        full.slice_mut(s![.., o.0..o.0 + oh, o.1..o.1 + ow]).assign(&g);
        flip.apply(full.view())
    }
}

impl<T: Scalar> ViewPair<T> {
    pub fn geometry(&self) -> PairGeometry {
        PairGeometry {
            size: self.size,
            offset: self.offset,
            flip_a: self.flip_a,
            flip_b: self.flip_b,
            crop_origin_a: self.crop_origin_a,
        }
    }

    /// Unflipped crop a, used for superpixel segmentation.
    pub fn scene_crop_a(&self) -> Array3<T> {
        self.flip_a.apply(self.view_a.view())
    }
}

/// Options controlling view sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub crop_size: usize,
    pub max_offset: usize,
    pub flips: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { crop_size: 64, max_offset: 8, flips: true }
    }
}

/// Cuts a pair of shifted, independently flipped crops of the same scene
/// location from two co-registered images (possibly the same image).
pub fn sample_view_pair<T: Scalar>(
    image_a: &RasterImage<T>,
    image_b: &RasterImage<T>,
    cfg: &ViewConfig,
    seed: u64,
) -> Result<ViewPair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_view_pair_with(image_a, image_b, cfg, &mut rng)
}

pub fn sample_view_pair_with<T: Scalar, R: Rng>(
    image_a: &RasterImage<T>,
    image_b: &RasterImage<T>,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<ViewPair<T>> {
    let (sz, m) = (cfg.crop_size, cfg.max_offset);
    ensure!(sz >= 1, Parameter, "crop size must be positive");
    ensure!(m < sz, Parameter, "max_offset {m} must be smaller than crop size {sz}");
    ensure!(
        image_a.data.dim() == image_b.data.dim(),
        Shape,
        "view images differ in shape: {:?} vs {:?}",
        image_a.data.dim(),
        image_b.data.dim()
    );
    let (_, h, w) = image_a.data.dim();
    ensure!(
        h >= sz + m && w >= sz + m,
        Parameter,
        "scene {h}x{w} too small for crop {sz} with max offset {m}"
    );
    let mi = m as i64;
    let dy = rng.random_range(-mi..=mi) as isize;
    let dx = rng.random_range(-mi..=mi) as isize;
    // Origin a is chosen so that both crops stay inside the scene.
    let ra = rng.random_range((-dy).max(0) as usize..=h - sz - dy.max(0) as usize);
    let ca = rng.random_range((-dx).max(0) as usize..=w - sz - dx.max(0) as usize);
    let (flip_a, flip_b) = if cfg.flips {
        (Flip::random(rng), Flip::random(rng))
    } else {
        (Flip::default(), Flip::default())
    };
    let rb = (ra as isize + dy) as usize;
    let cb = (ca as isize + dx) as usize;
    let view_a = flip_a.apply(image_a.data.slice(s![.., ra..ra + sz, ca..ca + sz]));
    let view_b = flip_b.apply(image_b.data.slice(s![.., rb..rb + sz, cb..cb + sz]));
    Ok(ViewPair {
        view_a,
        view_b,
        offset: (dy, dx),
        flip_a,
        flip_b,
        crop_origin_a: (ra, ca),
        crop_origin_b: (rb, cb),
        size: sz,
    })
}

/// Inverts the flips on both branch outputs (D, S, S) and crops them to the
/// common overlap, so that equal indices refer to the same scene location.
pub fn align_overlap<T: Scalar>(
    f_a: ArrayView3<'_, T>,
    f_b: ArrayView3<'_, T>,
    geom: &PairGeometry,
) -> Result<(Array3<T>, Array3<T>)> {
    let expected = (geom.size, geom.size);
    for f in [&f_a, &f_b] {
        let (_, h, w) = f.dim();
        ensure!((h, w) == expected, Shape, "feature grid {h}x{w} does not match crop size {}", geom.size);
    }
    ensure!(f_a.dim().0 == f_b.dim().0, Shape, "branch feature dims differ");
    Ok((geom.align_one(f_a, false), geom.align_one(f_b, true)))
}
