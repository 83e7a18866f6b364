//! Graph-based superpixels (Felzenszwalb-Huttenlocher) and per-segment anchor
//! selection for the contrastive loss.

use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::filter::gaussian_blur;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub labels: Array2<usize>,
    pub num_segments: usize,
}

impl SegmentMap {
    /// Gray levels spread over 0..=255 for visual inspection.
    pub fn to_gray(&self) -> Array2<u8> {
        self.labels.mapv(|l| ((l * 97 + 31) % 256) as u8)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_segments];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    pub scale: f64,
    pub sigma: f64,
    pub min_size: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self { scale: 200.0, sigma: 0.5, min_size: 16 }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Merge threshold: internal difference plus scale / size.
    threshold: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize, init: f64) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], threshold: vec![init; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        big
    }
}

/// Three-channel composite scaled per band to 0..=255: the first three bands,
/// or bands cycled when fewer are available.
fn composite<T: Scalar>(image: ArrayView3<'_, T>) -> Vec<Array2<f64>> {
    let (c, h, w) = image.dim();
    (0..3)
        .map(|k| {
            let band = image.index_axis(ndarray::Axis(0), k % c).mapv(|v| v.as_f64());
            let lo = band.fold(f64::INFINITY, |m, &v| m.min(v));
            let hi = band.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if hi > lo {
                band.mapv(|v| (v - lo) / (hi - lo) * 255.0)
            } else {
                Array2::zeros((h, w))
            }
        })
        .collect()
}

fn edge_weight(chan: &[Array2<f64>], a: (usize, usize), b: (usize, usize)) -> f64 {
    chan.iter().map(|c| (c[a] - c[b]).powi(2)).sum::<f64>().sqrt()
}

/// Graph edges in raster order, sorted stably by weight.
fn sorted_edges(chan: &[Array2<f64>], eight: bool) -> Vec<(f64, usize, usize)> {
    let (h, w) = chan[0].dim();
    let mut edges = Vec::with_capacity(h * w * if eight { 4 } else { 2 });
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let mut push = |ni: usize, nj: usize| edges.push((edge_weight(chan, (i, j), (ni, nj)), p, ni * w + nj));
            if j + 1 < w {
                push(i, j + 1);
            }
            if i + 1 < h {
                push(i + 1, j);
                if eight && j + 1 < w {
                    push(i + 1, j + 1);
                }
                if eight && j > 0 {
                    push(i + 1, j - 1);
                }
            }
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));
    edges
}

/// Segments a (C, H, W) image.
///
/// Greedy merging runs on the 8-connected grid; components below `min_size`
/// are then merged into their cheapest neighbour. Because a segment must be
/// 4-connected, components joined only through diagonals are split apart and
/// any resulting piece below `min_size` is re-merged along 4-neighbour edges.
/// Labels are numbered in order of each segment's first pixel in raster order.
pub fn felzenszwalb_segment<T: Scalar>(image: ArrayView3<'_, T>, params: &SegmentParams) -> Result<SegmentMap> {
    ensure!(params.scale > 0.0, Parameter, "scale must be positive, got {}", params.scale);
    ensure!(params.sigma >= 0.0, Parameter, "sigma must be non-negative, got {}", params.sigma);
    ensure!(image.iter().all(|v| v.is_finite()), Input, "image must be finite");
    let (_, h, w) = image.dim();
    ensure!(h > 0 && w > 0, Input, "empty image");
    let chan: Vec<Array2<f64>> = composite(image).iter().map(|c| gaussian_blur(c, params.sigma)).collect();
    let k = params.scale;

    let edges8 = sorted_edges(&chan, true);
    let mut ds = DisjointSet::new(h * w, k);
    for &(wt, a, b) in &edges8 {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && wt <= ds.threshold[ra] && wt <= ds.threshold[rb] {
            let r = ds.union(ra, rb);
            ds.threshold[r] = wt + k / ds.size[r] as f64;
        }
    }
    for &(_, a, b) in &edges8 {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < params.min_size || ds.size[rb] < params.min_size) {
            ds.union(ra, rb);
        }
    }

    // Split into 4-connected pieces.
    let root: Vec<usize> = (0..h * w).map(|p| ds.find(p)).collect();
    let mut piece = vec![usize::MAX; h * w];
    let mut pieces = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if piece[start] != usize::MAX {
            continue;
        }
        piece[start] = pieces;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if piece[q] == usize::MAX && root[q] == root[p] {
                    piece[q] = pieces;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        pieces += 1;
    }
    let mut ps = DisjointSet::new(pieces, 0.0);
    ps.size = vec![0; pieces];
    piece.iter().for_each(|&q| ps.size[q] += 1);
    for &(_, a, b) in &sorted_edges(&chan, false) {
        let (ra, rb) = (ps.find(piece[a]), ps.find(piece[b]));
        if ra != rb && (ps.size[ra] < params.min_size || ps.size[rb] < params.min_size) {
            ps.union(ra, rb);
        }
    }

    let mut canon = vec![usize::MAX; pieces];
    let mut next = 0;
    let mut labels = Array2::<usize>::zeros((h, w));
    for p in 0..h * w {
        let r = ps.find(piece[p]);
        if canon[r] == usize::MAX {
            canon[r] = next;
            next += 1;
        }
        labels[[p / w, p % w]] = canon[r];
    }
    Ok(SegmentMap { labels, num_segments: next })
}

/// Draws `per_segment` pixels uniformly from each segment's intersection with
/// `mask` (without replacement while the intersection is large enough).
/// Segments are visited in label order; segments outside the mask yield nothing.
pub fn sample_anchors(
    seg: &SegmentMap,
    mask: ArrayView2<'_, bool>,
    per_segment: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_anchors_with(seg, mask, per_segment, &mut rng)
}

pub fn sample_anchors_with<R: Rng>(
    seg: &SegmentMap,
    mask: ArrayView2<'_, bool>,
    per_segment: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    ensure!(mask.dim() == seg.labels.dim(), Shape, "mask and segment map differ in shape");
    ensure!(mask.iter().any(|&m| m), Input, "anchor mask is empty");
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); seg.num_segments];
    for ((i, j), &l) in seg.labels.indexed_iter() {
        if mask[[i, j]] {
            members[l].push((i, j));
        }
    }
    let mut out = Vec::new();
    for m in members.iter().filter(|m| !m.is_empty()) {
        let distinct = per_segment.min(m.len());
        out.extend(index::sample(rng, m.len(), distinct).iter().map(|k| m[k]));
        for _ in distinct..per_segment {
            out.push(m[rng.random_range(0..m.len())]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::Array3;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn params(scale: f64, sigma: f64, min_size: usize) -> SegmentParams {
        SegmentParams { scale, sigma, min_size }
    }

    fn check_valid(seg: &SegmentMap) {
        let sizes = seg.sizes();
        assert!(sizes.iter().all(|&s| s > 0));
        // Canonical numbering and 4-connectivity.
        let (h, w) = seg.labels.dim();
        let mut seen = 0;
        for &l in seg.labels.iter() {
            assert!(l <= seen);
            if l == seen {
                seen += 1;
            }
        }
        for l in 0..seg.num_segments {
            let start = seg.labels.indexed_iter().find(|(_, &v)| v == l).unwrap().0;
            let mut visited = Array2::from_elem((h, w), false);
            let mut stack = vec![start];
            visited[start] = true;
            let mut count = 0;
            while let Some((i, j)) = stack.pop() {
                count += 1;
                let nb = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
                for (a, b) in nb {
                    if a < h && b < w && !visited[[a, b]] && seg.labels[[a, b]] == l {
                        visited[[a, b]] = true;
                        stack.push((a, b));
                    }
                }
            }
            assert_eq!(count, sizes[l], "segment {l} is not 4-connected");
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
        let blobs = gaussian_blur(&base, 2.0);
        Array3::from_shape_fn((3, h, w), |(c, i, j)| blobs[[i, j]] * (c + 1) as f64 + 0.05 * rng.random::<f64>())
    }

    #[test]
    fn constant_image_is_one_segment() {
        let img = Array3::from_elem((4, 12, 9), 0.3f64);
        let seg = felzenszwalb_segment(img.view(), &SegmentParams::default()).unwrap();
        assert_eq!(seg.num_segments, 1);
    }

    #[test]
    fn two_halves_split_at_the_column_boundary() {
        let img = Array3::from_shape_fn((1, 16, 16), |(_, _, j)| if j < 8 { 0.0 } else { 100.0f64 });
        let seg = felzenszwalb_segment(img.view(), &params(10.0, 0.0, 1)).unwrap();
        assert_eq!(seg.num_segments, 2);
        for ((_, j), &l) in seg.labels.indexed_iter() {
            assert_eq!(l, usize::from(j >= 8));
        }
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let img = Array3::<f64>::zeros((1, 4, 4));
        assert!(matches!(felzenszwalb_segment(img.view(), &params(0.0, 0.5, 1)), Err(Error::Parameter(_))));
    }

    #[test]
    fn diagonal_only_joins_are_split() {
        // A checkerboard merges through diagonals on the 8-grid.
        let img = Array3::from_shape_fn((1, 6, 6), |(_, i, j)| ((i + j) % 2) as f64 * 10.0);
        let seg = felzenszwalb_segment(img.view(), &params(1.0, 0.0, 1)).unwrap();
        check_valid(&seg);
    }

    #[test]
    fn segmentation_is_stable_across_runs() {
        let img = random_image(4, 32, 32);
        let a = felzenszwalb_segment(img.view(), &SegmentParams::default()).unwrap();
        for _ in 0..3 {
            assert_eq!(felzenszwalb_segment(img.view(), &SegmentParams::default()).unwrap(), a);
        }
        check_valid(&a);
    }

    #[test]
    fn hundredfold_scale_increase_never_adds_segments() {
        let sweep = [1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0, 10000.0];
        for seed in 0..6 {
            let img = random_image(seed, 32, 32);
            let counts: Vec<usize> = sweep
                .iter()
                .map(|&scale| felzenszwalb_segment(img.view(), &params(scale, 0.5, 16)).unwrap().num_segments)
                .collect();
            for i in 0..sweep.len() - 4 {
                assert!(counts[i + 4] <= counts[i], "seed {seed}: {counts:?}");
            }
            assert!(counts[sweep.len() - 1] <= *counts.iter().min().unwrap());
        }
    }

    #[test]
    fn greedy_merge_is_not_monotone_at_fine_scale_steps() {
        // Known counterexample: a larger scale lets an early merge absorb a
        // pixel that would otherwise bridge two later merges.
        let img = random_image(1, 32, 32);
        let n5 = felzenszwalb_segment(img.view(), &params(5.0, 0.5, 16)).unwrap().num_segments;
        let n20 = felzenszwalb_segment(img.view(), &params(20.0, 0.5, 16)).unwrap().num_segments;
        assert!(n20 > n5, "{n20} vs {n5}");
    }

    #[test]
    fn anchors_respect_mask_and_cardinality() {
        let seg = SegmentMap { labels: Array2::zeros((4, 4)), num_segments: 1 };
        let mask = Array2::from_shape_fn((4, 4), |(i, _)| i >= 2);
        let a = sample_anchors(&seg, mask.view(), 1, 3).unwrap();
        assert_eq!(a.len(), 1);
        assert!(mask[a[0]]);

        let labels = Array2::from_shape_fn((4, 4), |(_, j)| usize::from(j >= 2));
        let seg = SegmentMap { labels, num_segments: 2 };
        let mask = Array2::from_shape_fn((4, 4), |(_, j)| j < 2);
        let a = sample_anchors(&seg, mask.view(), 3, 1).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|&(_, j)| j < 2));
        assert_eq!(a, sample_anchors(&seg, mask.view(), 3, 1).unwrap());

        let empty = Array2::from_elem((4, 4), false);
        assert!(matches!(sample_anchors(&seg, empty.view(), 1, 0), Err(Error::Input(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn labels_cover_range_and_are_connected(seed in 0u64..1000, h in 2usize..20, w in 2usize..20, min in 1usize..20) {
            let img = random_image(seed, h, w);
            let seg = felzenszwalb_segment(img.view(), &params(50.0, 0.5, min)).unwrap();
            check_valid(&seg);
            prop_assert!(seg.labels.iter().all(|&l| l < seg.num_segments));
        }
    }
}
