//! Rasters, synthetic multi-temporal scenes, and file formats.
//!
//! # Native raster container
//!
//! All integers little-endian:
//!
//! | offset | size | field                                           |
//! |--------|------|-------------------------------------------------|
//! | 0      | 4    | magic `PXRS`                                    |
//! | 4      | 2    | format version (1)                              |
//! | 6      | 1    | dtype code: 0 = f32, 1 = f64, 2 = u8, 3 = u16   |
//! | 7      | 1    | reserved, 0                                     |
//! | 8      | 4    | bands                                           |
//! | 12     | 4    | height                                          |
//! | 16     | 4    | width                                           |
//! | 20     | ..   | samples, band-major then row-major              |
//!
//! Integer rasters load as their raw values; only GeoTIFF import rescales.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::filter::gaussian_blur;
use crate::model::DOWNSAMPLE;
use crate::scalar::DType;
use crate::Scalar;

pub const RASTER_MAGIC: &[u8; 4] = b"PXRS";
pub const RASTER_VERSION: u16 = 1;

/// A multi-band image stored as (bands, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> RasterImage<T> {
    pub fn new(data: Array3<T>) -> Self {
        Self { data }
    }

    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn value_range(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Stacks images of identical shape into a (B, C, H, W) batch.
    pub fn batch(images: &[&RasterImage<T>]) -> Result<Array4<T>> {
        ensure!(!images.is_empty(), Input, "empty image batch");
        let dim = images[0].data.dim();
        ensure!(images.iter().all(|im| im.data.dim() == dim), Shape, "images in a batch differ in shape");
        let views: Vec<_> = images.iter().map(|im| im.data.view()).collect();
        Ok(ndarray::stack(Axis(0), &views).expect("equal shapes"))
    }

    pub fn cast<U: Scalar>(&self) -> RasterImage<U> {
        RasterImage::new(self.data.mapv(|v| U::lit(v.as_f64())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub bands: usize,
    pub n_timestamps: usize,
    pub change_fraction: f64,
    pub season_fraction: f64,
    pub season_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            bands: 4,
            n_timestamps: 6,
            change_fraction: 0.1,
            season_fraction: 0.2,
            season_amplitude: 0.2,
            noise_sigma: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.size >= DOWNSAMPLE && self.size.is_multiple_of(DOWNSAMPLE),
            Parameter,
            "scene size {} must be a positive multiple of {DOWNSAMPLE}",
            self.size
        );
        ensure!(self.bands >= 1, Parameter, "bands must be >= 1");
        ensure!(self.n_timestamps >= 1, Parameter, "n_timestamps must be >= 1");
        for (name, f) in [("change_fraction", self.change_fraction), ("season_fraction", self.season_fraction)] {
            ensure!((0.0..=1.0).contains(&f), Parameter, "{name} {f} outside [0, 1]");
        }
        ensure!(
            self.change_fraction + self.season_fraction <= 1.0,
            Parameter,
            "change_fraction + season_fraction exceeds 1"
        );
        ensure!(
            self.n_timestamps >= 2 || self.change_fraction == 0.0,
            Parameter,
            "planting change needs at least 2 timestamps"
        );
        ensure!(
            self.season_amplitude >= 0.0 && self.noise_sigma >= 0.0,
            Parameter,
            "amplitude and noise must be non-negative"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene<T> {
    pub timestamps: Vec<RasterImage<T>>,
    /// Pixels whose material differs between `pre_index` and `post_index`.
    pub change_mask: Array2<bool>,
    /// Pixels with periodic radiometric flicker and no material change.
    pub season_mask: Array2<bool>,
    /// First timestamp showing the post-change material.
    pub change_time: usize,
    pub pre_index: usize,
    pub post_index: usize,
    pub seed: u64,
}

const BASE_MATERIALS: usize = 5;
const NEW_MATERIALS: usize = 2;

/// Material index of the seasonal crop class.
fn crop_material() -> usize {
    BASE_MATERIALS
}

/// Generates a scene: smooth land-cover blobs of a few spectral materials, a
/// seasonal "crop" material on `season_fraction` of pixels that oscillates
/// sinusoidally over the timestamps, and convex polygons of new material
/// planted at `change_time` on `change_fraction` of the remaining pixels.
pub fn synth_scene<T: Scalar>(seed: u64, cfg: &SynthConfig) -> Result<SyntheticScene<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let total = n * n;
    let smooth = n as f64 / 10.0;
    let field = |rng: &mut ChaCha8Rng| {
        let white = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        gaussian_blur(&white, smooth)
    };

    let materials = BASE_MATERIALS + 1 + NEW_MATERIALS;
    let signatures = Array2::from_shape_fn((materials, cfg.bands), |_| rng.random_range(0.1..0.9));
    let response = Array2::from_shape_fn((1, cfg.bands), |_| rng.random_range(-1.0..1.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let fields: Vec<Array2<f64>> = (0..BASE_MATERIALS).map(|_| field(&mut rng)).collect();
    let mut cover = Array2::from_shape_fn((n, n), |(i, j)| {
        (0..BASE_MATERIALS).fold(0, |best, k| if fields[k][[i, j]] > fields[best][[i, j]] { k } else { best })
    });

    let season_target = (cfg.season_fraction * total as f64).round() as usize;
    let mut season_mask = Array2::from_elem((n, n), false);
    if season_target > 0 {
        let f = field(&mut rng);
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| f.as_slice().unwrap()[b].total_cmp(&f.as_slice().unwrap()[a]));
        for &p in &order[..season_target] {
            season_mask[[p / n, p % n]] = true;
            cover[[p / n, p % n]] = crop_material();
        }
    }

    let change_target = (cfg.change_fraction * total as f64).round() as usize;
    let mut change_mask = Array2::from_elem((n, n), false);
    let mut post_cover = cover.clone();
    let mut changed = 0;
    let max_radius = (n as f64 / 6.0).max(2.0);
    let mut attempts = 0;
    while changed < change_target && attempts < 10_000 {
        attempts += 1;
        let new_material = BASE_MATERIALS + 1 + rng.random_range(0..NEW_MATERIALS);
        let poly = random_convex_polygon(&mut rng, n, max_radius);
        for i in 0..n {
            for j in 0..n {
                if changed >= change_target {
                    break;
                }
                if season_mask[[i, j]] || change_mask[[i, j]] || !inside_convex(&poly, i as f64 + 0.5, j as f64 + 0.5) {
                    continue;
                }
                change_mask[[i, j]] = true;
                post_cover[[i, j]] = new_material;
                changed += 1;
            }
        }
    }

    let texture: Vec<Array2<f64>> = (0..cfg.bands)
        .map(|_| {
            let white = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
            gaussian_blur(&white, 1.0) * 0.2
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let t_count = cfg.n_timestamps;
    let change_time = t_count.div_ceil(2).max(1);
    let mut timestamps = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let season = (std::f64::consts::TAU * t as f64 / t_count as f64 + phase).sin() * cfg.season_amplitude;
        let layer_cover = if t >= change_time { &post_cover } else { &cover };
        let data = Array3::from_shape_fn((cfg.bands, n, n), |(b, i, j)| {
            let mut v = signatures[[layer_cover[[i, j]], b]] + texture[b][[i, j]];
            if season_mask[[i, j]] {
                v += season * response[[0, b]];
            }
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            T::lit(v)
        });
        timestamps.push(RasterImage::new(data));
    }
    Ok(SyntheticScene {
        timestamps,
        change_mask,
        season_mask,
        change_time,
        pre_index: 0,
        post_index: t_count - 1,
        seed,
    })
}

fn random_convex_polygon<R: Rng>(rng: &mut R, n: usize, max_radius: f64) -> Vec<(f64, f64)> {
    let cy = rng.random_range(0.0..n as f64);
    let cx = rng.random_range(0.0..n as f64);
    let r = rng.random_range(max_radius * 0.4..max_radius);
    let k = rng.random_range(3..=7);
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    // Points on a circle in angular order always form a convex polygon.
    angles.iter().map(|a| (cy + r * a.sin(), cx + r * a.cos())).collect()
}

fn inside_convex(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut sign = 0.0f64;
    for k in 0..poly.len() {
        let (y0, x0) = poly[k];
        let (y1, x1) = poly[(k + 1) % poly.len()];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// Inter-timestamp variance of every pixel, averaged over bands.
pub fn temporal_variance<T: Scalar>(images: &[RasterImage<T>]) -> Array2<f64> {
    let (bands, h, w) = images[0].data.dim();
    let t = images.len() as f64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        (0..bands)
            .map(|b| {
                let vals: Vec<f64> = images.iter().map(|im| im.data[[b, i, j]].as_f64()).collect();
                let m = vals.iter().sum::<f64>() / t;
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t
            })
            .sum::<f64>()
            / bands as f64
    })
}

fn write_header(out: &mut Vec<u8>, dtype: DType, bands: usize, h: usize, w: usize) -> Result<()> {
    for d in [bands, h, w] {
        ensure!(u32::try_from(d).is_ok(), Format, "raster dimension {d} exceeds u32");
    }
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(0);
    for d in [bands, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_raster<T: Scalar>(img: &RasterImage<T>) -> Result<Vec<u8>> {
    let (c, h, w) = img.data.dim();
    let mut out = Vec::with_capacity(20 + img.data.len() * T::DTYPE.size());
    write_header(&mut out, T::DTYPE, c, h, w)?;
    for &v in img.data.iter() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Encodes a single-band 0/1 raster with dtype u8.
pub fn encode_mask(mask: ArrayView2<'_, bool>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let mut out = Vec::with_capacity(20 + h * w);
    write_header(&mut out, DType::U8, 1, h, w)?;
    out.extend(mask.iter().map(|&b| b as u8));
    Ok(out)
}

/// Decoded native raster with its stored dtype.
pub fn decode_raster<T: Scalar>(bytes: &[u8]) -> Result<(RasterImage<T>, DType)> {
    ensure!(bytes.len() >= 20 && &bytes[..4] == RASTER_MAGIC, Format, "not a native raster (bad magic)");
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    ensure!(version == RASTER_VERSION, Format, "unsupported raster version {version}");
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[6])))?;
    let dim = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("raster dimensions overflow".into()))?;
    let body = &bytes[20..];
    ensure!(
        body.len() == count * dtype.size(),
        Format,
        "raster body has {} bytes, expected {}",
        body.len(),
        count * dtype.size()
    );
    let values: Vec<T> = match dtype {
        DType::F32 => body.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
        DType::F64 => body.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        DType::U8 => body.iter().map(|&b| T::lit(b as f64)).collect(),
        DType::U16 => body.chunks_exact(2).map(|b| T::lit(u16::from_le_bytes([b[0], b[1]]) as f64)).collect(),
    };
    let data = Array3::from_shape_vec((c, h, w), values).expect("length checked");
    Ok((RasterImage::new(data), dtype))
}

pub fn save_raster<T: Scalar>(img: &RasterImage<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_raster(img)?)?;
    Ok(())
}

pub fn save_mask(mask: ArrayView2<'_, bool>, path: &Path) -> Result<()> {
    fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

/// Loads a native raster, or a TIFF/GeoTIFF when the `geotiff` feature is on.
pub fn load_raster<T: Scalar>(path: &Path) -> Result<RasterImage<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(RASTER_MAGIC) {
        return Ok(decode_raster(&bytes)?.0);
    }
    if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") || bytes.starts_with(b"II+\0") || bytes.starts_with(b"MM\0+") {
        return import_tiff(&bytes);
    }
    Err(Error::Format(format!("{}: unknown raster format", path.display())))
}

/// Loads a bi-temporal pair and checks that both images share band count and size.
pub fn load_pair<T: Scalar>(path_m: &Path, path_n: &Path) -> Result<(RasterImage<T>, RasterImage<T>)> {
    let a = load_raster::<T>(path_m)?;
    let b = load_raster::<T>(path_n)?;
    check_pair(&a, &b)?;
    Ok((a, b))
}

pub fn check_pair<T: Scalar>(a: &RasterImage<T>, b: &RasterImage<T>) -> Result<()> {
    ensure!(a.bands() == b.bands(), Shape, "band count mismatch: {} vs {}", a.bands(), b.bands());
    ensure!(
        (a.height(), a.width()) == (b.height(), b.width()),
        Shape,
        "image size mismatch: {}x{} vs {}x{}",
        a.height(),
        a.width(),
        b.height(),
        b.width()
    );
    Ok(())
}

/// Loads a boolean map from a PGM or a native raster (band 0, nonzero is true).
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        return Ok(decode_pgm(&bytes)?.mapv(|v| v != 0));
    }
    let img = load_raster::<f64>(path)?;
    Ok(img.data.index_axis(Axis(0), 0).mapv(|v| v != 0.0))
}

#[cfg(feature = "geotiff")]
fn import_tiff<T: Scalar>(bytes: &[u8]) -> Result<RasterImage<T>> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::tags::{PlanarConfiguration, Tag};

    let tiff_err = |e: tiff::TiffError| Error::Format(format!("tiff: {e}"));
    let mut dec = Decoder::new(std::io::Cursor::new(bytes)).map_err(tiff_err)?;
    let (w, h) = dec.dimensions().map_err(tiff_err)?;
    let (w, h) = (w as usize, h as usize);
    let bands: usize = dec.find_tag_unsigned(Tag::SamplesPerPixel).map_err(tiff_err)?.unwrap_or(1);
    let planar = dec
        .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
        .map_err(tiff_err)?
        .and_then(PlanarConfiguration::from_u16)
        == Some(PlanarConfiguration::Planar);
    let mut buf = DecodingResult::U8(Vec::new());
    dec.read_image_to_buffer(&mut buf).map_err(tiff_err)?;
    let (values, integer): (Vec<f64>, bool) = match buf {
        DecodingResult::U8(v) => (v.into_iter().map(f64::from).collect(), true),
        DecodingResult::U16(v) => (v.into_iter().map(f64::from).collect(), true),
        DecodingResult::U32(v) => (v.into_iter().map(f64::from).collect(), true),
        DecodingResult::I16(v) => (v.into_iter().map(f64::from).collect(), true),
        DecodingResult::I32(v) => (v.into_iter().map(f64::from).collect(), true),
        DecodingResult::F32(v) => (v.into_iter().map(f64::from).collect(), false),
        DecodingResult::F64(v) => (v, false),
        _ => return Err(Error::Format("tiff: unsupported sample type".into())),
    };
    ensure!(values.len() >= bands * h * w, Format, "tiff: short sample buffer");
    let mut data = Array3::<f64>::zeros((bands, h, w));
    for b in 0..bands {
        for i in 0..h {
            for j in 0..w {
                let idx = if planar { (b * h + i) * w + j } else { (i * w + j) * bands + b };
                data[[b, i, j]] = values[idx];
            }
        }
    }
    if integer {
        for mut band in data.outer_iter_mut() {
            let max = band.fold(0.0f64, |m, &v| m.max(v));
            if max > 0.0 {
                band.mapv_inplace(|v| v / max);
            }
        }
    }
    Ok(RasterImage::new(data.mapv(T::lit)))
}

#[cfg(not(feature = "geotiff"))]
fn import_tiff<T: Scalar>(_bytes: &[u8]) -> Result<RasterImage<T>> {
    Err(Error::Format("TIFF import requires the `geotiff` feature".into()))
}

/// Binary 8-bit PGM (P5).
pub fn encode_pgm(values: ArrayView2<'_, u8>) -> Vec<u8> {
    let (h, w) = values.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().copied());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Array2<u8>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, Format, "truncated PGM header");
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    ensure!(fields[0] == "P5", Format, "not a binary PGM");
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    ensure!(maxval <= 255, Format, "only 8-bit PGM is supported");
    let body = &bytes[pos + 1..];
    ensure!(body.len() >= w * h, Format, "PGM body too short");
    Ok(Array2::from_shape_vec((h, w), body[..w * h].to_vec()).expect("length checked"))
}

pub fn write_pgm(values: ArrayView2<'_, u8>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(values))?;
    Ok(())
}

/// Writes a scene as `t{k}.pxr` rasters plus `change_mask.pxr` and `season_mask.pxr`.
pub fn save_scene<T: Scalar>(scene: &SyntheticScene<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, img) in scene.timestamps.iter().enumerate() {
        save_raster(img, &dir.join(format!("t{k}.pxr")))?;
    }
    save_mask(scene.change_mask.view(), &dir.join("change_mask.pxr"))?;
    save_mask(scene.season_mask.view(), &dir.join("season_mask.pxr"))?;
    Ok(())
}

/// Loads every `t{k}.pxr` in a scene directory in timestamp order.
pub fn load_scene_timestamps<T: Scalar>(dir: &Path) -> Result<Vec<RasterImage<T>>> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("t{}.pxr", out.len()));
        if !p.exists() {
            break;
        }
        out.push(load_raster(&p)?);
    }
    ensure!(!out.is_empty(), Input, "{}: no t0.pxr found", dir.display());
    for img in &out[1..] {
        check_pair(&out[0], img)?;
    }
    Ok(out)
}
