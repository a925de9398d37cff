//! Masked SSIM, Fréchet distance and kernel distance between image sets.
//!
//! Feature-based metrics take an n×d matrix per set (rows are samples). The
//! default extractor is a fixed-seed random convolutional network; features
//! from any other network can be imported from files.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::io::{self, PngContent};
use crate::seed::{self, Stream};
use crate::types::{Image, SemanticMap};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of images in [-1, 1].
pub const SSIM_RANGE: f64 = 2.0;
pub const KID_MAX_BLOCK: usize = 100;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mirror index without edge repeat; windows wider than the image fold repeatedly.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable Gaussian filter with mirrored borders.
fn blur(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] =
                taps.iter().enumerate().map(|(k, t)| t * x[y * w + mirror(xx as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] =
                taps.iter().enumerate().map(|(k, t)| t * tmp[mirror(y as isize + k as isize - r, h) * w + xx]).sum();
        }
    }
    out
}

/// Per-pixel SSIM of two equal-size images, each value in [-1, 1].
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    let (h, w) = (a.height(), a.width());
    if (b.height(), b.width()) != (h, w) {
        return Err(Error::Shape(format!("ssim: {h}x{w} vs {}x{}", b.height(), b.width())));
    }
    let taps = gaussian_taps();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur(&x, h, w, &taps);
    let my = blur(&y, h, w, &taps);
    let sxx = blur(&prod(&x, &x), h, w, &taps);
    let syy = blur(&prod(&y, &y), h, w, &taps);
    let sxy = blur(&prod(&x, &y), h, w, &taps);
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    Ok((0..h * w)
        .map(|i| {
            let (vx, vy, cov) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean SSIM over foreground pixels of `mask`, in percent.
pub fn masked_ssim(sim: &Image, translated: &Image, mask: &SemanticMap) -> Result<f64> {
    if (mask.height(), mask.width()) != (sim.height(), sim.width()) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            sim.height(),
            sim.width()
        )));
    }
    if mask.foreground_count() == 0 {
        return Err(Error::InvalidArgument("mask has no foreground pixels".into()));
    }
    let map = ssim_map(sim, translated)?;
    let (sum, n) =
        map.iter().zip(mask.labels()).filter(|(_, &l)| l != 0).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok(100.0 * sum / n as f64)
}

fn moments(f: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows() as f64;
    let mu = f.row_mean().transpose();
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn fid_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if d == 0 || mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Shape("fid: inconsistent moment dimensions".into()));
    }
    let sa = psd_sqrt(cov_a);
    let inner = &sa * cov_b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}

fn check_features(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.ncols() == 0 || a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "{what}: feature dims {} and {} must match and be positive",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{what}: need at least 2 samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

/// Fréchet distance between the Gaussian fits of two feature sets.
pub fn fid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_features(a, b, "fid")?;
    let d = a.ncols();
    if 4 * a.nrows().min(b.nrows()) <= d {
        log::warn!("fid: {} and {} samples are few for {d}-dimensional features", a.nrows(), b.nrows());
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    fid_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    /// Mean of the block estimates.
    pub value: f64,
    /// Standard error over blocks; absent with a single block.
    pub std_err: Option<f64>,
    pub blocks: usize,
    pub block_size: usize,
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased squared MMD between two equal-size blocks.
fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&[f64]]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(s[i], s[j]);
                }
            }
        }
        t / (m * (m - 1.0))
    };
    let cross: f64 = x.iter().flat_map(|a| y.iter().map(move |b| poly_kernel(a, b))).sum::<f64>() / (m * m);
    within(x) + within(y) - 2.0 * cross
}

/// Kernel distance with a cubic polynomial kernel, averaged over consecutive row blocks.
pub fn kid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<KidEstimate> {
    check_features(a, b, "kid")?;
    let rows = |f: &DMatrix<f64>| -> Vec<Vec<f64>> { f.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    let bs = ra.len().min(rb.len()).min(KID_MAX_BLOCK);
    let nb = ra.len().min(rb.len()) / bs;
    let ests: Vec<f64> = (0..nb)
        .map(|k| {
            let xa: Vec<&[f64]> = ra[k * bs..(k + 1) * bs].iter().map(Vec::as_slice).collect();
            let xb: Vec<&[f64]> = rb[k * bs..(k + 1) * bs].iter().map(Vec::as_slice).collect();
            mmd2_unbiased(&xa, &xb)
        })
        .collect();
    let mean = ests.iter().sum::<f64>() / nb as f64;
    let std_err = (nb > 1).then(|| {
        let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (nb - 1) as f64;
        (var / nb as f64).sqrt()
    });
    Ok(KidEstimate { value: mean, std_err, blocks: nb, block_size: bs })
}

/// Maps a batch of images to an n×d feature matrix.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, images: &[Image]) -> Result<DMatrix<f64>>;
}

pub const RANDOM_CONV_CHANNELS: [usize; 4] = [24, 48, 96, 192];
pub const RANDOM_CONV_SEED: u64 = 0x5eed;

/// Fixed random convolutional network: 3×3 stride-2 convolutions with leaky ReLU, then global average pooling.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    weights: Vec<Vec<f32>>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::rng(seed, Stream::Extractor);
        let mut c_in = 1;
        let weights = RANDOM_CONV_CHANNELS
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (9 * c_in) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let w = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng) as f32).collect();
                c_in = c_out;
                w
            })
            .collect();
        Self { seed, weights }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(RANDOM_CONV_SEED)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> String {
        format!("random-conv-{}", self.seed)
    }

    fn dim(&self) -> usize {
        RANDOM_CONV_CHANNELS[RANDOM_CONV_CHANNELS.len() - 1]
    }

    fn extract(&self, images: &[Image]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut out = DMatrix::zeros(images.len(), d);
        for (r, img) in images.iter().enumerate() {
            let (mut h, mut w, mut c_in) = (img.height(), img.width(), 1);
            let mut x = img.data().to_vec();
            for (wt, &c_out) in self.weights.iter().zip(&RANDOM_CONV_CHANNELS) {
                let g = ConvGeom { c_in, h, w, c_out, kh: 3, kw: 3, stride: 2, pad: 1 };
                x = conv2d_forward(&x, 1, &g, wt, None);
                x.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.2 * *v });
                (h, w, c_in) = (g.out_h(), g.out_w(), c_out);
            }
            for (c, plane) in x.chunks(h * w).enumerate() {
                out[(r, c)] = plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
            }
        }
        Ok(out)
    }
}

/// Sidecar of an imported feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub n: usize,
    pub d: usize,
    pub extractor: String,
    /// Network layer the features came from, e.g. a pre-auxiliary or pooling layer.
    #[serde(default)]
    pub layer: Option<String>,
}

/// Loads `stem.bin` (little-endian f32, row-major) or `stem.csv`, validated against `stem.json`.
pub fn load_features(stem: &Path) -> Result<(DMatrix<f64>, FeatureMeta)> {
    let side = stem.with_extension("json");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: FeatureMeta = serde_json::from_str(&text)?;
    let bin = stem.with_extension("bin");
    let csv = stem.with_extension("csv");
    let values: Vec<f64> = if bin.exists() {
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Dataset(format!("{}: length is not a multiple of 4", bin.display())));
        }
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
    } else {
        let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| Error::Dataset(format!("{}: bad number {t:?}", csv.display()))))
            .collect::<Result<_>>()?
    };
    if values.len() != meta.n * meta.d {
        return Err(Error::Dataset(format!(
            "{}: {} values, sidecar declares {}x{}",
            stem.display(),
            values.len(),
            meta.n,
            meta.d
        )));
    }
    Ok((DMatrix::from_row_slice(meta.n, meta.d, &values), meta))
}

/// Where feature matrices come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    RandomConv {
        seed: u64,
    },
    /// Directory holding `a.{bin,csv}` + `a.json` and `b.{bin,csv}` + `b.json`.
    Import(PathBuf),
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    /// `random`, `random:SEED`, or `import:DIR`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(FeatureSource::RandomConv { seed: RANDOM_CONV_SEED });
        }
        if let Some(seed) = s.strip_prefix("random:") {
            let seed = seed.parse().map_err(|_| Error::InvalidArgument(format!("bad extractor seed {seed:?}")))?;
            return Ok(FeatureSource::RandomConv { seed });
        }
        if let Some(dir) = s.strip_prefix("import:") {
            return Ok(FeatureSource::Import(PathBuf::from(dir)));
        }
        Err(Error::InvalidArgument(format!("unknown feature source {s:?}; expected random, random:SEED or import:DIR")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Masked SSIM in percent; present when masks were given.
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub fid: f64,
    pub kid: f64,
    pub kid_std_err: Option<f64>,
    /// Multiplier already applied to `kid` and `kid_std_err`.
    pub kid_scale: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub extractor: String,
}

/// Masked SSIM inputs: the reference each image of `a` is compared with, and the masks.
#[derive(Clone, Debug)]
pub struct SsimInputs {
    pub reference: PathBuf,
    pub masks: PathBuf,
}

fn read_mask(path: &Path) -> Result<SemanticMap> {
    let (h, w, labels) = match io::read_png(path)? {
        PngContent::Indexed { height, width, indices, .. } => (height, width, indices),
        PngContent::Gray { height, width, pixels } => {
            (height, width, pixels.into_iter().map(|p| u8::from(p != 0)).collect())
        }
    };
    let classes = labels.iter().copied().max().unwrap_or(0).saturating_add(1).max(2);
    SemanticMap::new(h, w, classes, labels)
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths.iter().map(|p| io::read_image(p)).collect()
}

fn by_name(dir: &Path, name: &std::ffi::OsStr) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Dataset(format!("{} has no counterpart in {}", name.to_string_lossy(), dir.display())))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// FID and KID between the PNG sets in `dir_a` and `dir_b`, plus masked SSIM when requested.
///
/// SSIM pairs each image of `dir_a` with the same basename in the reference and mask directories.
pub fn evaluate_dirs(
    dir_a: &Path,
    dir_b: &Path,
    ssim: Option<&SsimInputs>,
    features: &FeatureSource,
) -> Result<MetricReport> {
    let pa = io::list_pngs(dir_a)?;
    let pb = io::list_pngs(dir_b)?;
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", if pa.is_empty() { dir_a } else { dir_b }.display())));
    }
    let imgs_a = load_images(&pa)?;

    let (ssim_mean, ssim_std) = match ssim {
        Some(s) => {
            let mut vals = Vec::with_capacity(pa.len());
            for (p, img) in pa.iter().zip(&imgs_a) {
                let name = p.file_name().expect("listed files have names");
                let reference = io::read_image(&by_name(&s.reference, name)?)?;
                let mask = read_mask(&by_name(&s.masks, name)?)?;
                vals.push(masked_ssim(&reference, img, &mask)?);
            }
            let (m, sd) = mean_std(&vals);
            (Some(m), Some(sd))
        }
        None => (None, None),
    };

    let (fa, fb, extractor) = match features {
        FeatureSource::RandomConv { seed } => {
            let ex = RandomConvExtractor::new(*seed);
            let imgs_b = load_images(&pb)?;
            let size = (imgs_a[0].height(), imgs_a[0].width());
            if let Some(bad) = imgs_a.iter().chain(&imgs_b).find(|i| (i.height(), i.width()) != size) {
                return Err(Error::Shape(format!("image sizes differ: {size:?} vs {:?}", (bad.height(), bad.width()))));
            }
            (ex.extract(&imgs_a)?, ex.extract(&imgs_b)?, ex.name())
        }
        FeatureSource::Import(dir) => {
            let (fa, ma) = load_features(&dir.join("a"))?;
            let (fb, mb) = load_features(&dir.join("b"))?;
            if ma.extractor != mb.extractor {
                return Err(Error::Dataset(format!(
                    "feature files come from different extractors: {} vs {}",
                    ma.extractor, mb.extractor
                )));
            }
            (fa, fb, ma.extractor)
        }
    };
    let k = kid(&fa, &fb)?;
    Ok(MetricReport {
        ssim_mean,
        ssim_std,
        fid: fid(&fa, &fb)?,
        kid: k.value,
        kid_std_err: k.std_err,
        kid_scale: 1.0,
        n_a: fa.nrows(),
        n_b: fb.nrows(),
        extractor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seed::rng(seed, Stream::Phantom);
        Image::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Direct 11×11 window sums without separability.
    fn ssim_direct(a: &Image, b: &Image, y: usize, x: usize) -> f64 {
        let (h, w) = (a.height(), a.width());
        let r = 5isize;
        let (mut wsum, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let wt = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
                let (yy, xx) = (mirror(y as isize + dy, h), mirror(x as isize + dx, w));
                let (u, v) = (a.get(yy, xx) as f64, b.get(yy, xx) as f64);
                wsum += wt;
                mx += wt * u;
                my += wt * v;
                sxx += wt * u * u;
                syy += wt * v * v;
                sxy += wt * u * v;
            }
        }
        let (mx, my) = (mx / wsum, my / wsum);
        let (vx, vy, c) = (sxx / wsum - mx * mx, syy / wsum - my * my, sxy / wsum - mx * my);
        let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
        ((2.0 * mx * my + c1) * (2.0 * c + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    }

    #[test]
    fn ssim_identity_and_negation() {
        let a = textured(20, 24, 1);
        let mask = SemanticMap::new(20, 24, 2, vec![1; 480]).unwrap();
        assert!((masked_ssim(&a, &a, &mask).unwrap() - 100.0).abs() < 1e-9);
        let neg = Image::new(20, 24, a.data().iter().map(|v| -v).collect()).unwrap();
        let v = masked_ssim(&a, &neg, &mask).unwrap();
        assert!(v < 100.0);
        let map = ssim_map(&a, &neg).unwrap();
        let oracle: f64 =
            (0..20).flat_map(|y| (0..24).map(move |x| (y, x))).map(|(y, x)| ssim_direct(&a, &neg, y, x)).sum::<f64>()
                / 480.0;
        assert!((v - 100.0 * oracle).abs() < 1e-9, "{v} vs {}", 100.0 * oracle);
        assert!(map.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn ssim_averages_only_foreground() {
        let a = textured(16, 16, 2);
        let b = textured(16, 16, 3);
        let labels: Vec<u8> = (0..256).map(|i| u8::from(i % 16 < 5)).collect();
        let mask = SemanticMap::new(16, 16, 2, labels.clone()).unwrap();
        let map = ssim_map(&a, &b).unwrap();
        let expect = 100.0 * map.iter().zip(&labels).filter(|(_, &l)| l != 0).map(|(v, _)| v).sum::<f64>() / 80.0;
        assert!((masked_ssim(&a, &b, &mask).unwrap() - expect).abs() < 1e-9);
        let empty = SemanticMap::background(16, 16, 2).unwrap();
        assert!(masked_ssim(&a, &b, &empty).is_err());
    }

    fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = seed::rng(seed, Stream::Phantom);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(n, d, |_, _| normal.sample(&mut rng) + shift)
    }

    #[test]
    fn fid_identity_symmetry_and_analytic_case() {
        let a = gaussian_rows(50, 6, 0.0, 1);
        let b = gaussian_rows(60, 6, 0.3, 2);
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        let one = DMatrix::from_element(1, 1, 1.0);
        let v = fid_from_moments(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(fid(&DMatrix::from_element(1, 3, 0.0), &a.columns(0, 3).into_owned()).is_err());
    }

    #[test]
    fn fid_matches_closed_form_in_two_dimensions() {
        // For 2×2 PSD M, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
        let a = gaussian_rows(40, 2, 0.0, 3);
        let b = DMatrix::from_fn(45, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.2 + j as f64 * 0.05 * i as f64);
        let (ma, ca) = moments(&a);
        let (mb, cb) = moments(&b);
        let product = &ca * &cb;
        let tr_sqrt = (product.trace() + 2.0 * product.determinant().max(0.0).sqrt()).sqrt();
        let oracle = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
        assert!((fid(&a, &b).unwrap() - oracle).abs() < 1e-8 * oracle.max(1.0));
    }

    #[test]
    fn kid_degenerate_and_block_layout() {
        let v = DMatrix::from_element(7, 2, 1.0);
        let k = kid(&v, &v).unwrap();
        assert_eq!(k.value, 0.0);
        assert_eq!((k.blocks, k.block_size, k.std_err), (1, 7, None));
        let a = gaussian_rows(250, 3, 0.0, 4);
        let b = gaussian_rows(230, 3, 0.0, 5);
        let k = kid(&a, &b).unwrap();
        assert_eq!((k.blocks, k.block_size), (2, 100));
        assert!(k.std_err.is_some());
        assert!(kid(&a.rows(0, 1).into_owned(), &b).is_err());
    }

    #[test]
    fn kid_matches_direct_double_sum() {
        let a = gaussian_rows(12, 4, 0.0, 6);
        let b = gaussian_rows(12, 4, 0.5, 7);
        let k = |x: usize, p: &DMatrix<f64>, y: usize, q: &DMatrix<f64>| (p.row(x).dot(&q.row(y)) / 4.0 + 1.0).powi(3);
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    xx += k(i, &a, j, &a);
                    yy += k(i, &b, j, &b);
                }
                xy += k(i, &a, j, &b);
            }
        }
        let oracle = xx / 132.0 + yy / 132.0 - 2.0 * xy / 144.0;
        assert!((kid(&a, &b).unwrap().value - oracle).abs() < 1e-10);
    }

    #[test]
    fn random_conv_is_deterministic_and_shaped() {
        let imgs = vec![textured(32, 44, 8), textured(32, 44, 9)];
        let f = RandomConvExtractor::default().extract(&imgs).unwrap();
        assert_eq!(f.shape(), (2, 192));
        assert_eq!(f, RandomConvExtractor::default().extract(&imgs).unwrap());
        assert_ne!(f, RandomConvExtractor::new(1).extract(&imgs).unwrap());
    }

    #[test]
    fn imported_features_roundtrip_csv_and_bin() {
        let dir = tempfile::tempdir().unwrap();
        let meta = FeatureMeta { n: 2, d: 3, extractor: "x".into(), layer: Some("pool".into()) };
        std::fs::write(dir.path().join("a.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        std::fs::write(dir.path().join("a.csv"), "1,2,3\n4,5,6.5\n").unwrap();
        let (m, back) = load_features(&dir.path().join("a")).unwrap();
        assert_eq!(back, meta);
        assert_eq!(m[(1, 2)], 6.5);
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.path().join("b.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        std::fs::write(dir.path().join("b.bin"), bytes).unwrap();
        assert_eq!(load_features(&dir.path().join("b")).unwrap().0, m);
        std::fs::write(dir.path().join("a.csv"), "1,2\n").unwrap();
        assert!(load_features(&dir.path().join("a")).is_err());
    }

    #[test]
    fn feature_source_parsing() {
        assert_eq!("random".parse::<FeatureSource>().unwrap(), FeatureSource::RandomConv { seed: RANDOM_CONV_SEED });
        assert_eq!("random:7".parse::<FeatureSource>().unwrap(), FeatureSource::RandomConv { seed: 7 });
        assert_eq!("import:/x".parse::<FeatureSource>().unwrap(), FeatureSource::Import("/x".into()));
        assert!("inception".parse::<FeatureSource>().is_err());
    }
}
