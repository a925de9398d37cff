//! Image, semantic map and domain label value types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_SIDE: usize = 16;

/// Number of translation domains (simulated, real, segmentation).
pub const NUM_DOMAINS: usize = 3;

/// Single-channel raster with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Rejects out-of-range or non-finite values instead of clamping them.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::TooSmall { height, width, min: MIN_SIDE });
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} image", data.len())));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange { index, value });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// 8-bit gray levels map linearly onto `[-1, 1]`.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// `[1, 1, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.data.clone())
    }

    /// Stacks equally sized images into an `[N, 1, H, W]` batch.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if (img.height, img.width) != (first.height, first.width) {
                return Err(Error::Shape("images in a batch must share one size".into()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new([images.len(), 1, first.height, first.width], data))
    }

    /// Converts sample `n` of an `[N, 1, H, W]` tensor, validating the range.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 1 {
            return Err(Error::Shape(format!("expected 1 channel, got {c}")));
        }
        Self::new(h, w, t.data()[n * h * w..(n + 1) * h * w].to_vec())
    }
}

/// Per-pixel integer class labels; label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} map", labels.len())));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("a semantic map needs at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { height, width, num_classes, labels })
    }

    pub fn background(height: usize, width: usize, num_classes: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Network input encoding: class `k` maps to `-1 + 2k / (K - 1)`.
    pub fn to_image(&self) -> Result<Image> {
        let scale = 2.0 / (self.num_classes as f32 - 1.0);
        Image::new(self.height, self.width, self.labels.iter().map(|&l| -1.0 + scale * l as f32).collect())
    }

    /// Inverse of [`SemanticMap::to_image`], rounding to the nearest class.
    pub fn from_image(img: &Image, num_classes: u8) -> Result<Self> {
        let scale = (num_classes as f32 - 1.0) / 2.0;
        let labels = img
            .data()
            .iter()
            .map(|&v| ((v + 1.0) * scale).round().clamp(0.0, num_classes as f32 - 1.0) as u8)
            .collect();
        Self::new(img.height(), img.width(), num_classes, labels)
    }
}

/// Translation domain: simulated (A), real (B) or semantic map (S).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Sim,
    Real,
    Seg,
}

impl DomainLabel {
    pub const ALL: [DomainLabel; NUM_DOMAINS] = [DomainLabel::Sim, DomainLabel::Real, DomainLabel::Seg];

    pub fn index(self) -> usize {
        match self {
            DomainLabel::Sim => 0,
            DomainLabel::Real => 1,
            DomainLabel::Seg => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f32; NUM_DOMAINS] {
        let mut v = [0.0; NUM_DOMAINS];
        v[self.index()] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainLabel::Sim => "sim",
            DomainLabel::Real => "real",
            DomainLabel::Seg => "seg",
        }
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sim" | "a" => Ok(DomainLabel::Sim),
            "real" | "b" => Ok(DomainLabel::Real),
            "seg" | "s" => Ok(DomainLabel::Seg),
            other => Err(Error::InvalidArgument(format!("unknown domain `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_vectors() {
        assert_eq!(DomainLabel::Sim.one_hot(), [1.0, 0.0, 0.0]);
        assert_eq!(DomainLabel::Real.one_hot(), [0.0, 1.0, 0.0]);
        assert_eq!(DomainLabel::Seg.one_hot(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for l in DomainLabel::ALL {
            let v = l.one_hot();
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(v.iter().sum::<f32>(), 1.0);
            let hot = v.iter().position(|&x| x == 1.0).unwrap();
            assert_eq!(DomainLabel::from_index(hot), Some(l));
            assert!(seen.insert(hot));
        }
    }

    #[test]
    fn out_of_range_images_are_rejected() {
        let mut data = vec![0.0; 16 * 16];
        data[5] = 1.5;
        assert!(matches!(Image::new(16, 16, data), Err(Error::OutOfRange { index: 5, .. })));
        let mut data = vec![0.0; 16 * 16];
        data[0] = f32::NAN;
        assert!(Image::new(16, 16, data).is_err());
        assert!(matches!(Image::filled(8, 32, 0.0), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn byte_mapping_endpoints() {
        let img = Image::from_u8(16, 16, &[0u8; 256]).unwrap();
        assert!(img.data().iter().all(|&v| v == -1.0));
        let img = Image::from_u8(16, 16, &[255u8; 256]).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        assert_eq!(img.to_u8(), vec![255u8; 256]);
    }

    #[test]
    fn semantic_map_image_roundtrip() {
        let labels: Vec<u8> = (0..256).map(|i| (i % 7) as u8).collect();
        let map = SemanticMap::new(16, 16, 7, labels).unwrap();
        let img = map.to_image().unwrap();
        assert_eq!(img.data()[0], -1.0);
        assert_eq!(img.data()[6], 1.0);
        assert_eq!(SemanticMap::from_image(&img, 7).unwrap(), map);
        assert!(SemanticMap::new(16, 16, 3, vec![3; 256]).is_err());
    }

    #[test]
    fn domain_parsing_is_case_insensitive() {
        assert_eq!("REAL".parse::<DomainLabel>().unwrap(), DomainLabel::Real);
        assert_eq!("Seg".parse::<DomainLabel>().unwrap(), DomainLabel::Seg);
        assert!("ct".parse::<DomainLabel>().is_err());
    }
}
