use std::collections::HashSet;
use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{FeatureMap, ImageSource};

/// Side length of a spot patch in pixels.
pub const PATCH_SIZE: usize = 256;
const HALF: i64 = (PATCH_SIZE / 2) as i64;

/// RGB slide image, row-major HWC, channel values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct SlideImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl fmt::Debug for SlideImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SlideImage({}x{})", self.width, self.height)
    }
}

impl SlideImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("slide pixels", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// A `PATCH_SIZE`² RGB crop, HWC.
#[derive(Clone, PartialEq)]
pub struct Patch {
    data: Vec<f32>,
}

impl fmt::Debug for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Patch({PATCH_SIZE}x{PATCH_SIZE}x3)")
    }
}

impl Patch {
    pub const LEN: usize = PATCH_SIZE * PATCH_SIZE * 3;

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::shape("patch pixels", Self::LEN, data.len()));
        }
        Ok(Self { data })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let slide = SlideImage::from_fn(PATCH_SIZE, PATCH_SIZE, &mut f);
        Self { data: slide.data }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * PATCH_SIZE + x) * 3 + c]
    }
}

impl ImageSource for Patch {
    fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            height: PATCH_SIZE,
            width: PATCH_SIZE,
            channels: 3,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Crop with corners `(x-128, y-128)` and `(x+128, y+128)`; pixels
/// `[y-128, y+128) x [x-128, x+128)`. No padding.
pub fn extract_patch(slide: &SlideImage, x: i64, y: i64) -> Result<Patch> {
    let (x0, y0) = (x - HALF, y - HALF);
    if x0 < 0 || y0 < 0 || x + HALF > slide.width as i64 || y + HALF > slide.height as i64 {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: slide.width,
            height: slide.height,
        });
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut data = Vec::with_capacity(Patch::LEN);
    for row in y0..y0 + PATCH_SIZE {
        let start = (row * slide.width + x0) * 3;
        data.extend_from_slice(&slide.data[start..start + PATCH_SIZE * 3]);
    }
    Ok(Patch { data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotRecord {
    pub slice_id: String,
    pub spot_id: String,
    pub x: i64,
    pub y: i64,
    /// Raw counts, aligned with the owning slice's `gene_names`.
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SliceDataset {
    pub slice_id: String,
    pub image: SlideImage,
    pub gene_names: Vec<String>,
    pub spots: Vec<SpotRecord>,
}

impl SliceDataset {
    pub fn new(slice_id: impl Into<String>, image: SlideImage, gene_names: Vec<String>, spots: Vec<SpotRecord>) -> Result<Self> {
        let slice_id = slice_id.into();
        if image.height < PATCH_SIZE || image.width < PATCH_SIZE {
            return Err(Error::InvalidConfig(format!(
                "slice {slice_id}: image {}x{} smaller than one patch",
                image.width, image.height
            )));
        }
        let unique: HashSet<&str> = gene_names.iter().map(String::as_str).collect();
        if unique.len() != gene_names.len() {
            return Err(Error::InvalidConfig(format!("slice {slice_id}: duplicate gene names")));
        }
        let mut seen = HashSet::new();
        for s in &spots {
            if s.counts.len() != gene_names.len() {
                return Err(Error::shape(
                    format!("slice {slice_id} spot {} counts", s.spot_id),
                    gene_names.len(),
                    s.counts.len(),
                ));
            }
            if !seen.insert(s.spot_id.as_str()) {
                return Err(Error::InvalidConfig(format!("slice {slice_id}: duplicate spot {}", s.spot_id)));
            }
            if s.x < 0 || s.y < 0 || s.x >= image.width as i64 || s.y >= image.height as i64 {
                return Err(Error::InvalidConfig(format!(
                    "slice {slice_id}: spot {} at ({}, {}) lies outside the slide",
                    s.spot_id, s.x, s.y
                )));
            }
        }
        Ok(Self {
            slice_id,
            image,
            gene_names,
            spots,
        })
    }

    /// Raw counts, spots x genes.
    pub fn counts(&self) -> Array2<f64> {
        let g = self.gene_names.len();
        let flat: Vec<f64> = self.spots.iter().flat_map(|s| s.counts.iter().copied()).collect();
        Array2::from_shape_vec((self.spots.len(), g), flat).expect("validated counts")
    }
}
