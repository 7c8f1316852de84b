//! Clustered synthetic slides with a known patch-to-expression structure.
//!
//! Spots sit on a grid with one patch width between centres, so every patch
//! is exactly one grid cell. Each cell shows its cluster's colour and
//! texture; each spot's counts follow its cluster's gene signature.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::data::io::{write_png, write_spots_csv, Manifest, ManifestEntry};
use crate::data::{SliceDataset, SlideImage, SpotRecord, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub genes: usize,
    pub spots_per_slice: usize,
    pub seed: u64,
    /// Poisson rate of background genes.
    pub base_rate: f64,
    /// Rate of the cluster's signature block.
    pub block_rate: f64,
    /// Rate of the cluster's single marker gene.
    pub peak_rate: f64,
    /// Amplitude of per-pixel uniform noise.
    pub pixel_noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clusters: 5,
            genes: 64,
            spots_per_slice: 100,
            seed: 0,
            base_rate: 2.0,
            block_rate: 20.0,
            peak_rate: 80.0,
            pixel_noise: 0.08,
        }
    }
}

/// Eight distinguishable stain-like base colours.
const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.45, 0.60],
    [0.45, 0.30, 0.70],
    [0.90, 0.75, 0.80],
    [0.35, 0.55, 0.45],
    [0.75, 0.55, 0.30],
    [0.25, 0.35, 0.55],
    [0.60, 0.80, 0.85],
    [0.55, 0.20, 0.30],
];

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clusters > PALETTE.len() {
            return Err(Error::InvalidConfig(format!("clusters must be in 1..={}", PALETTE.len())));
        }
        if self.genes < self.clusters * self.block_len() || self.block_len() == 0 {
            return Err(Error::InvalidConfig("too few genes for the cluster signatures".into()));
        }
        if self.spots_per_slice == 0 {
            return Err(Error::InvalidConfig("spots_per_slice must be positive".into()));
        }
        Ok(())
    }

    /// Signature block length: an equal share of the genes, at most 12.
    pub fn block_len(&self) -> usize {
        (self.genes / self.clusters).min(12)
    }

    pub fn gene_names(&self) -> Vec<String> {
        (0..self.genes).map(|g| format!("gene{g:03}")).collect()
    }

    /// Index of cluster `c`'s marker gene, the first of its block.
    pub fn marker_gene(&self, c: usize) -> usize {
        c * self.block_len()
    }

    /// Poisson rates of cluster `c`.
    pub fn signature(&self, c: usize) -> Vec<f64> {
        let mut rates = vec![self.base_rate; self.genes];
        let start = c * self.block_len();
        for r in &mut rates[start..start + self.block_len()] {
            *r = self.block_rate;
        }
        rates[self.marker_gene(c)] = self.peak_rate;
        rates
    }

    fn grid(&self) -> (usize, usize) {
        let cols = (self.spots_per_slice as f64).sqrt().ceil() as usize;
        let rows = self.spots_per_slice.div_ceil(cols);
        (rows, cols)
    }
}

/// Texture value in `[-1, 1]` for cluster `c` at cell-local `(y, x)`.
/// Every motif keeps its character under rotation and flip.
fn texture(c: usize, y: f32, x: f32, phase: f32) -> f32 {
    let centre = PATCH_SIZE as f32 / 2.0;
    match c % 5 {
        0 => {
            let r = ((y - centre).powi(2) + (x - centre).powi(2)).sqrt();
            (r / 6.0 + phase).sin()
        }
        1 => {
            let a = ((y / 24.0 + phase).floor() + (x / 24.0 + phase).floor()) as i64;
            if a % 2 == 0 { 1.0 } else { -1.0 }
        }
        2 => ((x + y) / 8.0 + phase).sin(),
        3 => {
            let (fy, fx) = ((y / 40.0 + phase).fract() - 0.5, (x / 40.0 + phase).fract() - 0.5);
            if fy * fy + fx * fx < 0.09 { 1.0 } else { -1.0 }
        }
        _ => (y / 5.0 + phase).sin() * (x / 5.0 + phase).sin(),
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One generated slice and the cluster of each of its spots.
#[derive(Debug, Clone)]
pub struct SyntheticSlice {
    pub slice: SliceDataset,
    pub labels: Vec<usize>,
}

/// Slice number `index`; spots are balanced across clusters. Pixel values
/// are multiples of 1/255 so a PNG round trip is exact.
pub fn generate_slice(cfg: &SyntheticConfig, slice_id: &str, index: u64) -> Result<SyntheticSlice> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, 1000 + index);
    let mut labels: Vec<usize> = (0..cfg.spots_per_slice).map(|i| i % cfg.clusters).collect();
    labels.shuffle(&mut rng);

    let (rows, cols) = cfg.grid();
    let (height, width) = (rows * PATCH_SIZE, cols * PATCH_SIZE);
    let mut data = vec![1.0f32; height * width * 3];
    let genes = cfg.gene_names();
    let mut spots = Vec::with_capacity(cfg.spots_per_slice);
    for (i, &c) in labels.iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        let phase: f32 = rng.random_range(0.0..6.0);
        let brightness: f32 = rng.random_range(-0.05..0.05);
        let base = PALETTE[c];
        for y in 0..PATCH_SIZE {
            let row = gy * PATCH_SIZE + y;
            for x in 0..PATCH_SIZE {
                let t = texture(c, y as f32, x as f32, phase);
                let offset = (row * width + gx * PATCH_SIZE + x) * 3;
                for (ch, &b) in base.iter().enumerate() {
                    let noise = rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise);
                    data[offset + ch] = quantize(b + 0.15 * t + brightness + noise);
                }
            }
        }
        let library: f64 = rng.random_range(0.8..1.2);
        let counts = cfg
            .signature(c)
            .iter()
            .map(|&rate| Poisson::new(rate * library).expect("positive rate").sample(&mut rng))
            .collect();
        let half = (PATCH_SIZE / 2) as i64;
        spots.push(SpotRecord {
            slice_id: slice_id.to_string(),
            spot_id: format!("spot{i:04}"),
            x: (gx * PATCH_SIZE) as i64 + half,
            y: (gy * PATCH_SIZE) as i64 + half,
            counts,
        });
    }
    let image = SlideImage::new(height, width, data)?;
    Ok(SyntheticSlice {
        slice: SliceDataset::new(slice_id, image, genes, spots)?,
        labels,
    })
}

/// Writes `n_slices` slices (`slice0`, `slice1`, ...) as PNG + CSV, a
/// `labels.csv` (`slice_id,spot_id,cluster`) and `manifest.json` into `dir`.
pub fn write_synthetic_manifest(dir: &Path, cfg: &SyntheticConfig, n_slices: usize) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels_path = dir.join("labels.csv");
    let mut labels = csv::Writer::from_path(&labels_path).map_err(|e| Error::parse(&labels_path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(&labels_path, e.to_string());
    labels.write_record(["slice_id", "spot_id", "cluster"]).map_err(err)?;
    let mut entries = Vec::new();
    for s in 0..n_slices {
        let id = format!("slice{s}");
        let generated = generate_slice(cfg, &id, s as u64)?;
        let slice = &generated.slice;
        write_png(&dir.join(format!("{id}.png")), slice.image.height, slice.image.width, &slice.image.data)?;
        write_spots_csv(&dir.join(format!("{id}.csv")), &slice.gene_names, &slice.spots)?;
        for (spot, c) in slice.spots.iter().zip(&generated.labels) {
            labels.write_record([id.as_str(), spot.spot_id.as_str(), &c.to_string()]).map_err(err)?;
        }
        entries.push(ManifestEntry {
            slice_id: id.clone(),
            image: format!("{id}.png"),
            spots: format!("{id}.csv"),
        });
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    let manifest = Manifest { slices: entries };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_patch, load_manifest};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            spots_per_slice: 10,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn grid_patches_are_in_bounds() {
        let s = generate_slice(&small(), "a", 0).unwrap();
        assert_eq!(s.slice.spots.len(), 10);
        for spot in &s.slice.spots {
            extract_patch(&s.slice.image, spot.x, spot.y).unwrap();
        }
        let mut counts = [0; 5];
        for &c in &s.labels {
            counts[c] += 1;
        }
        assert_eq!(counts, [2; 5]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_slice(&small(), "a", 3).unwrap();
        let b = generate_slice(&small(), "a", 3).unwrap();
        assert_eq!(a.slice.image, b.slice.image);
        assert_eq!(a.slice.spots, b.slice.spots);
        let c = generate_slice(&small(), "a", 4).unwrap();
        assert_ne!(a.slice.image, c.slice.image);
    }

    #[test]
    fn signatures_have_distinct_markers() {
        let cfg = SyntheticConfig::default();
        for c in 0..cfg.clusters {
            let sig = cfg.signature(c);
            let top = (0..cfg.genes).max_by(|&a, &b| sig[a].total_cmp(&sig[b])).unwrap();
            assert_eq!(top, cfg.marker_gene(c));
        }
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            spots_per_slice: 4,
            ..SyntheticConfig::default()
        };
        write_synthetic_manifest(dir.path(), &cfg, 2).unwrap();
        let slices = load_manifest(&dir.path().join("manifest.json")).unwrap();
        let direct = generate_slice(&cfg, "slice1", 1).unwrap();
        assert_eq!(slices[1].image, direct.slice.image);
        assert_eq!(slices[1].spots, direct.slice.spots);
    }
}
