//! On-disk formats: manifest, spot tables, pairs archives and panel files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageBuffer, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pairs::PatchSpotPair;
use super::panel::{GenePanel, PanelMode};
use super::slide::{Patch, SliceDataset, SlideImage, SpotRecord, PATCH_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slice_id: String,
    pub image: String,
    pub spots: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub slices: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Paths in a manifest are relative to the manifest's directory.
fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<SliceDataset>> {
    let manifest = Manifest::read(path)?;
    if manifest.slices.is_empty() {
        return Err(Error::parse(path, "manifest lists no slices"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        if !seen.insert(entry.slice_id.as_str()) {
            return Err(Error::parse(path, format!("duplicate slice_id {}", entry.slice_id)));
        }
        let image_path = resolve(path, &entry.image);
        if !image_path.is_file() {
            return Err(Error::parse(
                path,
                format!("slice {}: image {} does not exist", entry.slice_id, image_path.display()),
            ));
        }
        let spots_path = resolve(path, &entry.spots);
        if !spots_path.is_file() {
            return Err(Error::parse(
                path,
                format!("slice {}: spots table {} does not exist", entry.slice_id, spots_path.display()),
            ));
        }
        let image = read_png(&image_path)?;
        let (genes, spots) = read_spots_csv(&spots_path, &entry.slice_id)?;
        out.push(SliceDataset::new(entry.slice_id.clone(), image, genes, spots)?);
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<SlideImage> {
    let img = image::open(path).map_err(|e| Error::parse(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    SlideImage::new(h as usize, w as usize, data)
}

/// Quantises to 8 bits per channel.
pub fn write_png(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::shape("png buffer", height * width * 3, data.len()))?;
    img.save(path).map_err(|e| Error::parse(path, e.to_string()))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))
}

fn headers(path: &Path, reader: &mut csv::Reader<fs::File>) -> Result<Vec<String>> {
    Ok(reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect())
}

fn expect_columns(path: &Path, header: &[String], required: &[&str]) -> Result<()> {
    for (i, name) in required.iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*name) {
            return Err(Error::parse(path, format!("missing column {name} at position {}", i + 1)));
        }
    }
    Ok(())
}

fn field<'a>(path: &Path, line: usize, record: &'a csv::StringRecord, index: usize, column: &str) -> Result<&'a str> {
    record
        .get(index)
        .map(str::trim)
        .ok_or_else(|| Error::parse(path, format!("line {line}: missing value for column {column}")))
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, column: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::parse(path, format!("line {line}, column {column}: cannot parse {raw:?}")))
}

/// Reads `spot_id,x,y,<genes...>`.
pub fn read_spots_csv(path: &Path, slice_id: &str) -> Result<(Vec<String>, Vec<SpotRecord>)> {
    let mut reader = csv_reader(path)?;
    let header = headers(path, &mut reader)?;
    expect_columns(path, &header, &["spot_id", "x", "y"])?;
    let genes: Vec<String> = header[3..].to_vec();
    let mut spots = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        if record.len() != header.len() {
            return Err(Error::parse(
                path,
                format!("line {line}: expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let spot_id = field(path, line, &record, 0, "spot_id")?.to_string();
        let x: i64 = parse_num(path, line, "x", field(path, line, &record, 1, "x")?)?;
        let y: i64 = parse_num(path, line, "y", field(path, line, &record, 2, "y")?)?;
        if x < 0 || y < 0 {
            return Err(Error::parse(path, format!("line {line}: negative coordinate")));
        }
        let counts = genes
            .iter()
            .enumerate()
            .map(|(g, name)| {
                let v: f64 = parse_num(path, line, name, field(path, line, &record, g + 3, name)?)?;
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::parse(path, format!("line {line}, column {name}: invalid count {v}")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        spots.push(SpotRecord {
            slice_id: slice_id.to_string(),
            spot_id,
            x,
            y,
            counts,
        });
    }
    Ok((genes, spots))
}

pub fn write_spots_csv(path: &Path, genes: &[String], spots: &[SpotRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["spot_id".to_string(), "x".into(), "y".into()];
    header.extend(genes.iter().cloned());
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(&header).map_err(err)?;
    for s in spots {
        let mut row = vec![s.spot_id.clone(), s.x.to_string(), s.y.to_string()];
        row.extend(s.counts.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const PAIRS_FILE: &str = "pairs.csv";
pub const PATCH_DIR: &str = "patches";

/// Writes `pairs.csv` (`spot_id,slice_id,<genes...>`) and one PNG per patch.
/// Expression values use shortest round-trip formatting.
pub fn save_pairs(dir: &Path, genes: &[String], pairs: &[PatchSpotPair]) -> Result<()> {
    let patch_dir = dir.join(PATCH_DIR);
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let csv_path = dir.join(PAIRS_FILE);
    let mut w = csv_writer(&csv_path)?;
    let err = |e: csv::Error| Error::parse(&csv_path, e.to_string());
    let mut header = vec!["spot_id".to_string(), "slice_id".into()];
    header.extend(genes.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for p in pairs {
        if p.expression.len() != genes.len() {
            return Err(Error::shape(format!("pair {} expression", p.key()), genes.len(), p.expression.len()));
        }
        let mut row = vec![p.spot_id.clone(), p.slice_id.clone()];
        row.extend(p.expression.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    pairs.par_iter().try_for_each(|p| {
        let path = patch_dir.join(format!("{}.png", p.key()));
        write_png(&path, PATCH_SIZE, PATCH_SIZE, p.patch.as_slice())
    })
}

/// Loads a pairs archive. With `expected_genes`, every listed gene must be a
/// column and the returned expression follows that order.
pub fn load_pairs(dir: &Path, expected_genes: Option<&[String]>) -> Result<(Vec<String>, Vec<PatchSpotPair>)> {
    let csv_path = dir.join(PAIRS_FILE);
    if !csv_path.is_file() {
        return Err(Error::parse(&csv_path, "pairs table does not exist"));
    }
    let mut reader = csv_reader(&csv_path)?;
    let header = headers(&csv_path, &mut reader)?;
    expect_columns(&csv_path, &header, &["spot_id", "slice_id"])?;
    let available: HashMap<&str, usize> = header.iter().enumerate().skip(2).map(|(i, g)| (g.as_str(), i)).collect();
    let genes: Vec<String> = match expected_genes {
        Some(g) => g.to_vec(),
        None => header[2..].to_vec(),
    };
    let columns = genes
        .iter()
        .map(|g| {
            available
                .get(g.as_str())
                .copied()
                .ok_or_else(|| Error::parse(&csv_path, format!("missing expression column {g}")))
        })
        .collect::<Result<Vec<usize>>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(&csv_path, format!("line {line}: {e}")))?;
        let spot_id = field(&csv_path, line, &record, 0, "spot_id")?.to_string();
        let slice_id = field(&csv_path, line, &record, 1, "slice_id")?.to_string();
        let expression = columns
            .iter()
            .zip(&genes)
            .map(|(&c, g)| parse_num::<f64>(&csv_path, line, g, field(&csv_path, line, &record, c, g)?))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((slice_id, spot_id, expression));
    }
    let pairs = rows
        .into_par_iter()
        .map(|(slice_id, spot_id, expression)| {
            let path = dir.join(PATCH_DIR).join(format!("{slice_id}_{spot_id}.png"));
            if !path.is_file() {
                return Err(Error::parse(&path, "patch image does not exist"));
            }
            let img = read_png(&path)?;
            if img.height != PATCH_SIZE || img.width != PATCH_SIZE {
                return Err(Error::parse(&path, format!("patch is {}x{}, expected 256x256", img.width, img.height)));
            }
            Ok(PatchSpotPair {
                patch: Arc::new(Patch::from_vec(img.data)?),
                expression,
                slice_id,
                spot_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((genes, pairs))
}

/// `gene,score,rank` with 1-based ranks.
pub fn write_panel(path: &Path, panel: &GenePanel) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["gene", "score", "rank"]).map_err(err)?;
    for (i, (g, s)) in panel.genes.iter().zip(&panel.scores).enumerate() {
        w.write_record([g.clone(), s.to_string(), (i + 1).to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_panel(path: &Path, mode: PanelMode) -> Result<GenePanel> {
    let mut reader = csv_reader(path)?;
    let header = headers(path, &mut reader)?;
    expect_columns(path, &header, &["gene", "score", "rank"])?;
    let mut rows: Vec<(usize, String, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        let gene = field(path, line, &record, 0, "gene")?.to_string();
        let score = parse_num(path, line, "score", field(path, line, &record, 1, "score")?)?;
        let rank = parse_num(path, line, "rank", field(path, line, &record, 2, "rank")?)?;
        rows.push((rank, gene, score));
    }
    rows.sort_by_key(|r| r.0);
    Ok(GenePanel {
        mode,
        genes: rows.iter().map(|r| r.1.clone()).collect(),
        scores: rows.iter().map(|r| r.2).collect(),
    })
}
