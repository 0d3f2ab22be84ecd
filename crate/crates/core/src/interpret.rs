//! Attention heatmap export and embedding dumps.
//!
//! Attention weights come from the same forward pass that aggregates the
//! patient vector, so the exported numbers are exactly the ones used. Floats
//! are written in shortest round-trip form and parse back bit-equal.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoder::{InferenceMode, SlideEncoder};
use crate::error::{Error, Result};
use crate::eval::EvalDataset;
use crate::feature_store::FeatureStore;

pub const ATTENTION_CSV_HEADER: &str = "tile_index,x,y,weight";
const PGM_COMMENT: &str = "# cobra-lite attention raster v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileWeight {
    pub tile_index: usize,
    pub x: u32,
    pub y: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub patient_id: String,
    pub extractor_id: String,
    pub magnification: f64,
    pub tiles: Vec<TileWeight>,
}

/// Combined attention weights for one patient's pooled bag, with grid
/// coordinates from the tile sidecars.
pub fn attention_map(
    store: &FeatureStore,
    encoder: &SlideEncoder,
    patient_id: &str,
    extractor_id: &str,
    mpp: f64,
) -> Result<AttentionMap> {
    let bag = store.pooled_bag(patient_id, extractor_id, mpp)?;
    let (_, weights) = encoder.infer(&bag, InferenceMode::Enc)?;
    let info = store.tiles(patient_id, mpp)?;
    if info.len() != weights.combined.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tile records but {} weights",
            info.len(),
            weights.combined.len()
        )));
    }
    let tiles = info
        .iter()
        .zip(weights.combined.iter())
        .enumerate()
        .map(|(i, (t, &w))| TileWeight {
            tile_index: i,
            x: t.x,
            y: t.y,
            weight: w,
        })
        .collect();
    Ok(AttentionMap {
        patient_id: patient_id.to_string(),
        extractor_id: extractor_id.to_string(),
        magnification: mpp,
        tiles,
    })
}

pub fn attention_csv(tiles: &[TileWeight]) -> String {
    let mut out = String::from(ATTENTION_CSV_HEADER);
    out.push('\n');
    for t in tiles {
        let _ = writeln!(out, "{},{},{},{}", t.tile_index, t.x, t.y, t.weight);
    }
    out
}

pub fn parse_attention_csv(text: &str) -> Result<Vec<TileWeight>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ATTENTION_CSV_HEADER) {
        return Err(Error::InvalidInput(format!("attention CSV must start with `{ATTENTION_CSV_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::InvalidInput(format!("attention CSV row {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TileWeight {
                tile_index: f[0].parse().map_err(|_| bad())?,
                x: f[1].parse().map_err(|_| bad())?,
                y: f[2].parse().map_err(|_| bad())?,
                weight: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Plain (P2) grayscale PGM, one pixel per grid cell. Intensity is the
/// min-max normalized weight scaled to 0..=255; cells without a tile and
/// slides with constant weights are 0.
pub fn render_pgm(tiles: &[TileWeight]) -> Result<String> {
    if tiles.is_empty() {
        return Err(Error::InvalidInput("no tiles to render".into()));
    }
    let width = tiles.iter().map(|t| t.x).max().unwrap_or(0) as usize + 1;
    let height = tiles.iter().map(|t| t.y).max().unwrap_or(0) as usize + 1;
    let lo = tiles.iter().map(|t| t.weight).fold(f64::INFINITY, f64::min);
    let hi = tiles.iter().map(|t| t.weight).fold(f64::NEG_INFINITY, f64::max);
    let mut pixels = vec![0u8; width * height];
    let mut seen = vec![false; width * height];
    for t in tiles {
        let idx = t.y as usize * width + t.x as usize;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::InvalidInput(format!("duplicate tile coordinate ({}, {})", t.x, t.y)));
        }
        let v = if hi > lo { (t.weight - lo) / (hi - lo) } else { 0.0 };
        pixels[idx] = (v * 255.0).round() as u8;
    }
    let mut out = format!("P2\n{PGM_COMMENT}\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Writes the CSV and, when `pgm_path` is given, the raster rendered from
/// the CSV text itself.
pub fn export_attention(map: &AttentionMap, csv_path: &Path, pgm_path: Option<&Path>) -> Result<()> {
    let csv = attention_csv(&map.tiles);
    write_text(csv_path, &csv)?;
    if let Some(p) = pgm_path {
        write_text(p, &render_pgm(&parse_attention_csv(&csv)?)?)?;
    }
    Ok(())
}

/// Tab-separated `patient_id, label, z_0 … z_{d-1}` with a header row.
pub fn embeddings_tsv(ds: &EvalDataset) -> String {
    let mut out = String::from("patient_id\tlabel");
    for j in 0..ds.dim() {
        let _ = write!(out, "\tz{j}");
    }
    out.push('\n');
    for (i, id) in ds.patient_ids.iter().enumerate() {
        let _ = write!(out, "{id}\t{}", ds.labels[i]);
        for v in ds.embeddings.row(i) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub fn export_embeddings(ds: &EvalDataset, path: &Path) -> Result<()> {
    write_text(path, &embeddings_tsv(ds))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
