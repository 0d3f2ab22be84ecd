//! Synthetic corpora with planted class and patient structure.
//!
//! Every tile is a point in a shared latent space (`latent_dim`, 64 by
//! default) pushed through a fixed random affine map per extractor. Signal
//! tiles of a class-`c` patient sit at `μ_c + ν_p + noise`, where `μ_c` is a
//! class centroid of norm `class_separation` and `ν_p` a persistent
//! per-patient offset; background tiles sit at a shared background centre
//! plus noise. The latent tiles of one (patient, slide, magnification) are
//! drawn once and mapped through every extractor, so bags are tile-aligned
//! across extractors.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_tiles, TileInfo};
use super::{mag_dir, write_bag, BagEntry, CorpusManifest, PatchBag, PatientRecord, TileEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub id: String,
    pub dim: usize,
    /// Seeds the extractor's latent-to-feature map.
    pub seed: u64,
}

impl ExtractorSpec {
    pub fn new(id: impl Into<String>, dim: usize, seed: u64) -> Self {
        ExtractorSpec { id: id.into(), dim, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGenConfig {
    pub n_classes: usize,
    pub patients_per_class: usize,
    /// Inclusive range of tiles per slide before magnification scaling.
    pub tiles_per_bag: [usize; 2],
    pub signal_tile_fraction: f64,
    pub class_separation: f64,
    pub noise_scale: f64,
    /// Per-coordinate std of the persistent patient offset.
    #[serde(default = "default_patient_spread")]
    pub patient_spread: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_slides")]
    pub slides_per_patient: usize,
    /// Seeds class centroids, the background centre and magnification
    /// effects; cohorts sharing it share their "biology".
    #[serde(default)]
    pub world_seed: u64,
    /// Seeds the patients of this cohort.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub patient_prefix: String,
}

fn default_patient_spread() -> f64 {
    1.0
}
fn default_latent_dim() -> usize {
    64
}
fn default_slides() -> usize {
    1
}
fn default_prefix() -> String {
    "patient-".to_string()
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        SyntheticGenConfig {
            n_classes: 3,
            patients_per_class: 10,
            tiles_per_bag: [64, 128],
            signal_tile_fraction: 0.1,
            class_separation: 4.0,
            noise_scale: 1.0,
            patient_spread: default_patient_spread(),
            latent_dim: default_latent_dim(),
            slides_per_patient: default_slides(),
            world_seed: 0,
            seed: 0,
            patient_prefix: default_prefix(),
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes", "must be at least 1"));
        }
        if self.patients_per_class == 0 {
            return Err(Error::config("patients_per_class", "must be at least 1"));
        }
        let [lo, hi] = self.tiles_per_bag;
        if lo == 0 || hi < lo {
            return Err(Error::config("tiles_per_bag", format!("need 1 <= min <= max, got [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.signal_tile_fraction) {
            return Err(Error::config("signal_tile_fraction", "must lie in [0, 1]"));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::config("class_separation", "must be finite and >= 0"));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("noise_scale", "must be finite and > 0"));
        }
        if !(self.patient_spread >= 0.0) || !self.patient_spread.is_finite() {
            return Err(Error::config("patient_spread", "must be finite and >= 0"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if self.slides_per_patient == 0 {
            return Err(Error::config("slides_per_patient", "must be at least 1"));
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

struct ExtractorMap {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl ExtractorMap {
    fn new(spec: &ExtractorSpec, latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((spec.dim, latent_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let bias = gaussian_vec(&mut rng, spec.dim, 0.5);
        ExtractorMap { weight, bias }
    }

    fn apply(&self, latent: &Array2<f64>) -> Array2<f32> {
        let out = latent.dot(&self.weight.t()) + &self.bias;
        out.mapv(|v| v as f32)
    }
}

/// Deterministic per-magnification (tile-count factor, noise factor).
fn magnification_effects(world_seed: u64, mag_index: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(world_seed ^ (0x6d61_6700 + mag_index as u64));
    (rng.random_range(0.5..=1.0), rng.random_range(0.8..=1.25))
}

fn grid_coords(n: usize) -> Vec<(u32, u32)> {
    let width = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n).map(|i| ((i % width) as u32, (i / width) as u32)).collect()
}

/// Writes a full synthetic corpus (bags, tile sidecars, manifest) to `out_dir`.
pub fn generate_corpus(
    cfg: &SyntheticGenConfig,
    extractors: &[ExtractorSpec],
    mags: &[f64],
    out_dir: &Path,
) -> Result<CorpusManifest> {
    cfg.validate()?;
    if extractors.is_empty() {
        return Err(Error::config("extractors", "at least one extractor required"));
    }
    let mut ids = std::collections::HashSet::new();
    for e in extractors {
        if e.dim == 0 {
            return Err(Error::config("extractors.dim", format!("extractor `{}` has zero dim", e.id)));
        }
        if e.id.is_empty() || e.id.contains(['/', '\\']) || !ids.insert(&e.id) {
            return Err(Error::config("extractors.id", format!("invalid or duplicate id `{}`", e.id)));
        }
    }
    if mags.is_empty() || mags.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(Error::config("magnifications", "need at least one positive magnification"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let latent = cfg.latent_dim;
    let mut world = ChaCha8Rng::seed_from_u64(cfg.world_seed);
    let centroids: Vec<Array1<f64>> = (0..cfg.n_classes)
        .map(|_| {
            let v = gaussian_vec(&mut world, latent, 1.0);
            let norm = v.dot(&v).sqrt().max(1e-12);
            v * (cfg.class_separation / norm)
        })
        .collect();
    let background = gaussian_vec(&mut world, latent, 1.0);
    let maps: Vec<ExtractorMap> = extractors.iter().map(|e| ExtractorMap::new(e, latent)).collect();
    let effects: Vec<(f64, f64)> = (0..mags.len()).map(|i| magnification_effects(cfg.world_seed, i)).collect();

    let mut cohort = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = CorpusManifest {
        format_version: 1,
        extractors: extractors.to_vec(),
        magnifications: mags.to_vec(),
        patients: Vec::new(),
        bags: Vec::new(),
        tiles: Vec::new(),
        generator: Some(cfg.clone()),
    };

    let n_patients = cfg.n_classes * cfg.patients_per_class;
    for idx in 0..n_patients {
        let class_label = idx / cfg.patients_per_class;
        let patient_id = format!("{}{idx:04}", cfg.patient_prefix);
        let offset = gaussian_vec(&mut cohort, latent, cfg.patient_spread);
        let signal_centre = &centroids[class_label] + &offset;
        let slide_ids: Vec<String> = (0..cfg.slides_per_patient).map(|s| format!("s{s}")).collect();
        for slide_id in &slide_ids {
            let base_tiles = cohort.random_range(cfg.tiles_per_bag[0]..=cfg.tiles_per_bag[1]);
            for (mi, &mag) in mags.iter().enumerate() {
                let (count_factor, noise_factor) = effects[mi];
                let n_tiles = ((base_tiles as f64 * count_factor).round() as usize).max(1);
                let noise = cfg.noise_scale * noise_factor;
                let n_signal = (cfg.signal_tile_fraction * n_tiles as f64).round() as usize;
                let mut is_signal = vec![false; n_tiles];
                for i in sample(&mut cohort, n_tiles, n_signal.min(n_tiles)) {
                    is_signal[i] = true;
                }
                let mut latent_tiles = Array2::zeros((n_tiles, latent));
                for (mut row, &sig) in latent_tiles.rows_mut().into_iter().zip(&is_signal) {
                    let centre = if sig { &signal_centre } else { &background };
                    row.assign(&(centre + &gaussian_vec(&mut cohort, latent, noise)));
                }
                let coords = grid_coords(n_tiles);
                let tiles: Vec<TileInfo> = coords
                    .iter()
                    .zip(&is_signal)
                    .map(|(&(x, y), &signal)| TileInfo { x, y, signal })
                    .collect();
                let stem = format!("{patient_id}__{slide_id}");
                let tile_path = format!("tiles/{}/{stem}.csv", mag_dir(mag));
                write_tiles(&out_dir.join(&tile_path), &tiles)?;
                manifest.tiles.push(TileEntry {
                    patient_id: patient_id.clone(),
                    slide_id: slide_id.clone(),
                    magnification: mag,
                    path: tile_path,
                });
                for (spec, map) in extractors.iter().zip(&maps) {
                    let bag = PatchBag {
                        patient_id: patient_id.clone(),
                        slide_id: slide_id.clone(),
                        extractor_id: spec.id.clone(),
                        magnification_mpp: mag,
                        features: map.apply(&latent_tiles),
                    };
                    let path = format!("{}/{}/{stem}.bag", spec.id, mag_dir(mag));
                    write_bag(&bag, &out_dir.join(&path))?;
                    manifest.bags.push(BagEntry {
                        patient_id: patient_id.clone(),
                        slide_id: slide_id.clone(),
                        extractor_id: spec.id.clone(),
                        magnification: mag,
                        n_tiles,
                        path,
                    });
                }
            }
        }
        manifest.patients.push(PatientRecord {
            patient_id,
            class_label,
            slide_ids,
        });
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}
