use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;

use super::FeatureStore;
use crate::error::{Error, Result};

/// Tile cap per view.
pub const DEFAULT_MAX_TILES: usize = 768;

/// One sampled realization of a patient: an extractor, a magnification and
/// a subset of that patient's pooled tiles (kept in source order).
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub patient_id: String,
    pub extractor_id: String,
    pub magnification: f64,
    /// Indices into the patient's pooled tile list, strictly increasing.
    pub tile_indices: Vec<usize>,
    /// `tile_indices.len() × d_extractor`
    pub features: Array2<f64>,
}

impl View {
    pub fn n_tiles(&self) -> usize {
        self.tile_indices.len()
    }
}

/// Builds a view from explicit choices. `tile_indices = None` takes every tile.
pub fn make_view(
    store: &FeatureStore,
    patient_id: &str,
    extractor_id: &str,
    mpp: f64,
    tile_indices: Option<Vec<usize>>,
) -> Result<View> {
    let manifest = store.manifest();
    let pi = manifest
        .patients
        .iter()
        .position(|p| p.patient_id == patient_id)
        .ok_or_else(|| Error::UnknownPatient(patient_id.to_string()))?;
    let ei = manifest
        .extractors
        .iter()
        .position(|e| e.id == extractor_id)
        .ok_or_else(|| Error::UnknownExtractor(extractor_id.to_string()))?;
    let mi = manifest.magnification_index(mpp)?;
    Ok(build(store, pi, ei, mi, tile_indices))
}

fn build(store: &FeatureStore, pi: usize, ei: usize, mi: usize, tile_indices: Option<Vec<usize>>) -> View {
    let manifest = store.manifest();
    let pooled = store.pooled_features(pi, ei, mi);
    let tile_indices = tile_indices.unwrap_or_else(|| (0..pooled.nrows()).collect());
    let features = pooled.select(Axis(0), &tile_indices).mapv(f64::from);
    View {
        patient_id: manifest.patients[pi].patient_id.clone(),
        extractor_id: manifest.extractors[ei].id.clone(),
        magnification: manifest.magnifications[mi],
        tile_indices,
        features,
    }
}

/// Draws one view: uniform extractor, uniform magnification, then a uniform
/// subset of `min(N, max_tiles)` pooled tiles without replacement.
pub fn sample_view<R: Rng + ?Sized>(store: &FeatureStore, patient_id: &str, rng: &mut R, max_tiles: usize) -> Result<View> {
    if max_tiles == 0 {
        return Err(Error::config("max_tiles", "must be at least 1"));
    }
    let manifest = store.manifest();
    let pi = manifest
        .patients
        .iter()
        .position(|p| p.patient_id == patient_id)
        .ok_or_else(|| Error::UnknownPatient(patient_id.to_string()))?;
    let ei = rng.random_range(0..manifest.extractors.len());
    let mi = rng.random_range(0..manifest.magnifications.len());
    let total = store.pooled_features(pi, ei, mi).nrows();
    let indices = if total <= max_tiles {
        None
    } else {
        let mut idx = sample(rng, total, max_tiles).into_vec();
        idx.sort_unstable();
        Some(idx)
    };
    Ok(build(store, pi, ei, mi, indices))
}
