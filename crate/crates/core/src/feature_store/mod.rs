//! Patch-embedding bags: data model, on-disk format, synthetic corpora and
//! view sampling.
//!
//! A corpus directory looks like
//!
//! ```text
//! <corpus>/manifest.json
//! <corpus>/<extractor>/<mag>/<patient>__<slide>.bag
//! <corpus>/tiles/<mag>/<patient>__<slide>.csv
//! ```
//!
//! Tile sidecars carry grid coordinates and the generator's ground-truth
//! signal flag, one row per tile in bag order. Bags of the same patient,
//! slide and magnification are tile-aligned across extractors.

mod bag;
mod manifest;
mod synth;
mod view;

pub use bag::{decode_bag, encode_bag, read_bag, write_bag, BAG_MAGIC, BAG_VERSION};
pub use manifest::{BagEntry, CorpusManifest, FeatureStore, PatientRecord, TileEntry, TileInfo, MANIFEST_FILE};
pub use synth::{generate_corpus, ExtractorSpec, SyntheticGenConfig};
pub use view::{make_view, sample_view, View, DEFAULT_MAX_TILES};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Directory name used for a magnification (microns per pixel).
pub fn mag_dir(mpp: f64) -> String {
    format!("{mpp}")
}

/// The embeddings one extractor produced for one slide at one magnification.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBag {
    pub patient_id: String,
    pub slide_id: String,
    pub extractor_id: String,
    pub magnification_mpp: f64,
    /// `N_t × d_n`
    pub features: Array2<f32>,
}

impl PatchBag {
    pub fn n_tiles(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tiles() == 0 || self.dim() == 0 {
            return Err(Error::InvalidInput(format!(
                "bag {}/{} is empty ({}×{})",
                self.patient_id,
                self.slide_id,
                self.n_tiles(),
                self.dim()
            )));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.dim(),
                col: pos % self.dim(),
            });
        }
        Ok(())
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}
