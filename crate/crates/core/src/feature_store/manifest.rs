use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{read_bag, ExtractorSpec, PatchBag, SyntheticGenConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub class_label: usize,
    pub slide_ids: Vec<String>,
}

/// One bag file; `path` is relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagEntry {
    pub patient_id: String,
    pub slide_id: String,
    pub extractor_id: String,
    pub magnification: f64,
    pub n_tiles: usize,
    pub path: String,
}

/// One tile-metadata sidecar (shared by all extractors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileEntry {
    pub patient_id: String,
    pub slide_id: String,
    pub magnification: f64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub extractors: Vec<ExtractorSpec>,
    pub magnifications: Vec<f64>,
    pub patients: Vec<PatientRecord>,
    pub bags: Vec<BagEntry>,
    pub tiles: Vec<TileEntry>,
    /// Generator settings when the corpus is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticGenConfig>,
}

impl CorpusManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn patient(&self, patient_id: &str) -> Result<&PatientRecord> {
        self.patients
            .iter()
            .find(|p| p.patient_id == patient_id)
            .ok_or_else(|| Error::UnknownPatient(patient_id.to_string()))
    }

    pub fn extractor(&self, id: &str) -> Result<&ExtractorSpec> {
        self.extractors
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::UnknownExtractor(id.to_string()))
    }

    pub fn magnification_index(&self, mpp: f64) -> Result<usize> {
        self.magnifications
            .iter()
            .position(|&m| m == mpp)
            .ok_or_else(|| Error::InvalidInput(format!("magnification {mpp} not in corpus")))
    }

    /// Bag entries for one (patient, extractor, magnification), in slide order.
    pub fn bag_entries(&self, patient_id: &str, extractor_id: &str, mpp: f64) -> Result<Vec<&BagEntry>> {
        let patient = self.patient(patient_id)?;
        patient
            .slide_ids
            .iter()
            .map(|slide| {
                self.bags
                    .iter()
                    .find(|b| {
                        b.patient_id == patient_id
                            && &b.slide_id == slide
                            && b.extractor_id == extractor_id
                            && b.magnification == mpp
                    })
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "no bag for patient {patient_id}, slide {slide}, extractor {extractor_id}, {mpp} mpp"
                        ))
                    })
            })
            .collect()
    }

    pub fn tile_entries(&self, patient_id: &str, mpp: f64) -> Result<Vec<&TileEntry>> {
        let patient = self.patient(patient_id)?;
        patient
            .slide_ids
            .iter()
            .map(|slide| {
                self.tiles
                    .iter()
                    .find(|t| t.patient_id == patient_id && &t.slide_id == slide && t.magnification == mpp)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("no tile sidecar for patient {patient_id}, slide {slide}, {mpp} mpp"))
                    })
            })
            .collect()
    }

    /// Checks the manifest closure: unique ids, one bag per declared
    /// (patient, slide, extractor, magnification), and every file present.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.extractors {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate extractor id `{}`", e.id)));
            }
            if e.dim == 0 {
                return Err(Error::InvalidInput(format!("extractor `{}` has zero dim", e.id)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate patient id `{}`", p.patient_id)));
            }
            if p.slide_ids.is_empty() {
                return Err(Error::InvalidInput(format!("patient `{}` has no slides", p.patient_id)));
            }
            for &m in &self.magnifications {
                for e in &self.extractors {
                    self.bag_entries(&p.patient_id, &e.id, m)?;
                }
                self.tile_entries(&p.patient_id, m)?;
            }
        }
        for path in self.bags.iter().map(|b| &b.path).chain(self.tiles.iter().map(|t| &t.path)) {
            let full = root.join(path);
            if !full.is_file() {
                return Err(Error::MissingFile { path: full });
            }
        }
        Ok(())
    }
}

/// Per-tile metadata from a sidecar file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileInfo {
    pub x: u32,
    pub y: u32,
    /// Ground truth from the generator: tile carries class/patient signal.
    pub signal: bool,
}

pub(crate) fn write_tiles(path: &Path, tiles: &[TileInfo]) -> Result<()> {
    let mut text = String::from("tile_index,x,y,signal\n");
    for (i, t) in tiles.iter().enumerate() {
        text.push_str(&format!("{i},{},{},{}\n", t.x, t.y, u8::from(t.signal)));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_tiles(path: &Path) -> Result<Vec<TileInfo>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::InvalidInput(format!("{}: malformed line {line}", path.display()));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(out.len()) {
            return Err(bad(n + 1));
        }
        out.push(TileInfo {
            x: fields[1].parse().map_err(|_| bad(n + 1))?,
            y: fields[2].parse().map_err(|_| bad(n + 1))?,
            signal: fields[3] == "1",
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct PooledBag {
    features: Array2<f32>,
}

/// An opened corpus with every bag resident in memory.
///
/// Bags of a patient's slides are pooled (concatenated in slide order) per
/// (extractor, magnification). Read-only after construction, so it can be
/// shared freely between threads.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    root: PathBuf,
    manifest: CorpusManifest,
    pooled: HashMap<(usize, usize, usize), PooledBag>,
    tiles: HashMap<(usize, usize), Vec<TileInfo>>,
}

impl FeatureStore {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(root)?;
        Self::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: &Path, manifest: CorpusManifest) -> Result<Self> {
        manifest.validate(root)?;
        let mut pooled = HashMap::new();
        let mut tiles = HashMap::new();
        for (pi, p) in manifest.patients.iter().enumerate() {
            for (mi, &m) in manifest.magnifications.iter().enumerate() {
                let mut pooled_tiles = Vec::new();
                let mut x_offset = 0;
                for entry in manifest.tile_entries(&p.patient_id, m)? {
                    let slide = read_tiles(&root.join(&entry.path))?;
                    let width = slide.iter().map(|t| t.x + 1).max().unwrap_or(0);
                    // slides sit side by side on a shared grid with a one-cell gap
                    pooled_tiles.extend(slide.iter().map(|t| TileInfo {
                        x: t.x + x_offset,
                        ..*t
                    }));
                    x_offset += width + 1;
                }
                for (ei, e) in manifest.extractors.iter().enumerate() {
                    let bags = manifest
                        .bag_entries(&p.patient_id, &e.id, m)?
                        .into_iter()
                        .map(|entry| {
                            let bag = read_bag(&root.join(&entry.path))?;
                            check_bag(&bag, entry, e)?;
                            Ok(bag)
                        })
                        .collect::<Result<Vec<PatchBag>>>()?;
                    let views: Vec<_> = bags.iter().map(|b| b.features.view()).collect();
                    let features = concatenate(Axis(0), &views).expect("equal widths checked");
                    if features.nrows() != pooled_tiles.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "patient {} extractor {} at {m} mpp: {} tiles but {} tile records",
                            p.patient_id,
                            e.id,
                            features.nrows(),
                            pooled_tiles.len()
                        )));
                    }
                    pooled.insert((pi, ei, mi), PooledBag { features });
                }
                tiles.insert((pi, mi), pooled_tiles);
            }
        }
        Ok(FeatureStore {
            root: root.to_path_buf(),
            manifest,
            pooled,
            tiles,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.manifest.patients.iter().map(|p| p.patient_id.as_str()).collect()
    }

    fn index(&self, patient_id: &str, extractor_id: &str, mpp: f64) -> Result<(usize, usize, usize)> {
        let pi = self
            .manifest
            .patients
            .iter()
            .position(|p| p.patient_id == patient_id)
            .ok_or_else(|| Error::UnknownPatient(patient_id.to_string()))?;
        let ei = self
            .manifest
            .extractors
            .iter()
            .position(|e| e.id == extractor_id)
            .ok_or_else(|| Error::UnknownExtractor(extractor_id.to_string()))?;
        let mi = self.manifest.magnification_index(mpp)?;
        Ok((pi, ei, mi))
    }

    /// All tiles of a patient at one extractor and magnification, pooled
    /// across slides, as a single bag.
    pub fn pooled_bag(&self, patient_id: &str, extractor_id: &str, mpp: f64) -> Result<PatchBag> {
        let key = self.index(patient_id, extractor_id, mpp)?;
        Ok(PatchBag {
            patient_id: patient_id.to_string(),
            slide_id: "pooled".to_string(),
            extractor_id: extractor_id.to_string(),
            magnification_mpp: mpp,
            features: self.pooled[&key].features.clone(),
        })
    }

    pub(crate) fn pooled_features(&self, pi: usize, ei: usize, mi: usize) -> &Array2<f32> {
        &self.pooled[&(pi, ei, mi)].features
    }

    pub fn tiles(&self, patient_id: &str, mpp: f64) -> Result<&[TileInfo]> {
        let (pi, _, mi) = self.index(patient_id, &self.manifest.extractors[0].id, mpp)?;
        Ok(&self.tiles[&(pi, mi)])
    }
}

fn check_bag(bag: &PatchBag, entry: &BagEntry, spec: &ExtractorSpec) -> Result<()> {
    if bag.dim() != spec.dim {
        return Err(Error::DimensionMismatch(format!(
            "{}: extractor {} declares dim {}, bag has {}",
            entry.path,
            spec.id,
            spec.dim,
            bag.dim()
        )));
    }
    if bag.n_tiles() != entry.n_tiles
        || bag.patient_id != entry.patient_id
        || bag.slide_id != entry.slide_id
        || bag.extractor_id != entry.extractor_id
        || bag.magnification_mpp != entry.magnification
    {
        return Err(Error::ShapeMismatch(format!("{}: header disagrees with manifest", entry.path)));
    }
    Ok(())
}
