//! The slide encoder `z = f_A(f_S(f_E(H)))` and its three inference modes.
//!
//! * `ENC`: attention-weighted average of the encoded tiles `H_S` (the
//!   training-time path).
//! * `SINGLE_FM`: weights from `H_S`, payload from the raw patch embeddings
//!   of the same bag, so `z` lives in the extractor's own space.
//! * `COMBINED_FM`: per-tile average of every extractor's embedding-module
//!   output drives the weights; the payload is one named extractor's raw
//!   embeddings.

mod attention;
mod embedding;
mod sequence;

pub use attention::{weighted_sum, AttentionCache, AttentionHead, AttentionWeights, GatedAttention};
pub use embedding::{EmbeddingCache, EmbeddingMlp};
pub use sequence::{SequenceCache, SequenceEncoder};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{ExtractorSpec, PatchBag};
use crate::params::{join, NamedView, NamedViewMut, Parameters};
use crate::ssd::SsdConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Shared embedding width `d`.
    pub d_model: usize,
    /// Hidden width of the per-extractor embedding MLPs.
    pub d_hidden: usize,
    pub n_ssd_layers: usize,
    pub ssd_heads: usize,
    pub d_state: usize,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub dropout: f64,
    #[serde(default = "default_dt_bias")]
    pub dt_bias_init: f64,
    #[serde(default = "default_a_range")]
    pub a_init_range: (f64, f64),
    /// Registry of extractors the encoder has an embedding MLP for.
    #[serde(default)]
    pub extractors: Vec<ExtractorSpec>,
}

fn default_dt_bias() -> f64 {
    SsdConfig::default().dt_bias_init
}

fn default_a_range() -> (f64, f64) {
    SsdConfig::default().a_init_range
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 768,
            d_hidden: 768,
            n_ssd_layers: 2,
            ssd_heads: 8,
            d_state: 64,
            attn_heads: 8,
            attn_dim: 96,
            dropout: 0.25,
            dt_bias_init: default_dt_bias(),
            a_init_range: default_a_range(),
            extractors: Vec::new(),
        }
    }
}

impl EncoderConfig {
    /// A small configuration for laptop-scale experiments.
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 64,
            d_hidden: 64,
            ssd_heads: 4,
            d_state: 16,
            attn_heads: 4,
            attn_dim: 24,
            ..Default::default()
        }
    }

    pub fn with_extractors(mut self, extractors: &[ExtractorSpec]) -> Self {
        self.extractors = extractors.to_vec();
        self
    }

    pub fn ssd(&self) -> SsdConfig {
        SsdConfig {
            d_model: self.d_model,
            n_heads: self.ssd_heads,
            d_state: self.d_state,
            dt_bias_init: self.dt_bias_init,
            a_init_range: self.a_init_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::config("model.d_model", "widths must be positive"));
        }
        if self.n_ssd_layers == 0 {
            return Err(Error::config("model.n_ssd_layers", "must be at least 1"));
        }
        self.ssd().validate()?;
        if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return Err(Error::config(
                "model.attn_heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.attn_heads),
            ));
        }
        if self.attn_dim == 0 {
            return Err(Error::config("model.attn_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.extractors.is_empty() {
            return Err(Error::config("model.extractors", "at least one extractor required"));
        }
        let mut ids = std::collections::HashSet::new();
        for e in &self.extractors {
            if !ids.insert(&e.id) || e.dim == 0 {
                return Err(Error::config("model.extractors", format!("invalid or duplicate extractor `{}`", e.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceMode {
    #[serde(rename = "ENC")]
    Enc,
    #[serde(rename = "SINGLE_FM")]
    SingleFm,
    #[serde(rename = "COMBINED_FM")]
    CombinedFm,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Enc => "ENC",
            InferenceMode::SingleFm => "SINGLE_FM",
            InferenceMode::CombinedFm => "COMBINED_FM",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "enc" => Ok(InferenceMode::Enc),
            "single-fm" | "single" => Ok(InferenceMode::SingleFm),
            "combined-fm" | "combined" => Ok(InferenceMode::CombinedFm),
            _ => Err(Error::config("mode", format!("unknown inference mode `{s}`"))),
        }
    }
}

/// A patient-level vector plus how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientEmbedding {
    pub z: Array1<f64>,
    pub mode: InferenceMode,
    /// Extractor whose rows were aggregated (the payload).
    pub extractor_id: String,
    pub magnification: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEncoder {
    pub config: EncoderConfig,
    pub embed: BTreeMap<String, EmbeddingMlp>,
    pub seq: SequenceEncoder,
    pub attn: GatedAttention,
}

impl Parameters for SlideEncoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.embed.collect(&join(prefix, "embed"), out);
        self.seq.collect(&join(prefix, "seq"), out);
        self.attn.collect(&join(prefix, "attn"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.embed.collect_mut(&join(prefix, "embed"), out);
        self.seq.collect_mut(&join(prefix, "seq"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
    }
}

/// Intermediates of [`SlideEncoder::forward_train`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    extractor_id: String,
    embed: EmbeddingCache,
    seq: SequenceCache,
    h_s: Array2<f64>,
    weights: AttentionWeights,
    attn: AttentionCache,
}

impl EncoderCache {
    pub fn weights(&self) -> &AttentionWeights {
        &self.weights
    }
}

impl SlideEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = config
            .extractors
            .iter()
            .map(|e| (e.id.clone(), EmbeddingMlp::new(e.dim, config.d_hidden, config.d_model, rng)))
            .collect();
        let seq = SequenceEncoder::new(&config.ssd(), config.n_ssd_layers, rng);
        let attn = GatedAttention::new(config.d_model, config.attn_heads, config.attn_dim, rng)?;
        Ok(SlideEncoder { config, embed, seq, attn })
    }

    fn embedding(&self, extractor_id: &str, features: &Array2<f64>) -> Result<&EmbeddingMlp> {
        let mlp = self
            .embed
            .get(extractor_id)
            .ok_or_else(|| Error::UnknownExtractor(extractor_id.to_string()))?;
        if features.ncols() != mlp.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "extractor `{extractor_id}` expects {} features, bag has {}",
                mlp.d_in(),
                features.ncols()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::InvalidInput("bag has no tiles".into()));
        }
        Ok(mlp)
    }

    /// Embedding module `H_E = f_E(H)`; a per-tile map.
    pub fn embed_module(&self, extractor_id: &str, features: &Array2<f64>) -> Result<Array2<f64>> {
        let mlp = self.embedding(extractor_id, features)?;
        Ok(mlp.forward::<rand_chacha::ChaCha8Rng>(features, 0.0, None).0)
    }

    /// State-space module `H_S = f_S(H_E)`.
    pub fn encode_sequence(&self, h_e: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.seq.forward(h_e)?.0)
    }

    pub fn attention_weights(&self, h_s: &Array2<f64>) -> Result<AttentionWeights> {
        Ok(self.attn.forward::<rand_chacha::ChaCha8Rng>(h_s, 0.0, None)?.0)
    }

    /// Encoded tiles and their pooling weights for one bag, dropout off.
    pub fn encode_tiles(&self, extractor_id: &str, features: &Array2<f64>) -> Result<(Array2<f64>, AttentionWeights)> {
        let h_e = self.embed_module(extractor_id, features)?;
        let h_s = self.encode_sequence(&h_e)?;
        let w = self.attention_weights(&h_s)?;
        Ok((h_s, w))
    }

    /// `ENC` aggregation: `z = Σ_k a_k H_S,k`.
    pub fn aggregate_enc(h_s: &Array2<f64>, weights: &AttentionWeights) -> Result<Array1<f64>> {
        weighted_sum(&weights.combined, h_s)
    }

    /// `SINGLE_FM` aggregation: weights from `H_S`, rows from the raw bag.
    pub fn aggregate_single_fm(weights: &AttentionWeights, raw: &Array2<f64>) -> Result<Array1<f64>> {
        weighted_sum(&weights.combined, raw)
    }

    /// Runs one bag through the encoder in `ENC` or `SINGLE_FM` mode.
    pub fn infer(&self, bag: &PatchBag, mode: InferenceMode) -> Result<(PatientEmbedding, AttentionWeights)> {
        let raw = bag.features_f64();
        let (h_s, w) = self.encode_tiles(&bag.extractor_id, &raw)?;
        let z = match mode {
            InferenceMode::Enc => Self::aggregate_enc(&h_s, &w)?,
            InferenceMode::SingleFm => Self::aggregate_single_fm(&w, &raw)?,
            InferenceMode::CombinedFm => {
                return self.encode_combined(std::slice::from_ref(bag), &bag.extractor_id);
            }
        };
        Ok((
            PatientEmbedding {
                z,
                mode,
                extractor_id: bag.extractor_id.clone(),
                magnification: bag.magnification_mpp,
            },
            w,
        ))
    }

    /// `COMBINED_FM`: average the embedding-module outputs of tile-aligned
    /// bags from several extractors, encode, and aggregate the payload
    /// extractor's raw rows with the resulting weights.
    pub fn encode_combined(&self, bags: &[PatchBag], payload_extractor_id: &str) -> Result<(PatientEmbedding, AttentionWeights)> {
        let first = bags
            .first()
            .ok_or_else(|| Error::InvalidInput("combined mode needs at least one bag".into()))?;
        for b in bags {
            if b.patient_id != first.patient_id || b.magnification_mpp != first.magnification_mpp {
                return Err(Error::InvalidInput(
                    "combined mode bags must share patient and magnification".into(),
                ));
            }
            if b.n_tiles() != first.n_tiles() {
                return Err(Error::ShapeMismatch(format!(
                    "bags are not tile-aligned: {} has {} tiles, {} has {}",
                    first.extractor_id,
                    first.n_tiles(),
                    b.extractor_id,
                    b.n_tiles()
                )));
            }
        }
        let payload = bags
            .iter()
            .find(|b| b.extractor_id == payload_extractor_id)
            .ok_or_else(|| Error::UnknownExtractor(format!("no bag for payload extractor `{payload_extractor_id}`")))?;
        let mut mean: Option<Array2<f64>> = None;
        for b in bags {
            let h = self.embed_module(&b.extractor_id, &b.features_f64())?;
            mean = Some(match mean {
                Some(acc) => acc + h,
                None => h,
            });
        }
        let mean = mean.expect("non-empty") / bags.len() as f64;
        let h_s = self.encode_sequence(&mean)?;
        let w = self.attention_weights(&h_s)?;
        let z = Self::aggregate_single_fm(&w, &payload.features_f64())?;
        Ok((
            PatientEmbedding {
                z,
                mode: InferenceMode::CombinedFm,
                extractor_id: payload_extractor_id.to_string(),
                magnification: payload.magnification_mpp,
            },
            w,
        ))
    }

    /// Differentiable `ENC` path used during pretraining. Dropout is active
    /// when `rng` is given.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        extractor_id: &str,
        features: &Array2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array1<f64>, EncoderCache)> {
        let mlp = self.embedding(extractor_id, features)?;
        let p = self.config.dropout;
        let (h_e, embed) = mlp.forward(features, p, rng.as_deref_mut());
        let (h_s, seq) = self.seq.forward(&h_e)?;
        let (weights, attn) = self.attn.forward(&h_s, p, rng)?;
        let z = Self::aggregate_enc(&h_s, &weights)?;
        Ok((
            z,
            EncoderCache {
                extractor_id: extractor_id.to_string(),
                embed,
                seq,
                h_s,
                weights,
                attn,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/dz` and returns `dL/dH`.
    pub fn backward(&self, cache: &EncoderCache, grad_z: &Array1<f64>, grads: &mut SlideEncoder) -> Array2<f64> {
        let g_weights = cache.h_s.dot(grad_z);
        let mut g_hs = self
            .attn
            .backward(&cache.h_s, &cache.weights, &cache.attn, &g_weights, &mut grads.attn);
        for (mut row, &a) in g_hs.rows_mut().into_iter().zip(cache.weights.combined.iter()) {
            row.scaled_add(a, grad_z);
        }
        let g_he = self.seq.backward(&cache.seq, &g_hs, &mut grads.seq);
        let mlp = &self.embed[&cache.extractor_id];
        let g_mlp = grads.embed.get_mut(&cache.extractor_id).expect("same registry");
        mlp.backward(&cache.embed, &g_he, g_mlp)
    }
}
