use std::fs;
use std::path::{Path, PathBuf};

use cobra_core::checkpoint::{load_checkpoint, Checkpoint, CODE_VERSION};
use cobra_core::contrastive::{train, ModelConfig, TrainConfig};
use cobra_core::encoder::InferenceMode;
use cobra_core::eval::{
    extract_embeddings, linear_probe_fewshot, metric_records, mlp_cv, records_csv, summary_table, EmbeddingSpec,
    EvalDataset, EvalRecord,
};
use cobra_core::feature_store::{generate_corpus, FeatureStore};
use cobra_core::interpret::{attention_map, export_attention, export_embeddings};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{resolve_seed, EmbedSection, RunConfig, SeedSource, SEED_ENV};
use crate::{AttnArgs, CliError, Common, DumpArgs, EmbedArgs, EvalFewshotArgs, EvalMlpArgs, GenerateArgs, Preset, PretrainArgs, Source};

struct Setup {
    file: RunConfig,
    seed: u64,
    seed_source: SeedSource,
}

fn setup(common: &Common) -> Result<Setup, CliError> {
    let file = RunConfig::load_opt(common.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    let (seed, seed_source) = resolve_seed(common.seed, file.seed, env.as_deref())?;
    Ok(Setup { file, seed, seed_source })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::missing(format!("{} not found", path.display()))
    } else {
        CliError::other(format!("{}: {e}", path.display()))
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Everything needed to repeat the run: command, resolved seed and config.
fn write_run_json(out: &Path, command: &str, s: &Setup, config: Value) -> Result<(), CliError> {
    let doc = json!({
        "command": command,
        "code_version": CODE_VERSION,
        "seed": s.seed,
        "seed_source": s.seed_source,
        "config": config,
    });
    write(&out.join("run.json"), &(serde_json::to_string_pretty(&doc).expect("serializable") + "\n"))
}

fn abs(p: &Path) -> String {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let mut sec = s.file.generate.clone().unwrap_or_default();
    sec.synthetic.seed = s.seed;
    if let Some(v) = a.world_seed {
        sec.synthetic.world_seed = v;
    }
    if let Some(v) = a.patients_per_class {
        sec.synthetic.patients_per_class = v;
    }
    if let Some(v) = a.class_separation {
        sec.synthetic.class_separation = v;
    }
    if let Some(v) = &a.patient_prefix {
        sec.synthetic.patient_prefix = v.clone();
    }
    let manifest = generate_corpus(&sec.synthetic, &sec.extractors, &sec.magnifications, &a.common.out)?;
    println!(
        "wrote {} patients, {} bags to {}",
        manifest.patients.len(),
        manifest.bags.len(),
        a.common.out.display()
    );
    write_run_json(&a.common.out, "generate", &s, json!({ "generate": sec }))
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let store = FeatureStore::open(&a.corpus)?;
    let model = s.file.model.clone().unwrap_or_else(|| match a.preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Full => ModelConfig::default(),
    });
    let mut cfg = s.file.pretrain.clone().unwrap_or_else(|| match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    });
    cfg.seed = s.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    cfg.validate()?;
    let outcome = train(&store, &cfg, &model, Some(&a.common.out))?;
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        println!("loss {:.4} -> {:.4} over {} epochs", first.loss, last.loss, outcome.metrics.len());
    }
    write_run_json(
        &a.common.out,
        "pretrain",
        &s,
        json!({ "corpus": abs(&a.corpus), "model": outcome.model_config, "pretrain": cfg }),
    )
}

/// Serialized form of an [`EvalDataset`].
#[derive(Serialize, Deserialize)]
struct EmbeddingsFile {
    spec: EmbeddingSpec,
    n_classes: usize,
    patient_ids: Vec<String>,
    labels: Vec<usize>,
    embeddings: Vec<Vec<f64>>,
}

impl EmbeddingsFile {
    fn from_dataset(ds: &EvalDataset, spec: &EmbeddingSpec) -> Self {
        EmbeddingsFile {
            spec: spec.clone(),
            n_classes: ds.n_classes,
            patient_ids: ds.patient_ids.clone(),
            labels: ds.labels.clone(),
            embeddings: ds.embeddings.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn load(path: &Path) -> Result<(EvalDataset, EmbeddingSpec), CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let f: EmbeddingsFile =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let d = f.embeddings.first().map_or(0, Vec::len);
        if f.embeddings.iter().any(|r| r.len() != d) {
            return Err(CliError::config(format!("{}: embedding rows differ in length", path.display())));
        }
        let n = f.embeddings.len();
        let matrix = Array2::from_shape_vec((n, d), f.embeddings.concat()).expect("checked lengths");
        let m = EvalDataset::new(f.patient_ids, matrix, f.labels, f.n_classes)?;
        Ok((m, f.spec))
    }
}

/// Resolved embedding source: either a precomputed file or a checkpoint
/// applied to a corpus.
struct Resolved {
    spec: EmbeddingSpec,
    checkpoint: Option<(PathBuf, Checkpoint)>,
    dataset: EvalDataset,
    origin: Value,
}

fn resolve_spec(src: &Source, sec: &EmbedSection, store: &FeatureStore) -> Result<EmbeddingSpec, CliError> {
    let m = store.manifest();
    let payload = src
        .payload
        .clone()
        .or_else(|| sec.payload_extractor.clone())
        .or_else(|| m.extractors.first().map(|e| e.id.clone()))
        .ok_or_else(|| CliError::config("corpus declares no extractors"))?;
    let magnification = src
        .magnification
        .or(sec.magnification)
        .or_else(|| m.magnifications.first().copied())
        .ok_or_else(|| CliError::config("corpus declares no magnifications"))?;
    Ok(EmbeddingSpec {
        mode: src.mode.or(sec.mode).unwrap_or(InferenceMode::Enc),
        payload_extractor: payload,
        magnification,
    })
}

fn resolve_source(src: &Source, file: &RunConfig) -> Result<Resolved, CliError> {
    if let Some(path) = &src.embeddings {
        let (dataset, spec) = EmbeddingsFile::load(path)?;
        return Ok(Resolved {
            spec,
            checkpoint: None,
            dataset,
            origin: json!({ "embeddings": abs(path) }),
        });
    }
    let (Some(corpus), Some(ckpt_path)) = (&src.corpus, &src.checkpoint) else {
        return Err(CliError::config("pass --embeddings, or both --corpus and --checkpoint"));
    };
    let store = FeatureStore::open(corpus)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let spec = resolve_spec(src, &file.embed.clone().unwrap_or_default(), &store)?;
    let dataset = extract_embeddings(&store, &ckpt.query.encoder, &spec)?;
    Ok(Resolved {
        origin: json!({ "corpus": abs(corpus), "checkpoint": abs(ckpt_path), "embed": spec }),
        spec,
        checkpoint: Some((ckpt_path.clone(), ckpt)),
        dataset,
    })
}

pub fn embed(a: &EmbedArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let r = resolve_source(&a.source, &s.file)?;
    let f = EmbeddingsFile::from_dataset(&r.dataset, &r.spec);
    write(
        &a.common.out.join("embeddings.json"),
        &serde_json::to_string(&f).expect("serializable"),
    )?;
    println!("encoded {} patients, d = {}", r.dataset.len(), r.dataset.dim());
    write_run_json(&a.common.out, "embed", &s, r.origin)
}

fn write_results(out: &Path, stem: &str, records: &[EvalRecord]) -> Result<(), CliError> {
    write(&out.join(format!("{stem}.csv")), &records_csv(records))?;
    let table = summary_table(records);
    write(&out.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

pub fn eval_mlp(a: &EvalMlpArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let r = resolve_source(&a.source, &s.file)?;
    let mut cfg = s.file.mlp.clone().unwrap_or_default();
    cfg.seed = s.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    let (external, ext_origin) = match (&a.external, &a.external_embeddings) {
        (Some(corpus), _) => {
            let Some((_, ckpt)) = &r.checkpoint else {
                return Err(CliError::config("--external needs --corpus and --checkpoint"));
            };
            let store = FeatureStore::open(corpus)?;
            (Some(extract_embeddings(&store, &ckpt.query.encoder, &r.spec)?), json!(abs(corpus)))
        }
        (None, Some(path)) => (Some(EmbeddingsFile::load(path)?.0), json!(abs(path))),
        (None, None) => (None, Value::Null),
    };
    let report = mlp_cv(&r.dataset, external.as_ref(), &cfg)?;
    let mode = r.spec.mode.to_string();
    let records: Vec<EvalRecord> = report
        .folds
        .iter()
        .flat_map(|f| metric_records("mlp", &mode, &format!("fold{}", f.fold), &f.metrics))
        .collect();
    write_results(&a.common.out, "eval_mlp", &records)?;
    write_run_json(
        &a.common.out,
        "eval-mlp",
        &s,
        json!({ "source": r.origin, "external": ext_origin, "mlp": cfg }),
    )
}

pub fn eval_fewshot(a: &EvalFewshotArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let r = resolve_source(&a.source, &s.file)?;
    let mut cfg = s.file.probe.clone().unwrap_or_default();
    cfg.seed = s.seed;
    if let Some(v) = &a.shots {
        cfg.shots = v.clone();
    }
    if let Some(v) = a.runs {
        cfg.runs = v;
    }
    let runs = linear_probe_fewshot(&r.dataset, &cfg)?;
    let mode = r.spec.mode.to_string();
    let records: Vec<EvalRecord> = runs
        .iter()
        .flat_map(|p| metric_records(&format!("fewshot_k{}", p.shots), &mode, &format!("run{}", p.run), &p.metrics))
        .collect();
    write_results(&a.common.out, "eval_fewshot", &records)?;
    write_run_json(&a.common.out, "eval-fewshot", &s, json!({ "source": r.origin, "probe": cfg }))
}

pub fn attn_export(a: &AttnArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let store = FeatureStore::open(&a.corpus)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let src = Source {
        corpus: None,
        checkpoint: None,
        embeddings: None,
        mode: Some(InferenceMode::Enc),
        payload: a.extractor.clone(),
        magnification: a.magnification,
    };
    let spec = resolve_spec(&src, &s.file.embed.clone().unwrap_or_default(), &store)?;
    let map = attention_map(&store, &ckpt.query.encoder, &a.patient, &spec.payload_extractor, spec.magnification)?;
    let csv = a.common.out.join(format!("attention_{}.csv", a.patient));
    let pgm = a.common.out.join(format!("attention_{}.pgm", a.patient));
    export_attention(&map, &csv, (!a.no_raster).then_some(pgm.as_path()))?;
    println!("wrote {} tile weights to {}", map.tiles.len(), csv.display());
    write_run_json(
        &a.common.out,
        "attn-export",
        &s,
        json!({
            "corpus": abs(&a.corpus),
            "checkpoint": abs(&a.checkpoint),
            "patient": a.patient,
            "extractor": spec.payload_extractor,
            "magnification": spec.magnification,
            "raster": !a.no_raster,
        }),
    )
}

pub fn dump_embeddings(a: &DumpArgs) -> Result<(), CliError> {
    let s = setup(&a.common)?;
    let r = resolve_source(&a.source, &s.file)?;
    let path = a.common.out.join("embeddings.tsv");
    export_embeddings(&r.dataset, &path)?;
    println!("wrote {} rows to {}", r.dataset.len(), path.display());
    write_run_json(&a.common.out, "dump-embeddings", &s, r.origin)
}
