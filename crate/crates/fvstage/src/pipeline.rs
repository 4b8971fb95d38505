//! End-to-end run: extract, rank, gmm-fit, encode, train, eval, kl.
//!
//! Every stage derives a hash from its own settings and the hashes of what
//! it consumes (manifest bytes included). Artifacts are named
//! `<stage>-<hash>` in `<out_dir>/artifacts` and reused when present, so a
//! rerun with an unchanged config touches no inputs for cached stages. The
//! test manifest and its images are opened only inside `eval`.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};

use fvstage_core::backbone::{Backbone, BackboneConfig};
use fvstage_core::classifier::{self, Split, TrainConfig};
use fvstage_core::entropy::{EntropyRanking, DEFAULT_BINS};
use fvstage_core::fisher;
use fvstage_core::gmm::{self, DiagGmm, EmOptions, DEFAULT_COMPONENTS};
use fvstage_core::kl::{self, KlEstimate};
use fvstage_core::metrics::{self, MetricsReport, TiePolicy};
use fvstage_core::stagecat::SplitPlan;
use fvstage_core::Matrix;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::access::{Access, AccessLog};
use crate::extract;
use crate::manifest::{self, DatasetManifest};
use crate::store::{self, FvMeta, GmmMeta, HeadMeta};

pub const DEFAULT_SAMPLE_CAP: usize = 5000;

#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn StdError + Send + Sync>,
}

fn at<E: StdError + Send + Sync + 'static>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError { stage, source: Box::new(e) }
}

fn invalid(stage: &'static str, msg: impl Into<String>) -> PipelineError {
    PipelineError { stage, source: msg.into().into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSettings {
    pub components: usize,
    pub seed: u64,
    pub reg_scale: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for GmmSettings {
    fn default() -> Self {
        let em = EmOptions::default();
        Self { components: DEFAULT_COMPONENTS, seed: em.seed, reg_scale: em.reg_scale, max_iters: em.max_iters, rel_tol: em.rel_tol }
    }
}

impl GmmSettings {
    pub fn em_options(&self) -> EmOptions {
        EmOptions { max_iters: self.max_iters, rel_tol: self.rel_tol, seed: self.seed, reg_scale: self.reg_scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FvSettings {
    pub alpha: f64,
}

impl Default for FvSettings {
    fn default() -> Self {
        Self { alpha: fisher::DEFAULT_ALPHA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    pub tie_policy: TiePolicy,
}

/// KL between the mixture fitted on the selected samples and one fitted on
/// every training sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSettings {
    pub enabled: bool,
    pub samples: usize,
    pub seed: u64,
}

impl Default for KlSettings {
    fn default() -> Self {
        Self { enabled: true, samples: kl::DEFAULT_SAMPLES, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// How many of the deepest backbone stages feed the encoder.
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_cap")]
    pub sample_cap: usize,
    #[serde(default)]
    pub gmm: GmmSettings,
    #[serde(default)]
    pub fv: FvSettings,
    #[serde(default)]
    pub classifier: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default)]
    pub kl: KlSettings,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_stages() -> usize {
    2
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_cap() -> usize {
    DEFAULT_SAMPLE_CAP
}
fn default_out() -> PathBuf {
    PathBuf::from("fvstage-out")
}

impl PipelineConfig {
    pub fn new(train: PathBuf, val: PathBuf, test: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            train_manifest: train,
            val_manifest: val,
            test_manifest: test,
            backbone: BackboneConfig::default(),
            stages: default_stages(),
            bins: default_bins(),
            sample_cap: default_cap(),
            gmm: GmmSettings::default(),
            fv: FvSettings::default(),
            classifier: TrainConfig::default(),
            metrics: MetricsSettings::default(),
            kl: KlSettings::default(),
            out_dir,
        }
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(at("config"))?;
        let mut c: Self = serde_json::from_str(&text).map_err(at("config"))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.train_manifest, &mut c.val_manifest, &mut c.test_manifest, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(invalid("config", m));
        if !(1..=3).contains(&self.stages) {
            return bad("stages must be 1, 2 or 3");
        }
        let bb = self.backbone.last_stages(self.stages).map_err(at("config"))?;
        Backbone::new(&bb).map_err(at("config"))?;
        if self.bins == 0 {
            return bad("bins must be positive");
        }
        if self.gmm.components == 0 {
            return bad("gmm.components must be positive");
        }
        if self.sample_cap < self.gmm.components {
            return bad("sample_cap must be at least gmm.components");
        }
        if !(self.fv.alpha > 0.0) {
            return bad("fv.alpha must be positive");
        }
        if self.kl.enabled && self.kl.samples == 0 {
            return bad("kl.samples must be positive");
        }
        self.classifier.validate().map_err(at("config"))
    }

    pub fn stage_backbone(&self) -> BackboneConfig {
        self.backbone.last_stages(self.stages).expect("validated")
    }
}

/// SHA-256 of the canonical JSON of `value` (object keys sorted, compact).
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Hash of the config fields that affect results (the output directory does not).
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("serializable");
    v.as_object_mut().expect("object").remove("out_dir");
    canonical_hash(&v)
}

fn file_hash(path: &Path, stage: &'static str) -> Result<String, PipelineError> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(at(stage))?)))
}

fn short(h: &str) -> &str {
    &h[..16]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub hash: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub selected_samples: usize,
    pub gmm_features: usize,
    pub fv_length: usize,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
    pub kl: Option<KlEstimate>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub report_path: PathBuf,
    pub stages: Vec<StageRecord>,
    pub reads: Vec<Access>,
}

#[derive(Serialize)]
struct RunLog<'a> {
    config_hash: &'a str,
    stages: &'a [StageRecord],
    reads: &'a [Access],
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: PathBuf,
    log: AccessLog,
    stages: Vec<StageRecord>,
    artifacts: BTreeMap<String, String>,
}

impl Run<'_> {
    fn artifact(&mut self, key: &str, stage: &str, hash: &str, ext: &str) -> PathBuf {
        let name = format!("{stage}-{}.{ext}", short(hash));
        self.artifacts.insert(key.to_owned(), name.clone());
        self.dir.join(name)
    }

    fn note(&mut self, stage: &str, hash: &str, cached: bool) {
        info!("{stage}: {} ({})", short(hash), if cached { "cached" } else { "computed" });
        self.stages.push(StageRecord { stage: stage.to_owned(), hash: hash.to_owned(), cached });
    }

    fn manifest(&self, path: &Path, stage: &'static str) -> Result<(DatasetManifest, String), PipelineError> {
        self.log.record(path);
        let m = manifest::load_manifest(path).map_err(at(stage))?;
        Ok((m, file_hash(path, stage)?))
    }

    /// Merged local features of one split, cached by manifest and backbone.
    fn features(
        &mut self,
        split: &str,
        m: &DatasetManifest,
        manifest_hash: &str,
        stage: &'static str,
    ) -> Result<(Vec<Matrix>, String), PipelineError> {
        let bb = self.cfg.stage_backbone();
        let hash = canonical_hash(&("extract", split, manifest_hash, &bb));
        let path = self.artifact(&format!("features_{split}"), "extract", &hash, "fvt");
        let cached = path.exists();
        let sets = if cached {
            let (ids, sets) = store::load_feature_sets(&path).map_err(at(stage))?;
            if ids.len() != m.len() || ids.iter().zip(&m.samples).any(|(a, s)| *a != s.id) {
                return Err(invalid(stage, format!("cached features {} do not match the manifest", path.display())));
            }
            sets
        } else {
            let backbone = Backbone::new(&bb).map_err(at(stage))?;
            let plan = SplitPlan::new(&bb.dims()).map_err(at(stage))?;
            let feats = extract::extract_manifest(m, &backbone, &self.log).map_err(at(stage))?;
            let sets = extract::merge_all(m, &feats, &plan).map_err(at(stage))?;
            let ids: Vec<String> = m.samples.iter().map(|s| s.id.clone()).collect();
            store::save_feature_sets(&path, &ids, &sets).map_err(at(stage))?;
            sets
        };
        self.note(&format!("extract:{split}"), &hash, cached);
        Ok((sets, hash))
    }

    fn encode(
        &mut self,
        split: &str,
        gmm: &DiagGmm,
        sets: &[Matrix],
        ids: Vec<String>,
        upstream: (&str, &str),
        stage: &'static str,
    ) -> Result<(Matrix, String), PipelineError> {
        let hash = canonical_hash(&("encode", split, upstream.0, upstream.1, self.cfg.fv));
        let path = self.artifact(&format!("fv_{split}"), "encode", &hash, "fvt");
        let cached = path.exists();
        let fv = if cached {
            store::load_fvs(&path).map_err(at(stage))?.0
        } else {
            let fv = encode_sets(gmm, sets, self.cfg.fv.alpha).map_err(at(stage))?;
            let meta = FvMeta { ids, alpha: self.cfg.fv.alpha, components: gmm.components(), dim: gmm.dim() };
            store::save_fvs(&path, &fv, &meta).map_err(at(stage))?;
            fv
        };
        self.note(&format!("encode:{split}"), &hash, cached);
        Ok((fv, hash))
    }

    fn fit(&mut self, key: &str, x: &Matrix, hash: &str, stage: &'static str) -> Result<DiagGmm, PipelineError> {
        let path = self.artifact(key, "gmm", hash, "fvt");
        let cached = path.exists();
        let g = if cached {
            store::load_gmm(&path).map_err(at(stage))?.0
        } else {
            let opts = self.cfg.gmm.em_options();
            let fit = gmm::fit_em(x, self.cfg.gmm.components, &opts).map_err(at(stage))?;
            let meta = GmmMeta {
                reg: fit.gmm.reg(),
                options: opts,
                loglik_trace: fit.loglik_trace,
                iterations: fit.iterations,
                converged: fit.converged,
                training_rows: x.rows(),
            };
            store::save_gmm(&path, &fit.gmm, &meta).map_err(at(stage))?;
            fit.gmm
        };
        self.note(stage, hash, cached);
        Ok(g)
    }
}

/// Normalized Fisher Vectors of every feature set, one per row.
pub fn encode_sets(gmm: &DiagGmm, sets: &[Matrix], alpha: f64) -> Result<Matrix, fisher::FisherError> {
    let rows = sets
        .par_iter()
        .map(|x| fisher::encode_normalized(gmm, x, alpha).map(|f| f.values))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_rows(&rows).expect("equal FV lengths"))
}

fn write_json<T: Serialize>(path: &Path, v: &T, stage: &'static str) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(v).map_err(at(stage))?;
    s.push('\n');
    fs::write(path, s).map_err(at(stage))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T, PipelineError> {
    serde_json::from_slice(&fs::read(path).map_err(at(stage))?).map_err(at(stage))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("artifacts");
    fs::create_dir_all(&dir).map_err(at("setup"))?;
    let mut run = Run { cfg, dir, log: AccessLog::new(), stages: Vec::new(), artifacts: BTreeMap::new() };

    run.log.enter("extract");
    let (train_m, train_mh) = run.manifest(&cfg.train_manifest, "extract")?;
    let (val_m, val_mh) = run.manifest(&cfg.val_manifest, "extract")?;
    if train_m.task != val_m.task || train_m.num_labels != val_m.num_labels {
        return Err(invalid("extract", "train and validation manifests disagree on the task"));
    }
    let (train_sets, train_fh) = run.features("train", &train_m, &train_mh, "extract")?;
    let (val_sets, val_fh) = run.features("val", &val_m, &val_mh, "extract")?;

    // The full ranking is cached; the cap is applied when pooling.
    run.log.enter("rank");
    let rank_hash = canonical_hash(&("rank", &train_mh, cfg.bins));
    let rank_path = run.artifact("ranking", "rank", &rank_hash, "json");
    let cached = rank_path.exists();
    let ranking: EntropyRanking = if cached {
        read_json(&rank_path, "rank")?
    } else {
        let r = extract::rank_and_select(&train_m, cfg.bins, usize::MAX, &run.log).map_err(at("rank"))?;
        write_json(&rank_path, &r, "rank")?;
        r
    };
    run.note("rank", &rank_hash, cached);
    let position: BTreeMap<&str, usize> = train_m.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let order = ranking
        .entries
        .iter()
        .map(|e| position.get(e.sample_id.as_str()).copied())
        .collect::<Option<Vec<usize>>>()
        .filter(|o| o.len() == train_m.len())
        .ok_or_else(|| invalid("rank", "ranking does not match the training manifest"))?;
    let selected = cfg.sample_cap.min(order.len());

    run.log.enter("gmm-fit");
    let pool = |n: usize| Matrix::vstack(&order[..n].iter().map(|&i| train_sets[i].clone()).collect::<Vec<_>>());
    let pooled = pool(selected).map_err(|_| invalid("gmm-fit", "feature widths differ"))?;
    let gmm_hash = canonical_hash(&("gmm-fit", &train_fh, &rank_hash, selected, cfg.gmm));
    let g = run.fit("gmm", &pooled, &gmm_hash, "gmm-fit")?;

    run.log.enter("encode");
    let ids = |m: &DatasetManifest| m.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let (train_fv, train_eh) = run.encode("train", &g, &train_sets, ids(&train_m), (&gmm_hash, &train_fh), "encode")?;
    let (val_fv, val_eh) = run.encode("val", &g, &val_sets, ids(&val_m), (&gmm_hash, &val_fh), "encode")?;

    run.log.enter("train");
    let task = train_m.task;
    let outputs = classifier::outputs_for(task, train_m.num_labels);
    let train_hash = canonical_hash(&("train", &train_eh, &val_eh, task, outputs, &cfg.classifier));
    let head_path = run.artifact("head", "head", &train_hash, "fvt");
    let log_path = run.artifact("train_log", "train-log", &train_hash, "jsonl");
    let cached = head_path.exists();
    let (head, head_meta) = if cached {
        store::load_head(&head_path).map_err(at("train"))?
    } else {
        let (ty, vy) = (train_m.labels(), val_m.labels());
        let out = classifier::train(
            Split { x: &train_fv, labels: &ty },
            Split { x: &val_fv, labels: &vy },
            task,
            outputs,
            &cfg.classifier,
        )
        .map_err(at("train"))?;
        let meta = HeadMeta { task, num_labels: train_m.num_labels, train: cfg.classifier.clone(), best_epoch: out.best_epoch };
        store::save_head(&head_path, &out.params, &meta).map_err(at("train"))?;
        let lines: String = out.log.iter().map(|l| serde_json::to_string(l).expect("log line") + "\n").collect();
        fs::write(&log_path, lines).map_err(at("train"))?;
        (out.params, meta)
    };
    run.note("train", &train_hash, cached);

    run.log.enter("eval");
    let (test_m, test_mh) = run.manifest(&cfg.test_manifest, "eval")?;
    if test_m.task != task || test_m.num_labels != train_m.num_labels {
        return Err(invalid("eval", "test manifest disagrees with the training task"));
    }
    let (test_sets, test_fh) = run.features("test", &test_m, &test_mh, "eval")?;
    let (test_fv, test_eh) = run.encode("test", &g, &test_sets, ids(&test_m), (&gmm_hash, &test_fh), "eval")?;
    let eval_hash = canonical_hash(&("eval", &train_hash, &test_eh, cfg.metrics));
    let proba = classifier::predict_proba(&head, &test_fv, task).map_err(at("eval"))?;
    let metrics = metrics::evaluate(&proba, &test_m.labels(), task, cfg.metrics.tie_policy).map_err(at("eval"))?;
    let eval_path = run.artifact("metrics", "eval", &eval_hash, "json");
    write_json(&eval_path, &metrics, "eval")?;
    run.note("eval", &eval_hash, false);

    let kl = if cfg.kl.enabled {
        run.log.enter("kl");
        let base_hash = canonical_hash(&("gmm-fit", &train_fh, &rank_hash, order.len(), cfg.gmm));
        let base = if base_hash == gmm_hash {
            g.clone()
        } else {
            let all = pool(order.len()).map_err(|_| invalid("kl", "feature widths differ"))?;
            run.fit("gmm_base", &all, &base_hash, "kl")?
        };
        let kl_hash = canonical_hash(&("kl", &base_hash, &gmm_hash, cfg.kl));
        let kl_path = run.artifact("kl", "kl", &kl_hash, "json");
        let cached = kl_path.exists();
        let est = if cached {
            read_json(&kl_path, "kl")?
        } else {
            let est = kl::kl_mc(&base, &g, cfg.kl.samples, cfg.kl.seed).map_err(at("kl"))?;
            write_json(&kl_path, &est, "kl")?;
            est
        };
        run.note("kl", &kl_hash, cached);
        Some(est)
    } else {
        None
    };

    let report = PipelineReport {
        config_hash: config_hash(cfg),
        selected_samples: selected,
        gmm_features: pooled.rows(),
        fv_length: fisher::fv_length(g.components(), g.dim()),
        best_epoch: head_meta.best_epoch,
        metrics,
        kl,
        artifacts: run.artifacts.clone(),
    };
    let report_path = cfg.out_dir.join("report.json");
    write_json(&report_path, &report, "report")?;
    let reads = run.log.reads();
    let log = RunLog { config_hash: &report.config_hash, stages: &run.stages, reads: &reads };
    write_json(&cfg.out_dir.join("run-log.json"), &log, "report")?;
    Ok(PipelineOutcome { report, report_path, stages: run.stages, reads })
}
