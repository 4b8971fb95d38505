use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fvstage::access::AccessLog;
use fvstage::manifest::{self, DatasetManifest};
use fvstage::pipeline::{self, FvSettings, GmmSettings, MetricsSettings, PipelineConfig};
use fvstage::store::{self, FvMeta, GmmMeta, HeadMeta};
use fvstage::study::{self as study_io, PlantedStudy, StudyTable};
use fvstage::{extract, synthio};
use fvstage_core::backbone::{Backbone, BackboneConfig};
use fvstage_core::classifier::{self, Split, TrainConfig};
use fvstage_core::gmm::{self, EmOptions};
use fvstage_core::metrics::{self, TiePolicy};
use fvstage_core::stagecat::SplitPlan;
use fvstage_core::study::StudyConfig;
use fvstage_core::synth::{BlobImagesSpec, PlantedMixtureSpec};
use fvstage_core::{kl, Matrix};
use log::info;
use serde::{Deserialize, Serialize};

type Result<T> = std::result::Result<T, Box<dyn Error + Send + Sync>>;

#[derive(Parser)]
#[command(name = "fvstage", version, about = "Fisher Vector encoding of multi-stage attention features")]
struct Cli {
    /// JSON config; the pipeline reads all of it, other commands only the
    /// sections they need (backbone, stages, gmm, fv, classifier, metrics).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the backbone over a manifest, writing one tensor per (sample, stage).
    Extract {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Rank images by brightness entropy and keep the top `cap`.
    Rank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 256)]
        bins: usize,
        #[arg(long, default_value_t = pipeline::DEFAULT_SAMPLE_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a diagonal GMM on the merged features of ranked samples.
    GmmFit {
        /// Manifest written by `extract`.
        #[arg(long)]
        manifest: PathBuf,
        /// Ranking from `rank`; without it every sample is used.
        #[arg(long)]
        ranking: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every sample of an extracted manifest as a Fisher Vector.
    Encode {
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier head on encoded features.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_features: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained head and write a metrics report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo KL(f || g) between two stored mixtures.
    Kl {
        #[arg(long)]
        gmm_f: PathBuf,
        #[arg(long)]
        gmm_g: PathBuf,
        #[arg(long, default_value_t = kl::DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// KL of subset-fitted mixtures to the full-data mixture across ratios and seeds.
    Study(StudyArgs),
    /// Run every stage from a config file.
    Pipeline,
    /// Generate synthetic data.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
}

#[derive(Args)]
struct StudyArgs {
    /// Extracted manifest to study; without it a planted 2D mixture is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.02, 0.1, 0.5, 1.0])]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4, 5, 6, 7, 8, 9])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = kl::DEFAULT_SAMPLES)]
    kl_samples: usize,
    #[arg(long, default_value_t = 256)]
    bins: usize,
    /// Planted features in total.
    #[arg(long, default_value_t = 20_000)]
    total: usize,
    /// Planted features per sample.
    #[arg(long, default_value_t = 100)]
    per_sample: usize,
}

#[derive(Subcommand)]
enum SynthKind {
    /// Two-class Gaussian blob images with train/val/test manifests.
    Blobs {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Samples from the planted four-component 2D mixture.
    Mixture {
        #[arg(long, default_value_t = 20_000)]
        total: usize,
    },
}

/// Config sections usable by single-stage commands.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct Sections {
    backbone: BackboneConfig,
    stages: Option<usize>,
    gmm: GmmSettings,
    fv: FvSettings,
    classifier: TrainConfig,
    metrics: MetricsSettings,
}

impl Sections {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => Ok(Self::default()),
        }
    }

    fn backbone(&self) -> Result<BackboneConfig> {
        let n = self.stages.unwrap_or(self.backbone.stages.len());
        Ok(self.backbone.last_stages(n)?)
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn merged_sets(m: &DatasetManifest, log: &AccessLog) -> Result<Vec<Matrix>> {
    let feats = extract::read_stage_features(m, log)?;
    let first = feats.first().ok_or("manifest has no samples")?;
    let dims: Vec<usize> = first.iter().map(|f| f.dim()).collect();
    let plan = SplitPlan::new(&dims)?;
    Ok(extract::merge_all(m, &feats, &plan)?)
}

fn ids(m: &DatasetManifest) -> Vec<String> {
    m.samples.iter().map(|s| s.id.clone()).collect()
}

fn load_fv_for(features: &Path, m: &DatasetManifest) -> Result<Matrix> {
    let (fv, meta) = store::load_fvs(features)?;
    if meta.ids != ids(m) {
        return Err(format!("{} does not list the manifest's samples in order", features.display()).into());
    }
    Ok(fv)
}

fn run(cli: &Cli) -> Result<()> {
    let sections = || Sections::load(cli.config.as_deref());
    let log = AccessLog::new();
    match &cli.cmd {
        Cmd::Extract { manifest } => {
            let s = sections()?;
            let mut bb = s.backbone()?;
            if let Some(seed) = cli.seed {
                bb.seed = seed;
            }
            let m = manifest::load_manifest(manifest)?;
            let feats = extract::extract_manifest(&m, &Backbone::new(&bb)?, &log)?;
            let dir = out_dir(cli);
            let aug = extract::write_stage_features(&m, &feats, &dir)?;
            let path = dir.join("manifest.json");
            aug.save(&path)?;
            println!("{}", path.display());
        }
        Cmd::Rank { manifest, bins, cap, out } => {
            let m = manifest::load_manifest(manifest)?;
            let r = extract::rank_and_select(&m, *bins, *cap, &log)?;
            write_json(out, &r)?;
        }
        Cmd::GmmFit { manifest, ranking, out } => {
            let s = sections()?;
            let m = manifest::load_manifest(manifest)?;
            let sets = merged_sets(&m, &log)?;
            let chosen: Vec<&Matrix> = match ranking {
                Some(p) => {
                    let r: fvstage_core::entropy::EntropyRanking = serde_json::from_str(&fs::read_to_string(p)?)?;
                    r.entries
                        .iter()
                        .map(|e| {
                            m.samples.iter().position(|s| s.id == e.sample_id).map(|i| &sets[i]).ok_or_else(|| {
                                format!("ranked sample {:?} is not in the manifest", e.sample_id).into()
                            })
                        })
                        .collect::<Result<_>>()?
                }
                None => sets.iter().collect(),
            };
            let x = Matrix::vstack(&chosen.into_iter().cloned().collect::<Vec<_>>())?;
            let mut opts = s.gmm.em_options();
            if let Some(seed) = cli.seed {
                opts.seed = seed;
            }
            let fit = gmm::fit_em(&x, s.gmm.components, &opts)?;
            info!("EM stopped after {} iterations (converged: {})", fit.iterations, fit.converged);
            let meta = GmmMeta {
                reg: fit.gmm.reg(),
                options: opts,
                loglik_trace: fit.loglik_trace,
                iterations: fit.iterations,
                converged: fit.converged,
                training_rows: x.rows(),
            };
            store::save_gmm(out, &fit.gmm, &meta)?;
        }
        Cmd::Encode { gmm, manifest, out } => {
            let s = sections()?;
            let (g, _) = store::load_gmm(gmm)?;
            let m = manifest::load_manifest(manifest)?;
            let fv = pipeline::encode_sets(&g, &merged_sets(&m, &log)?, s.fv.alpha)?;
            let meta = FvMeta { ids: ids(&m), alpha: s.fv.alpha, components: g.components(), dim: g.dim() };
            store::save_fvs(out, &fv, &meta)?;
        }
        Cmd::Train { features, manifest, val_features, val_manifest, out } => {
            let mut cfg = sections()?.classifier;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let (tm, vm) = (manifest::load_manifest(manifest)?, manifest::load_manifest(val_manifest)?);
            if tm.task != vm.task || tm.num_labels != vm.num_labels {
                return Err("train and validation manifests disagree on the task".into());
            }
            let (tx, vx) = (load_fv_for(features, &tm)?, load_fv_for(val_features, &vm)?);
            let outputs = classifier::outputs_for(tm.task, tm.num_labels);
            let (ty, vy) = (tm.labels(), vm.labels());
            let res = classifier::train(Split { x: &tx, labels: &ty }, Split { x: &vx, labels: &vy }, tm.task, outputs, &cfg)?;
            for l in &res.log {
                println!("{}", serde_json::to_string(l)?);
            }
            let meta = HeadMeta { task: tm.task, num_labels: tm.num_labels, train: cfg, best_epoch: res.best_epoch };
            store::save_head(out, &res.params, &meta)?;
        }
        Cmd::Eval { model, features, manifest, out } => {
            let policy: TiePolicy = sections()?.metrics.tie_policy;
            let (head, meta) = store::load_head(model)?;
            let m = manifest::load_manifest(manifest)?;
            if m.task != meta.task {
                return Err("manifest task differs from the model's".into());
            }
            let proba = classifier::predict_proba(&head, &load_fv_for(features, &m)?, m.task)?;
            write_json(out, &metrics::evaluate(&proba, &m.labels(), m.task, policy)?)?;
        }
        Cmd::Kl { gmm_f, gmm_g, samples } => {
            let (f, _) = store::load_gmm(gmm_f)?;
            let (g, _) = store::load_gmm(gmm_g)?;
            let est = kl::kl_mc(&f, &g, *samples, cli.seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&est)?);
        }
        Cmd::Study(a) => {
            let s = sections()?;
            let mut em: EmOptions = s.gmm.em_options();
            if let Some(seed) = cli.seed {
                em.seed = seed;
            }
            let cfg = StudyConfig {
                components: s.gmm.components,
                em,
                ratios: a.ratios.clone(),
                seeds: a.seeds.clone(),
                kl_samples: a.kl_samples,
                kl_seed: cli.seed.unwrap_or(0),
            };
            let result = match &a.manifest {
                Some(p) => {
                    let m = manifest::load_manifest(p)?;
                    let sets = merged_sets(&m, &log)?;
                    let ranking = extract::rank_and_select(&m, a.bins, usize::MAX, &log)?;
                    let ranked: Vec<Matrix> = ranking
                        .entries
                        .iter()
                        .map(|e| sets[m.samples.iter().position(|s| s.id == e.sample_id).expect("ranked from m")].clone())
                        .collect();
                    fvstage_core::study::run_subsample_study(&ranked, &cfg)?
                }
                None => study_io::run_planted(&PlantedStudy {
                    total: a.total,
                    per_sample: a.per_sample,
                    data_seed: 7,
                    bins: a.bins,
                    study: cfg,
                })?,
            };
            let table = StudyTable::from_rows(result.rows, &a.ratios);
            let dir = out_dir(cli);
            fs::create_dir_all(&dir)?;
            table.write(&dir.join("study.json"), &dir.join("study.csv"))?;
            for m in &table.medians {
                println!("ratio {:>6}: median KL {:.6e}", m.ratio, m.median_kl);
            }
        }
        Cmd::Pipeline => {
            let path = cli.config.as_deref().ok_or("pipeline needs --config")?;
            let mut cfg = PipelineConfig::load(path)?;
            if let Some(dir) = &cli.out_dir {
                cfg.out_dir = dir.clone();
            }
            if let Some(seed) = cli.seed {
                cfg.backbone.seed = seed;
                cfg.gmm.seed = seed;
                cfg.classifier.seed = seed;
                cfg.kl.seed = seed;
            }
            let out = pipeline::run_pipeline(&cfg)?;
            let r = &out.report.metrics;
            println!("acc {:.4} auc {:.4} -> {}", r.acc, r.auc, out.report_path.display());
        }
        Cmd::Synth { kind } => {
            let dir = out_dir(cli);
            let seed = cli.seed.unwrap_or(0);
            match kind {
                SynthKind::Blobs { spec } => {
                    let spec = match spec {
                        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                        None => BlobImagesSpec::two_class_default(seed),
                    };
                    let d = synthio::write_blob_dataset(&spec, &dir)?;
                    println!("{}\n{}\n{}", d.train.display(), d.val.display(), d.test.display());
                }
                SynthKind::Mixture { total } => {
                    synthio::write_planted(&PlantedMixtureSpec::four_component_2d(*total, seed), &dir)?;
                }
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        let mut src = e.source();
        while let Some(s) = src {
            eprintln!("  caused by: {s}");
            src = s.source();
        }
        std::process::exit(1);
    }
}
