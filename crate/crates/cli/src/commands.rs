use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use act2g_core::clustering::ClusterModel;
use act2g_core::config::{ensure_hash, PipelineConfig};
use act2g_core::contrastive::Act2gCheckpoint;
use act2g_core::gesture_vae::GestureVae;
use act2g_core::ingest::{load_dataset, synth_dataset, Dataset, Manifest, Split, SynthOptions};
use act2g_core::metrics::{metric_report, ClipSet, FgdFeatureModel, ReportModels};
use act2g_core::motion::MotionClip;
use act2g_core::persist;
use act2g_core::pipeline;
use act2g_core::retrieval::{GenerationRequest, Generator, GestureLibrary};
use act2g_core::text_encoder::{EmbeddingProvider, EmbeddingTable, TextEncoder};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "act2g", version, about = "Text-to-gesture retrieval pipeline")]
pub struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed; also seeds synthesis and generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    SynthData(SynthArgs),
    /// Train the gesture VAE, or with --pad-to the FGD feature VAE.
    TrainVae(TrainVaeArgs),
    /// K-Means over the VAE latent means of the training split.
    Cluster(OutArgs),
    /// Supervised pre-training of the attention layer.
    PretrainAttention(OutArgs),
    /// Joint contrastive training of the text and gesture encoders.
    Train(OutArgs),
    /// Embed the training clips into the gesture library.
    BuildLibrary(OutArgs),
    /// Generate a gesture for a text.
    Generate(GenerateArgs),
    /// Metrics over directories of motion clips.
    Eval(EvalArgs),
    /// Serve generation over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory; defaults to the directory of the configured manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub families: usize,
    #[arg(long, default_value_t = 50)]
    pub per_family: usize,
    /// Word vector dimension; defaults to the model's.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    /// Changes the model section, hence the config hash, unless --pad-to is set.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Pad key-pose sequences to this length and train the FGD feature VAE.
    #[arg(long)]
    pub pad_to: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub text: String,
    /// Motion JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Diagnostics JSON output; defaults to `<out stem>.diagnostics.json`.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Word indices to emphasize with the 0.5/0.1 override.
    #[arg(long, value_delimiter = ',')]
    pub emphasize: Vec<usize>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of motion JSON files; the first set is the reference.
    #[arg(long = "set", required = true)]
    pub sets: Vec<PathBuf>,
    /// JSON object mapping clip ids of the last set to ratings.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ACT2G_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug)]
pub enum CliError {
    Core(act2g_core::Error),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<act2g_core::Error> for CliError {
    fn from(e: act2g_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use act2g_core::Error as E;
        match self {
            CliError::Core(E::Validation(_) | E::InvalidInput(_) | E::ConfigMismatch { .. } | E::Json { .. } | E::Format { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Artifact locations with defaults filled in.
#[derive(Clone, Debug)]
pub struct Paths {
    pub dataset: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub vae: PathBuf,
    pub fgd: PathBuf,
    pub clusters: PathBuf,
    pub attention: PathBuf,
    pub checkpoint: PathBuf,
    pub library: PathBuf,
}

impl Paths {
    pub fn resolve(cfg: &PipelineConfig) -> Self {
        let p = &cfg.paths;
        let or = |v: &Option<PathBuf>, d: &str| v.clone().unwrap_or_else(|| PathBuf::from(d));
        Self {
            dataset: or(&p.dataset, "data/manifest.json"),
            embeddings: p.embeddings.clone(),
            vae: or(&p.vae, "artifacts/vae.json"),
            fgd: or(&p.fgd, "artifacts/fgd_vae.json"),
            clusters: or(&p.clusters, "artifacts/clusters.json"),
            attention: or(&p.attention, "artifacts/attention.json"),
            checkpoint: or(&p.checkpoint, "artifacts/checkpoint.json"),
            library: or(&p.library, "artifacts/library"),
        }
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

/// Word vectors from the configured table, else the dataset's own table.
pub fn embeddings(paths: &Paths) -> Result<EmbeddingTable> {
    if let Some(p) = &paths.embeddings {
        return Ok(EmbeddingTable::load(p)?);
    }
    let manifest: Manifest = persist::read_json(&paths.dataset)?;
    let root = paths.dataset.parent().unwrap_or(Path::new(""));
    Ok(EmbeddingTable::load(root.join(&manifest.embeddings))?)
}

fn training_embeddings(paths: &Paths, ds: &Dataset) -> Result<EmbeddingTable> {
    match &paths.embeddings {
        Some(p) => Ok(EmbeddingTable::load(p)?),
        None => Ok(ds.embeddings.clone()),
    }
}

/// Loads the checkpoint, library and embeddings named by `cfg`.
pub fn load_generator(cfg: &PipelineConfig) -> Result<Generator> {
    let paths = Paths::resolve(cfg);
    let ck = Act2gCheckpoint::load(&paths.checkpoint)?;
    ensure_hash(&cfg.config_hash(), &ck.config_hash)?;
    let library = GestureLibrary::load(&paths.library)?;
    let emb: Arc<dyn EmbeddingProvider> = Arc::new(embeddings(&paths)?);
    Ok(Generator::new(&ck, library, emb, cfg.retrieval.clone())?)
}

fn last<T: std::fmt::Debug>(trace: &[T]) -> String {
    trace.last().map_or_else(|| "-".into(), |v| format!("{v:?}"))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let paths = Paths::resolve(&cfg);
    let hash = cfg.config_hash();
    match cli.command {
        Command::SynthData(a) => {
            let mut opts = SynthOptions {
                families: a.families,
                per_family: a.per_family,
                embed_dim: a.embed_dim.unwrap_or(cfg.model.embed_dim),
                seed: cli.seed.unwrap_or(cfg.training.seed),
                ..SynthOptions::default()
            };
            if let Some(j) = a.jitter {
                opts.jitter = j;
            }
            let out = a
                .out
                .unwrap_or_else(|| paths.dataset.parent().map(Path::to_path_buf).unwrap_or_default());
            let ds = synth_dataset(&opts)?;
            ds.save(&out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::TrainVae(a) => {
            let mut cfg = cfg;
            let ds = load_dataset(&paths.dataset)?;
            let train = ds.split(Split::Train);
            if let Some(pad) = a.pad_to {
                cfg.fgd.pad_keyposes = pad;
                if let Some(l) = a.latent_dim {
                    cfg.fgd.latent_dim = l;
                }
                let (model, trace) = pipeline::train_fgd_stage(&cfg, &train)?;
                let out = a.out.unwrap_or(paths.fgd);
                model.vae.save(&out, &hash)?;
                println!("wrote {} (final loss {})", out.display(), last(&trace));
            } else {
                if let Some(l) = a.latent_dim {
                    cfg.model.latent_dim = l;
                }
                let (vae, trace) = pipeline::train_vae_stage(&cfg, &train)?;
                let out = a.out.unwrap_or(paths.vae);
                vae.save(&out, &cfg.config_hash())?;
                println!("wrote {} (final loss {})", out.display(), last(&trace));
            }
        }
        Command::Cluster(a) => {
            let (vae, vae_hash) = GestureVae::load(&paths.vae)?;
            let ds = load_dataset(&paths.dataset)?;
            let model = pipeline::cluster_stage(&cfg, &vae, &vae_hash, &ds.split(Split::Train))?;
            let out = a.out.unwrap_or(paths.clusters);
            model.save(&out)?;
            println!("wrote {} (k {}, sse {})", out.display(), model.k, last(&model.sse_trace));
        }
        Command::PretrainAttention(a) => {
            let ds = load_dataset(&paths.dataset)?;
            let emb = training_embeddings(&paths, &ds)?;
            let (enc, trace) = pipeline::pretrain_stage(&cfg, &ds.split(Split::Train), &emb)?;
            let out = a.out.unwrap_or(paths.attention);
            enc.save(&out, &hash)?;
            println!("wrote {} (final bce {})", out.display(), last(&trace));
        }
        Command::Train(a) => {
            let (text, text_hash) = TextEncoder::load(&paths.attention)?;
            let clusters = ClusterModel::load(&paths.clusters)?;
            let ds = load_dataset(&paths.dataset)?;
            let emb = training_embeddings(&paths, &ds)?;
            let (ck, trace) =
                pipeline::train_stage(&cfg, text, &text_hash, &clusters, &ds.split(Split::Train), &emb)?;
            let out = a.out.unwrap_or(paths.checkpoint);
            ck.save(&out)?;
            println!("wrote {} (final epoch {})", out.display(), last(&trace));
        }
        Command::BuildLibrary(a) => {
            let ck = Act2gCheckpoint::load(&paths.checkpoint)?;
            let clusters = if paths.clusters.exists() {
                Some(ClusterModel::load(&paths.clusters)?)
            } else {
                None
            };
            let ds = load_dataset(&paths.dataset)?;
            let lib = pipeline::library_stage(&cfg, &ck, clusters.as_ref(), &ds.split(Split::Train))?;
            let out = a.out.unwrap_or(paths.library);
            lib.save(&out)?;
            println!("wrote {} ({} clips)", out.display(), lib.len());
        }
        Command::Generate(a) => {
            let g = load_generator(&cfg)?;
            let mut req = GenerationRequest::new(a.text);
            req.seed = cli.seed.unwrap_or(0);
            req.k = a.k;
            req.target_duration_s = a.duration;
            if !a.emphasize.is_empty() {
                req = req.emphasize(&a.emphasize);
            }
            let out = g.generate(&req)?;
            out.motion.save(&a.out)?;
            let diag = a.diagnostics.unwrap_or_else(|| a.out.with_extension("diagnostics.json"));
            persist::write_json(&diag, &out.diagnostics)?;
            let ids: Vec<&str> = out.diagnostics.segments.iter().map(|s| s.clip_id.as_str()).collect();
            println!(
                "wrote {} ({} frames from {}) and {}",
                a.out.display(),
                out.motion.len(),
                ids.join(", "),
                diag.display()
            );
        }
        Command::Eval(a) => {
            let sets = a.sets.iter().enumerate().map(|(i, p)| load_set(p, &a.sets[..i])).collect::<Result<Vec<_>>>()?;
            let (vae, vae_hash) = GestureVae::load(&paths.vae)?;
            ensure_hash(&hash, &vae_hash)?;
            let (fvae, fgd_hash) = GestureVae::load(&paths.fgd)?;
            ensure_hash(&hash, &fgd_hash)?;
            let fm = FgdFeatureModel {
                vae: fvae,
                min_keyposes: cfg.model.min_keyposes,
                max_keyposes: cfg.model.max_keyposes,
            };
            let models = ReportModels {
                vae: &vae,
                fgd: &fm,
                min_keyposes: cfg.model.min_keyposes,
                max_keyposes: cfg.model.max_keyposes,
            };
            let scores: Option<BTreeMap<String, f64>> = a.scores.as_ref().map(persist::read_json).transpose()?;
            let report = metric_report(&sets, &models, &hash, scores.as_ref())?;
            print!("{}", report.to_table());
            if let Some(out) = a.out {
                persist::write_json(out, &report)?;
            }
        }
        Command::Serve(a) => {
            let g = load_generator(&cfg)?;
            let app = crate::service::router(g, cfg.training.seed);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
                    .await
                    .map_err(|e| CliError::Runtime(format!("bind {}:{}: {e}", a.host, a.port)))?;
                let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
                println!("listening on http://{addr}");
                axum::serve(listener, app).await.map_err(|e| CliError::Runtime(e.to_string()))
            })?;
        }
    }
    Ok(())
}

/// Motion clips of a directory, sorted by file name. A directory without
/// clips of its own but with a `motions/` subdirectory (a dataset or library)
/// is read from there. Repeated paths get a `#n` suffix.
fn load_set(dir: &Path, earlier: &[PathBuf]) -> Result<ClipSet> {
    let list = |d: &Path| -> Result<Vec<PathBuf>> {
        let rd = std::fs::read_dir(d).map_err(|e| act2g_core::Error::Io { path: d.to_path_buf(), source: e })?;
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
            .filter(|p| !matches!(p.file_name().and_then(|n| n.to_str()), Some("library.json" | "manifest.json")))
            .collect();
        files.sort();
        Ok(files)
    };
    let mut files = list(dir)?;
    if files.is_empty() && dir.join("motions").is_dir() {
        files = list(&dir.join("motions"))?;
    }
    if files.is_empty() {
        return Err(act2g_core::Error::InvalidInput(format!("{}: no motion clips", dir.display())).into());
    }
    let clips = files.iter().map(MotionClip::load).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut name = dir.display().to_string();
    let repeats = earlier.iter().filter(|p| p.as_path() == dir).count();
    if repeats > 0 {
        name = format!("{name}#{}", repeats + 1);
    }
    Ok(ClipSet { name, clips })
}
