//! `uvstyle` subcommands. Each one is a thin wrapper over the library.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use uvstyle::encoder::{init_weights, load_weights, EncoderSpec, WeightBundle};
use uvstyle::eval::{ablation_sweep, probe_store, LabelKind, ProbeConfig};
use uvstyle::fewshot::{fewshot_query, ExampleSelection};
use uvstyle::geom::{load_dataset, save_dataset, Dataset};
use uvstyle::grad::{export_json, export_obj, glyphs, style_gradient, GradMode, Pipeline};
use uvstyle::index::{build_store, embed_dataset, topk, StoreDir};
use uvstyle::style::{fit_pca, LayerNorm, LayerWeights, NormalizationPolicy};
use uvstyle::synth::{generate_dataset, DatasetConfig};

use crate::service::{serve, GradientResponse, QueryResponse, ServiceConfig, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(name = "uvstyle", version, about = "Gram-matrix style similarity for UV-grid solids")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled corpus.
    Gen(GenArgs),
    /// Encode a corpus into a store directory.
    Embed(EmbedArgs),
    /// Nearest neighbours of one solid.
    Query(QueryArgs),
    /// Fit layer weights from examples and query with them.
    Fewshot(FewshotArgs),
    /// Per-layer linear probes on a store.
    Probe(ProbeArgs),
    /// Probe sweep over normalization kinds and PCA targets.
    Ablate(AblateArgs),
    /// Style gradient field of one solid towards another.
    Grad(GradArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct StoreArg {
    /// Store directory written by `embed`.
    #[arg(long, env = "UVSTYLE_STORE")]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory written by `gen`.
    #[arg(long, env = "UVSTYLE_DATA")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    /// Seed for freshly initialized encoder weights.
    #[arg(long, default_value_t = 0, conflicts_with = "encoder")]
    pub encoder_seed: u64,
    /// Encoder weight file to use instead of seeded initialization.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON corpus configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Store directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Reduce each layer to min(length, TARGET) dimensions with PCA.
    #[arg(long)]
    pub pca: Option<usize>,
    /// Normalization policy JSON; defaults to face re-centering on per-sample
    /// layers and instance normalization on per-face layers.
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Comma-separated layer weights on the simplex; uniform by default.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Keep the query itself in the results.
    #[arg(long)]
    pub include_self: bool,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long, value_delimiter = ',', required = true)]
    pub pos: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub neg: Vec<String>,
    /// Number of random negatives drawn from the rest of the store.
    #[arg(long, default_value_t = 0)]
    pub autoneg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Query solid; the first positive by default.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelArg {
    Style,
    Content,
}

#[derive(Debug, Args)]
pub struct ProbeOptions {
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated L2 strengths to select from.
    #[arg(long, value_delimiter = ',')]
    pub l2: Option<Vec<f64>>,
}

impl ProbeOptions {
    fn config(&self) -> ProbeConfig {
        let mut cfg = ProbeConfig {
            folds: self.folds,
            seed: self.seed,
            ..ProbeConfig::default()
        };
        if let Some(g) = &self.l2 {
            cfg.l2_grid = g.clone();
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_enum, default_value = "style")]
    pub labels: LabelArg,
    #[command(flatten)]
    pub probe: ProbeOptions,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Normalization kinds: none, instance_norm, face_recenter.
    #[arg(long, value_delimiter = ',', default_value = "none,instance_norm,face_recenter")]
    pub policies: Vec<String>,
    /// PCA targets; `raw` for unreduced Grams.
    #[arg(long, value_delimiter = ',', default_value = "raw,70")]
    pub targets: Vec<String>,
    #[command(flatten)]
    pub probe: ProbeOptions,
    /// Also write the long-format CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Analytic,
    Fd,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub reference: String,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "analytic")]
    pub mode: ModeArg,
    /// Glyph scale; the longest glyph is 5% of the bounding-box diagonal by default.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Write glyphs as OBJ line segments.
    #[arg(long)]
    pub obj: Option<PathBuf>,
    /// Write glyphs as a JSON array.
    #[arg(long)]
    pub glyphs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, env = "UVSTYLE_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments: exit code 2.
    Usage(String),
    /// Anything that failed while running: exit code 1.
    Runtime(String),
}

impl From<uvstyle::Error> for CliError {
    fn from(e: uvstyle::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce(&T) -> String) {
    let out = if json {
        serde_json::to_string_pretty(value).expect("report serializes") + "\n"
    } else {
        text(value)
    };
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
}

fn parse_weights(w: Option<Vec<f64>>, layers: usize) -> CliResult<LayerWeights> {
    match w {
        None => Ok(LayerWeights::uniform(layers)),
        Some(v) if v.len() != layers => Err(usage(format!("--weights: expected {layers} values, got {}", v.len()))),
        Some(v) => LayerWeights::new(v).map_err(|e| usage(format!("--weights: {e}"))),
    }
}

fn encoder(args: &EncoderArgs) -> CliResult<WeightBundle<f64>> {
    match &args.encoder {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            Ok(load_weights(&bytes, None)?)
        }
        None => Ok(init_weights(&EncoderSpec::with_seed(args.encoder_seed))?),
    }
}

fn dataset(d: &DataArg) -> CliResult<Dataset> {
    Ok(load_dataset(&d.data)?)
}

fn store(s: &StoreArg) -> CliResult<StoreDir> {
    Ok(StoreDir::load(&s.store, None)?)
}

#[derive(Debug, Serialize)]
struct GenReport {
    out: PathBuf,
    solids: usize,
    styles: Vec<String>,
    contents: Vec<String>,
}

fn gen(json: bool, a: GenArgs) -> CliResult {
    let text = fs::read_to_string(&a.config).map_err(|e| io_err(&a.config, e))?;
    let cfg: DatasetConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", a.config.display())))?;
    let out = a
        .out
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .ok_or_else(|| usage("no output directory: pass --out or set out_dir in the config"))?;
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &out)?;
    let report = GenReport {
        out,
        solids: ds.solids.len(),
        styles: cfg.styles.iter().map(|s| s.style_id.clone()).collect(),
        contents: cfg.contents.iter().map(|c| c.name().to_string()).collect(),
    };
    emit(json, &report, |r| format!("wrote {} solids to {}\n", r.solids, r.out.display()));
    Ok(())
}

#[derive(Debug, Serialize)]
struct EmbedReport {
    out: PathBuf,
    entries: usize,
    layer_lengths: Vec<usize>,
    fingerprint: String,
}

fn embed(json: bool, a: EmbedArgs) -> CliResult {
    let ds = dataset(&a.data)?;
    let weights = encoder(&a.encoder)?;
    let policy = match &a.policy {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => NormalizationPolicy::default_for(&weights.spec),
    };
    if a.pca == Some(0) {
        return Err(usage("--pca must be at least 1"));
    }
    let pca = match a.pca {
        Some(t) => Some(fit_pca(&embed_dataset(&ds, &weights, &policy)?, t)?),
        None => None,
    };
    let store = build_store(&ds, &weights, &policy, pca.as_ref())?;
    let report = EmbedReport {
        out: a.out.clone(),
        entries: store.len(),
        layer_lengths: store.layer_lengths().to_vec(),
        fingerprint: store.fingerprint().to_string(),
    };
    StoreDir {
        store,
        weights,
        policy,
        pca,
    }
    .save(&a.out)?;
    emit(json, &report, |r| {
        format!("embedded {} solids into {} (lengths {:?})\n", r.entries, r.out.display(), r.layer_lengths)
    });
    Ok(())
}

fn ranked_text(query: &str, results: &[uvstyle::index::Ranked]) -> String {
    let mut s = format!("neighbours of {query}\n");
    for (i, r) in results.iter().enumerate() {
        s.push_str(&format!("{:>3}  {:<12} {:.6}\n", i + 1, r.id, r.distance));
    }
    s
}

fn weights_text(w: &LayerWeights) -> String {
    w.as_slice().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
}

fn query(json: bool, a: QueryArgs) -> CliResult {
    let sd = store(&a.store)?;
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let w = parse_weights(a.weights, sd.store.num_layers())?;
    let r = topk(&sd.store, &a.id, &w, a.k, !a.include_self)?;
    let resp = QueryResponse {
        query_id: r.query_id,
        k: r.k,
        weights: w,
        results: r.results,
    };
    emit(json, &resp, |r| ranked_text(&r.query_id, &r.results));
    Ok(())
}

fn fewshot(json: bool, a: FewshotArgs) -> CliResult {
    let sd = store(&a.store)?;
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let sel = ExampleSelection {
        positives: a.pos,
        negatives: a.neg,
        auto_negative_count: a.autoneg,
        seed: a.seed,
    };
    let r = fewshot_query(&sel, a.target.as_deref(), a.k, &sd.store)?;
    emit(json, &r, |r| {
        format!(
            "weights  {}\nenergies {}\n{}",
            weights_text(&r.weights),
            r.energies.energies.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "),
            ranked_text(&r.results.query_id, &r.results.results)
        )
    });
    Ok(())
}

fn probe(json: bool, a: ProbeArgs) -> CliResult {
    let sd = store(&a.store)?;
    let ds = dataset(&a.data)?;
    let kind = match a.labels {
        LabelArg::Style => LabelKind::Style,
        LabelArg::Content => LabelKind::Content,
    };
    let names = sd.weights.spec.layer_names();
    let r = probe_store(&ds, &sd.store, &names, kind, &a.probe.config())?;
    emit(json, &r, |r| {
        let mut s = format!("{} probe, {} folds, classes {:?}\n", r.label_kind, r.folds, r.classes);
        s.push_str("layer        dims   accuracy         f1               lambda\n");
        for p in &r.layers {
            s.push_str(&format!(
                "{:<12} {:>5}  {:.3} ± {:.3}    {:.3} ± {:.3}    {:e}\n",
                p.name, p.dims, p.accuracy_mean, p.accuracy_std, p.f1_mean, p.f1_std, p.lambda
            ));
        }
        s
    });
    Ok(())
}

fn ablate(json: bool, a: AblateArgs) -> CliResult {
    let ds = dataset(&a.data)?;
    let weights = encoder(&a.encoder)?;
    let policies = a
        .policies
        .iter()
        .map(|p| match p.as_str() {
            "none" => Ok(LayerNorm::None),
            "instance_norm" => Ok(LayerNorm::InstanceNorm),
            "face_recenter" => Ok(LayerNorm::FaceRecenter),
            other => Err(usage(format!("--policies: unknown kind {other:?}"))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    let targets = a
        .targets
        .iter()
        .map(|t| match t.as_str() {
            "raw" => Ok(None),
            n => match n.parse::<usize>() {
                Ok(v) if v > 0 => Ok(Some(v)),
                _ => Err(usage(format!("--targets: expected `raw` or a positive integer, got {n:?}"))),
            },
        })
        .collect::<CliResult<Vec<_>>>()?;
    let r = ablation_sweep(&ds, &weights, &policies, &targets, &a.probe.config())?;
    if let Some(p) = &a.csv {
        fs::write(p, r.to_csv()).map_err(|e| io_err(p, e))?;
    }
    emit(json, &r, |r| {
        let mut s = String::from("layer        policy          target  dims   accuracy  f1\n");
        for row in &r.rows {
            let t = row.target.map(|t| t.to_string()).unwrap_or_else(|| "raw".into());
            s.push_str(&format!(
                "{:<12} {:<15} {:>6} {:>5}   {:.3}     {:.3}\n",
                row.layer_name, row.policy, t, row.dims, row.accuracy_mean, row.f1_mean
            ));
        }
        for n in &r.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    });
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradReport {
    mode: GradMode,
    max_norm: f64,
    #[serde(flatten)]
    field: GradientResponse,
}

fn grad(json: bool, a: GradArgs) -> CliResult {
    let sd = store(&a.store)?;
    let ds = dataset(&a.data)?;
    let w = parse_weights(a.weights, sd.store.num_layers())?;
    if let Some(k) = a.scale {
        if !k.is_finite() || k < 0.0 {
            return Err(usage("--scale must be finite and non-negative"));
        }
    }
    let find = |id: &str| ds.get(id).ok_or_else(|| CliError::from(uvstyle::Error::UnknownId(id.to_string())));
    let (subject, reference) = (find(&a.subject)?, find(&a.reference)?);
    let pipe = Pipeline {
        weights: &sd.weights,
        policy: &sd.policy,
        pca: sd.pca.as_ref(),
    };
    let mode = match a.mode {
        ModeArg::Analytic => GradMode::Analytic,
        ModeArg::Fd => GradMode::FiniteDifference,
    };
    let field = style_gradient(&pipe, subject, reference, &w, mode)?;
    let k = a.scale.unwrap_or_else(|| field.default_scale());
    if let Some(p) = &a.obj {
        fs::write(p, export_obj(&field, k)).map_err(|e| io_err(p, e))?;
    }
    if let Some(p) = &a.glyphs {
        fs::write(p, export_json(&field, k)).map_err(|e| io_err(p, e))?;
    }
    let report = GradReport {
        mode,
        max_norm: field.max_norm(),
        field: GradientResponse {
            subject_id: field.subject_id.clone(),
            reference_id: field.reference_id.clone(),
            weights: w,
            distance: field.distance,
            k_scale: k,
            glyphs: glyphs(&field, k),
        },
    };
    emit(json, &report, |r| {
        format!(
            "D({}, {}) = {:.6}\n{} glyphs, max |grad| {:.4e}, scale {:.4e}\n",
            r.field.subject_id,
            r.field.reference_id,
            r.field.distance,
            r.field.glyphs.len(),
            r.max_norm,
            r.field.k_scale
        )
    });
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let cfg = ServiceConfig {
        store: a.store.store,
        data: a.data.data,
        port: a.port,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(serve(cfg)).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn execute(cli: Cli) -> CliResult {
    let json = cli.json;
    match cli.command {
        Command::Gen(a) => gen(json, a),
        Command::Embed(a) => embed(json, a),
        Command::Query(a) => query(json, a),
        Command::Fewshot(a) => fewshot(json, a),
        Command::Probe(a) => probe(json, a),
        Command::Ablate(a) => ablate(json, a),
        Command::Grad(a) => grad(json, a),
        Command::Serve(a) => serve_cmd(a),
    }
}

/// Parses `args` and runs the command: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json = cli.json;
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Usage(m) => (2, m),
                CliError::Runtime(m) => (1, m),
            };
            if json {
                eprintln!("{}", serde_json::json!({ "error": msg }));
            } else {
                eprintln!("error: {msg}");
            }
            ExitCode::from(code)
        }
    }
}
