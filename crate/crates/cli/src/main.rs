use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sheaflap::diffusion::{diffuse_linear, diffuse_nonlinear, Law, DEFAULT_STEP_SIZE};
use sheaflap::laplacian::{
    linear_laplacian, nonlinear_laplacian, normalize, NormMode, NormStyle, Normalizer, DEFAULT_EPSILON,
};
use sheaflap::nn::model::{KindName, ModelConfig, SheafPolicy, Variant};
use sheaflap::nn::train::train;
use sheaflap::sheaf::{EdgeFeatureMode, Squash};
use sheaflap::synth::{generate, split, SynthConfig};
use sheaflap::verify::{run_all, VerifyConfig};
use sheaflap::{Error, Hypergraph, Mat, Sheaf};

#[derive(Parser)]
#[command(name = "sheaflap", version, about = "Sheaf hypergraph Laplacians, diffusion and networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-class contextual hypergraph dataset.
    GenSynth(GenSynthArgs),
    /// Run the randomized property suites.
    Verify(VerifyArgs),
    /// Train a sheaf hypergraph network and write a JSON report.
    Train(TrainArgs),
    /// Run linear or non-linear diffusion and write the energy trace as CSV.
    Diffuse(DiffuseArgs),
    /// Build a (normalized) Laplacian and write it as coordinate text.
    BuildLap(BuildLapArgs),
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn io_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 3,
        message: message.into(),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Parse(_) => 3,
            Error::Config(_) | Error::Validation(_) | Error::Width { .. } | Error::HostMismatch(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Defaults, then the config file, then every flag that was given.
fn resolve<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: &impl Serialize) -> CliResult<C> {
    let Value::Object(mut merged) = serde_json::to_value(C::default()).expect("config serializes") else {
        unreachable!("configs are structs")
    };
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io_error(format!("cannot read {}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        let Value::Object(entries) = value else {
            return Err(usage("config file must hold a JSON object"));
        };
        for (key, v) in entries {
            if !merged.contains_key(&key) {
                return Err(usage(format!("unknown config key `{key}`")));
            }
            merged.insert(key, v);
        }
    }
    if let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") {
        for (key, v) in given.into_iter().filter(|(_, v)| !v.is_null()) {
            merged.insert(key, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn echo(cfg: &impl Serialize) {
    println!("config {}", serde_json::to_string(cfg).expect("config serializes"));
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_error(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(path: Option<&PathBuf>) -> CliResult<Hypergraph> {
    let path = path.ok_or_else(|| usage("--data is required"))?;
    let file = fs::File::open(path).map_err(|e| io_error(format!("cannot open {}: {e}", path.display())))?;
    Hypergraph::load(file).map_err(|e| match e {
        Error::Validation(m) => io_error(format!("{}: {m}", path.display())),
        other => CliError::from(other),
    })
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenSynthArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Heterophily level; sets β = α.
    #[arg(long)]
    alpha: Option<usize>,
    /// Class-0 nodes per hyperedge.
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    edges: Option<usize>,
    #[arg(long)]
    cardinality: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GenSynthConfig {
    alpha: Option<usize>,
    beta: Option<usize>,
    nodes: usize,
    edges: usize,
    cardinality: usize,
    features: usize,
    separation: f64,
    noise: f64,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for GenSynthConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        GenSynthConfig {
            alpha: None,
            beta: None,
            nodes: s.num_nodes,
            edges: s.num_hyperedges,
            cardinality: s.cardinality,
            features: s.feature_dim,
            separation: s.mean_separation,
            noise: s.noise_std,
            seed: s.seed,
            out: None,
        }
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> CliResult<()> {
    let mut cfg: GenSynthConfig = resolve(args.config.as_deref(), &args)?;
    let c = cfg.cardinality;
    let beta = match (cfg.alpha, cfg.beta) {
        (None, None) => return Err(usage("one of --alpha or --beta is required")),
        (Some(a), None) => {
            if a == 0 || a > c / 2 {
                return Err(usage(format!("--alpha must lie in 1..={} for cardinality {c}", c / 2)));
            }
            a
        }
        (a, Some(b)) => {
            if b > c {
                return Err(usage(format!("--beta must lie in 0..={c}")));
            }
            if a.is_some_and(|a| a != b.min(c - b)) {
                return Err(usage("--alpha and --beta disagree"));
            }
            b
        }
    };
    let out = cfg.out.clone().ok_or_else(|| usage("--out is required"))?;
    let synth = SynthConfig {
        num_nodes: cfg.nodes,
        num_hyperedges: cfg.edges,
        cardinality: c,
        beta,
        feature_dim: cfg.features,
        mean_separation: cfg.separation,
        noise_std: cfg.noise,
        seed: cfg.seed,
    };
    cfg.alpha = Some(synth.alpha());
    cfg.beta = Some(beta);
    echo(&cfg);
    let h = generate(&synth)?;
    write_file(&out, &h.to_json())?;
    let labels = h.labels().unwrap_or_default();
    let ones = labels.iter().filter(|&&l| l == 1).count();
    println!("class 0: {} nodes, class 1: {} nodes", labels.len() - ones, ones);
    println!("beta={beta} alpha={}", synth.alpha());
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct VerifyArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Corrupt every normalized Laplacian before the spectral checks.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    inject_asymmetry: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct VerifySettings {
    trials: usize,
    seed: u64,
    max_nodes: usize,
    inject_asymmetry: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        let v = VerifyConfig::default();
        VerifySettings {
            trials: v.trials,
            seed: v.seed,
            max_nodes: v.max_nodes,
            inject_asymmetry: v.inject_asymmetry,
        }
    }
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    let cfg: VerifySettings = resolve(args.config.as_deref(), &args)?;
    if cfg.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    if cfg.max_nodes < 2 {
        return Err(usage("--max-nodes must be at least 2"));
    }
    echo(&cfg);
    let results = run_all(&VerifyConfig {
        trials: cfg.trials,
        seed: cfg.seed,
        max_nodes: cfg.max_nodes,
        inject_asymmetry: cfg.inject_asymmetry,
    });
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError {
            code: 1,
            message: format!("{failed} of {} properties failed", results.len()),
        });
    }
    println!("all {} properties passed", results.len());
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// sheaf_gnn or sheaf_gcn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    /// diag, low_rank or general.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    learn_w1: Option<bool>,
    /// fixed_first_layer or recompute_each_layer.
    #[arg(long)]
    sheaf_policy: Option<String>,
    /// Use constant unit restriction maps.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    trivial: Option<bool>,
    /// Add a singleton hyperedge at every node before training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    self_loops: Option<bool>,
    /// identity, degree or sheaf.
    #[arg(long)]
    norm_mode: Option<String>,
    /// symmetric or asymmetric.
    #[arg(long)]
    norm_style: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mediators: Option<bool>,
    /// sigmoid or tanh.
    #[arg(long)]
    squash: Option<String>,
    /// mean_of_inputs, mean_of_hidden or mean_of_transformed.
    #[arg(long)]
    edge_mode: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seeds the weights, dropout and the split.
    #[arg(long)]
    seed: Option<u64>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainConfig {
    data: Option<PathBuf>,
    out: PathBuf,
    variant: Variant,
    d: usize,
    kind: KindName,
    rank: usize,
    layers: usize,
    hidden: usize,
    learn_w1: bool,
    sheaf_policy: SheafPolicy,
    trivial: bool,
    self_loops: bool,
    norm_mode: NormMode,
    norm_style: NormStyle,
    epsilon: f64,
    mediators: bool,
    squash: Squash,
    edge_mode: EdgeFeatureMode,
    dropout: f64,
    lr: f64,
    weight_decay: f64,
    epochs: usize,
    seed: u64,
    split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            data: None,
            out: PathBuf::from("report.json"),
            variant: m.variant,
            d: m.d,
            kind: m.kind,
            rank: m.rank,
            layers: m.layers,
            hidden: m.hidden,
            learn_w1: m.learn_w1,
            sheaf_policy: m.sheaf_policy,
            trivial: m.trivial_sheaf,
            self_loops: m.self_loops,
            norm_mode: m.norm_mode,
            norm_style: m.norm_style,
            epsilon: m.epsilon,
            mediators: m.mediators,
            squash: m.squash,
            edge_mode: m.edge_mode,
            dropout: m.dropout,
            lr: m.lr,
            weight_decay: m.weight_decay,
            epochs: m.epochs,
            seed: m.seed,
            split: [0.5, 0.25, 0.25],
        }
    }
}

impl TrainConfig {
    fn model(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d: self.d,
            kind: self.kind,
            rank: self.rank,
            layers: self.layers,
            hidden: self.hidden,
            learn_w1: self.learn_w1,
            sheaf_policy: self.sheaf_policy,
            trivial_sheaf: self.trivial,
            self_loops: self.self_loops,
            norm_mode: self.norm_mode,
            norm_style: self.norm_style,
            epsilon: self.epsilon,
            mediators: self.mediators,
            squash: self.squash,
            edge_mode: self.edge_mode,
            dropout: self.dropout,
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cfg: TrainConfig = resolve(args.config.as_deref(), &args)?;
    let model = cfg.model();
    model.validate()?;
    echo(&cfg);
    let h = load_dataset(cfg.data.as_ref())?;
    let [tr, va, te] = cfg.split;
    let sp = split(h.num_nodes(), (tr, va, te), cfg.seed)?;
    let (report, _) = train(&h, &sp, &model)?;
    write_file(&cfg.out, &report.to_json())?;
    println!("test_acc={} dirichlet_probe={}", report.test_acc, report.dirichlet_probe);
    Ok(())
}

/// Sheaf and signal options shared by `diffuse` and `build-lap`.
#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SheafArgs {
    /// Use the trivial sheaf (d = 1, unit maps).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    trivial: Option<bool>,
    /// Read the sheaf from a JSON file instead of sampling one.
    #[arg(long)]
    sheaf: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    /// diag, low_rank or general.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    sheaf_seed: Option<u64>,
    /// Channels of the random signal used when the data has no usable features.
    #[arg(long)]
    channels: Option<usize>,
    /// Seeds the random signal and tie-breaking.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct SheafSettings {
    trivial: bool,
    sheaf: Option<PathBuf>,
    d: usize,
    kind: KindName,
    rank: usize,
    sheaf_seed: u64,
    channels: usize,
    seed: u64,
}

impl Default for SheafSettings {
    fn default() -> Self {
        SheafSettings {
            trivial: false,
            sheaf: None,
            d: 2,
            kind: KindName::Diagonal,
            rank: 1,
            sheaf_seed: 0,
            channels: 1,
            seed: 0,
        }
    }
}

impl SheafSettings {
    fn build(&self, h: &Hypergraph) -> CliResult<Sheaf> {
        if self.trivial {
            return Ok(Sheaf::trivial(h));
        }
        if let Some(path) = &self.sheaf {
            let text = fs::read_to_string(path).map_err(|e| io_error(format!("cannot read {}: {e}", path.display())))?;
            let s = Sheaf::from_json(&text)?;
            s.check_host(h)?;
            return Ok(s);
        }
        let kind = ModelConfig {
            kind: self.kind,
            rank: self.rank,
            d: self.d,
            ..ModelConfig::default()
        }
        .map_kind();
        Ok(Sheaf::random(h, self.d, kind, self.sheaf_seed)?)
    }

    /// Node features when they fit a one-dimensional stalk, otherwise a
    /// seeded uniform signal on `[-1, 1)`.
    fn signal(&self, h: &Hypergraph, s: &Sheaf) -> CliResult<Mat> {
        let rows = h.num_nodes() * s.stalk_dim();
        if let Some(x) = h.features().filter(|x| x.rows() == rows) {
            return Ok(x.clone());
        }
        if self.channels == 0 {
            return Err(usage("--channels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let data = (0..rows * self.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Mat::from_vec(rows, self.channels, data)?)
    }
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DiffuseArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// linear or nonlinear.
    #[arg(long)]
    law: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Step size of the non-linear law.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mediators: Option<bool>,
    /// identity, degree or sheaf.
    #[arg(long)]
    norm_mode: Option<String>,
    /// symmetric or asymmetric.
    #[arg(long)]
    norm_style: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    sheaf: SheafArgs,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct DiffuseConfig {
    data: Option<PathBuf>,
    out: PathBuf,
    law: Law,
    steps: usize,
    eta: f64,
    mediators: bool,
    norm_mode: NormMode,
    norm_style: NormStyle,
    epsilon: f64,
    #[serde(flatten)]
    sheaf: SheafSettings,
}

impl Default for DiffuseConfig {
    fn default() -> Self {
        DiffuseConfig {
            data: None,
            out: PathBuf::from("trace.csv"),
            law: Law::LinearDirichlet,
            steps: 10,
            eta: DEFAULT_STEP_SIZE,
            mediators: false,
            norm_mode: NormMode::Sheaf,
            norm_style: NormStyle::Symmetric,
            epsilon: DEFAULT_EPSILON,
            sheaf: SheafSettings::default(),
        }
    }
}

fn cmd_diffuse(args: DiffuseArgs) -> CliResult<()> {
    let cfg: DiffuseConfig = resolve(args.config.as_deref(), &args)?;
    echo(&cfg);
    let h = load_dataset(cfg.data.as_ref())?;
    let s = cfg.sheaf.build(&h)?;
    let x = cfg.sheaf.signal(&h, &s)?;
    let norm = Normalizer::new(&h, &s, cfg.norm_mode, cfg.norm_style, cfg.epsilon)?;
    let (_, trace) = match cfg.law {
        Law::LinearDirichlet => diffuse_linear(&h, &s, &norm, &x, cfg.steps)?,
        Law::NonlinearTv => diffuse_nonlinear(&h, &s, &norm, &x, cfg.steps, cfg.eta, cfg.mediators, cfg.sheaf.seed)?,
    };
    write_file(&cfg.out, &trace.to_csv())?;
    let e = trace.energies();
    println!("energy {} -> {}", e[0], e[e.len() - 1]);
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct BuildLapArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// linear or nonlinear.
    #[arg(long)]
    law: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mediators: Option<bool>,
    /// Normalize with identity, degree or sheaf blocks; omitted means the raw Laplacian.
    #[arg(long)]
    norm_mode: Option<String>,
    /// symmetric or asymmetric.
    #[arg(long)]
    norm_style: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    sheaf: SheafArgs,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct BuildLapConfig {
    data: Option<PathBuf>,
    out: PathBuf,
    law: Law,
    mediators: bool,
    norm_mode: Option<NormMode>,
    norm_style: NormStyle,
    epsilon: f64,
    #[serde(flatten)]
    sheaf: SheafSettings,
}

impl Default for BuildLapConfig {
    fn default() -> Self {
        BuildLapConfig {
            data: None,
            out: PathBuf::from("laplacian.txt"),
            law: Law::LinearDirichlet,
            mediators: false,
            norm_mode: None,
            norm_style: NormStyle::Symmetric,
            epsilon: DEFAULT_EPSILON,
            sheaf: SheafSettings::default(),
        }
    }
}

fn cmd_build_lap(args: BuildLapArgs) -> CliResult<()> {
    let cfg: BuildLapConfig = resolve(args.config.as_deref(), &args)?;
    echo(&cfg);
    let h = load_dataset(cfg.data.as_ref())?;
    let s = cfg.sheaf.build(&h)?;
    let norm = cfg
        .norm_mode
        .map(|mode| Normalizer::new(&h, &s, mode, cfg.norm_style, cfg.epsilon))
        .transpose()?;
    let l = match cfg.law {
        Law::LinearDirichlet => linear_laplacian(&h, &s)?,
        Law::NonlinearTv => {
            let x = cfg.sheaf.signal(&h, &s)?;
            nonlinear_laplacian(&h, &s, &x, cfg.mediators, norm.as_ref(), cfg.sheaf.seed)?
        }
    };
    let l = match &norm {
        Some(n) => normalize(&l, n)?,
        None => l,
    };
    write_file(&cfg.out, &l.to_coordinate_text())?;
    println!("{} nonzero blocks of size {}", l.num_blocks(), l.block_dim());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Diffuse(a) => cmd_diffuse(a),
        Command::BuildLap(a) => cmd_build_lap(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
