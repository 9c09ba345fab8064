//! Command-line surface: trigger generation, dataset poisoning, training,
//! evaluation, the analytic bound and Monte-Carlo oracle, and the defense
//! sweeps. Every command takes explicit seeds, and every report is a
//! `#`-commented metadata header followed by a tab-delimited table so runs
//! can be replayed bit-exactly from the report itself.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{self, BoundQuery, CAPACITY_UNIFORM_255};
use crate::data::{self, LabeledDataset};
use crate::defense::{self, AcAnalysis, AcConfig, StripConfig};
use crate::metrics;
use crate::nn::{self, AugmentConfig, Mlp, TrainConfig};
use crate::poison::{self, PoisonPlan};
use crate::trigger::{self, Symmetry, TriggerSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

/// Environment variable naming the base directory for relative output paths.
pub const OUT_DIR_ENV: &str = "BDLAB_OUT_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Validation(m) => m,
        }
    }
}

/// I/O-flavored module errors map to the I/O exit code, everything else to
/// the validation code.
macro_rules! impl_from_err {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                let msg = e.to_string();
                if msg.contains("i/o error") || msg.contains("No such file") {
                    CliError::Io(msg)
                } else {
                    CliError::Validation(msg)
                }
            }
        }
    };
}
impl_from_err!(crate::trigger::TriggerError);
impl_from_err!(crate::data::DataError);
impl_from_err!(crate::poison::PoisonError);
impl_from_err!(crate::nn::NnError);
impl_from_err!(crate::defense::DefenseError);
impl_from_err!(crate::analysis::AnalysisError);
impl_from_err!(crate::metrics::MetricError);

#[derive(Parser, Debug)]
#[command(name = "bdlab", version, about = "Dispersed-pixel backdoor trigger lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a trigger manifest and print the realized layout.
    GenTrigger(GenTriggerArgs),
    /// Poison an IDX dataset according to a trigger manifest and plan.
    Poison(PoisonArgs),
    /// Train the MLP on an IDX dataset and save a JSON checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint: functionality, ASR, functionality loss.
    Eval(EvalArgs),
    /// Analytic magnitude lower bound for a target recognition rate.
    Bound(BoundArgs),
    /// Monte-Carlo perceptron oracle vs the closed-form prediction.
    Oracle(OracleArgs),
    /// Defense battery.
    #[command(subcommand)]
    Defend(DefendCommand),
}

#[derive(Args, Debug)]
pub struct GenTriggerArgs {
    /// 256-bit trigger key, 64 hex characters.
    #[arg(long)]
    pub seed: String,
    /// Per-pixel magnitude m.
    #[arg(long)]
    pub m: f64,
    #[arg(long, default_value_t = 1)]
    pub reps_h: usize,
    #[arg(long, default_value_t = 1)]
    pub reps_v: usize,
    #[arg(long, default_value_t = 0)]
    pub margin: usize,
    #[arg(long, default_value = "none")]
    pub symmetry: String,
    #[arg(long, default_value_t = 28)]
    pub height: usize,
    #[arg(long, default_value_t = 28)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Output manifest path (TOML).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PoisonArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Trigger manifest from gen-trigger.
    #[arg(long)]
    pub trigger: PathBuf,
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub target: usize,
    /// Selection seed for the poison plan.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_images: PathBuf,
    #[arg(long)]
    pub out_labels: PathBuf,
    /// Where to write the poison plan (JSON).
    #[arg(long)]
    pub plan_out: PathBuf,
    /// Poison every record and relabel to the target (ASR test set).
    #[arg(long, default_value_t = false)]
    pub all: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainHyperArgs {
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Training seed (init, shuffling, dropout).
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
    #[arg(long, default_value_t = 256)]
    pub hidden1: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden2: usize,
    #[arg(long, default_value_t = 0.2)]
    pub slope: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    /// Enable pad-2 crop / ±5° rotation / horizontal-flip augmentation.
    #[arg(long, default_value_t = false)]
    pub augment: bool,
    /// Output checkpoint path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub clean_images: PathBuf,
    #[arg(long)]
    pub clean_labels: PathBuf,
    #[arg(long)]
    pub poisoned_images: Option<PathBuf>,
    #[arg(long)]
    pub poisoned_labels: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<usize>,
    /// Benign twin checkpoint for functionality loss.
    #[arg(long)]
    pub benign_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BoundArgs {
    /// Target recognition rate in (0.5, 1).
    #[arg(long)]
    pub eta: f64,
    /// Total perturbed cells M.
    #[arg(long)]
    pub m_effective: usize,
    #[arg(long, default_value_t = 1)]
    pub reps_h: usize,
    #[arg(long, default_value_t = 1)]
    pub reps_v: usize,
    #[arg(long, default_value_t = 1)]
    pub symmetry_factor: usize,
    #[arg(long, default_value_t = CAPACITY_UNIFORM_255)]
    pub capacity: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub m: f64,
    /// Perturbed cell count M; the oracle runs on a square image with a
    /// margin-0, rep-1 trigger of this size.
    #[arg(long)]
    pub m_effective: usize,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = false)]
    pub truncate: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum DefendCommand {
    /// STRIP entropy statistics for clean vs poisoned inputs.
    Strip(StripArgs),
    /// Spectral signature detection against the true poison plan.
    Ssd(SsdArgs),
    /// Activation clustering against the true poison plan.
    Ac(AcArgs),
    /// Median-smoothing sweep over window sizes.
    Smooth(SmoothArgs),
    /// Input-transform sweep (none / crop / rotate / flip).
    Transform(TransformArgs),
    /// Dormant-neuron pruning under an accuracy budget.
    Prune(PruneArgs),
    /// Fine-tuning on fractions of held-out clean data.
    Finetune(FinetuneArgs),
}

#[derive(Args, Debug, Clone)]
pub struct EvalPairArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub clean_images: PathBuf,
    #[arg(long)]
    pub clean_labels: PathBuf,
    #[arg(long)]
    pub poisoned_images: PathBuf,
    #[arg(long)]
    pub poisoned_labels: PathBuf,
    #[arg(long)]
    pub target: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StripArgs {
    #[command(flatten)]
    pub pair: EvalPairArgs,
    /// Overlay pool (clean images).
    #[arg(long)]
    pub pool_images: PathBuf,
    #[arg(long)]
    pub pool_labels: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub overlays: usize,
    #[arg(long, default_value_t = 0.5)]
    pub weight: f64,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SsdArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The (poisoned) training set the defender inspects.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Ground-truth poison plan (JSON) for scoring.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AcArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// One of: smaller, relative-size, distance, silhouette.
    #[arg(long, default_value = "smaller")]
    pub analysis: String,
    /// Threshold for relative-size (default 0.35) or silhouette (0.10).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub pca_dims: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SmoothArgs {
    #[command(flatten)]
    pub pair: EvalPairArgs,
    /// Comma-separated window sizes.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    pub windows: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    #[command(flatten)]
    pub pair: EvalPairArgs,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub pair: EvalPairArgs,
    #[arg(long, default_value_t = 0.04)]
    pub budget: f64,
    /// Optional path for the pruned checkpoint.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub pair: EvalPairArgs,
    /// Held-out clean data to fine-tune on.
    #[arg(long)]
    pub heldout_images: PathBuf,
    #[arg(long)]
    pub heldout_labels: PathBuf,
    /// Comma-separated fractions of the held-out set.
    #[arg(long, default_value = "0.05,0.1,0.2", value_delimiter = ',')]
    pub fractions: Vec<f64>,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

/// Relative output paths land under `$BDLAB_OUT_DIR` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let path = resolve_out(path);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Report format: `# key\tvalue` metadata lines, then a tab-delimited table.
fn render_report(meta: &[(String, String)], columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        writeln!(out, "# {k}\t{v}").unwrap();
    }
    writeln!(out, "{}", columns.join("\t")).unwrap();
    for row in rows {
        writeln!(out, "{}", row.join("\t")).unwrap();
    }
    out
}

fn load_pair(images: &Path, labels: &Path) -> Result<LabeledDataset, CliError> {
    data::load_idx_dataset(images, labels).map_err(|e| CliError::Io(e.to_string()))
}

fn load_model(path: &Path) -> Result<Mlp, CliError> {
    nn::load_checkpoint(path).map_err(|e| match e {
        nn::NnError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })
}

fn parse_seed_hex(s: &str) -> Result<[u8; 32], CliError> {
    let bytes = hex::decode(s).map_err(|e| CliError::Usage(format!("--seed must be hex: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| CliError::Usage("--seed must be exactly 64 hex characters (256 bits)".into()))
}

fn penultimate_features(model: &Mlp, ds: &LabeledDataset) -> Result<ndarray::Array2<f64>, CliError> {
    let idx = model
        .penultimate_activation_index()
        .ok_or_else(|| CliError::Validation("checkpoint has no hidden activation layer".into()))?;
    Ok(model.hidden_activations(ds, idx)?)
}

fn load_plan(path: &Path) -> Result<PoisonPlan, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("malformed plan: {e}")))
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

fn cmd_gen_trigger(args: &GenTriggerArgs) -> Result<String, CliError> {
    let symmetry = Symmetry::from_str(&args.symmetry).map_err(CliError::Usage)?;
    let spec = TriggerSpec {
        seed: parse_seed_hex(&args.seed)?,
        magnitude_m: args.m,
        reps_h: args.reps_h,
        reps_v: args.reps_v,
        margin: args.margin,
        symmetry,
        channels: args.channels,
        image_h: args.height,
        image_w: args.width,
    };
    let layout = trigger::compute_layout(&spec)?;
    trigger::save_trigger(&spec, resolve_out(&args.out))?;
    Ok(format!(
        "t_h={} t_v={} region={}x{} origin=({},{}) m_effective={} base_count={}\n",
        layout.t_h,
        layout.t_v,
        layout.region_w,
        layout.region_h,
        layout.x0,
        layout.y0,
        layout.m_effective,
        layout.base_count
    ))
}

fn cmd_poison(args: &PoisonArgs) -> Result<String, CliError> {
    let ds = load_pair(&args.images, &args.labels)?;
    let spec = trigger::load_trigger(&args.trigger)?;
    let realized = trigger::generate_trigger(&spec)?;
    let (out_ds, plan) = if args.all {
        let out = poison::poison_all_test(&ds, &realized, args.target)?;
        let plan = PoisonPlan {
            target_class: args.target,
            poison_rate: 1.0,
            poisoned_indices: (0..ds.len()).collect(),
            selection_seed: args.seed,
        };
        (out, plan)
    } else {
        let plan = poison::make_plan(ds.len(), args.rate, args.target, args.seed)?;
        let out = poison::poison_dataset(&ds, &realized, &plan)?;
        (out, plan)
    };
    data::save_idx_dataset(&out_ds, resolve_out(&args.out_images), resolve_out(&args.out_labels))?;
    let plan_text = serde_json::to_string_pretty(&plan)
        .map_err(|e| CliError::Validation(format!("serializing plan: {e}")))?;
    write_text(&args.plan_out, &plan_text)?;
    Ok(format!(
        "poisoned={} of {} target={} seed={}\n",
        plan.poisoned_indices.len(),
        ds.len(),
        plan.target_class,
        plan.selection_seed
    ))
}

fn train_config(hyper: &TrainHyperArgs, ds: &LabeledDataset, augment: bool) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        learning_rate: hyper.lr,
        momentum: hyper.momentum,
        weight_decay: hyper.weight_decay,
        epochs: hyper.epochs,
        batch_size: hyper.batch_size,
        seed: hyper.seed,
        normalization: data::compute_norm_stats(ds)?,
        augment: augment.then_some(AugmentConfig {
            crop_pad: 2,
            rotate_deg: 5.0,
            hflip: true,
        }),
    })
}

fn cmd_train(args: &TrainArgs) -> Result<String, CliError> {
    let ds = load_pair(&args.images, &args.labels)?;
    if ds.is_empty() {
        return Err(CliError::Validation("training set is empty".into()));
    }
    let input_dim = ds.images[0].len();
    let model = nn::build_mlp(
        input_dim,
        (args.hidden1, args.hidden2),
        ds.num_classes,
        args.slope,
        args.dropout,
        args.hyper.seed,
    )?;
    let cfg = train_config(&args.hyper, &ds, args.augment)?;
    let (trained, history) = nn::train(&model, &ds, &cfg)?;
    nn::save_checkpoint(&trained, resolve_out(&args.out))?;
    let final_loss = history.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "epochs={} final_loss={:.6} params={}\n",
        history.len(),
        final_loss,
        trained.parameter_count()
    ))
}

fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let model = load_model(&args.checkpoint)?;
    let clean = load_pair(&args.clean_images, &args.clean_labels)?;
    let (functionality, _) = nn::evaluate(&model, &clean)?;

    let mut meta = vec![
        ("command".to_string(), "eval".to_string()),
        ("checkpoint".to_string(), args.checkpoint.display().to_string()),
        ("clean_images".to_string(), args.clean_images.display().to_string()),
    ];
    let mut cols = vec!["functionality"];
    let mut row = vec![format!("{functionality:.6}")];

    if let (Some(pi), Some(pl), Some(target)) = (&args.poisoned_images, &args.poisoned_labels, args.target) {
        let poisoned = load_pair(pi, pl)?;
        let (_, preds) = nn::evaluate(&model, &poisoned)?;
        let asr = metrics::attack_success_rate(&preds, target)?;
        meta.push(("target".to_string(), target.to_string()));
        cols.push("asr");
        row.push(format!("{asr:.6}"));
    }
    if let Some(benign_path) = &args.benign_checkpoint {
        let benign = load_model(benign_path)?;
        let (benign_acc, _) = nn::evaluate(&benign, &clean)?;
        let loss = metrics::functionality_loss(benign_acc, functionality);
        cols.push("benign_functionality");
        row.push(format!("{benign_acc:.6}"));
        cols.push("functionality_loss");
        row.push(format!("{loss:.6}"));
    }
    let report = render_report(&meta, &cols, &[row]);
    write_text(&args.out, &report)?;
    Ok(report)
}

fn cmd_bound(args: &BoundArgs) -> Result<String, CliError> {
    let query = BoundQuery {
        eta: args.eta,
        m_effective: args.m_effective,
        reps_h: args.reps_h,
        reps_v: args.reps_v,
        symmetry_factor: args.symmetry_factor,
        capacity: args.capacity,
    };
    let bound = analysis::magnitude_bound(&query)?;
    let group = (query.symmetry_factor * query.reps_h * query.reps_v) as f64;
    let predicted = analysis::predict_asr(bound * group.sqrt(), query.m_effective, query.capacity);
    let meta = vec![
        ("command".to_string(), "bound".to_string()),
        ("eta".to_string(), args.eta.to_string()),
        ("m_effective".to_string(), args.m_effective.to_string()),
        ("reps".to_string(), format!("{}x{}", args.reps_h, args.reps_v)),
        ("symmetry_factor".to_string(), args.symmetry_factor.to_string()),
        ("capacity".to_string(), args.capacity.to_string()),
        (
            "note".to_string(),
            "m_effective comes from the layout solver and can be smaller than width*height*channels".to_string(),
        ),
    ];
    let report = render_report(
        &meta,
        &["magnitude_bound", "predicted_asr_at_group_bound"],
        &[vec![format!("{bound:.6}"), format!("{predicted:.6}")]],
    );
    if let Some(out) = &args.out {
        write_text(out, &report)?;
    }
    Ok(report)
}

fn cmd_oracle(args: &OracleArgs) -> Result<String, CliError> {
    let side = (args.m_effective as f64).sqrt().round() as usize;
    if side * side != args.m_effective {
        return Err(CliError::Usage(format!(
            "--m-effective {} is not a perfect square (the oracle uses a square margin-0 trigger)",
            args.m_effective
        )));
    }
    let spec = TriggerSpec {
        seed: [0; 32], // per-trial trigger keys are drawn from --seed
        magnitude_m: args.m,
        reps_h: 1,
        reps_v: 1,
        margin: 0,
        symmetry: Symmetry::None,
        channels: 1,
        image_h: side,
        image_w: side,
    };
    let report = analysis::perceptron_oracle(&spec, args.trials, args.truncate, args.seed)?;
    let meta = vec![
        ("command".to_string(), "oracle".to_string()),
        ("m".to_string(), args.m.to_string()),
        ("m_effective".to_string(), args.m_effective.to_string()),
        ("trials".to_string(), args.trials.to_string()),
        ("truncate".to_string(), args.truncate.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    let text = render_report(
        &meta,
        &["empirical_asr", "predicted_asr", "clean_rejection"],
        &[vec![
            format!("{:.6}", report.empirical_asr),
            format!("{:.6}", report.predicted_asr),
            format!("{:.6}", report.clean_rejection),
        ]],
    );
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(text)
}

fn defend_strip(args: &StripArgs) -> Result<String, CliError> {
    let model = load_model(&args.pair.checkpoint)?;
    let clean = load_pair(&args.pair.clean_images, &args.pair.clean_labels)?;
    let poisoned = load_pair(&args.pair.poisoned_images, &args.pair.poisoned_labels)?;
    let pool = load_pair(&args.pool_images, &args.pool_labels)?;
    let cfg = StripConfig {
        num_overlays: args.overlays,
        blend_weight: args.weight,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut clean_scores = Vec::with_capacity(clean.len());
    for img in &clean.images {
        clean_scores.push(defense::strip_entropy(&model, img, &pool, &cfg, &mut rng)?);
    }
    let mut poisoned_scores = Vec::with_capacity(poisoned.len());
    for img in &poisoned.images {
        poisoned_scores.push(defense::strip_entropy(&model, img, &pool, &cfg, &mut rng)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bacc = defense::best_threshold_bacc(&clean_scores, &poisoned_scores)?;
    let meta = vec![
        ("command".to_string(), "defend strip".to_string()),
        ("overlays".to_string(), args.overlays.to_string()),
        ("weight".to_string(), args.weight.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    let text = render_report(
        &meta,
        &["mean_entropy_clean", "mean_entropy_poisoned", "best_threshold_bacc"],
        &[vec![
            format!("{:.6}", mean(&clean_scores)),
            format!("{:.6}", mean(&poisoned_scores)),
            format!("{bacc:.6}"),
        ]],
    );
    write_text(&args.pair.out, &text)?;
    Ok(text)
}

fn defend_ssd(args: &SsdArgs) -> Result<String, CliError> {
    let model = load_model(&args.checkpoint)?;
    let ds = load_pair(&args.images, &args.labels)?;
    let plan = load_plan(&args.plan)?;
    let feats = penultimate_features(&model, &ds)?;
    let report = defense::ssd_detect(&feats, args.epsilon)?;
    let (tpr, tnr, bacc) = defense::detector_baccuracy(&report.flags, &plan)?;
    let meta = vec![
        ("command".to_string(), "defend ssd".to_string()),
        ("epsilon".to_string(), args.epsilon.to_string()),
        ("threshold".to_string(), format!("{:.6}", report.threshold)),
    ];
    let text = render_report(
        &meta,
        &["tpr", "tnr", "bacc", "flagged"],
        &[vec![
            format!("{tpr:.6}"),
            format!("{tnr:.6}"),
            format!("{bacc:.6}"),
            report.flags.iter().filter(|&&f| f).count().to_string(),
        ]],
    );
    write_text(&args.out, &text)?;
    Ok(text)
}

fn parse_analysis(name: &str, threshold: Option<f64>) -> Result<AcAnalysis, CliError> {
    match name {
        "smaller" => Ok(AcAnalysis::Smaller),
        "relative-size" => Ok(AcAnalysis::RelativeSize {
            threshold: threshold.unwrap_or(0.35),
        }),
        "distance" => Ok(AcAnalysis::Distance),
        "silhouette" => Ok(AcAnalysis::Silhouette {
            threshold: threshold.unwrap_or(0.10),
        }),
        other => Err(CliError::Usage(format!("unknown AC analysis {other:?}"))),
    }
}

fn defend_ac(args: &AcArgs) -> Result<String, CliError> {
    let model = load_model(&args.checkpoint)?;
    let ds = load_pair(&args.images, &args.labels)?;
    let plan = load_plan(&args.plan)?;
    let feats = penultimate_features(&model, &ds)?;
    let cfg = AcConfig {
        pca_dims: args.pca_dims,
        analysis: parse_analysis(&args.analysis, args.threshold)?,
        kmeans_restarts: args.restarts,
        seed: args.seed,
    };
    let report = defense::ac_detect(&feats, &ds.labels, ds.num_classes, &cfg)?;
    let (tpr, tnr, bacc) = defense::detector_baccuracy(&report.flags, &plan)?;
    let meta = vec![
        ("command".to_string(), "defend ac".to_string()),
        ("analysis".to_string(), args.analysis.clone()),
        ("pca_dims".to_string(), args.pca_dims.to_string()),
        ("restarts".to_string(), args.restarts.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    let mut rows = vec![vec![
        "all".to_string(),
        format!("{tpr:.6}"),
        format!("{tnr:.6}"),
        format!("{bacc:.6}"),
    ]];
    for d in &report.diagnostics {
        rows.push(vec![
            format!("class{}", d.class),
            format!("{}/{}", d.cluster_sizes[0], d.cluster_sizes[1]),
            format!("{:.4}", d.mean_silhouette),
            d.flagged_cluster.map_or("-".to_string(), |c| c.to_string()),
        ]);
    }
    let text = render_report(&meta, &["row", "tpr_or_sizes", "tnr_or_silhouette", "bacc_or_flagged"], &rows);
    write_text(&args.out, &text)?;
    Ok(text)
}

fn sweep_report(command: &str, extra: Vec<(String, String)>, rows: &[defense::SweepRow]) -> String {
    let mut meta = vec![("command".to_string(), command.to_string())];
    meta.extend(extra);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.6}", r.functionality),
                format!("{:.6}", r.asr),
            ]
        })
        .collect();
    render_report(&meta, &["setting", "functionality", "asr"], &table)
}

fn defend_smooth(args: &SmoothArgs) -> Result<String, CliError> {
    let model = load_model(&args.pair.checkpoint)?;
    let clean = load_pair(&args.pair.clean_images, &args.pair.clean_labels)?;
    let poisoned = load_pair(&args.pair.poisoned_images, &args.pair.poisoned_labels)?;
    let rows = defense::smoothing_sweep(&model, &clean, &poisoned, args.pair.target, &args.windows)?;
    let text = sweep_report(
        "defend smooth",
        vec![(
            "windows".to_string(),
            args.windows.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        )],
        &rows,
    );
    write_text(&args.pair.out, &text)?;
    Ok(text)
}

fn defend_transform(args: &TransformArgs) -> Result<String, CliError> {
    let model = load_model(&args.pair.checkpoint)?;
    let clean = load_pair(&args.pair.clean_images, &args.pair.clean_labels)?;
    let poisoned = load_pair(&args.pair.poisoned_images, &args.pair.poisoned_labels)?;
    let rows = defense::transform_sweep(&model, &clean, &poisoned, args.pair.target, args.seed)?;
    let text = sweep_report(
        "defend transform",
        vec![("seed".to_string(), args.seed.to_string())],
        &rows,
    );
    write_text(&args.pair.out, &text)?;
    Ok(text)
}

fn defend_prune(args: &PruneArgs) -> Result<String, CliError> {
    let model = load_model(&args.pair.checkpoint)?;
    let clean = load_pair(&args.pair.clean_images, &args.pair.clean_labels)?;
    let poisoned = load_pair(&args.pair.poisoned_images, &args.pair.poisoned_labels)?;
    let (before_func, _) = nn::evaluate(&model, &clean)?;
    let (_, before_preds) = nn::evaluate(&model, &poisoned)?;
    let before_asr = metrics::attack_success_rate(&before_preds, args.pair.target)?;

    let (pruned, count) = nn::prune_neurons(&model, &clean, args.budget)?;
    let (after_func, _) = nn::evaluate(&pruned, &clean)?;
    let (_, after_preds) = nn::evaluate(&pruned, &poisoned)?;
    let after_asr = metrics::attack_success_rate(&after_preds, args.pair.target)?;

    if let Some(out) = &args.model_out {
        nn::save_checkpoint(&pruned, resolve_out(out))?;
    }
    let meta = vec![
        ("command".to_string(), "defend prune".to_string()),
        ("budget".to_string(), args.budget.to_string()),
        ("pruned_neurons".to_string(), count.to_string()),
    ];
    let text = render_report(
        &meta,
        &["stage", "functionality", "asr"],
        &[
            vec!["before".into(), format!("{before_func:.6}"), format!("{before_asr:.6}")],
            vec!["after".into(), format!("{after_func:.6}"), format!("{after_asr:.6}")],
        ],
    );
    write_text(&args.pair.out, &text)?;
    Ok(text)
}

fn defend_finetune(args: &FinetuneArgs) -> Result<String, CliError> {
    let model = load_model(&args.pair.checkpoint)?;
    let clean = load_pair(&args.pair.clean_images, &args.pair.clean_labels)?;
    let poisoned = load_pair(&args.pair.poisoned_images, &args.pair.poisoned_labels)?;
    let heldout = load_pair(&args.heldout_images, &args.heldout_labels)?;

    let mut rows = Vec::new();
    let (f0, _) = nn::evaluate(&model, &clean)?;
    let (_, p0) = nn::evaluate(&model, &poisoned)?;
    rows.push(vec![
        "0".to_string(),
        format!("{f0:.6}"),
        format!("{:.6}", metrics::attack_success_rate(&p0, args.pair.target)?),
    ]);
    for &fraction in &args.fractions {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(CliError::Usage(format!("fraction {fraction} outside [0, 1]")));
        }
        let k = ((heldout.len() as f64) * fraction).round() as usize;
        let subset = heldout.subset(&(0..k).collect::<Vec<_>>());
        if subset.is_empty() {
            continue;
        }
        let cfg = TrainConfig {
            normalization: model.norm.clone(),
            ..train_config(&args.hyper, &subset, false)?
        };
        let (tuned, _) = nn::fine_tune(&model, &subset, &cfg)?;
        let (func, _) = nn::evaluate(&tuned, &clean)?;
        let (_, preds) = nn::evaluate(&tuned, &poisoned)?;
        let asr = metrics::attack_success_rate(&preds, args.pair.target)?;
        rows.push(vec![fraction.to_string(), format!("{func:.6}"), format!("{asr:.6}")]);
    }
    let meta = vec![
        ("command".to_string(), "defend finetune".to_string()),
        ("seed".to_string(), args.hyper.seed.to_string()),
        ("epochs".to_string(), args.hyper.epochs.to_string()),
    ];
    let text = render_report(&meta, &["fraction", "functionality", "asr"], &rows);
    write_text(&args.pair.out, &text)?;
    Ok(text)
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Runs one parsed command and returns its stdout text.
pub fn run(command: &Command) -> Result<String, CliError> {
    match command {
        Command::GenTrigger(a) => cmd_gen_trigger(a),
        Command::Poison(a) => cmd_poison(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Defend(d) => match d {
            DefendCommand::Strip(a) => defend_strip(a),
            DefendCommand::Ssd(a) => defend_ssd(a),
            DefendCommand::Ac(a) => defend_ac(a),
            DefendCommand::Smooth(a) => defend_smooth(a),
            DefendCommand::Transform(a) => defend_transform(a),
            DefendCommand::Prune(a) => defend_prune(a),
            DefendCommand::Finetune(a) => defend_finetune(a),
        },
    }
}

/// Full process entry: parse argv, run, print, map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
