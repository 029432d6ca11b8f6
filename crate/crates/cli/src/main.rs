mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use treechoice::baselines::train_baseline;
use treechoice::dataio::{
    align_users, generate_synthetic, load_adoptions, load_model, save_model, write_adoptions, AdoptionDataset,
    DatasetStats, FlatKind, SavedModel, SynthSpec,
};
use treechoice::evaluation::{evaluate, split, Scorer};
use treechoice::gradcheck::{run_gradcheck, GradcheckOptions};
use treechoice::hsoftmax::HsStrategy;
use treechoice::taxonomy::{read_taxonomy, write_taxonomy, CategoryTree};
use treechoice::training::AnnealUnit;
use treechoice::{train, Error};

use crate::config::{set, FileConfig};

const FORMATS: &str = "\
FILE FORMATS
  Taxonomy (tab-separated, one node per line, parents before children):
      key<TAB>parent_key<TAB>kind<TAB>name
    `parent_key` is `-` for the single root; `kind` is `internal` or `app`.
    Apps are leaves; an internal node holds either categories or apps, never both.

  Adoptions (tab-separated, one record per line):
      user<TAB>app_key[<TAB>rating]
    Records rated below --rating-threshold are dropped, repeats collapse, and
    users left with fewer than --min-adoptions apps are removed.

  Lines starting with `#` and blank lines are ignored in both files.

  Config (--config, TOML): optional sections [train], [baseline], [split],
  [eval] and [load] whose keys mirror the flags. Flags take precedence.

  Model files are a versioned binary format with a SHA-256 trailer.";

#[derive(Parser)]
#[command(name = "treechoice", version, about = "Taxonomy-aware app recommender", after_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write it to a model file.
    Train(TrainArgs),
    /// Split adoptions per user and report top-N ranking metrics.
    Evaluate(EvaluateArgs),
    /// Print a user's top-ranked apps.
    Recommend(RecommendArgs),
    /// Generate a taxonomy, adoptions and the planted model behind them.
    Synth(SynthArgs),
    /// Check a taxonomy and adoption file and print dataset statistics.
    Validate(ValidateArgs),
    /// Compare every analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Sucm,
    Llfm,
    PmfNeg,
    Bpr,
    Ccf,
}

impl ModelKind {
    fn flat(self) -> Option<FlatKind> {
        match self {
            ModelKind::Sucm => None,
            ModelKind::Llfm => Some(FlatKind::Llfm),
            ModelKind::PmfNeg => Some(FlatKind::PmfNeg),
            ModelKind::Bpr => Some(FlatKind::Bpr),
            ModelKind::Ccf => Some(FlatKind::Ccf),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HsArg {
    Balanced,
    Huffman,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnealArg {
    Epoch,
    Instance,
}

#[derive(Args)]
struct DataArgs {
    /// Adoption records.
    #[arg(long)]
    adoptions: PathBuf,
    /// Minimum rating that counts as an adoption.
    #[arg(long)]
    rating_threshold: Option<f64>,
    /// Users with fewer adoptions are dropped.
    #[arg(long)]
    min_adoptions: Option<usize>,
    /// TOML file with defaults for any of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Seed of the per-user train/test split.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Share of each user's adoptions used for training.
    #[arg(long)]
    train_frac: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "sucm")]
    model: ModelKind,
    /// Latent dimension K.
    #[arg(long)]
    dim: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Annealing constant: the rate is lr·nu/(nu + t − 1).
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Standard deviation of the tree prior.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    hs: Option<HsArg>,
    /// What the annealing counter t counts.
    #[arg(long, value_enum)]
    anneal: Option<AnnealArg>,
    #[arg(long)]
    init_std: Option<f64>,
    /// Weight of the tree prior in the objective.
    #[arg(long)]
    prior_weight: Option<f64>,
    #[arg(long)]
    l2_user: Option<f64>,
    #[arg(long)]
    l2_hs: Option<f64>,
    /// Baselines: negatives sampled per positive (PMF-Neg and CCF).
    #[arg(long)]
    neg_per_pos: Option<usize>,
    /// PMF-Neg: draw negatives once instead of every epoch.
    #[arg(long)]
    freeze_negatives: bool,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    lambda_b: Option<f64>,
    #[command(flatten)]
    split: SplitArgs,
    /// Train on every adoption instead of the training side of the split.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model_file: PathBuf,
    /// Must match the taxonomy stored in the model file when given.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Comma-separated list of N.
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
    /// β of the F-measure.
    #[arg(long)]
    beta: Option<f64>,
    /// Write the tab-separated report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Leave out apps the user adopted in the training data.
    #[arg(long)]
    exclude_train: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    /// Children per category at each level, e.g. `5,4`.
    #[arg(long, value_delimiter = ',')]
    fanouts: Option<Vec<usize>>,
    #[arg(long)]
    apps_per_subcategory: Option<usize>,
    #[arg(long)]
    adoptions_per_user: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Standard deviation of the planted parameters.
    #[arg(long)]
    scale: Option<f64>,
    /// Writes PREFIX.taxonomy.tsv, PREFIX.adoptions.tsv and PREFIX.planted.model.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, required_unless_present = "counts")]
    taxonomy: Option<PathBuf>,
    #[arg(long, requires = "taxonomy")]
    adoptions: Option<PathBuf>,
    #[arg(long)]
    rating_threshold: Option<f64>,
    #[arg(long)]
    min_adoptions: Option<usize>,
    /// Print statistics for raw counts `USERS,APPS,OBSERVATIONS` instead of files.
    #[arg(long, value_delimiter = ',', num_args = 1, conflicts_with_all = ["taxonomy", "adoptions"])]
    counts: Option<Vec<usize>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random draws per gradient family.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
}

/// A failure that is not a library error but still needs a stable code.
#[derive(Debug)]
struct Failure {
    code: &'static str,
    msg: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Recommend(a) => cmd_recommend(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if let Some(err) = e.downcast_ref::<Error>() {
                err.code()
            } else if let Some(f) = e.downcast_ref::<Failure>() {
                f.code
            } else if e.downcast_ref::<std::io::Error>().is_some() {
                "Io"
            } else {
                "Error"
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {code}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_data(args: &DataArgs, file: &FileConfig, tree: &CategoryTree) -> Result<AdoptionDataset> {
    let mut opts = file.load;
    set(&mut opts.rating_threshold, args.rating_threshold);
    set(&mut opts.min_adoptions, args.min_adoptions);
    Ok(load_adoptions(&args.adoptions, tree, opts)?)
}

fn split_spec(args: &SplitArgs, file: &FileConfig) -> treechoice::evaluation::SplitSpec {
    let mut spec = file.split;
    set(&mut spec.seed, args.split_seed);
    set(&mut spec.train_fraction, args.train_frac);
    spec
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.data.config.as_deref())?;
    let tree = read_taxonomy(&a.taxonomy)?;
    let data = load_data(&a.data, &file, &tree)?;
    let train_data = if a.full { data } else { split(&data, &split_spec(&a.split, &file))?.0 };

    let anneal = a.anneal.map(|x| match x {
        AnnealArg::Epoch => AnnealUnit::Epoch,
        AnnealArg::Instance => AnnealUnit::Instance,
    });
    let out = BufWriter::new(std::io::stdout().lock());
    let saved = match a.model.flat() {
        None => {
            let mut cfg = file.train.clone();
            set(&mut cfg.dim, a.dim);
            set(&mut cfg.lr, a.lr);
            set(&mut cfg.nu, a.nu);
            set(&mut cfg.max_iter, a.epochs);
            set(&mut cfg.sigma, a.sigma);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.init_std, a.init_std);
            set(&mut cfg.prior_weight, a.prior_weight);
            set(&mut cfg.l2_user, a.l2_user);
            set(&mut cfg.l2_hs, a.l2_hs);
            set(&mut cfg.anneal, anneal);
            set(
                &mut cfg.hs_strategy,
                a.hs.map(|h| match h {
                    HsArg::Balanced => HsStrategy::Balanced,
                    HsArg::Huffman => HsStrategy::Huffman,
                }),
            );
            let (model, report) = train(&train_data, &tree, &cfg)?;
            let mut out = out;
            writeln!(out, "epoch\tobjective")?;
            writeln!(out, "0\t{:.6}", report.initial_objective)?;
            for (e, obj) in report.objectives.iter().enumerate() {
                writeln!(out, "{}\t{obj:.6}", e + 1)?;
            }
            if report.converged {
                writeln!(out, "# converged after {} epochs", report.epochs())?;
            }
            out.flush()?;
            eprintln!("trained in {:.2}s", report.wall_time_secs);
            SavedModel::Structural { model, train: train_data, config: toml::to_string(&cfg)? }
        }
        Some(kind) => {
            let mut cfg = file.baseline.clone();
            set(&mut cfg.dim, a.dim);
            set(&mut cfg.lr, a.lr);
            set(&mut cfg.nu, a.nu);
            set(&mut cfg.max_iter, a.epochs);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.init_std, a.init_std);
            set(&mut cfg.anneal, anneal);
            set(&mut cfg.neg_per_pos, a.neg_per_pos);
            set(&mut cfg.lambda_u, a.lambda_u);
            set(&mut cfg.lambda_i, a.lambda_i);
            set(&mut cfg.lambda_b, a.lambda_b);
            cfg.freeze_negatives |= a.freeze_negatives;
            let (params, report) = train_baseline(kind, &train_data, &cfg)?;
            let mut out = out;
            writeln!(out, "epoch\tmean_loss")?;
            for (e, loss) in report.epoch_loss.iter().enumerate() {
                writeln!(out, "{}\t{loss:.6}", e + 1)?;
            }
            out.flush()?;
            SavedModel::Flat { kind, tree, params, train: train_data, config: toml::to_string(&cfg)? }
        }
    };
    save_model(&saved, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let file = FileConfig::load(a.data.config.as_deref())?;
    let saved = load_model(&a.model_file)?;
    if let Some(path) = &a.taxonomy {
        if read_taxonomy(path)?.entries() != saved.tree().entries() {
            return Err(Error::InvalidConfig(format!(
                "{} differs from the taxonomy stored in the model file",
                path.display()
            ))
            .into());
        }
    }
    let data = load_data(&a.data, &file, saved.tree())?;
    let data = align_users(&data, saved.train().users())?;
    let (train, test) = split(&data, &split_spec(&a.split, &file))?;

    let mut opts = file.eval.clone();
    set(&mut opts.cutoffs, a.cutoffs);
    set(&mut opts.beta, a.beta);
    let report = evaluate(&saved, saved.name(), &train, &test, &opts)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(path) = &a.out {
        fs::write(path, &tsv).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.json {
        fs::write(path, report.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_recommend(a: RecommendArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::InvalidConfig("--n must be at least 1".into()).into());
    }
    let saved = load_model(&a.model_file)?;
    let u = saved.train().users().get(&a.user)?;
    let exclude = if a.exclude_train { saved.train().adopted(u) } else { &[] };
    let ranked = saved.rank(u, exclude)?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    for (app, score) in ranked.into_iter().take(a.n) {
        writeln!(out, "{}\t{score:.6}", saved.tree().app_key(app))?;
    }
    out.flush()?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    set(&mut spec.num_users, a.users);
    set(&mut spec.fanouts, a.fanouts);
    set(&mut spec.apps_per_subcategory, a.apps_per_subcategory);
    set(&mut spec.adoptions_per_user, a.adoptions_per_user);
    set(&mut spec.dim, a.dim);
    set(&mut spec.seed, a.seed);
    set(&mut spec.scale, a.scale);
    let synth = generate_synthetic(&spec)?;

    if let Some(dir) = a.out_prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tax_path = with_suffix(&a.out_prefix, ".taxonomy.tsv");
    let mut w = BufWriter::new(File::create(&tax_path).with_context(|| format!("creating {}", tax_path.display()))?);
    write_taxonomy(&synth.tree, &mut w)?;
    w.flush()?;

    let adopt_path = with_suffix(&a.out_prefix, ".adoptions.tsv");
    let mut w =
        BufWriter::new(File::create(&adopt_path).with_context(|| format!("creating {}", adopt_path.display()))?);
    write_adoptions(&synth.dataset, &synth.tree, &mut w)?;
    w.flush()?;

    let model_path = with_suffix(&a.out_prefix, ".planted.model");
    let stats = synth.dataset.stats();
    save_model(
        &SavedModel::Structural { model: synth.planted, train: synth.dataset, config: toml::to_string(&spec)? },
        &model_path,
    )?;
    println!("{stats}");
    println!("wrote {}", tax_path.display());
    println!("wrote {}", adopt_path.display());
    println!("wrote {}", model_path.display());
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    if let Some(counts) = a.counts {
        let [users, apps, obs] = counts[..] else {
            return Err(Error::InvalidConfig("--counts takes USERS,APPS,OBSERVATIONS".into()).into());
        };
        println!("{}", DatasetStats::from_counts(users, apps, obs));
        return Ok(());
    }
    let tree = read_taxonomy(a.taxonomy.as_ref().expect("required by clap"))?;
    let inactive = tree.internal_nodes().iter().filter(|&&z| !tree.is_active(z)).count();
    println!(
        "taxonomy: {} nodes, {} categories ({} without apps), {} subcategories, {} apps, depth {}",
        tree.num_nodes(),
        tree.num_internal(),
        inactive,
        tree.subcategories().len(),
        tree.num_apps(),
        tree.depth()
    );
    if let Some(path) = &a.adoptions {
        let args = DataArgs {
            adoptions: path.clone(),
            rating_threshold: a.rating_threshold,
            min_adoptions: a.min_adoptions,
            config: None,
        };
        let data = load_data(&args, &FileConfig::default(), &tree)?;
        println!("{}", data.stats());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut opts = GradcheckOptions::default();
    set(&mut opts.seed, a.seed);
    set(&mut opts.probes, a.probes);
    set(&mut opts.tolerance, a.tolerance);
    if opts.probes == 0 {
        return Err(Error::InvalidConfig("--probes must be at least 1".into()).into());
    }
    let report = run_gradcheck(&opts)?;
    println!("family\tprobes\tchecks\tmax_rel_error");
    for f in &report.families {
        println!("{}\t{}\t{}\t{:.3e}", f.name, f.probes, f.checks, f.max_rel_error);
    }
    if !report.passed() {
        return Err(Failure {
            code: "GradcheckFailed",
            msg: format!("max relative error {:.3e} exceeds {:.0e}", report.max_rel_error(), report.tolerance),
        }
        .into());
    }
    println!("max relative error {:.3e} < {:.0e}", report.max_rel_error(), report.tolerance);
    Ok(())
}
