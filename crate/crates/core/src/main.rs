use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use siimil::abmil::{AttentionModel, CvConfig, TrainConfig};
use siimil::data::{read_embeddings, read_manifest, BagRecord, KeyMatrix, Manifest};
use siimil::eval::{evaluate, group_csv, grouped_recall, BootstrapConfig};
use siimil::heatmap::Heatmap;
use siimil::keylearn::{build_key_matrix, KeyLearnConfig};
use siimil::pipeline::{ablate, ablation_csv, load_bags, Pipeline};
use siimil::sii::{bag_saliency, sii_bag, SiiConfig};
use siimil::synth::{generate_dataset, write_dataset, InstanceCount, SynthConfig};
use siimil::{abmil, Error};

#[derive(Parser)]
#[command(
    name = "siimil",
    version,
    about = "Salient instance inference and attention MIL on instance embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with instance labels.
    Synth(SynthArgs),
    /// Learn the key matrix from the negative bags of a manifest.
    LearnKeys(LearnKeysArgs),
    /// Write per-instance saliency scores for every bag.
    Score(ScoreArgs),
    /// Write the salient instances of every bag as new bags.
    MakeBags(MakeBagsArgs),
    /// Cross-validate and train the attention model.
    Train(TrainArgs),
    /// Evaluate a trained model on a manifest.
    Eval(EvalArgs),
    /// Export the attention map of one bag.
    Heatmap(HeatmapArgs),
    /// Sweep key and inference settings.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    bags_per_class: usize,
    /// Instances per bag: a count such as 1000, or an inclusive range 800-1200.
    #[arg(long, default_value = "1000")]
    instances: String,
    #[arg(long, value_delimiter = ',', default_value = "0.003,0.0075,0.05,0.2")]
    positive_rates: Vec<f64>,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 8.0)]
    negative_offset: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Copy)]
struct KeyOpts {
    #[arg(long, default_value_t = siimil::keylearn::DEFAULT_T_PER_BAG)]
    t_per_bag: usize,
    #[arg(long, default_value_t = siimil::keylearn::DEFAULT_RANK_REL_TOL)]
    rank_tol: f64,
}

impl KeyOpts {
    fn config(&self) -> KeyLearnConfig {
        KeyLearnConfig {
            t_per_bag: self.t_per_bag,
            rank_rel_tol: self.rank_tol,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct SiiOpts {
    #[arg(long, default_value_t = siimil::sii::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = siimil::sii::DEFAULT_KEEP_RATIO)]
    keep_ratio: f64,
}

impl SiiOpts {
    fn config(&self) -> SiiConfig {
        SiiConfig {
            top_k: self.top_k,
            keep_ratio: self.keep_ratio,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct TrainOpts {
    #[arg(long, default_value_t = 2e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = abmil::model::DEFAULT_ATTENTION_DIM)]
    attention_dim: usize,
}

#[derive(Args, Clone, Copy)]
struct CvOpts {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cv_config(
    cv: &CvOpts,
    train: &TrainOpts,
    keys: KeyLearnConfig,
    sii: Option<SiiConfig>,
) -> CvConfig {
    CvConfig {
        folds: cv.folds,
        val_frac: cv.val_frac,
        seed: cv.seed,
        keys,
        sii,
        train: TrainConfig {
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            max_epochs: train.max_epochs,
            patience: train.patience,
            seed: cv.seed,
            attention_dim: train.attention_dim,
        },
    }
}

#[derive(Args)]
struct LearnKeysArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    keys: KeyOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, default_value_t = siimil::sii::DEFAULT_TOP_K)]
    top_k: usize,
    /// CSV `bag_id,instance,saliency`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeBagsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    #[command(flatten)]
    sii: SiiOpts,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cv: CvOpts,
    #[command(flatten)]
    keys: KeyOpts,
    #[command(flatten)]
    sii: SiiOpts,
    /// Train on whole bags without salient instance inference.
    #[arg(long)]
    no_sii: bool,
    #[command(flatten)]
    train: TrainOpts,
    /// Model file (SIIM).
    #[arg(long)]
    out: PathBuf,
    /// Key matrix of the selected fold; defaults to <out>.keys.siib.
    #[arg(long)]
    keys_out: Option<PathBuf>,
    /// Epoch log CSV; defaults to <out>.log.csv.
    #[arg(long)]
    log_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Apply salient instance inference with these keys before scoring.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[command(flatten)]
    sii: SiiOpts,
    #[arg(long, default_value_t = siimil::eval::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = siimil::eval::DEFAULT_BOOTSTRAP)]
    bootstrap: usize,
    #[arg(long, default_value_t = siimil::eval::DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV `metric,value,ci_lower,ci_upper`.
    #[arg(long)]
    out: PathBuf,
    /// Recall per TIR group; needs instance labels on positive bags.
    #[arg(long)]
    groups_out: Option<PathBuf>,
    /// Per-bag CSV `bag_id,label,score`.
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Bag file (SIIB) with coordinates.
    #[arg(long)]
    bag: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    keys: Option<PathBuf>,
    #[command(flatten)]
    sii: SiiOpts,
    /// CSV `row,col,attention_weight`.
    #[arg(long)]
    out_csv: PathBuf,
    /// 8-bit PGM image.
    #[arg(long)]
    out_pgm: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cv: CvOpts,
    #[arg(long, default_value_t = siimil::keylearn::DEFAULT_RANK_REL_TOL)]
    rank_tol: f64,
    #[arg(long, value_delimiter = ',')]
    grid_t: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    grid_k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    grid_r: Option<Vec<f64>>,
    #[command(flatten)]
    train: TrainOpts,
    /// CSV `t_per_bag,top_k,keep_ratio,mean_val_auc`.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Prints every resolved flag of the invoked subcommand as `key=value`.
fn echo_config(matches: &ArgMatches) {
    let Some((name, sub)) = matches.subcommand() else {
        return;
    };
    eprintln!("command={name}");
    let cmd = Cli::command();
    let Some(def) = cmd.find_subcommand(name) else {
        return;
    };
    for arg in def.get_arguments() {
        let id = arg.get_id().as_str();
        if id == "help" || id == "version" {
            continue;
        }
        let value = match sub.get_raw(id) {
            Some(values) => values
                .map(|v| v.to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(","),
            None => String::new(),
        };
        eprintln!("{}={value}", id.replace('_', "-"));
    }
}

fn parse_instances(s: &str) -> CliResult<InstanceCount> {
    let bad = || Failure::Usage(format!("--instances: expected N or LO-HI, got {s:?}"));
    match s.split_once('-') {
        Some((lo, hi)) => Ok(InstanceCount::Range(
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
        )),
        None => Ok(InstanceCount::Fixed(s.trim().parse().map_err(|_| bad())?)),
    }
}

fn run_synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        dim: a.dim,
        bags_per_class: a.bags_per_class,
        instances: parse_instances(&a.instances)?,
        positive_rates: a.positive_rates,
        separation: a.separation,
        negative_offset: a.negative_offset,
        seed: a.seed,
    };
    cfg.validate()?;
    let bags = generate_dataset(&cfg)?;
    let manifest = write_dataset(&bags, &a.out_dir)?;
    eprintln!("bags={}", manifest.records.len());
    Ok(())
}

fn learn_keys(manifest: &Manifest, cfg: &KeyLearnConfig) -> CliResult<KeyMatrix> {
    let negatives = manifest
        .negatives()
        .map(|r| read_embeddings(&r.embedding_path))
        .collect::<Result<Vec<_>, _>>()?;
    if negatives.is_empty() {
        return Err(Failure::Data("no negative bags in manifest".into()));
    }
    Ok(build_key_matrix(&negatives, cfg)?)
}

fn run_learn_keys(a: LearnKeysArgs) -> CliResult {
    let cfg = a.keys.config();
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let keys = learn_keys(&manifest, &cfg)?;
    write_file(&a.out, &keys.matrix().to_siib_bytes()?)?;
    eprintln!("tau={}", keys.count());
    Ok(())
}

fn run_score(a: ScoreArgs) -> CliResult {
    if a.top_k == 0 {
        return usage("--top-k must be at least 1");
    }
    let manifest = read_manifest(&a.manifest)?;
    let keys = KeyMatrix::read(&a.keys)?;
    let mut out = String::from("bag_id,instance,saliency\n");
    for r in &manifest.records {
        let bag = read_embeddings(&r.embedding_path)?;
        for (i, s) in bag_saliency(&bag, &keys, a.top_k)?.iter().enumerate() {
            out.push_str(&format!("{},{i},{s}\n", r.bag_id));
        }
    }
    write_file(&a.out, out.as_bytes())
}

fn run_make_bags(a: MakeBagsArgs) -> CliResult {
    let cfg = a.sii.config();
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let keys = KeyMatrix::read(&a.keys)?;
    let mut outputs = Vec::with_capacity(manifest.records.len());
    let mut fraction = 0.0;
    for r in &manifest.records {
        let bag = read_embeddings(&r.embedding_path)?;
        let salient = sii_bag(&bag, &keys, &cfg, &r.bag_id)?;
        fraction += salient.len() as f64 / bag.count() as f64;
        outputs.push((r, salient));
    }
    let mut records = Vec::with_capacity(outputs.len());
    for (r, salient) in &outputs {
        let rel = PathBuf::from("bags").join(format!("{}.siib", r.bag_id));
        let csv = PathBuf::from("bags").join(format!("{}.saliency.csv", r.bag_id));
        write_file(
            &a.out_dir.join(&rel),
            &salient.in_source_order().to_siib_bytes()?,
        )?;
        write_file(&a.out_dir.join(&csv), salient.saliency_csv().as_bytes())?;
        records.push(BagRecord {
            bag_id: r.bag_id.clone(),
            label: r.label,
            embedding_path: rel,
        });
    }
    let out_manifest = Manifest::new(records)?;
    write_file(
        &a.out_dir.join("manifest.csv"),
        out_manifest.to_csv().as_bytes(),
    )?;
    eprintln!(
        "mean_retained_fraction={}",
        fraction / manifest.records.len() as f64
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult {
    let sii = (!a.no_sii).then(|| a.sii.config());
    let cfg = cv_config(&a.cv, &a.train, a.keys.config(), sii);
    cfg.validate()?;
    let keys_out = a
        .keys_out
        .unwrap_or_else(|| with_suffix(&a.out, ".keys.siib"));
    let log_out = a.log_out.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    let manifest = read_manifest(&a.manifest)?;
    let bags = load_bags(&manifest)?;
    let cv = abmil::monte_carlo_cv(&bags, &cfg)?;
    let fold = cv.selected_fold();
    write_file(&a.out, &fold.training.model.to_siim_bytes())?;
    if let Some(keys) = &fold.keys {
        write_file(&keys_out, &keys.matrix().to_siib_bytes()?)?;
    }
    write_file(&log_out, cv.epoch_log_csv().as_bytes())?;
    eprintln!("selected_fold={}", fold.fold);
    eprintln!(
        "val_auc={}",
        fold.val_auc.map(|v| v.to_string()).unwrap_or_default()
    );
    eprintln!("best_epoch={}", fold.training.best_epoch);
    Ok(())
}

fn run_eval(a: EvalArgs) -> CliResult {
    let boot = BootstrapConfig {
        n: a.bootstrap,
        level: a.level,
        seed: a.seed,
    };
    boot.validate()?;
    let sii = a.sii.config();
    sii.validate()?;
    if !a.threshold.is_finite() {
        return usage("--threshold must be finite");
    }
    let manifest = read_manifest(&a.manifest)?;
    let bags = load_bags(&manifest)?;
    let pipeline = Pipeline {
        model: AttentionModel::load(&a.model)?,
        keys: a.keys.as_ref().map(KeyMatrix::read).transpose()?,
        sii: a.keys.is_some().then_some(sii),
    };
    let scores = pipeline.predict(&bags)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let report = evaluate(&scores, &labels, a.threshold, &boot)?;
    let groups = match &a.groups_out {
        Some(_) => {
            let inst: Vec<Option<&[u8]>> =
                bags.iter().map(|b| b.instances.instance_labels()).collect();
            Some(grouped_recall(&scores, &labels, &inst, a.threshold)?)
        }
        None => None,
    };
    write_file(&a.out, report.to_csv().as_bytes())?;
    if let (Some(path), Some(groups)) = (&a.groups_out, &groups) {
        write_file(path, group_csv(groups).as_bytes())?;
    }
    if let Some(path) = &a.scores_out {
        let mut out = String::from("bag_id,label,score\n");
        for (b, s) in bags.iter().zip(&scores) {
            out.push_str(&format!("{},{},{s}\n", b.id, b.label));
        }
        write_file(path, out.as_bytes())?;
    }
    eprintln!("auc={}", report.auc.value);
    Ok(())
}

fn run_heatmap(a: HeatmapArgs) -> CliResult {
    let sii = a.sii.config();
    sii.validate()?;
    let bag = read_embeddings(&a.bag)?;
    let model = AttentionModel::load(&a.model)?;
    let Some(coords) = bag.coords() else {
        return Err(Failure::Data(format!(
            "{} has no coordinates",
            a.bag.display()
        )));
    };
    let selected: Vec<usize> = match &a.keys {
        Some(path) => {
            let keys = KeyMatrix::read(path)?;
            let mut idx = sii_bag(&bag, &keys, &sii, "")?.selected_indices;
            idx.sort_unstable();
            idx
        }
        None => (0..bag.count()).collect(),
    };
    let instances = bag.select_columns(&selected)?;
    let forward = abmil::attention_forward(&instances, &model)?;
    let map = Heatmap::new(coords, &selected, &forward.attention)?;
    write_file(&a.out_csv, map.to_csv().as_bytes())?;
    write_file(&a.out_pgm, &map.to_pgm())
}

fn run_ablate(a: AblateArgs) -> CliResult {
    if a.grid_t.is_none() && a.grid_k.is_none() && a.grid_r.is_none() {
        return usage("ablate needs at least one of --grid-t, --grid-k, --grid-r");
    }
    let grid_t = a
        .grid_t
        .unwrap_or(vec![siimil::keylearn::DEFAULT_T_PER_BAG]);
    let grid_k = a.grid_k.unwrap_or(vec![siimil::sii::DEFAULT_TOP_K]);
    let grid_r = a.grid_r.unwrap_or(vec![siimil::sii::DEFAULT_KEEP_RATIO]);
    let keys = KeyLearnConfig {
        t_per_bag: siimil::keylearn::DEFAULT_T_PER_BAG,
        rank_rel_tol: a.rank_tol,
    };
    let base = cv_config(&a.cv, &a.train, keys, Some(SiiConfig::default()));
    base.validate()?;
    for &t in &grid_t {
        KeyLearnConfig {
            t_per_bag: t,
            ..keys
        }
        .validate()?;
    }
    for &k in &grid_k {
        for &r in &grid_r {
            SiiConfig {
                top_k: k,
                keep_ratio: r,
            }
            .validate()?;
        }
    }
    let manifest = read_manifest(&a.manifest)?;
    let bags = load_bags(&manifest)?;
    let rows = ablate(&bags, &grid_t, &grid_k, &grid_r, &base)?;
    write_file(&a.out, ablation_csv(&rows).as_bytes())?;
    if let Some(best) = rows.iter().reduce(|b, r| {
        if r.mean_val_auc > b.mean_val_auc {
            r
        } else {
            b
        }
    }) {
        eprintln!(
            "best=t_per_bag:{},top_k:{},keep_ratio:{},mean_val_auc:{}",
            best.t_per_bag, best.top_k, best.keep_ratio, best.mean_val_auc
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    echo_config(&matches);
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::LearnKeys(a) => run_learn_keys(a),
        Command::Score(a) => run_score(a),
        Command::MakeBags(a) => run_make_bags(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Heatmap(a) => run_heatmap(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
