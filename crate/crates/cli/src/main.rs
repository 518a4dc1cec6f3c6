use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capstext::data::{nearest_words, read_tsv, tokenize, Corpus, Dataset, RewriteTable, Split};
use capstext::experiments::{
    evaluate_accuracy, noise_rows_to_tsv, prepare, run_ablation, run_order_perturbation, run_reconstruction_noise,
    run_training, Perturbation, ABLATION_SEEDS,
};
use capstext::gradcheck::layer_suite;
use capstext::kv::KvMap;
use capstext::model::{CapsNet, Frontend};
use capstext::{Checkpoint, Error, Precision, Real, Result, TrainConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "capstext", version, about = "Capsule networks for text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes `model.ckpt` and `run.csv` into `--out`.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Front-end ablation over both routing modes and several seeds.
    Ablation(AblationArgs),
    /// Compare a static and a dynamic model on reordered sentences.
    PerturbOrder(PerturbArgs),
    /// Nearest words to a query in a checkpoint's embedding space.
    Neighbors(NeighborArgs),
    /// Decode a sentence after adding noise to single capsule dimensions.
    Reconstruct(ReconstructArgs),
    /// Finite-difference check of every layer in 64-bit mode.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (overrides the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Word-vector text file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Initialise word vectors from `--embeddings`.
    #[arg(long)]
    pretrained: bool,
    /// `static` or `dynamic`.
    #[arg(long)]
    routing: Option<String>,
    #[arg(long)]
    route_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    frontend: Option<String>,
    /// Train with the reconstruction decoder.
    #[arg(long)]
    reconstruction: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated front-end variants; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    frontends: Vec<String>,
    /// Number of seeds, counted from 0.
    #[arg(long, default_value_t = ABLATION_SEEDS.len() as u64)]
    seeds: u64,
    /// TSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long = "static")]
    static_checkpoint: PathBuf,
    #[arg(long = "dynamic")]
    dynamic_checkpoint: PathBuf,
    /// Labelled `label<TAB>text` sentences.
    #[arg(long)]
    input: PathBuf,
    /// `original<TAB>variant` rewrite table.
    #[arg(long, conflicts_with = "shuffle_seed")]
    rewrites: Option<PathBuf>,
    /// Shuffle every sentence uniformly with this base seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct NeighborArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    word: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sentence: String,
    /// 1-based capsule dimensions; every dimension when omitted.
    #[arg(long, value_delimiter = ',')]
    dim: Vec<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [-0.3, -0.2, 0.2, 0.3])]
    noise: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::PerturbOrder(a) => cmd_perturb(a),
        Command::Neighbors(a) => cmd_neighbors(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn build_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut kv = KvMap::new();
    if let Some(r) = &c.routing {
        kv.set("routing", r);
    }
    if let Some(n) = c.route_iters {
        if c.routing.is_none() && matches!(cfg.routing, capstext::model::Routing::Static) {
            return Err(Error::Config("--route-iters needs dynamic routing".into()));
        }
        kv.set("route_iters", n);
    }
    if let Some(s) = c.seed {
        kv.set("seed", s);
    }
    if let Some(e) = c.epochs {
        kv.set("epochs", e);
    }
    if let Some(f) = &c.frontend {
        kv.set("frontend", f);
    }
    if c.reconstruction {
        kv.set("reconstruction", true);
    }
    if c.pretrained {
        kv.set("pretrained", true);
    }
    for pair in &c.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {pair}` is not KEY=VALUE")))?;
        if k.trim() == "preset" {
            return Err(Error::Config("the preset can only be chosen in the config file".into()));
        }
        kv.set(k.trim(), v.trim());
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(e) = &c.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    cfg.apply(&kv)?;
    Ok(cfg)
}

fn dataset_path(cfg: &TrainConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set `dataset` in the config".into()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(a: TrainArgs) -> std::result::Result<(), Failure> {
    let cfg = build_config(&a.common)?;
    let corpus = Corpus::load(dataset_path(&cfg)?)?;
    let data = prepare(&cfg, &corpus)?;
    let (record, ckpt) = match a.precision {
        Precision::F32 => {
            let out = run_training::<f32>(&cfg, &data)?;
            (out.record, Checkpoint::from_model(&out.model, &data.vocab))
        }
        Precision::F64 => {
            let out = run_training::<f64>(&cfg, &data)?;
            (out.record, Checkpoint::from_model(&out.model, &data.vocab))
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    ckpt.save(&a.out.join("model.ckpt"))?;
    write_file(&a.out.join("run.csv"), &record.to_csv())?;
    println!(
        "best_epoch={} val_acc={:.4} test_acc={}",
        record.best_epoch,
        record.best_val_acc,
        record.test_acc.map_or("none".into(), |t| format!("{t:.4}"))
    );
    Ok(())
}

fn load_model<T: Real>(ckpt: &Checkpoint) -> Result<CapsNet<T>> {
    ckpt.model::<T>()
}

fn eval_with<T: Real>(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    evaluate_accuracy(&load_model::<T>(ckpt)?, data)
}

fn cmd_eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = build_config(&Common {
        config: a.config,
        dataset: a.dataset,
        ..Common::default()
    })?;
    let corpus = Corpus::load(dataset_path(&cfg)?)?;
    let mc = &ckpt.config;
    let data = Dataset::encode(corpus.split(a.split), &ckpt.vocab, mc.max_len, mc.num_classes, a.split)
        .map_err(|e| Error::Config(format!("checkpoint does not fit the dataset: {e}")))?;
    let acc = match a.precision {
        Precision::F32 => eval_with::<f32>(&ckpt, &data)?,
        Precision::F64 => eval_with::<f64>(&ckpt, &data)?,
    };
    println!("{acc:.4}");
    Ok(())
}

fn cmd_ablation(a: AblationArgs) -> std::result::Result<(), Failure> {
    let cfg = build_config(&a.common)?;
    let frontends = if a.frontends.is_empty() {
        Frontend::ALL.to_vec()
    } else {
        a.frontends
            .iter()
            .map(|f| f.parse())
            .collect::<Result<Vec<Frontend>>>()?
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let corpus = Corpus::load(dataset_path(&cfg)?)?;
    let data = prepare(&cfg, &corpus)?;
    let table = run_ablation(&cfg, &data, &frontends, &seeds)?;
    let tsv = table.to_tsv();
    match &a.out {
        Some(p) => write_file(p, &tsv)?,
        None => print!("{tsv}"),
    }
    eprintln!("accuracies measured on the {} split", table.measured_on);
    Ok(())
}

fn cmd_perturb(a: PerturbArgs) -> std::result::Result<(), Failure> {
    let s = Checkpoint::load(&a.static_checkpoint)?;
    let d = Checkpoint::load(&a.dynamic_checkpoint)?;
    if s.vocab.tokens() != d.vocab.tokens() {
        return Err(Error::Config("the two checkpoints use different vocabularies".into()).into());
    }
    let examples = read_tsv(&a.input)?;
    let table = a.rewrites.as_deref().map(RewriteTable::load).transpose()?;
    let perturbation = match (&table, a.shuffle_seed) {
        (Some(t), _) => Perturbation::Rewrite(t),
        (None, Some(seed)) => Perturbation::Shuffle { seed },
        (None, None) => Perturbation::Identity,
    };
    let report = match a.precision {
        Precision::F32 => run_order_perturbation(
            &load_model::<f32>(&s)?,
            &load_model::<f32>(&d)?,
            &s.vocab,
            &examples,
            perturbation,
        )?,
        Precision::F64 => run_order_perturbation(
            &load_model::<f64>(&s)?,
            &load_model::<f64>(&d)?,
            &s.vocab,
            &examples,
            perturbation,
        )?,
    };
    if let Some(p) = &a.out {
        write_file(p, &report.to_tsv())?;
    }
    println!("static accuracy: {:.4}", report.static_accuracy);
    println!("dynamic accuracy: {:.4}", report.dynamic_accuracy);
    let disagreements: Vec<_> = report.disagreements().collect();
    println!("disagreements: {} of {}", disagreements.len(), report.rows.len());
    for r in disagreements {
        println!(
            "  [{}] static {}->{} dynamic {}->{}: {}",
            r.actual,
            r.static_original,
            r.static_perturbed,
            r.dynamic_original,
            r.dynamic_perturbed,
            r.perturbed.join(" ")
        );
    }
    Ok(())
}

fn cmd_neighbors(a: NeighborArgs) -> std::result::Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = load_model::<f32>(&ckpt)?;
    for (word, sim) in nearest_words(net.embeddings(), &ckpt.vocab, &a.word, a.k)? {
        println!("{word}\t{sim:.4}");
    }
    Ok(())
}

fn reconstruct_with<T: Real>(ckpt: &Checkpoint, a: &ReconstructArgs, dims: &[usize]) -> Result<String> {
    let net = load_model::<T>(ckpt)?;
    let rows = run_reconstruction_noise(&net, &ckpt.vocab, &tokenize(&a.sentence), dims, &a.noise)?;
    if let Some(p) = &a.out {
        write_file(p, &noise_rows_to_tsv(&rows))?;
    }
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "dim={} noise={} class={}: {}\n",
                r.dim + 1,
                r.noise,
                r.class,
                r.tokens.join(" ")
            )
        })
        .collect())
}

fn cmd_reconstruct(a: ReconstructArgs) -> std::result::Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let n = ckpt.config.class_dim;
    let dims: Vec<usize> = if a.dim.is_empty() {
        (0..n).collect()
    } else {
        a.dim
            .iter()
            .map(|&d| {
                if (1..=n).contains(&d) {
                    Ok(d - 1)
                } else {
                    Err(Error::Config(format!("--dim {d} outside 1..={n}")))
                }
            })
            .collect::<Result<_>>()?
    };
    let text = match a.precision {
        Precision::F32 => reconstruct_with::<f32>(&ckpt, &a, &dims)?,
        Precision::F64 => reconstruct_with::<f64>(&ckpt, &a, &dims)?,
    };
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()).into());
    }
    let mut worst: Vec<(&'static str, f64, u64)> = Vec::new();
    for seed in 0..a.seeds {
        for (name, report) in layer_suite(seed)? {
            match worst.iter_mut().find(|(n, _, _)| *n == name) {
                Some(w) if report.max_rel_error > w.1 => *w = (name, report.max_rel_error, seed),
                Some(_) => {}
                None => worst.push((name, report.max_rel_error, seed)),
            }
        }
    }
    let mut failed = 0;
    for (name, err, seed) in &worst {
        let ok = *err < GRADCHECK_TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{:<28}max_rel_error={err:.3e} (seed {seed}) {}",
            name,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} layer checks exceeded {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
