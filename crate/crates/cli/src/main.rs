use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ocn_core::eval::{evaluate, EvalConfig, EvalError, DEFAULT_IOU_THRESHOLD};
use ocn_core::gradsuite::{run_suite, SuiteConfig};
use ocn_core::infer::{load_dump, mask_detections, write_dump, DEFAULT_TOP_K};
use ocn_core::model::{train_and_evaluate, Ablation, ModelConfig, TrainConfig};
use ocn_core::priors::{AnnotationSet, PriorTables, Vocabulary, DEFAULT_BETA, DEFAULT_RARE_THRESHOLD};
use ocn_core::setmatch::{LossBreakdown, LossConfig, LossWeights, VerbLoss};
use ocn_core::synth::{gen_dataset, SynthConfig};
use ocn_core::tensor::write_named;
use ocn_core::vsm::{write_word_embeddings, DEFAULT_TAU};

/// Verb prediction heads for HOI detection: priors, gradient checks,
/// synthetic training and evaluation.
#[derive(Parser)]
#[command(name = "ocn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build co-occurrence and object-verb priors from training annotations.
    ExtractPriors(ExtractArgs),
    /// Check every backward rule against central differences.
    Gradcheck(GradcheckArgs),
    /// Generate a seeded synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Train the head stack on synthetic data and evaluate it.
    TrainToy(TrainArgs),
    /// Score a prediction dump against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Annotation file, one triplet per line.
    #[arg(long)]
    annotations: PathBuf,
    /// Vocabulary file with `verb` and `object` lines.
    #[arg(long)]
    vocab: PathBuf,
    /// Laplacian smoothing strength for the object-verb table.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Interactions with fewer training triplets are rare.
    #[arg(long, default_value_t = DEFAULT_RARE_THRESHOLD)]
    rare_threshold: usize,
    /// Output directory.
    #[arg(long, short, default_value = "priors")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per case.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Feature dimension D.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Calibration heads H.
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Queries N_q.
    #[arg(long, default_value_t = 4)]
    queries: usize,
    /// Verbs N_p.
    #[arg(long, default_value_t = 6)]
    verbs: usize,
    /// Object classes.
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Word embedding dimension.
    #[arg(long, default_value_t = 5)]
    embed_dim: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Deliberately break the backward rule of this case (negative control).
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic dataset config, `key=value` per line.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set num_verbs=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn config(&self) -> Result<SynthConfig> {
        let mut text = match &self.synth_config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        for kv in &self.overrides {
            text.push('\n');
            text.push_str(kv);
        }
        if let Some(seed) = self.seed {
            text.push_str(&format!("\nseed={seed}"));
        }
        let cfg = SynthConfig::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    synth: SynthArgs,
    /// Output directory.
    #[arg(long, short, default_value = "synth")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerbLossKind {
    Focal,
    Bce,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    synth: SynthArgs,
    /// Initialization and batch-order seed.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Learning rate; drops 10x after 75% of the steps.
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Calibration heads H.
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Adjacency temperature.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Object-verb prior smoothing.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Loss weights: skl,box,giou,object,verb.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.5, 1.0, 1.0, 1.0])]
    lambda: Vec<f64>,
    #[arg(long, value_enum, default_value_t = VerbLossKind::Focal)]
    verb_loss: VerbLossKind,
    /// Drop the co-occurrence alignment loss.
    #[arg(long)]
    no_skl: bool,
    /// Drop the verb semantic branch.
    #[arg(long)]
    no_vsm: bool,
    /// Drop cross-modal calibration.
    #[arg(long)]
    no_interc: bool,
    /// Drop intra-modal enhancement.
    #[arg(long)]
    no_intraec: bool,
    /// Suppress object-verb pairs never seen in training.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    mask: Switch,
    /// Detections kept per image.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Output directory.
    #[arg(long, short, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction dump, one detection per line.
    #[arg(long)]
    dump: PathBuf,
    /// Ground-truth annotations.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Prior file from `extract-priors`; supplies rare flags, the mask and
    /// the training object-verb table.
    #[arg(long)]
    priors: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    mask: Switch,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn extract_priors(a: &ExtractArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let anns = AnnotationSet::load(&a.annotations, &vocab)?;
    let tables = PriorTables::build(&anns, &vocab, a.beta, a.rare_threshold)?;
    fs::create_dir_all(&a.out)?;
    tables.write(create(&a.out.join("priors.txt"))?)?;
    for (name, m) in [("c", &tables.c), ("c_hat", &tables.c_hat), ("s", &tables.s), ("s_hat", &tables.s_hat), ("mask", &tables.mask)] {
        write_text(&a.out.join(format!("{name}.txt")), &m.to_text())?;
    }
    tables.rare.write(&vocab, create(&a.out.join("rare_flags.txt"))?)?;
    println!("verbs={} objects={} triplets={} beta={} out={}", vocab.num_verbs(), vocab.num_objects(), anns.num_triplets(), a.beta, a.out.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let cfg = SuiteConfig {
        seed: a.seed,
        instances: a.instances,
        dim: a.dim,
        heads: a.heads,
        queries: a.queries,
        verbs: a.verbs,
        objects: a.objects,
        embed_dim: a.embed_dim,
        step: a.step,
        tolerance: a.tolerance,
        corrupt: a.corrupt.clone(),
    };
    let results = run_suite(&cfg)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<20} {} max_rel_error={:.3e} entries={} refined={}",
            r.name,
            if r.passed { "ok" } else { "FAIL" },
            r.report.max_rel_error,
            r.report.entries_checked,
            r.report.refined_entries
        );
        ok &= r.passed;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if ok {
        println!("all {} cases passed", results.len());
    } else {
        println!("failed: {}", failed.join(" "));
    }
    Ok(ok)
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let cfg = a.synth.config()?;
    let ds = gen_dataset(&cfg)?;
    let out = &a.out;
    fs::create_dir_all(out)?;
    write_text(&out.join("synth.cfg"), &cfg.to_text())?;
    write_text(&out.join("vocab.txt"), &ds.vocab.to_text())?;
    ds.train.annotations.write(&ds.vocab, create(&out.join("train_annotations.txt"))?)?;
    ds.test.annotations.write(&ds.vocab, create(&out.join("test_annotations.txt"))?)?;
    ds.train.write_features(create(&out.join("train_features.txt"))?)?;
    ds.test.write_features(create(&out.join("test_features.txt"))?)?;
    write_word_embeddings(&ds.embeddings, &ds.vocab, create(&out.join("embeddings.txt"))?)?;
    write_named(create(&out.join("planted.txt"))?, [("S", &ds.planted_s), ("C", &ds.planted_c)])?;
    println!(
        "train_images={} test_images={} train_triplets={} test_triplets={} out={}",
        ds.train.len(),
        ds.test.len(),
        ds.train.annotations.num_triplets(),
        ds.test.annotations.num_triplets(),
        out.display()
    );
    Ok(())
}

fn train_toy(a: &TrainArgs) -> Result<()> {
    let synth = a.synth.config()?;
    let ds = gen_dataset(&synth)?;
    let lambda: [f64; 5] = a.lambda.as_slice().try_into().context("--lambda takes five weights")?;
    let weights = LossWeights::from_array(lambda)?;
    let verb_loss = match a.verb_loss {
        VerbLossKind::Focal => VerbLoss::default(),
        VerbLossKind::Bce => VerbLoss::Bce,
    };
    let ablation = Ablation { skl: !a.no_skl, vsm: !a.no_vsm, interc: !a.no_interc, intraec: !a.no_intraec };
    let model_cfg = ModelConfig { heads: a.heads, tau: a.tau, ablation, ..ModelConfig::new(synth.num_verbs, synth.num_objects, synth.dim, synth.embed_dim) };
    let train_cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        loss: LossConfig { weights, verb_loss, ..LossConfig::default() },
        seed: a.train_seed,
        ..TrainConfig::default()
    };
    let eval_cfg = EvalConfig { k: a.k, ..EvalConfig::default() };

    fs::create_dir_all(&a.out)?;
    let mut log = create(&a.out.join("loss_log.txt"))?;
    writeln!(log, "{}", LossBreakdown::HEADER)?;
    let mut log_err = None;
    let run = train_and_evaluate(&ds, model_cfg, &train_cfg, a.beta, a.mask == Switch::On, &eval_cfg, |step, b| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", b.record(step)) {
                log_err = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let run = run?;

    write_text(&a.out.join("model.cfg"), &run.model.config.to_text())?;
    run.model.store.write_checkpoint(create(&a.out.join("checkpoint.txt"))?)?;
    run.priors.write(create(&a.out.join("priors.txt"))?)?;
    write_text(&a.out.join("vocab.txt"), &ds.vocab.to_text())?;
    write_text(&a.out.join("synth.cfg"), &synth.to_text())?;
    ds.test.annotations.write(&ds.vocab, create(&a.out.join("test_annotations.txt"))?)?;
    write_dump(&run.detections, &ds.vocab, create(&a.out.join("test_dump.txt"))?)?;
    let metrics = run.report.to_key_values();
    write_text(&a.out.join("metrics.txt"), &metrics)?;
    println!("final_loss={:.6}", run.final_loss.total);
    print!("{metrics}");
    Ok(())
}

fn evaluate_dump(a: &EvaluateArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let gts = AnnotationSet::load(&a.annotations, &vocab)?;
    let priors = PriorTables::load(&a.priors)?;
    if priors.num_verbs() != vocab.num_verbs() || priors.num_objects() != vocab.num_objects() {
        bail!("prior tables are {}x{} but the vocabulary has {} objects and {} verbs", priors.num_objects(), priors.num_verbs(), vocab.num_objects(), vocab.num_verbs());
    }
    let mut dets = load_dump(&a.dump, &vocab)?;
    if a.mask == Switch::On {
        dets = mask_detections(&dets, &priors.mask);
    }
    let cfg = EvalConfig { k: a.k, iou_thresh: a.iou };
    let report = match evaluate(&dets, &gts, &priors.rare, Some(&priors.s), &cfg) {
        Err(EvalError::EmptyGroundTruth) => bail!("ground truth in {} has no interactions", a.annotations.display()),
        r => r?,
    };
    print!("{}", report.to_table(&vocab));
    print!("{}", report.to_key_values());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::ExtractPriors(a) => extract_priors(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenSynth(a) => gen_synth(a).map(|_| true),
        Command::TrainToy(a) => train_toy(a).map(|_| true),
        Command::Evaluate(a) => evaluate_dump(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
