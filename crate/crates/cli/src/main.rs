use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pagescribe::data::{
    write_clean_corpus, write_flat_corpus, write_line_corpus, write_split_manifests, write_synthetic_corpus,
    CorpusSpec, GlyphSet, Layout, Manifest, ManifestEntry, NoiseParams, PageSpec, SampleKind, Split, SymbolTable,
};
use pagescribe::gradsuite::{run_suite, TOLERANCE};
use pagescribe::imageprep::{binarize_with, deslant, load_gray, AugmentParams, Polarity};
use pagescribe::metrics::DEFAULT_Z;
use pagescribe::model::{Backend, Model, ModelConfig, Profile};
use pagescribe::trainer::{
    bootstrap_from_checkpoint, decode, evaluate, format_sweep_table, l_sweep, prepare_image, prepare_split, Checkpoint,
    Control, PrepOptions, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(
    name = "pagescribe",
    version,
    about = "Segmentation-free handwritten page recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Transformer,
    Blstm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    #[value(name = "1d")]
    OneD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validate,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validate => Split::Validate,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Binarize (and optionally de-slant) every image of a manifest.
    Prep(PrepArgs),
    /// Generate a synthetic glyph-page corpus.
    Synth(SynthArgs),
    /// Train a line or page model.
    Train(TrainArgs),
    /// Report CER with its uncertainty on one split.
    Eval(EvalArgs),
    /// Transcribe one image.
    Decode(DecodeArgs),
    /// Train and evaluate one page model per oversample factor.
    Sweep(SweepArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Rebuild pages from their line boxes on an empty background.
    CleanPages(DeriveArgs),
    /// Concatenate each page's lines into one long line.
    #[command(name = "flatten-1d")]
    Flatten1d(DeriveArgs),
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    threshold: u8,
    #[arg(long, value_enum, default_value = "off")]
    deslant: Switch,
    /// Keep the input polarity instead of making ink the minority class.
    #[arg(long)]
    keep_polarity: bool,
    /// Also crop every boxed line of every page into `<out>/lines`.
    #[arg(long)]
    segment_lines: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pages: usize,
    #[arg(long, default_value_t = 4)]
    lines: usize,
    #[arg(long, default_value_t = 8)]
    chars: usize,
    #[arg(long, value_enum, default_value = "2d")]
    layout: LayoutArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Page numbers and margin scribbles.
    #[arg(long, value_enum, default_value = "off")]
    noise: Switch,
    #[arg(long, default_value_t = 20)]
    validate_pages: usize,
    #[arg(long, default_value_t = 20)]
    test_pages: usize,
    /// Directory of glyph bitmaps named after their character.
    #[arg(long)]
    glyphs: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "toy")]
    profile: ProfileArg,
    #[arg(long, value_enum, default_value = "transformer")]
    backend: BackendArg,
    /// Model config TOML; overrides --profile and --backend.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "off")]
    augment: Switch,
    #[arg(long, value_enum, default_value = "off")]
    deslant: Switch,
    /// Stop once validation CER (percent) falls below this.
    #[arg(long)]
    stop_at_cer: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_Z)]
    z: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "L", default_value_t = 1)]
    l: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Line-model checkpoint whose CNN initializes this page model.
    #[arg(long)]
    curriculum: Option<PathBuf>,
    /// Symbol table JSON; defaults to the curriculum checkpoint's table,
    /// else one built from every split of the manifest.
    #[arg(long)]
    symbols: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to every entry of the manifest.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Defaults to the checkpoint's oversample factor.
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long, value_enum, default_value = "off")]
    deslant: Switch,
    #[arg(long, default_value_t = DEFAULT_Z)]
    z: f64,
    /// Write reference/hypothesis pairs as JSON lines.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long = "L")]
    l: Option<usize>,
    /// Treat the image as a single text line.
    #[arg(long)]
    line: bool,
    #[arg(long, default_value_t = 128)]
    threshold: u8,
    #[arg(long, value_enum, default_value = "off")]
    deslant: Switch,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "L", value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    l: Vec<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Prep(a) => prep(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::CleanPages(a) => derive(a, write_clean_corpus),
        Command::Flatten1d(a) => derive(a, write_flat_corpus),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn prep(a: PrepArgs) -> Result<ExitCode> {
    let m = load_manifest(&a.manifest)?;
    let polarity = if a.keep_polarity {
        Polarity::Keep
    } else {
        Polarity::Auto
    };
    std::fs::create_dir_all(a.out.join("images"))?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for e in &m.entries {
        let result = (|| -> Result<ManifestEntry> {
            let gray = load_gray(&m.resolve(e))?;
            let mut img = binarize_with(&gray, a.threshold, polarity);
            if a.deslant.on() {
                if !e.boxes.is_empty() {
                    bail!("de-slanting would invalidate the line boxes of a page");
                }
                img = deslant(&img);
            }
            let name = e.image.file_name().context("image path has no file name")?;
            let rel = Path::new("images").join(Path::new(name).with_extension("png"));
            img.save(&a.out.join(&rel))?;
            Ok(ManifestEntry {
                image: rel,
                ..e.clone()
            })
        })();
        match result {
            Ok(entry) => entries.push(entry),
            Err(err) => failures.push(format!("{}: {err:#}", e.image.display())),
        }
    }
    let out = Manifest::new(&a.out, entries);
    write_split_manifests(&a.out, &out)?;
    if a.segment_lines {
        let lines = write_line_corpus(&out, &a.out.join("lines"))?;
        println!(
            "{} line images in {}",
            lines.entries.len(),
            a.out.join("lines").display()
        );
    }
    println!("{} of {} images prepared", out.entries.len(), m.entries.len());
    report_failures(&failures)
}

fn report_failures(failures: &[String]) -> Result<ExitCode> {
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in failures {
        eprintln!("failed: {f}");
    }
    Ok(ExitCode::FAILURE)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let glyphs = match &a.glyphs {
        Some(dir) => GlyphSet::from_dir(dir)?,
        None => GlyphSet::digits(),
    };
    if a.validate_pages + a.test_pages >= a.pages {
        bail!("--validate-pages plus --test-pages must leave training pages");
    }
    let layout = match a.layout {
        LayoutArg::OneD => Layout::OneD,
        LayoutArg::TwoD => Layout::TwoD,
    };
    let spec = CorpusSpec {
        pages: a.pages,
        page: PageSpec {
            noise: if a.noise.on() {
                NoiseParams::standard()
            } else {
                NoiseParams::none()
            },
            ..PageSpec::new(a.lines, a.chars, layout)
        },
        seed: a.seed,
        validate_pages: a.validate_pages,
        test_pages: a.test_pages,
    };
    let m = write_synthetic_corpus(&a.out, &spec, &glyphs)?;
    SymbolTable::build(&m.transcripts())?.save(&a.out.join("symbols.json"))?;
    println!("{} pages written to {}", m.entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn model_config(m: &ModelArgs, n_symbols: usize, l: usize) -> Result<ModelConfig> {
    let cfg = match &m.config {
        Some(p) => {
            let mut c = ModelConfig::load(p)?;
            c.n_symbols = n_symbols;
            c
        }
        None => {
            let profile = match m.profile {
                ProfileArg::Toy => Profile::Toy,
                ProfileArg::Paper => Profile::Paper,
            };
            let backend = match m.backend {
                BackendArg::Transformer => Backend::Transformer,
                BackendArg::Blstm => Backend::Blstm,
            };
            ModelConfig::profile(profile, backend, n_symbols, l)
        }
    };
    let cfg = cfg.with_oversample(l);
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(o: &OptimArgs, l: usize) -> TrainConfig {
    TrainConfig {
        lr: o.lr,
        batch_size: o.batch,
        epochs: o.epochs,
        seed: o.seed,
        augment: o.augment.on().then(AugmentParams::standard),
        prep: PrepOptions {
            l,
            deslant: o.deslant.on(),
        },
        stop_at_cer: o.stop_at_cer,
        z: o.z,
        ..TrainConfig::default()
    }
}

/// Symbol table over every split; characters missing from the training
/// split are reported.
fn corpus_symbols(m: &Manifest) -> Result<SymbolTable> {
    let symbols = SymbolTable::build(&m.transcripts())?;
    let train: Vec<&str> = m.split(Split::Train).iter().map(|e| e.transcript.as_str()).collect();
    if let Ok(train_table) = SymbolTable::build(&train) {
        let gaps = train_table.coverage_gaps(&m.transcripts());
        if !gaps.is_empty() {
            eprintln!("warning: characters never seen in training: {gaps:?}");
        }
    }
    Ok(symbols)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    if a.l == 0 {
        bail!("--L must be positive");
    }
    let m = load_manifest(&a.manifest)?;
    if let Some(c) = &a.curriculum {
        if !c.exists() {
            bail!("curriculum checkpoint {} not found", c.display());
        }
    }
    let line = a.curriculum.as_deref().map(Checkpoint::load).transpose()?;
    let symbols = match (&a.symbols, &line) {
        (Some(p), _) => SymbolTable::load(p)?,
        (None, Some(c)) => c.symbols.clone(),
        (None, None) => corpus_symbols(&m)?,
    };
    let gaps = symbols.coverage_gaps(&m.transcripts());
    if !gaps.is_empty() {
        bail!("manifest uses characters outside the symbol table: {gaps:?}");
    }
    let cfg = model_config(&a.model, symbols.n_symbols(), a.l)?;
    let mut tc = train_config(&a.optim, a.l);
    std::fs::create_dir_all(&a.out)?;
    tc.metrics_log = Some(a.out.join("metrics.jsonl"));
    tc.curriculum = a.curriculum.clone();

    let model = match &line {
        Some(line) => {
            let (model, report) = bootstrap_from_checkpoint(line, &cfg, &symbols, a.optim.seed)?;
            eprintln!(
                "bootstrapped: {} tensors copied, {} reinitialized",
                report.copied.len(),
                report.reinitialized.len()
            );
            model
        }
        None => Model::new(cfg.clone(), a.optim.seed)?,
    };
    cfg.save(&a.out.join("config.toml"))?;
    symbols.save(&a.out.join("symbols.json"))?;
    let train = prepare_split(&m, Split::Train, &symbols, &tc.prep)?;
    let validate = prepare_split(&m, Split::Validate, &symbols, &tc.prep)?;
    eprintln!(
        "{} parameters, {} training and {} validation samples",
        model.param_count(),
        train.len(),
        validate.len()
    );
    let last = a.out.join("last");
    let mut trainer = Trainer::new(model, symbols, tc)?;
    let mut save_error = None;
    let result = trainer.fit(&train, &validate, &mut |m, t| {
        eprintln!("{}", serde_json::to_string(m).unwrap_or_default());
        match t.checkpoint().save(&last) {
            Ok(()) => Control::Continue,
            Err(e) => {
                save_error = Some(e);
                Control::Stop
            }
        }
    });
    if let Some(e) = save_error {
        return Err(e.into());
    }
    // also covers epochs = 0 and restores the last good state after divergence
    trainer.checkpoint().save(&last)?;
    let report = result?;
    for r in &report.rejected {
        eprintln!("rejected {}: {}", r.name, r.reason);
    }
    if let Some(e) = report.reached_target_at {
        println!("target CER reached at epoch {e}");
    }
    println!("checkpoint written to {}", last.display());
    Ok(ExitCode::SUCCESS)
}

fn load_checked(ckpt: &Path, m: &Manifest) -> Result<Checkpoint> {
    let c = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let gaps = c.symbols.coverage_gaps(&m.transcripts());
    if !gaps.is_empty() {
        bail!("manifest uses characters the checkpoint's symbol table lacks: {gaps:?}");
    }
    Ok(c)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let m = load_manifest(&a.manifest)?;
    let c = load_checked(&a.ckpt, &m)?;
    let opts = PrepOptions {
        l: a.l.unwrap_or(c.config.oversample_l),
        deslant: a.deslant.on(),
    };
    let entries: Vec<&ManifestEntry> = match a.split {
        Some(s) => m.split(s.into()),
        None => m.entries.iter().collect(),
    };
    let subset = Manifest::new(m.root.clone(), entries.into_iter().cloned().collect());
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Validate, Split::Test] {
        samples.extend(prepare_split(&subset, split, &c.symbols, &opts)?);
    }
    if samples.is_empty() {
        bail!("no entries to evaluate");
    }
    let model = c.model()?;
    let r = evaluate(&model, &c.symbols, &samples, a.z)?;
    if let Some(p) = &a.dump {
        let mut text = String::new();
        for s in &r.samples {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        std::fs::write(p, text)?;
    }
    if r.unreadable > 0 {
        eprintln!("{} inputs too small for the CNN stack decoded as empty", r.unreadable);
    }
    println!("{}", r.cer);
    Ok(ExitCode::SUCCESS)
}

fn decode_cmd(a: DecodeArgs) -> Result<ExitCode> {
    let c = Checkpoint::load(&a.ckpt)?;
    let img = binarize_with(&load_gray(&a.image)?, a.threshold, Polarity::Auto);
    let opts = PrepOptions {
        l: a.l.unwrap_or(c.config.oversample_l),
        deslant: a.deslant.on(),
    };
    let kind = if a.line { SampleKind::Line } else { SampleKind::Page };
    let input = prepare_image(&img, kind, &opts)?;
    println!("{}", decode(&c.model()?, &c.symbols, &input)?);
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    if a.l.contains(&0) {
        bail!("--L values must be positive");
    }
    let m = load_manifest(&a.manifest)?;
    let symbols = corpus_symbols(&m)?;
    let base = model_config(&a.model, symbols.n_symbols(), 1)?;
    let tc = train_config(&a.optim, 1);
    std::fs::create_dir_all(&a.out)?;
    let rows = l_sweep(&m, &symbols, &base, &tc, &a.l, Split::Test, &mut |l, e| {
        eprintln!("L={l} {}", serde_json::to_string(e).unwrap_or_default());
        Control::Continue
    })?;
    let table = format_sweep_table(&rows);
    std::fs::write(a.out.join("sweep.tsv"), &table)?;
    std::fs::write(a.out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.cases == 0 {
        bail!("--cases must be positive");
    }
    let results = run_suite(a.seed, a.cases)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{:<28} {:>3} cases  max rel err {:.2e}  {status}",
            r.op, r.cases, r.worst
        );
    }
    println!("tolerance {TOLERANCE:e}");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn derive(a: DeriveArgs, f: fn(&Manifest, &Path) -> pagescribe::Result<Manifest>) -> Result<ExitCode> {
    let m = load_manifest(&a.manifest)?;
    let out = f(&m, &a.out)?;
    println!("{} entries written to {}", out.entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
