use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flex_core::experience::{ExperienceLibrary, Level, Zone};
use flex_core::gateway::{Gateway, GatewayError, Role};
use flex_core::inheritance;
use flex_core::synthetic::{self, RegressionConfig, Sharing};
use flex_core::task::TaskSuite;
use flex_core::templates::Templates;
use flex_core::trainer::{self, RunConfig, TrainError, TrainReport, Trainer};
use flex_core::updater::{self, NullSink, Updater};
use serde_json::json;

#[derive(Parser)]
#[command(name = "flex", version, about = "Train, evaluate and share experience libraries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop over a suite.
    Train(TrainArgs),
    /// Score a suite split against a fixed library.
    Eval(EvalArgs),
    /// Inspect, export, import or merge library files.
    #[command(subcommand)]
    Library(LibraryCommand),
    /// Write synthetic suites with matching scripted scenarios.
    #[command(subcommand)]
    Generate(GenerateCommand),
    /// Re-emit the metrics CSV from a saved run report.
    Metrics {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BackendArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bind actor, critic and updater to this scenario file.
    #[arg(long)]
    scripted: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from this library instead of an empty one.
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    test_each_epoch: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Library to evaluate with; empty when omitted.
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Per-sample results (JSON lines). Defaults to eval-<suite>.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Subcommand)]
enum LibraryCommand {
    /// Zone/level counts and most-used entries.
    Inspect {
        library: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Validate a library and write a clean copy for sharing.
    Export {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a library received from elsewhere and store it at --out.
    Import {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge INCOMING into BASE; writes --out and <out>.audit.
    Merge {
        base: PathBuf,
        incoming: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config whose updater backend decides merges; lexical otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SharingArg {
    Unique,
    Chained,
}

#[derive(Subcommand)]
enum GenerateCommand {
    /// Keyed-rule suite, producer and consumer scenarios, run configs.
    Keyed {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_enum, default_value = "chained")]
        sharing: SharingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman-scored ranking suite and scenario.
    Regression {
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reversed: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    /// Bad arguments or input files.
    Input(String),
    /// Model backend or environment trouble.
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Backend(_) => 2,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Library(c) => cmd_library(c),
        Command::Generate(c) => cmd_generate(c),
        Command::Metrics { report, out } => cmd_metrics(&report, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(m) | Failure::Backend(m)) = &f;
            eprintln!("flex: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn load_suite(path: &Path) -> Result<TaskSuite, Failure> {
    TaskSuite::load(path).map_err(input(format!("suite {}", path.display())))
}

fn load_library(path: &Path) -> Result<ExperienceLibrary, Failure> {
    inheritance::import(path).map_err(input(format!("library {}", path.display())))
}

/// Config, gateway and templates from the shared backend flags.
fn setup(args: &BackendArgs) -> Result<(RunConfig, Gateway, Templates), Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(input(format!("config {}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(s) = &args.scripted {
        let s = std::path::absolute(s).map_err(input(format!("scenario {}", s.display())))?;
        for role in [Role::Actor, Role::Critic, Role::Updater] {
            cfg.backends.insert(role.to_string().to_ascii_lowercase(), format!("scripted:{}", s.display()));
        }
    }
    let gateway = cfg.build_gateway().map_err(gateway_failure)?;
    let templates = cfg.load_templates().map_err(input("templates"))?;
    Ok((cfg, gateway, templates))
}

/// Unreadable scenario files are input errors; anything else (such as a
/// missing endpoint) is environmental.
fn gateway_failure(e: GatewayError) -> Failure {
    match &e {
        GatewayError::UnknownBackend(m) if m.starts_with("scenario ") => Failure::Input(e.to_string()),
        _ => Failure::Backend(e.to_string()),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let suite = load_suite(&a.suite)?;
    let (mut cfg, gateway, templates) = setup(&a.backend)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.test_each_epoch |= a.test_each_epoch;
    let initial = match &a.library {
        Some(p) => load_library(p)?,
        None => ExperienceLibrary::new(),
    };
    let trainer = Trainer::new(&gateway, &templates, cfg);
    let outcome = trainer.train(&suite, initial, Some(&a.out)).map_err(|e| match e {
        TrainError::InvalidSuite(_) | TrainError::OutputExists(_) => Failure::Input(e.to_string()),
        other => Failure::Backend(other.to_string()),
    })?;
    let summary = render_summary(&outcome.report, &outcome.library);
    fs::write(a.out.join("summary.txt"), &summary).map_err(input("writing summary"))?;
    print!("{summary}");
    let errors = outcome.report.total_errors();
    if errors > 0 {
        return Err(Failure::Backend(format!("{errors} sample(s) failed on backend errors; see report.json")));
    }
    Ok(())
}

fn render_summary(report: &TrainReport, library: &ExperienceLibrary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "suite {}: {} epoch(s)", report.suite, report.epochs.len());
    let _ = writeln!(s, "{:>5} {:>9} {:>9} {:>8} {:>5} {:>6} {:>8} {:>6}", "epoch", "train", "test", "library", "new", "merges", "discards", "errors");
    for e in &report.epochs {
        let test = e.test_accuracy.map(|t| format!("{t:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>5} {:>9.4} {:>9} {:>8} {:>5} {:>6} {:>8} {:>6}",
            e.epoch, e.train_accuracy, test, e.library_size, e.new_entries, e.merges, e.discards, e.errors
        );
    }
    let _ = writeln!(s, "final library: {} live entries, {} tombstones", library.len(), library.tombstones().count());
    s
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let suite = load_suite(&a.suite)?;
    let library = match &a.library {
        Some(p) => load_library(p)?,
        None => ExperienceLibrary::new(),
    };
    let (cfg, gateway, templates) = setup(&a.backend)?;
    let samples = match a.split {
        SplitArg::Train => &suite.train,
        SplitArg::Test => &suite.test,
    };
    if samples.is_empty() {
        return Err(Failure::Input(format!("suite {} has no tasks in that split", a.suite.display())));
    }
    let mode = cfg.library_mode.unwrap_or(suite.library_mode);
    let report = Trainer::new(&gateway, &templates, cfg).evaluate(samples, &library, mode);
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("eval-{}.jsonl", sanitize(&suite.name))));
    report.write_per_sample(&out).map_err(input(format!("writing {}", out.display())))?;
    println!(
        "{}",
        json!({ "n": report.n, "aggregate": report.aggregate, "per_sample_path": out.display().to_string() })
    );
    if report.errors() == report.n {
        return Err(Failure::Backend("every sample failed on backend errors".into()));
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "suite".into()
    } else {
        s
    }
}

fn refuse_overwrite(out: &Path, inputs: &[&Path]) -> CmdResult {
    let out_abs = out.canonicalize().ok();
    for i in inputs {
        if out_abs.is_some() && out_abs == i.canonicalize().ok() {
            return Err(Failure::Input(format!("refusing to overwrite input file {}", i.display())));
        }
    }
    Ok(())
}

fn cmd_library(c: LibraryCommand) -> CmdResult {
    match c {
        LibraryCommand::Inspect { library, top } => {
            let lib = load_library(&library)?;
            print!("{}", render_inspect(&lib, top));
            Ok(())
        }
        LibraryCommand::Export { library, out } | LibraryCommand::Import { file: library, out } => {
            refuse_overwrite(&out, &[&library])?;
            let lib = load_library(&library)?;
            inheritance::export(&lib, &out).map_err(input(format!("writing {}", out.display())))?;
            println!("{}: {} live entries, {} tombstones", out.display(), lib.len(), lib.tombstones().count());
            Ok(())
        }
        LibraryCommand::Merge {
            base,
            incoming,
            out,
            config,
        } => {
            refuse_overwrite(&out, &[&base, &incoming])?;
            let a = load_library(&base)?;
            let b = load_library(&incoming)?;
            let (cfg, gateway) = match &config {
                Some(p) => {
                    let cfg = RunConfig::load(p).map_err(input(format!("config {}", p.display())))?;
                    let g = cfg.build_gateway().map_err(gateway_failure)?;
                    (cfg, Some(g))
                }
                None => (RunConfig::default(), None),
            };
            let templates = cfg.load_templates().map_err(input("templates"))?;
            let updater = Updater {
                merge_threshold: cfg.merge_threshold,
                ..Updater::new(gateway.as_ref(), &templates)
            };
            let sample_id = format!("merge:{}", incoming.display());
            let merged = inheritance::merge_libraries(&a, &b, &updater, &sample_id, &mut NullSink::default())
                .map_err(|e| Failure::Backend(e.to_string()))?;
            inheritance::export(&merged.library, &out).map_err(input(format!("writing {}", out.display())))?;
            let audit_path = PathBuf::from(format!("{}.audit", out.display()));
            fs::write(&audit_path, updater::audit_to_text(&merged.step.audit)).map_err(input(format!("writing {}", audit_path.display())))?;
            let s = &merged.step;
            println!(
                "{}: {} live entries (inserted {}, merged {}, discarded {}, queued {}); audit {}",
                out.display(),
                merged.library.len(),
                s.inserts(),
                s.merges(),
                s.discards(),
                s.queued.len(),
                audit_path.display()
            );
            if !s.queued.is_empty() {
                return Err(Failure::Backend(format!("{} candidate(s) left undecided: updater unavailable", s.queued.len())));
            }
            Ok(())
        }
    }
}

fn render_inspect(lib: &ExperienceLibrary, top: usize) -> String {
    let mut s = String::new();
    let stats = lib.snapshot_stats();
    let _ = writeln!(s, "live entries: {}  tombstones: {}  next id: {}", stats.live_count, stats.tombstone_count, lib.next_id());
    let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", "zone", "strategy", "pattern", "instance");
    for zone in Zone::ALL {
        let counts: Vec<usize> = Level::ALL.iter().map(|&l| stats.count(zone, l)).collect();
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", zone.to_string().to_lowercase(), counts[0], counts[1], counts[2]);
    }
    let mut entries: Vec<_> = lib.entries().collect();
    entries.sort_by(|a, b| b.usage_count.cmp(&a.usage_count).then(a.id.cmp(&b.id)));
    let _ = writeln!(s, "top {} by usage:", top.min(entries.len()));
    let _ = writeln!(s, "{:>5} {:<7} {:<8} {:>5} {:>7}  content", "id", "zone", "level", "uses", "quality");
    for e in entries.into_iter().take(top) {
        let mut content = e.content.clone();
        if content.chars().count() > 72 {
            content = content.chars().take(69).collect::<String>() + "...";
        }
        let _ = writeln!(
            s,
            "{:>5} {:<7} {:<8} {:>5} {:>7.3}  {}",
            e.id.0,
            e.zone.to_string().to_lowercase(),
            e.level.to_string().to_lowercase(),
            e.usage_count,
            e.quality,
            content
        );
    }
    s
}

fn cmd_generate(c: GenerateCommand) -> CmdResult {
    match c {
        GenerateCommand::Keyed { n, sharing, seed, out } => {
            if n == 0 {
                return Err(Failure::Input("--n must be at least 1".into()));
            }
            let sharing = match sharing {
                SharingArg::Unique => Sharing::Unique,
                SharingArg::Chained => Sharing::Chained,
            };
            let bundle = synthetic::generate_keyed_suite(n, sharing, seed);
            bundle.write(&out).map_err(input(format!("writing {}", out.display())))?;
            println!("wrote keyed suite {} ({} tasks) to {}", bundle.suite.name, n, out.display());
            Ok(())
        }
        GenerateCommand::Regression {
            points,
            noise,
            seed,
            reversed,
            out,
        } => {
            if points < 2 {
                return Err(Failure::Input("--points must be at least 2".into()));
            }
            if !(noise.is_finite() && noise >= 0.0) {
                return Err(Failure::Input("--noise must be a non-negative number".into()));
            }
            let bundle = synthetic::generate_regression(&RegressionConfig {
                reversed,
                ..RegressionConfig::new(points, noise, seed)
            });
            bundle.write(&out).map_err(input(format!("writing {}", out.display())))?;
            println!("wrote regression suite {} to {}", bundle.suite.name, out.display());
            Ok(())
        }
    }
}

fn cmd_metrics(report: &Path, out: &Path) -> CmdResult {
    let report = TrainReport::load(report).map_err(input(format!("report {}", report.display())))?;
    trainer::emit_metrics(&report, out).map_err(input(format!("writing {}", out.display())))?;
    println!("{}: {} epoch row(s)", out.display(), report.epochs.len());
    Ok(())
}
