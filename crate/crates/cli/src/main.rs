//! Command-line front end for experiments, sweeps and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flare_core::adapters::{load_adapted, Attachment, FusionKind, Method};
use flare_core::experiment::{
    base_model, emit_report, english_data, mt_standin, parallel_data, run_experiment, sweep, ExperimentConfig,
    SweepKind,
};
use flare_core::train::{evaluate, probe_activations, write_predictions, Setting, SourceMode};
use flare_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "flare", version, about = "Representation fusion in low-rank adapters on synthetic cross-lingual tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config and emit its report.
    Run(ConfigArgs),
    /// Train (or load from cache) the English base models of a config.
    TrainBase(ConfigArgs),
    /// Adapter-stage training of the config's methods; same as `run`.
    TrainXlt(ConfigArgs),
    /// Re-evaluate a trained cell.
    Eval(CellArgs),
    /// Activation probe of a trained fusion cell.
    Probe(ProbeArgs),
    /// Expand a config along one axis and run every cell.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        kind: SweepArg,
    },
    /// Rebuild the report tables of an output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's method list (repeatable).
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionKind>,
    #[arg(long = "r")]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mt_quality: Option<f64>,
    /// Replaces the config's seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    source_offset: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CellArgs {
    #[arg(long)]
    config: PathBuf,
    /// A method name, or `english`, `zero_shot`, `translate_test`.
    #[arg(long)]
    method: String,
    #[arg(long)]
    language: String,
    #[arg(long)]
    seed: u64,
    /// Evaluate with an all-zero source.
    #[arg(long)]
    zero_source: bool,
    /// Also write the predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    language: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "query")]
    attachment: AttachmentArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttachmentArg {
    Query,
    Value,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    FusionFn,
    Rank,
    MtQuality,
    MixLayer,
    LowResource,
}

impl From<SweepArg> for SweepKind {
    fn from(a: SweepArg) -> Self {
        match a {
            SweepArg::FusionFn => SweepKind::FusionFn,
            SweepArg::Rank => SweepKind::Rank,
            SweepArg::MtQuality => SweepKind::MtQuality,
            SweepArg::MixLayer => SweepKind::MixLayer,
            SweepArg::LowResource => SweepKind::LowResource,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    FusionKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = FusionKind::ALL.iter().map(|f| f.name()).collect();
        format!("unknown fusion {s:?}; expected one of {}", names.join(", "))
    })
}

impl ConfigArgs {
    fn load(&self) -> flare_core::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if !self.methods.is_empty() {
            cfg.methods = self.methods.clone();
        }
        if let Some(f) = self.fusion {
            cfg.adapter.fusion = f;
        }
        if let Some(r) = self.rank {
            cfg.adapter.rank = r;
        }
        if let Some(a) = self.alpha {
            cfg.adapter.alpha = a;
        }
        if let Some(q) = self.mt_quality {
            cfg.mt_quality = q;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = self.source_offset {
            cfg.adapter.source_offset = o;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> flare_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_and_report(cfg: &ExperimentConfig) -> flare_core::Result<()> {
    let summary = run_experiment(cfg)?;
    let report = emit_report(&cfg.output_dir)?;
    eprintln!("run tree: {}", summary.root.display());
    let rows: Vec<_> = report.summary.iter().filter(|s| s.name == cfg.name).collect();
    print_json(&rows)
}

fn eval_cell(args: &CellArgs) -> flare_core::Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let (corpus, english) = english_data(&cfg, args.seed)?;
    let base = base_model(&cfg, args.seed, &english)?;
    let result = if args.method == Setting::English.name() {
        base.english_test
    } else {
        let lang = cfg
            .languages
            .iter()
            .find(|l| l.name == args.language)
            .ok_or_else(|| Error::Config(format!("language {:?} not in config", args.language)))?;
        let (cipher, splits) = parallel_data(&cfg, &corpus, lang, args.seed)?;
        match args.method.as_str() {
            "zero_shot" => evaluate(&base.model, None, None, Setting::ZeroShot, &splits.test, SourceMode::Live)?,
            "translate_test" => {
                evaluate(&base.model, None, None, Setting::TranslateTest, &splits.test, SourceMode::Live)?
            }
            name => {
                let method = parse_method(name).map_err(Error::Config)?;
                let path = cfg
                    .run_root()
                    .join(method.name())
                    .join(&lang.name)
                    .join(args.seed.to_string())
                    .join("adapters.ckpt");
                let model = load_adapted(&path)?;
                let mt = (method == Method::FlareMt)
                    .then(|| mt_standin(&cfg, &cipher, &english, args.seed))
                    .transpose()?;
                let source = if args.zero_source { SourceMode::Zeroed } else { SourceMode::Live };
                evaluate(&base.model, Some(&model), mt.as_ref(), Setting::Target, &splits.test, source)?
            }
        }
    };
    if let Some(path) = &args.predictions {
        write_predictions(path, &result.records)?;
    }
    print_json(&serde_json::json!({
        "method": args.method,
        "language": args.language,
        "seed": args.seed,
        "metric": cfg.metric_name(),
        "value": result.metric,
    }))
}

fn probe_cell(args: &ProbeArgs) -> flare_core::Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let (corpus, english) = english_data(&cfg, args.seed)?;
    let base = base_model(&cfg, args.seed, &english)?;
    let lang = cfg
        .languages
        .iter()
        .find(|l| l.name == args.language)
        .ok_or_else(|| Error::Config(format!("language {:?} not in config", args.language)))?;
    let (cipher, splits) = parallel_data(&cfg, &corpus, lang, args.seed)?;
    let dir = cfg
        .run_root()
        .join(args.method.name())
        .join(&lang.name)
        .join(args.seed.to_string());
    let model = load_adapted(&dir.join("adapters.ckpt"))?;
    let mt = (args.method == Method::FlareMt)
        .then(|| mt_standin(&cfg, &cipher, &english, args.seed))
        .transpose()?;
    let attachment = match args.attachment {
        AttachmentArg::Query => Attachment::Query,
        AttachmentArg::Value => Attachment::Value,
    };
    let probe = probe_activations(&base.model, &model, mt.as_ref(), &splits.test, attachment)?;
    println!("layer,source,target");
    for (layer, s, t) in probe.layers() {
        println!("{layer},{s},{t}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> flare_core::Result<()> {
    match cli.command {
        Command::Run(args) | Command::TrainXlt(args) => run_and_report(&args.load()?),
        Command::TrainBase(args) => {
            let cfg = args.load()?;
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (_, english) = english_data(&cfg, seed)?;
                let base = base_model(&cfg, seed, &english)?;
                rows.push(serde_json::json!({
                    "seed": seed,
                    "metric": cfg.metric_name(),
                    "value": base.english_test.metric,
                    "checkpoint": base.dir.join("base.ckpt"),
                }));
            }
            print_json(&rows)
        }
        Command::Eval(args) => eval_cell(&args),
        Command::Probe(args) => probe_cell(&args),
        Command::Sweep { config, kind } => {
            let cfg = config.load()?;
            let out = sweep(kind.into(), &cfg)?;
            print_json(&out.table)
        }
        Command::Report { dir } => {
            let report = emit_report(&dir)?;
            eprintln!("wrote {}", dir.join("report").display());
            print_json(&report.summary)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
