use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use disas_core::corpus::{emit_mntp_text, emit_supervised_entries, load_meta, SampleMeta};
use disas_core::{
    generate_sample, Classifier, CodeRegion, CorpusParams, Engine, GroundTruth,
    GroundTruthClassifier, HeuristicClassifier, NoisyOracle, PipelineConfig, RemoteClassifier,
    Report, TruthSpans,
};

#[derive(Parser)]
#[command(
    name = "disas",
    version,
    about = "Junk-byte resistant x86-64 disassembler"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Disassemble a raw code region.
    Disasm(DisasmArgs),
    /// Generate synthetic obfuscated samples with ground truth.
    Gen(GenArgs),
    /// Score a list of predicted instruction addresses.
    Score(ScoreArgs),
    /// Write a training dataset for a sample.
    EmitDataset(EmitArgs),
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let digits = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    u64::from_str_radix(digits, 16).map_err(|e| format!("bad hex address {s:?}: {e}"))
}

#[derive(Debug, Clone, PartialEq)]
enum ClassifierKind {
    Oracle,
    Noisy(f64),
    Heuristic,
    Remote,
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(ClassifierKind::Oracle),
            "heuristic" => Ok(ClassifierKind::Heuristic),
            "remote" => Ok(ClassifierKind::Remote),
            _ => {
                let eps = s.strip_prefix("noisy:").ok_or_else(|| {
                    format!("unknown classifier {s:?} (oracle, noisy:EPS, heuristic, remote)")
                })?;
                let eps: f64 = eps.parse().map_err(|_| format!("bad noise rate {eps:?}"))?;
                if !(0.0..=1.0).contains(&eps) {
                    return Err(format!("noise rate {eps} is outside [0, 1]"));
                }
                Ok(ClassifierKind::Noisy(eps))
            }
        }
    }
}

/// Where the code region comes from.
#[derive(Args)]
struct RegionArgs {
    /// Raw bytes of the region.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sample metadata; supplies base, entry points and ground truth.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Load address when no metadata is given.
    #[arg(long, value_parser = parse_hex, default_value = "0x401000")]
    base: u64,
    /// Entry point (repeatable); defaults to the base address.
    #[arg(long = "entry", value_parser = parse_hex)]
    entries: Vec<u64>,
}

impl RegionArgs {
    fn load(&self) -> Result<(CodeRegion, Option<GroundTruth>)> {
        let input = self.input.as_ref().context("--input is required")?;
        let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
        let meta: Option<SampleMeta> = self.meta.as_deref().map(load_meta).transpose()?;
        let (base, mut entries) = match &meta {
            Some(m) => (m.base, m.entry_points.clone()),
            None => (self.base, Vec::new()),
        };
        entries.extend(&self.entries);
        if entries.is_empty() {
            entries.push(base);
        }
        Ok((
            CodeRegion::new(base, bytes, entries),
            meta.map(|m| m.truth()),
        ))
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with pipeline settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prefilter window (instructions per request).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    single_threshold: Option<f64>,
    #[arg(long)]
    bfs_limit: Option<usize>,
    /// Requests per classifier call.
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                PipelineConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.hi {
            c.hi = v;
        }
        if let Some(v) = self.lo {
            c.lo = v;
        }
        if let Some(v) = self.single_threshold {
            c.single_threshold = v;
        }
        if let Some(v) = self.bfs_limit {
            c.bfs_limit = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct DisasmArgs {
    #[command(flatten)]
    region: RegionArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// oracle, noisy:EPS, heuristic or remote. The first two need --meta.
    #[arg(long, default_value = "heuristic")]
    classifier: ClassifierKind,
    /// Classifier service URL; falls back to DISAS_CLASSIFIER_URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Seed of the noisy oracle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON listing output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Text listing output; printed to stdout when neither --out nor --text is given.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Instruction addresses, one hex address per line.
    #[arg(long)]
    addresses: Option<PathBuf>,
    /// Final disassembly graph as JSON.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = CorpusParams::default().blocks)]
    blocks: usize,
    #[arg(long, default_value_t = CorpusParams::default().junk_max)]
    junk_max: usize,
    /// Samples to write; sample i uses seed + i.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreFormat {
    Table,
    Csv,
    Json,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    region: RegionArgs,
    /// Predicted instruction addresses, one hex address per line.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: ScoreFormat,
    /// Row label in the table.
    #[arg(long, default_value = "disas")]
    name: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetFormat {
    Mntp,
    Supervised,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    region: RegionArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    format: DatasetFormat,
    /// Seed for the alternative-decode offsets of the mntp format.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn require_truth(truth: Option<GroundTruth>, what: &str) -> Result<GroundTruth> {
    truth.with_context(|| format!("{what} needs ground truth from --meta"))
}

fn build_classifier(a: &DisasmArgs, truth: Option<GroundTruth>) -> Result<Box<dyn Classifier>> {
    Ok(match a.classifier {
        ClassifierKind::Oracle => Box::new(GroundTruthClassifier::new(
            require_truth(truth, "the oracle classifier")?.instruction_starts,
        )),
        ClassifierKind::Noisy(eps) => Box::new(NoisyOracle::new(
            require_truth(truth, "the noisy classifier")?.instruction_starts,
            eps,
            a.seed,
        )),
        ClassifierKind::Heuristic => Box::new(HeuristicClassifier),
        ClassifierKind::Remote => Box::new(match &a.endpoint {
            Some(url) => RemoteClassifier::new(url)?,
            None => RemoteClassifier::from_env()?,
        }),
    })
}

fn cmd_disasm(a: DisasmArgs) -> Result<()> {
    let config = a.config.resolve()?;
    if a.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let (region, truth) = a.region.load()?;
    let classifier = build_classifier(&a, truth)?;
    let mut engine = Engine::from_region(&region, &*classifier, config)?;
    engine.run_in_place()?;
    let listing = engine.listing();

    if let Some(p) = &a.dump_graph {
        write_file(p, &engine.graph().to_json())?;
    }
    if let Some(p) = &a.addresses {
        let text: String = listing
            .addresses()
            .iter()
            .map(|x| format!("{x:#x}\n"))
            .collect();
        write_file(p, &text)?;
    }
    if let Some(p) = &a.out {
        write_file(p, &listing.to_json())?;
    }
    let text = listing.render_text(&region);
    match &a.text {
        Some(p) => write_file(p, &text)?,
        None if a.out.is_none() => print!("{text}"),
        None => {}
    }
    let d = engine.dispatch_stats();
    eprintln!(
        "{} instructions, {} data bytes; {} classifier calls, {} requests",
        listing.instructions.len(),
        listing.data_bytes.len(),
        d.calls,
        d.requests
    );
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let params = CorpusParams {
        blocks: a.blocks,
        junk_max: a.junk_max,
        ..CorpusParams::default()
    };
    for i in 0..a.count {
        let seed = a.seed + i;
        let sample = generate_sample(seed, &params);
        sample
            .truth
            .validate(&sample.region)
            .map_err(|e| anyhow::anyhow!("seed {seed}: {e}"))?;
        sample.save(&a.out_dir, &format!("sample-{seed:04}"))?;
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<u64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            parse_hex(l).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), n + 1))
        })
        .collect()
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let (region, truth) = a.region.load()?;
    let truth = require_truth(truth, "scoring")?;
    let view = region.view();
    let mut predicted = Vec::new();
    for addr in read_predictions(&a.predictions)? {
        match view.decode(addr) {
            Some(ins) => predicted.push((addr, ins.length)),
            None => bail!("predicted address {addr:#x} is outside the region"),
        }
    }
    let report = Report::new(&predicted, &TruthSpans::from_sample(&region, &truth));
    let out = match a.format {
        ScoreFormat::Table => report.to_table(&a.name),
        ScoreFormat::Csv => report.to_csv(),
        ScoreFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
    };
    print!("{out}");
    Ok(())
}

fn cmd_emit(a: EmitArgs) -> Result<()> {
    let (region, truth) = a.region.load()?;
    let truth = require_truth(truth, "dataset emission")?;
    let out = match a.format {
        DatasetFormat::Mntp => emit_mntp_text(&region, &truth, a.seed),
        DatasetFormat::Supervised => {
            let run = emit_supervised_entries(&region, &truth, &a.config.resolve()?)?;
            let mut s = String::new();
            for e in &run.entries {
                let _ = writeln!(s, "{}", serde_json::to_string(e)?);
            }
            s
        }
    };
    match &a.out {
        Some(p) => write_file(p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Disasm(a) => cmd_disasm(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Score(a) => cmd_score(a),
        Command::EmitDataset(a) => cmd_emit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
