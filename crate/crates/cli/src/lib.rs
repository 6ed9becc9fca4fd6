//! Command-line front end for `odf-core`.
//!
//! [`run`] holds all behavior so tests can drive it with in-memory streams.
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use odf_core::geometry::{build_anchor_grid, GridSpec};
use odf_core::hyperopt::{builtin_objective, Objective, OptimizerState, SearchSpace, TrialLogLine, BUILTIN_OBJECTIVES};
use odf_core::matching::{
    compute_deltas, cost_matrices, per_image_boxes, run_matcher, total_weight, Algo, DedupMode, DeltaTarget, MatchAssignment, MatcherSpec,
};
use odf_core::pipeline::{compare_pipelines, run_pipeline, PipelineConfig};
use odf_core::sparse_labels::{encode_batch, gen_synthetic, read_records, write_records, LabelRecord, SyntheticSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn data_at<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "odf", version, about = "Anchor matching, sparse labels, pipeline benchmarks and hyperparameter search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic ODR1 label file.
    GenData(GenDataArgs),
    /// Assign ground-truth boxes to anchors and emit one JSON line per image.
    Match(MatchArgs),
    /// Measure pipeline throughput, or compare two layouts.
    Bench(BenchArgs),
    /// Run the hyperparameter optimizer on a built-in objective or over stdin/stdout.
    Hyperopt(HyperoptArgs),
    /// Enumerate the layer-transfer experiment plan.
    PlanTransfer(PlanTransferArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub images: usize,
    #[arg(long)]
    pub max_boxes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1248)]
    pub width: u16,
    #[arg(long, default_value_t = 384)]
    pub height: u16,
    #[arg(long, default_value_t = 3)]
    pub classes: u16,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoArg {
    Serial,
    Parallel,
    Greedy,
    Exact,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Serial => Algo::Serial,
            AlgoArg::Parallel => Algo::Parallel,
            AlgoArg::Greedy => Algo::Greedy,
            AlgoArg::Exact => Algo::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DedupArg {
    Strict,
    PaperLiteral,
}

impl From<DedupArg> for DedupMode {
    fn from(d: DedupArg) -> Self {
        match d {
            DedupArg::Strict => DedupMode::Strict,
            DedupArg::PaperLiteral => DedupMode::PaperLiteral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub grid_w: usize,
    pub grid_h: usize,
    pub k: usize,
}

fn parse_dims<const N: usize>(s: &str, what: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != N {
        return Err(format!("expected {what}"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse::<f64>().map_err(|_| format!("{p:?} is not a number; expected {what}"))?;
        if !(o.is_finite() && *o > 0.0) {
            return Err(format!("{p:?} must be positive; expected {what}"));
        }
    }
    Ok(out)
}

fn parse_grid(s: &str) -> Result<GridDims, String> {
    let [w, h, k] = parse_dims::<3>(s, "GWxGHxK")?;
    if [w, h, k].iter().any(|v| v.fract() != 0.0) {
        return Err("grid dimensions must be integers".into());
    }
    Ok(GridDims { grid_w: w as usize, grid_h: h as usize, k: k as usize })
}

fn parse_image(s: &str) -> Result<(f64, f64), String> {
    let [w, h] = parse_dims::<2>(s, "WxH")?;
    Ok((w, h))
}

/// Anchor template sizes in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates(pub Vec<(f64, f64)>);

fn parse_templates(s: &str) -> Result<Templates, String> {
    s.split(',')
        .map(|t| {
            let (w, h) = t.split_once(':').ok_or_else(|| format!("template {t:?} is not w:h"))?;
            let parse = |v: &str| v.trim().parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0);
            match (parse(w), parse(h)) {
                (Some(w), Some(h)) => Ok((w, h)),
                _ => Err(format!("template {t:?} needs positive numbers")),
            }
        })
        .collect::<Result<_, _>>()
        .map(Templates)
}

#[derive(Debug, clap::Args)]
pub struct MatchArgs {
    #[arg(long, value_enum)]
    pub algo: AlgoArg,
    #[arg(long, value_enum, default_value = "strict")]
    pub dedup: DedupArg,
    #[arg(long)]
    pub records: PathBuf,
    /// Anchor grid as GWxGHxK.
    #[arg(long, value_parser = parse_grid)]
    pub grid: GridDims,
    /// Image size as WxH.
    #[arg(long, value_parser = parse_image)]
    pub image: (f64, f64),
    /// K anchor templates as "w:h,w:h,...".
    #[arg(long, value_parser = parse_templates)]
    pub templates: Templates,
    /// Images matched per batch.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["pipeline", "compare"])))]
pub struct BenchArgs {
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<PathBuf>>,
    /// ODR1 input; synthetic records are generated when omitted.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
#[command(group(ArgGroup::new("source").required(true).args(["objective", "ask_tell"])))]
pub struct HyperoptArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub budget: u64,
    /// Built-in objective as builtin:NAME.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub ask_tell: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trial log (JSON lines); standard output when omitted in objective mode.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct PlanTransferArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and executes the subcommand.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            let _ = write!(stderr, "{}", e.render());
            if matches!(
                e.kind(),
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = write!(stderr, "\n{}", Cli::command().render_help());
            }
            return EXIT_USAGE;
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command, stdin, stdout, stderr));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code()
        }
    }
}

/// Caps the rayon pool at `ODF_THREADS` workers when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ODF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ODF_THREADS={raw:?} is not a positive integer")))?;
    // the pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a, stdout),
        Command::Match(a) => match_cmd(a, stdout),
        Command::Bench(a) => bench(a, stdout, stderr),
        Command::Hyperopt(a) => hyperopt(a, stdin, stdout, stderr),
        Command::PlanTransfer(a) => plan_transfer(a, stdout),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(data_at(path))
}

fn load_records(path: &Path) -> Result<Vec<LabelRecord>, CliError> {
    read_records(path).map_err(data_at(path))?.collect::<Result<_, _>>().map_err(data_at(path))
}

fn gen_data(a: GenDataArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        seed: a.seed,
        n_images: a.images,
        max_boxes: a.max_boxes,
        image_w: a.width,
        image_h: a.height,
        class_count: a.classes,
    };
    let records: Vec<LabelRecord> = gen_synthetic(&spec).map_err(data)?.collect();
    write_records(&a.out, records.iter()).map_err(data_at(&a.out))?;
    let boxes: usize = records.iter().map(|r| r.boxes.len()).sum();
    writeln!(stdout, "wrote {} images, {boxes} boxes to {}", records.len(), a.out.display()).map_err(data)
}

/// One output line of `match`.
#[derive(Debug, Serialize)]
pub struct MatchLine {
    pub image_id: u64,
    pub assignment: Vec<usize>,
    /// Sum of `1 - IOU` over assigned pairs.
    pub total_weight: f64,
    pub deltas: Vec<DeltaTarget>,
}

fn match_cmd(a: MatchArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.templates.0.len() != a.grid.k {
        return Err(CliError::Usage(format!("--grid declares K={} but --templates lists {}", a.grid.k, a.templates.0.len())));
    }
    let spec = GridSpec { image_w: a.image.0, image_h: a.image.1, grid_w: a.grid.grid_w, grid_h: a.grid.grid_h, templates: a.templates.0 };
    let anchors = build_anchor_grid(&spec).map_err(data)?;
    let records = load_records(&a.records)?;
    let matcher = MatcherSpec { algo: a.algo.into(), dedup: a.dedup.into() };
    let mut out = create(&a.out)?;
    let mut boxes = 0usize;
    for chunk in records.chunks(a.batch_size as usize) {
        let rois = encode_batch(chunk);
        let assignment = run_matcher(matcher, &anchors, &rois).map_err(data)?;
        let gts = per_image_boxes(&rois).map_err(data)?;
        let costs = cost_matrices(&anchors, &gts).map_err(data)?;
        let deltas = compute_deltas(&assignment, &anchors, &gts).map_err(data)?;
        for (b, rec) in chunk.iter().enumerate() {
            let single = MatchAssignment { images: vec![assignment.images[b].clone()] };
            let line = MatchLine {
                image_id: rec.image_id,
                assignment: assignment.images[b].clone(),
                total_weight: total_weight(&single, std::slice::from_ref(&costs[b])).map_err(data)?,
                deltas: deltas[b].clone(),
            };
            boxes += line.assignment.len();
            serde_json::to_writer(&mut out, &line).map_err(data)?;
            out.write_all(b"\n").map_err(data)?;
        }
    }
    out.flush().map_err(data)?;
    writeln!(stdout, "matched {boxes} boxes in {} images against {} anchors", records.len(), anchors.len()).map_err(data)
}

fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(data_at(path))?;
    let cfg: PipelineConfig = serde_json::from_str(&text).map_err(data_at(path))?;
    cfg.validate().map_err(data_at(path))?;
    Ok(cfg)
}

/// Records from `--records`, or a synthetic set sized for every config.
fn bench_records(records: Option<&Path>, cfgs: &[&PipelineConfig]) -> Result<Vec<LabelRecord>, CliError> {
    if let Some(p) = records {
        return load_records(p);
    }
    let first = cfgs[0];
    let n_images = cfgs.iter().map(|c| c.n_batches * c.batch_size).max().unwrap_or(0);
    let (w, h) = first.grid.as_ref().map_or((1248, 384), |g| (g.image_w as u16, g.image_h as u16));
    let spec = SyntheticSpec { seed: first.seed, n_images, max_boxes: 8, image_w: w, image_h: h, class_count: 3 };
    Ok(gen_synthetic(&spec).map_err(data)?.collect())
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(data_at(p)),
        None => writeln!(stdout, "{text}").map_err(data),
    }
}

fn bench(a: BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let (table, json) = if let Some(paths) = &a.compare {
        let (ca, cb) = (load_config(&paths[0])?, load_config(&paths[1])?);
        let records = bench_records(a.records.as_deref(), &[&ca, &cb])?;
        let report = compare_pipelines(&ca, &cb, &records).map_err(data)?;
        let table = format!(
            "A: {}\n{}B: {}\n{}speedup B/A: measured {:.3}x, predicted {:.3}x\n",
            paths[0].display(),
            report.a.to_table(&ca),
            paths[1].display(),
            report.b.to_table(&cb),
            report.speedup,
            report.predicted_speedup
        );
        (table, serde_json::to_value(&report).map_err(data)?)
    } else {
        let path = a.pipeline.as_ref().expect("clap enforces one mode");
        let cfg = load_config(path)?;
        let records = bench_records(a.records.as_deref(), &[&cfg])?;
        let run = run_pipeline(&cfg, records).map_err(data)?;
        (run.report.to_table(&cfg), serde_json::to_value(&run.report).map_err(data)?)
    };
    // the table goes to whichever stream the JSON does not
    let table_sink: &mut dyn Write = if a.out.is_some() { &mut *stdout } else { stderr };
    table_sink.write_all(table.as_bytes()).map_err(data)?;
    emit_json(&json, a.out.as_deref(), stdout)
}

fn parse_objective(spec: &str) -> Result<Objective, CliError> {
    let name = spec.strip_prefix("builtin:").ok_or_else(|| CliError::Usage(format!("objective {spec:?} must look like builtin:NAME")))?;
    builtin_objective(name)
        .ok_or_else(|| CliError::Usage(format!("unknown objective {name:?}; available: {}", BUILTIN_OBJECTIVES.join(", "))))
}

fn write_log_line(out: &mut dyn Write, line: &TrialLogLine) -> Result<(), CliError> {
    serde_json::to_writer(&mut *out, line).map_err(data)?;
    out.write_all(b"\n").map_err(data)
}

/// Candidate printed for each ask in ask/tell mode.
#[derive(Debug, Serialize)]
pub struct AskLine<'a> {
    pub seq: usize,
    pub point: &'a [f64],
    pub params: serde_json::Map<String, serde_json::Value>,
}

fn hyperopt(a: HyperoptArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let objective = a.objective.as_deref().map(parse_objective).transpose()?;
    let text = std::fs::read_to_string(&a.space).map_err(data_at(&a.space))?;
    let space = SearchSpace::from_json(&text).map_err(data_at(&a.space))?;
    let mut state = OptimizerState::with_defaults(space.clone(), a.seed).map_err(data)?;
    let budget = a.budget as usize;

    match objective {
        Some(f) => {
            let log = state.optimize(budget, |p| f(&space, p)).map_err(data)?;
            let mut file = a.out.as_deref().map(create).transpose()?;
            let sink: &mut dyn Write = match file.as_mut() {
                Some(w) => w,
                None => &mut *stdout,
            };
            for line in &log {
                write_log_line(sink, line)?;
            }
            sink.flush().map_err(data)?;
        }
        None => {
            let mut log = match a.out.as_deref() {
                Some(p) => Some(create(p)?),
                None => None,
            };
            let mut line = String::new();
            for seq in 0..budget {
                let point = state.ask().map_err(data)?;
                let params = space.dims.iter().zip(&point).map(|(d, v)| (d.name.clone(), serde_json::json!(v))).collect();
                serde_json::to_writer(&mut *stdout, &AskLine { seq, point: &point, params }).map_err(data)?;
                writeln!(stdout).map_err(data)?;
                stdout.flush().map_err(data)?;
                let value = loop {
                    line.clear();
                    if stdin.read_line(&mut line).map_err(data)? == 0 {
                        return Err(CliError::Data(format!("input closed after {seq} of {budget} trials")));
                    }
                    let t = line.trim();
                    if t.is_empty() {
                        continue;
                    }
                    break parse_tell(t)?;
                };
                state.tell(&point, value).map_err(data)?;
                if let Some(w) = log.as_mut() {
                    write_log_line(w, &state.log_line())?;
                    w.flush().map_err(data)?;
                }
            }
        }
    }
    let best = state.best().map_err(data)?;
    writeln!(stderr, "best value {} at {:?} after {} trials", best.value, best.point, state.trials.len()).map_err(data)
}

fn parse_tell(line: &str) -> Result<f64, CliError> {
    let bad = || CliError::Data(format!("expected \"tell VALUE\", got {line:?}"));
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some("tell"), Some(v), None) => v.parse::<f64>().map_err(|_| bad()),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Source {
    A,
    B,
}

/// One layer-transfer experiment: the first `n_layers` layers come from a
/// network trained on `source` and the target network trains on B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferPlanEntry {
    pub source: Source,
    pub n_layers: usize,
    /// Transferred layers keep training instead of staying frozen.
    pub fine_tune: bool,
    pub label: String,
}

/// Every entry for `layers` transferable layers: sources A then B, frozen
/// then fine-tuned, depth ascending.
pub fn transfer_plan(layers: usize) -> Vec<TransferPlanEntry> {
    let mut plan = Vec::with_capacity(4 * layers);
    for source in [Source::A, Source::B] {
        for fine_tune in [false, true] {
            for n_layers in 1..=layers {
                let label = format!("{source:?}{n_layers}B{}", if fine_tune { "+" } else { "" });
                plan.push(TransferPlanEntry { source, n_layers, fine_tune, label });
            }
        }
    }
    plan
}

fn plan_transfer(a: PlanTransferArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    emit_json(&transfer_plan(a.layers as usize), a.out.as_deref(), stdout)
}
