//! `convcost`: cost reports, ablation comparisons, energy metrics and the
//! small engine experiments (grad check, toy training, connectivity).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use convcost::analysis::{aggregation_summary, connectivity_matrix};
use convcost::cost::{efficiency_from_flops, network_report, CostReport, FlopConvention, PowerLog, ReportOptions, Totals};
use convcost::data::{load_cifar10_binary, synthetic_batch, Dataset};
use convcost::engine::{self, weights, Element, ParamStore, TrainState};
use convcost::graph::{Graph, GraphSpec, LayerKind, TensorShape};
use convcost::zoo::{self, KNOWN_ARCHS};

#[derive(Parser)]
#[command(name = "convcost", version, about = "Cost analysis and reference numerics for dense and one-shot aggregation CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer cost report (MAC, FLOPs, params, activations).
    Analyze(AnalyzeArgs),
    /// Side-by-side totals of two networks with absolute and percentage deltas.
    Compare(CompareArgs),
    /// FPS, J/img and GFLOP/s from a FLOP count, a power log and a timing.
    Energy(EnergyArgs),
    /// Finite-difference check of the engine's gradients.
    Gradcheck(GradcheckArgs),
    /// Short SGD run; writes the loss CSV and a weights file.
    TrainDemo(TrainArgs),
    /// Source-to-layer connectivity matrix of one module from a weights file.
    Connectivity(ConnectivityArgs),
    /// Writes a network as a graph spec JSON file.
    Export(ExportArgs),
    /// Lists the built-in architectures.
    Archs,
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Built-in architecture name (see `convcost archs`).
    #[arg(long, conflicts_with = "spec")]
    arch: Option<String>,
    /// Graph spec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Input shape, NxCxHxW or CxHxW. Defaults to the architecture's own.
    #[arg(long)]
    input: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum DType {
    F32,
    F64,
}

impl DType {
    fn bytes(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Flops {
    /// One multiply-accumulate counts as one FLOP.
    Mac,
    /// One multiply-accumulate counts as two FLOPs.
    TwoPerMac,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DType,
    #[arg(long, value_enum, default_value = "mac")]
    flops: Flops,
    /// Report file; its format follows --format (default json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the report in this format on standard output when no --out is given.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct CompareArgs {
    /// Architecture name or graph spec path.
    a: String,
    /// Architecture name or graph spec path.
    b: String,
    #[arg(long)]
    input: Option<String>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DType,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    /// Cost report JSON supplying FLOPs per image.
    #[arg(long, required_unless_present = "flops", conflicts_with = "flops")]
    report: Option<PathBuf>,
    /// FLOPs per image, instead of --report.
    #[arg(long)]
    flops: Option<f64>,
    /// CSV with header timestamp_s,power_w.
    #[arg(long, required_unless_present = "watts", conflicts_with = "watts")]
    power_log: Option<PathBuf>,
    /// Constant power draw, instead of --power-log.
    #[arg(long)]
    watts: Option<f64>,
    #[arg(long)]
    images: u64,
    #[arg(long)]
    wall_seconds: f64,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DType,
    /// Pass threshold; defaults to 1e-6 for f64 and 1e-3 for f32.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "osa-cifar", conflicts_with = "spec")]
    arch: String,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use synthetic blobs instead of a CIFAR-10 batch.
    #[arg(long, conflicts_with = "cifar")]
    synthetic: bool,
    /// CIFAR-10 binary batch file (data_batch_N.bin).
    #[arg(long, required_unless_present = "synthetic")]
    cifar: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DType,
    /// Loss CSV path.
    #[arg(long, default_value = "loss.csv")]
    out: PathBuf,
    /// Weights file path.
    #[arg(long, default_value = "weights.bin")]
    weights: PathBuf,
    /// Window width for the printed loss means.
    #[arg(long, default_value_t = 50)]
    window: usize,
}

#[derive(Args)]
struct ConnectivityArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Module name prefix, e.g. stage2/osa1 or block1.
    #[arg(long)]
    module: String,
    /// Architecture the weights belong to; inferred from the file when omitted.
    #[arg(long, conflicts_with = "spec")]
    arch: Option<String>,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// CSV output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Net {
    name: String,
    graph: Graph,
    default_input: Option<TensorShape>,
}

fn load_spec(path: &Path) -> Result<Net> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = GraphSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "spec".into());
    Ok(Net { name, graph, default_input: None })
}

fn load_arch(name: &str) -> Result<Net> {
    let arch = zoo::build_arch(name)?;
    Ok(Net { name: arch.name, graph: arch.graph, default_input: Some(arch.default_input) })
}

/// An architecture name, or a path to a graph spec when it names a file.
fn resolve(name_or_path: &str) -> Result<Net> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        load_spec(path)
    } else {
        load_arch(name_or_path)
    }
}

impl NetArgs {
    fn load(&self) -> Result<Net> {
        match (&self.arch, &self.spec) {
            (Some(a), _) => load_arch(a),
            (None, Some(p)) => load_spec(p),
            (None, None) => bail!("pass --arch or --spec; known archs: {}", KNOWN_ARCHS.join(", ")),
        }
    }
}

fn input_shape(net: &Net, flag: Option<&str>) -> Result<TensorShape> {
    match flag {
        Some(s) => Ok(TensorShape::parse(s)?),
        None => net.default_input.ok_or_else(|| anyhow!("--input is required with --spec")),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            let nl = if text.ends_with('\n') { "" } else { "\n" };
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.write_all(nl.as_bytes())) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn render_report(r: &CostReport, format: Format) -> String {
    match format {
        Format::Json => r.to_json(),
        Format::Table => r.to_table(),
        Format::Csv => r.to_csv(),
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let net = args.net.load()?;
    let input = input_shape(&net, args.net.input.as_deref())?;
    let flops = match args.flops {
        Flops::Mac => FlopConvention::MultiplyAccumulate,
        Flops::TwoPerMac => FlopConvention::TwoPerMac,
    };
    let report = network_report(&net.graph, &net.name, input, ReportOptions { dtype_bytes: args.dtype.bytes(), flops })?;
    match (&args.out, args.format) {
        (Some(p), f) => write_or_print(Some(p), &render_report(&report, f.unwrap_or(Format::Json)))?,
        (None, Some(f)) => write_or_print(None, &render_report(&report, f))?,
        (None, None) => {}
    }
    println!("{}", report.summary_line());
    let c = &report.conv_totals;
    println!("conv-only: convs {} params {} flops {} mac {}", c.nodes, c.params, c.flops, c.mac);
    Ok(())
}

const TOTAL_FIELDS: [&str; 7] = ["params", "flops", "mac", "conv_mac", "activation_elems", "activation_bytes", "nodes"];

fn total_values(r: &CostReport) -> [u64; 7] {
    let t: &Totals = &r.totals;
    [t.params, t.flops, t.mac, r.conv_totals.mac, t.activation_elems, t.activation_bytes, t.nodes]
}

fn compare(args: CompareArgs) -> Result<()> {
    let mut reports = Vec::new();
    for which in [&args.a, &args.b] {
        let net = resolve(which)?;
        let input = input_shape(&net, args.input.as_deref())?;
        reports.push(network_report(&net.graph, &net.name, input, ReportOptions { dtype_bytes: args.dtype.bytes(), ..Default::default() })?);
    }
    let (va, vb) = (total_values(&reports[0]), total_values(&reports[1]));
    let rows: Vec<(&str, u64, u64, i128, Option<f64>)> = TOTAL_FIELDS
        .iter()
        .zip(va.iter().zip(&vb))
        .map(|(&f, (&a, &b))| {
            let delta = b as i128 - a as i128;
            (f, a, b, delta, (a != 0).then(|| 100.0 * delta as f64 / a as f64))
        })
        .collect();
    let (na, nb) = (&reports[0].metadata.arch, &reports[1].metadata.arch);
    let text = match args.format {
        Format::Json => {
            let rows: Vec<_> = rows
                .iter()
                .map(|(f, a, b, d, p)| json!({"metric": f, "a": a, "b": b, "delta": *d as i64, "percent": p}))
                .collect();
            serde_json::to_string_pretty(&json!({"a": na, "b": nb, "rows": rows}))?
        }
        Format::Csv => {
            let mut s = String::from("metric,a,b,delta,percent\n");
            for (f, a, b, d, p) in &rows {
                let _ = writeln!(s, "{f},{a},{b},{d},{}", p.map(|p| format!("{p:.4}")).unwrap_or_default());
            }
            s
        }
        Format::Table => {
            let mut s = format!("# a={na} b={nb}\n{:<18} {:>16} {:>16} {:>16} {:>10}\n", "metric", "a", "b", "delta", "pct");
            for (f, a, b, d, p) in &rows {
                let pct = p.map(|p| format!("{p:+.2}%")).unwrap_or_else(|| "n/a".into());
                let _ = writeln!(s, "{f:<18} {a:>16} {b:>16} {d:>+16} {pct:>10}");
            }
            s
        }
    };
    write_or_print(args.out.as_deref(), &text)
}

fn energy(args: EnergyArgs) -> Result<()> {
    let flops = match (args.flops, &args.report) {
        (Some(f), _) => f,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            CostReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))?.flops_per_image()
        }
        (None, None) => bail!("pass --report or --flops"),
    };
    let log = match (args.watts, &args.power_log) {
        (Some(w), _) => PowerLog::constant(w, 1)?,
        (None, Some(p)) => PowerLog::from_csv(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        (None, None) => bail!("pass --power-log or --watts"),
    };
    let e = efficiency_from_flops(flops, args.images, args.wall_seconds, &log)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&e)?,
        Format::Csv => format!(
            "images,wall_seconds,flops_per_image,fps,avg_power_w,joules_per_image,gflops_per_second\n{},{},{},{},{},{},{}\n",
            e.images, e.wall_seconds, e.flops_per_image, e.fps, e.avg_power_w, e.joules_per_image, e.gflops_per_second
        ),
        Format::Table => format!(
            "fps {:.4}\navg_power_w {:.4}\njoules_per_image {:.6}\ngflops_per_second {:.4}\n",
            e.fps, e.avg_power_w, e.joules_per_image, e.gflops_per_second
        ),
    };
    write_or_print(args.out.as_deref(), &text)
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let net = args.net.load()?;
    let input = input_shape(&net, args.net.input.as_deref())?;
    let report = match args.dtype {
        DType::F32 => engine::grad_check::<f32>(&net.graph, input, args.seed, args.eps)?,
        DType::F64 => engine::grad_check::<f64>(&net.graph, input, args.seed, args.eps)?,
    };
    let threshold = args.threshold.unwrap_or(if args.dtype == DType::F64 { 1e-6 } else { 1e-3 });
    let pass = report.max_rel_error < threshold;
    let verdict = if pass { "PASS" } else { "FAIL" };
    match args.format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "arch": net.name, "max_rel_error": report.max_rel_error, "worst": report.worst,
                "analytic": report.analytic, "numeric": report.numeric, "checked": report.checked,
                "threshold": threshold, "pass": pass,
            }))?
        ),
        _ => println!(
            "{} max_rel_error {:.3e} at {} over {} params, threshold {threshold:e}: {verdict}",
            net.name, report.max_rel_error, report.worst, report.checked
        ),
    }
    if !pass {
        bail!("max relative error {:.3e} is not below {threshold:e}", report.max_rel_error);
    }
    Ok(())
}

fn train_demo(args: TrainArgs) -> Result<()> {
    let net = match &args.spec {
        Some(p) => load_spec(p)?,
        None => load_arch(&args.arch)?,
    };
    let classes = match net.graph.node(net.graph.output()).map(|n| n.kind) {
        Some(LayerKind::Linear(p)) => p.out_features,
        _ => bail!("{} does not end in a classifier", net.name),
    };
    let data = if args.synthetic {
        synthetic_batch(args.seed, args.images, classes)
    } else {
        let path = args.cifar.as_ref().expect("clap requires --cifar without --synthetic");
        load_cifar10_binary(path, args.images)?
    };
    if data.is_empty() {
        bail!("no training images");
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        bail!("label {bad} does not fit the {classes}-way classifier");
    }
    let (losses, store) = match args.dtype {
        DType::F32 => train_typed::<f32>(&net, &data, &args)?,
        DType::F64 => train_typed::<f64>(&net, &data, &args)?,
    };
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    fs::write(&args.weights, store).with_context(|| format!("writing {}", args.weights.display()))?;
    Ok(())
}

/// Trains and returns the losses with the encoded weights file.
fn train_typed<T: Element>(net: &Net, data: &Dataset, args: &TrainArgs) -> Result<(Vec<f64>, Vec<u8>)> {
    let images = data.images.cast::<T>();
    let shape = TensorShape { n: args.batch, ..images.shape };
    let mut state = TrainState::<T>::new(net.graph.clone(), shape, args.seed, args.lr, args.momentum)?;
    let losses = engine::train_loop(&mut state, &images, &data.labels, args.steps, args.batch, |_, _| {})?;
    let acc = engine::accuracy(&net.graph, &state.params, &images, &data.labels, 50)?;
    let means: Vec<String> = engine::window_means(&losses, args.window).iter().map(|v| format!("{v:.4}")).collect();
    println!("{} steps on {} images: window means [{}], train accuracy {:.2}%", losses.len(), data.len(), means.join(", "), 100.0 * acc);
    Ok((losses, weights::encode(&state.params, true)?))
}

/// Built-in architectures whose parameter layout matches `store` exactly.
fn matching_archs(store: &ParamStore<f64>) -> Result<Vec<Net>> {
    let mut found = Vec::new();
    for &name in KNOWN_ARCHS {
        let net = load_arch(name)?;
        let names_match = store.iter().all(|(node, _, _)| net.graph.node_by_name(node).is_some());
        let with_params = net.graph.nodes().filter(|n| n.kind.is_weighted() || n.kind == LayerKind::BatchNorm).count();
        let stored_nodes = store.iter().map(|(n, _, _)| n).collect::<std::collections::BTreeSet<_>>().len();
        if !names_match || with_params != stored_nodes {
            continue;
        }
        let input = net.default_input.expect("built-in archs have a default input");
        let fresh = engine::init_params::<f32>(&net.graph, input, 0)?;
        let same_dims = fresh.tensor_count() == store.tensor_count()
            && fresh.iter().zip(store.iter()).all(|((n1, f1, p1), (n2, f2, p2))| n1 == n2 && f1 == f2 && p1.dims == p2.dims);
        if same_dims {
            found.push(net);
        }
    }
    Ok(found)
}

fn connectivity(args: ConnectivityArgs) -> Result<()> {
    let store = weights::load::<f64>(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    let net = match (&args.arch, &args.spec) {
        (Some(a), _) => load_arch(a)?,
        (None, Some(p)) => load_spec(p)?,
        (None, None) => {
            let mut candidates = matching_archs(&store)?;
            match candidates.len() {
                1 => candidates.remove(0),
                0 => bail!("weights match no built-in architecture; pass --arch or --spec"),
                _ => bail!(
                    "weights match several architectures ({}); pass --arch",
                    candidates.iter().map(|n| n.name.as_str()).collect::<Vec<_>>().join(", ")
                ),
            }
        }
    };
    let m = connectivity_matrix(&net.graph, &args.module, &store)?;
    write_or_print(args.out.as_deref(), &m.to_csv())?;
    if args.out.is_some() {
        for s in aggregation_summary(&m) {
            println!("{}: shallow {:.4} deep {:.4}", s.target, s.shallow_influence, s.deep_influence);
        }
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let net = load_arch(&args.arch)?;
    write_or_print(args.out.as_deref(), &GraphSpec::to_json(&net.graph))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CONVCOST_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("CONVCOST_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare(a),
        Command::Energy(a) => energy(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::TrainDemo(a) => train_demo(a),
        Command::Connectivity(a) => connectivity(a),
        Command::Export(a) => export(a),
        Command::Archs => {
            for name in KNOWN_ARCHS {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
