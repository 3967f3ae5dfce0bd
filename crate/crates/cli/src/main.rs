//! `preq`: quantize, run, extract, validate and inspect pre-quantized models.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use preq::doc::{self, DescriptorDocument};
use preq::graphir::{self, GraphError, GraphIR};
use preq::interp::{self, RunError};
use preq::patterns::{self, ExtractError, RescaleCodification};
use preq::qmath::QTensor;
use preq::quantizer::{self, CalibrationProfile, QuantizeError};
use preq::validate::{self, ValidateError};

/// Process exit codes. Stable and disjoint.
mod exit {
    pub const IO: u8 = 1;
    pub const CALIBRATION: u8 = 2;
    pub const INVALID: u8 = 3;
    pub const OVERFLOW: u8 = 4;
    pub const PATTERN: u8 = 5;
    pub const THRESHOLD: u8 = 6;
}

#[derive(Parser)]
#[command(name = "preq", about = "Pre-quantized int8 models in standard ONNX operators")]
struct Cli {
    /// Debug logging; also prints the version.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Codification {
    #[value(name = "2mul")]
    TwoMul,
    #[value(name = "1mul")]
    OneMul,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate and quantize an fp32 model into an ONNX file.
    Quantize {
        /// fp32 model document (JSON).
        model: PathBuf,
        /// Calibration tensor files.
        samples: Vec<PathBuf>,
        /// Use this calibration profile instead of profiling samples.
        #[arg(long, conflicts_with = "samples")]
        profile: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "2mul")]
        codification: Codification,
        #[arg(long)]
        out: PathBuf,
        /// Human-readable quantization report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Execute a model with the reference interpreter.
    Run {
        model: PathBuf,
        input: PathBuf,
        /// Output tensor file; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover hardware layer descriptors.
    Extract {
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include weight and bias values, not just their digests.
        #[arg(long)]
        include_data: bool,
    },
    /// Compare a quantized model against its fp32 reference.
    Validate {
        /// fp32 model document (JSON).
        float_model: PathBuf,
        model: PathBuf,
        samples: Vec<PathBuf>,
        /// Largest tolerated error, in output quantization steps.
        #[arg(long, default_value_t = 4.0)]
        max_error_steps: f64,
    },
    /// Print the node table and initializer summary.
    Inspect { model: PathBuf },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

fn with_code<E: Into<anyhow::Error>>(code: u8) -> impl FnOnce(E) -> Failure {
    move |e| Failure { code, error: e.into() }
}

fn io<E: Into<anyhow::Error>>(e: E) -> Failure {
    with_code(exit::IO)(e)
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(io)
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(io)
}

fn emit(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_tensors(paths: &[PathBuf]) -> Result<Vec<QTensor>, Failure> {
    if paths.is_empty() {
        return Err(io(anyhow!("no sample files given")));
    }
    let mut out = Vec::new();
    for p in paths {
        let parsed = doc::parse_tensors(&read(p)?)
            .with_context(|| format!("in {}", p.display()))
            .map_err(io)?;
        out.extend(parsed.into_iter().map(|(_, t)| t));
    }
    Ok(out)
}

fn load_float_model(path: &Path) -> Result<quantizer::FloatModelSpec, Failure> {
    doc::parse_model(&read(path)?)
        .with_context(|| format!("in {}", path.display()))
        .map_err(io)
}

/// Parse an ONNX file; `unsupported` is the exit code for well-formed
/// models outside the operator set.
fn load_graph(path: &Path, unsupported: u8) -> Result<GraphIR, Failure> {
    let bytes = read(path)?;
    graphir::parse(&bytes).map_err(|e| {
        let code = match e {
            GraphError::Parse { .. } => exit::IO,
            _ => unsupported,
        };
        with_code(code)(anyhow::Error::new(e).context(format!("in {}", path.display())))
    })
}

fn run_code(e: &RunError) -> u8 {
    match e {
        RunError::Overflow(_) | RunError::Domain(_) => exit::OVERFLOW,
        _ => exit::INVALID,
    }
}

fn quantize(
    model: &Path,
    samples: &[PathBuf],
    profile: Option<&Path>,
    codification: Codification,
    out: &Path,
    report: Option<&Path>,
) -> Outcome {
    let model = load_float_model(model)?;
    let profile: CalibrationProfile = match profile {
        Some(p) => doc::parse_profile(&read(p)?)
            .with_context(|| format!("in {}", p.display()))
            .map_err(io)?,
        None => {
            let samples = load_tensors(samples)?;
            quantizer::calibrate(&model, &samples).map_err(quantize_failure)?
        }
    };
    let codification = match codification {
        Codification::TwoMul => RescaleCodification::TwoMul,
        Codification::OneMul => RescaleCodification::OneMul,
    };
    let (g, rep) = quantizer::quantize_model(&model, &profile, codification).map_err(quantize_failure)?;
    for l in rep.layers.iter().filter(|l| l.bias_saturated > 0) {
        log::warn!("layer `{}`: {} bias value(s) saturated", l.name, l.bias_saturated);
    }
    let bytes = graphir::serialize(&g).map_err(with_code(exit::INVALID))?;
    write(out, &bytes)?;
    if let Some(r) = report {
        write(r, doc::render(&rep).as_bytes())?;
    }
    Ok(())
}

fn quantize_failure(e: QuantizeError) -> Failure {
    let code = match e {
        QuantizeError::Model(_) => exit::IO,
        _ => exit::CALIBRATION,
    };
    with_code(code)(e)
}

fn run(model: &Path, input: &Path, out: Option<&Path>) -> Outcome {
    let g = load_graph(model, exit::INVALID)?;
    let tensors = doc::parse_tensors(&read(input)?)
        .with_context(|| format!("in {}", input.display()))
        .map_err(io)?;
    let mut inputs: BTreeMap<String, QTensor> = tensors.into_iter().collect();
    // a lone tensor binds to a lone graph input whatever its name
    if let ([vi], 1) = (&g.inputs[..], inputs.len()) {
        if !inputs.contains_key(&vi.name) {
            let t = inputs.pop_first().expect("one tensor").1;
            inputs.insert(vi.name.clone(), t);
        }
    }
    let result = interp::run(&g, &inputs).map_err(|e| with_code(run_code(&e))(e))?;
    if result.cast_inexact > 0 {
        log::warn!("{} int32 value(s) were not exact as float32", result.cast_inexact);
    }
    let text = doc::render_tensors(g.outputs.iter().map(|vi| (vi.name.as_str(), &result.outputs[&vi.name])));
    emit(out, &text)
}

fn extract(model: &Path, out: Option<&Path>, include_data: bool) -> Outcome {
    let g = load_graph(model, exit::PATTERN)?;
    let descs = patterns::extract(&g).map_err(|e: ExtractError| with_code(exit::PATTERN)(e))?;
    let docs: Vec<DescriptorDocument> = descs.iter().map(|d| DescriptorDocument::new(d, include_data)).collect();
    emit(out, &doc::render(&docs))
}

fn validate_cmd(float_model: &Path, model: &Path, samples: &[PathBuf], max_steps: f64) -> Outcome {
    let fm = load_float_model(float_model)?;
    let g = load_graph(model, exit::INVALID)?;
    let samples = load_tensors(samples)?;
    let report = validate::compare(&fm, &g, &samples).map_err(|e| {
        let code = match &e {
            ValidateError::Run(r) => run_code(r),
            ValidateError::NoSamples => exit::IO,
            _ => exit::INVALID,
        };
        with_code(code)(e)
    })?;
    print!("{}", doc::render(&report));
    if report.max_error_steps > max_steps {
        return Err(with_code(exit::THRESHOLD)(anyhow!(
            "max error {} steps exceeds the limit of {max_steps}",
            report.max_error_steps
        )));
    }
    Ok(())
}

fn inspect(model: &Path) -> Outcome {
    let g = load_graph(model, exit::INVALID)?;
    let types = graphir::value_types(&g);
    let ty = |name: &str| types.get(name).map_or("?", |t| t.name());
    let mut s = String::new();
    let _ = writeln!(s, "graph {} (opset {})", g.name, g.opset_version);
    for vi in &g.inputs {
        let _ = writeln!(s, "input  {} {} {:?}", vi.name, vi.dtype, vi.fixed_shape().unwrap_or_default());
    }
    for vi in &g.outputs {
        let _ = writeln!(s, "output {} {} {:?}", vi.name, vi.dtype, vi.fixed_shape().unwrap_or_default());
    }
    for (k, v) in &g.metadata {
        let _ = writeln!(s, "meta   {k} = {v}");
    }
    let _ = writeln!(s, "\nnodes:");
    let _ = writeln!(s, "  {:<28} {:<15} {:<60} outputs", "name", "op", "inputs");
    for n in &g.nodes {
        let ins: Vec<String> = n
            .inputs
            .iter()
            .map(|i| if i.is_empty() { "-".into() } else { format!("{i}:{}", ty(i)) })
            .collect();
        let outs: Vec<String> = n.outputs.iter().map(|o| format!("{o}:{}", ty(o))).collect();
        let _ = writeln!(s, "  {:<28} {:<15} {:<60} {}", n.name, n.op_type.as_str(), ins.join(" "), outs.join(" "));
    }
    let _ = writeln!(s, "\ninitializers:");
    for (name, t) in &g.initializers {
        let summary = match t.scalar_value() {
            Some(v) if t.len() == 1 => format!("= {v}"),
            _ => {
                let vals: Vec<f64> = (0..t.len()).map(|i| t.data().get_f64(i)).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                format!("range [{lo}, {hi}]")
            }
        };
        let _ = writeln!(s, "  {:<28} {:<8} {:<16} {summary}", name, t.dtype().name(), format!("{:?}", t.shape()));
    }
    print!("{s}");

    let diags = graphir::validate(&g);
    for d in &diags {
        eprintln!("{d}");
    }
    if diags.iter().any(|d| d.severity == graphir::Severity::Error) {
        return Err(with_code(exit::INVALID)(anyhow!("graph failed validation")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::IO } else { 0 });
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.verbose {
        eprintln!("preq {}", env!("CARGO_PKG_VERSION"));
    }

    let outcome = match &cli.command {
        Command::Quantize {
            model,
            samples,
            profile,
            codification,
            out,
            report,
        } => quantize(model, samples, profile.as_deref(), *codification, out, report.as_deref()),
        Command::Run { model, input, out } => run(model, input, out.as_deref()),
        Command::Extract {
            model,
            out,
            include_data,
        } => extract(model, out.as_deref(), *include_data),
        Command::Validate {
            float_model,
            model,
            samples,
            max_error_steps,
        } => validate_cmd(float_model, model, samples, *max_error_steps),
        Command::Inspect { model } => inspect(model),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
