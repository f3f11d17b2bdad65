//! Command-line front end: encode, decode, RD evaluation, and training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcac::cloud_io::{self, VoxelizedCloud};
use pcac::codec::{decode_bitstream, encode_cloud, EncodeOptions};
use pcac::coding::bitstream;
use pcac::coding::params::{load_params, save_params, ModelParams};
use pcac::error::{Error, Result};
use pcac::eval::{monotonicity_warnings, rd_sweep, RdPoint};
use pcac::predictor::PredictorKind;
use pcac::trainer::{self, Corpus, TrainConfig};

#[derive(Parser)]
#[command(
    name = "pcac",
    about = "Critically sampled point cloud attribute codec",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a PLY cloud's colors into a bitstream.
    Encode(EncodeArgs),
    /// Decode a bitstream against its geometry PLY.
    Decode(DecodeArgs),
    /// Sweep quantizer steps and report rate/PSNR points as CSV.
    Eval(EvalArgs),
    /// Train model parameters on a corpus of PLY clouds.
    Train(TrainArgs),
}

#[derive(Args)]
struct CommonGeo {
    /// Octree depth (bits per axis) of the input cloud.
    #[arg(long, default_value_t = 10)]
    depth: u8,
    /// Root level of the transform.
    #[arg(long, default_value_t = 4)]
    l0: u8,
}

#[derive(Args)]
struct EncodeArgs {
    /// Input PLY (x,y,z + red,green,blue).
    #[arg(long)]
    input: PathBuf,
    /// Output bitstream path.
    #[arg(long)]
    output: PathBuf,
    /// Model parameters file (defaults are used when omitted).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Quantizer step override.
    #[arg(long)]
    delta: Option<f64>,
    /// Predictor override: none | linear | gpcc | pbf.
    #[arg(long, value_parser = parse_predictor)]
    predictor: Option<PredictorKind>,
    #[command(flatten)]
    geo: CommonGeo,
}

#[derive(Args)]
struct DecodeArgs {
    /// Input bitstream.
    #[arg(long)]
    input: PathBuf,
    /// Geometry PLY the stream was encoded against.
    #[arg(long)]
    geometry: PathBuf,
    /// Output PLY path for the reconstructed cloud.
    #[arg(long)]
    output: PathBuf,
    /// Model parameters file (must match the encoder's).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Advisory predictor flag; the stream header wins on mismatch.
    #[arg(long, value_parser = parse_predictor)]
    predictor: Option<PredictorKind>,
}

#[derive(Args)]
struct EvalArgs {
    /// Input PLY.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    csv: PathBuf,
    /// Quantizer steps to sweep (repeatable).
    #[arg(long, required = true)]
    delta: Vec<f64>,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Predictor override: none | linear | gpcc | pbf.
    #[arg(long, value_parser = parse_predictor)]
    predictor: Option<PredictorKind>,
    #[command(flatten)]
    geo: CommonGeo,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training PLY clouds.
    #[arg(long)]
    corpus: PathBuf,
    /// Output parameters file.
    #[arg(long)]
    output: PathBuf,
    /// Training configuration JSON (flags below override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial parameters (defaults when omitted).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Training log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Predictor to train when no init file is given.
    #[arg(long, default_value = "linear", value_parser = parse_predictor)]
    predictor: PredictorKind,
    #[command(flatten)]
    geo: CommonGeo,
}

fn parse_predictor(s: &str) -> std::result::Result<PredictorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_cloud_yuv(path: &Path, depth: u8) -> Result<VoxelizedCloud> {
    let cloud = cloud_io::load_ply(path, depth)?;
    cloud_io::rgb_to_yuv(&cloud)
}

fn params_or_default(
    path: &Option<PathBuf>,
    depth: u8,
    l0: u8,
    predictor: PredictorKind,
) -> Result<ModelParams> {
    match path {
        Some(p) => load_params(p),
        None => Ok(ModelParams::defaults(depth, l0, predictor)),
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_encode(args: EncodeArgs) -> Result<()> {
    let cloud = load_cloud_yuv(&args.input, args.geo.depth)?;
    let params = params_or_default(
        &args.params,
        args.geo.depth,
        args.geo.l0,
        args.predictor.unwrap_or(PredictorKind::Linear),
    )?;
    let result = encode_cloud(
        &cloud,
        &params,
        &EncodeOptions {
            step_override: args.delta,
            predictor_override: args.predictor,
        },
    )?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let tmp = args.output.with_extension("tmp");
    std::fs::write(&tmp, &result.bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &args.output).map_err(|e| Error::io(&args.output, e))?;
    let per_level: Vec<String> = result
        .stats
        .per_level_bits
        .iter()
        .map(|b| b.to_string())
        .collect();
    println!(
        "encoded {} points: {} payload bits, {:.4} bits/voxel, per-level bits [{}]",
        result.stats.point_count,
        result.stats.payload_bits,
        result.stats.bits_per_voxel,
        per_level.join(", ")
    );
    Ok(())
}

fn run_decode(args: DecodeArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let (header, _) = bitstream::read_header(&bytes)?;
    if let Some(flag) = args.predictor {
        if flag != header.predictor {
            eprintln!(
                "warning: --predictor {} ignored, stream header says {}",
                flag.name(),
                header.predictor.name()
            );
        }
    }
    let geometry = load_cloud_yuv(&args.geometry, header.depth)?;
    let params = params_or_default(
        &args.params,
        header.depth,
        header.root_level,
        header.predictor,
    )?;
    let decoded = decode_bitstream(&bytes, &geometry, &params)?;
    for w in &decoded.warnings {
        eprintln!("warning: {w}");
    }
    let rgb = cloud_io::yuv_to_rgb(&decoded.cloud)?;
    cloud_io::write_ply(&rgb, &args.output)?;
    println!(
        "decoded {} points at step {} to {}",
        decoded.cloud.len(),
        decoded.header.step,
        args.output.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let cloud = load_cloud_yuv(&args.input, args.geo.depth)?;
    let params = params_or_default(
        &args.params,
        args.geo.depth,
        args.geo.l0,
        args.predictor.unwrap_or(PredictorKind::Linear),
    )?;
    let points = rd_sweep(&cloud, &params, &args.delta, args.predictor)?;
    for w in monotonicity_warnings(&points) {
        eprintln!("warning: {w}");
    }
    let mut csv = String::from(RdPoint::CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    write_atomic(&args.csv, &csv)?;
    println!(
        "wrote {} rate-distortion points to {}",
        points.len(),
        args.csv.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::ParamsSchema {
                field: format!("line {} column {}", e.line(), e.column()),
                msg: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let init = match &args.init {
        Some(p) => load_params(p)?,
        None => {
            // crops span exactly the trainable levels
            let p = ModelParams::defaults(args.geo.depth, args.geo.l0, args.predictor);
            let levels = p.level_count() as u8;
            if levels != cfg.crop_bits {
                return Err(Error::Parameter(format!(
                    "depth {} minus l0 {} gives {levels} levels; crop_bits is {}",
                    args.geo.depth, args.geo.l0, cfg.crop_bits
                )));
            }
            p
        }
    };
    let corpus = Corpus::load_dir(&args.corpus, args.geo.depth)?;
    let (trained, log) = trainer::train(&corpus, &cfg, &init)?;
    save_params(&trained, &args.output)?;
    if let Some(log_path) = &args.log {
        write_atomic(log_path, &log.to_csv())?;
    }
    let last = log.rows.last();
    println!(
        "trained {} iterations, final J={:.6}, held-out J={:.6}, params -> {}",
        log.rows.len(),
        last.map_or(f64::NAN, |r| r.j),
        last.map_or(f64::NAN, |r| r.heldout_j),
        args.output.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Encode(args) => run_encode(args),
        Command::Decode(args) => run_decode(args),
        Command::Eval(args) => run_eval(args),
        Command::Train(args) => run_train(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
