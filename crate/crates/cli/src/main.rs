use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kpvc::codec::QuantStep;
use kpvc::container::Container;
use kpvc::frame_io;
use kpvc::pipeline::{decode_sequence, encode_sequence, DecodeOptions, EncodeOptions, KeyframeInput, Models, RdReport};
use kpvc::weights::WeightStore;
use kpvc::{Error, Exec, ModelConfig, Tensor};

#[derive(Parser)]
#[command(name = "kpvc", version, about = "Keypoint-driven human video codec")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a frame sequence into a container.
    Encode(EncodeArgs),
    /// Decode a container into frames and vertex sets.
    Decode(DecodeArgs),
    /// Print the container header and per-frame bits as JSON.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print bitrate accounting, with PSNR when a reference is given.
    RdReport {
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory or glob of the original frames.
        #[arg(long, requires = "weights")]
        reference: Option<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write a seeded random weight file for a configuration.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// TOML model configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Depth bins, overriding the configuration.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Frame directory or glob pattern; frames are taken in name order.
    #[arg(long)]
    input: String,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = QuantStep::DEFAULT.log2())]
    q_log2: u8,
    /// Frame rate as A/B or A.
    #[arg(long, default_value = "25/1")]
    fps: String,
    /// Pre-encoded key-reference payload to store opaquely.
    #[arg(long, requires = "keyframe_decoded")]
    keyframe_external: Option<PathBuf>,
    /// Image the external payload decodes to.
    #[arg(long, requires = "keyframe_external")]
    keyframe_decoded: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    frames_out: PathBuf,
    #[arg(long)]
    vertices_out: PathBuf,
    /// Decoded key-reference image for containers with an external payload.
    #[arg(long)]
    keyframe_sidecar: Option<PathBuf>,
    /// Also write each vertex set as CSV.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig, Error> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    Ok(cfg)
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig, Error> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(d) = self.depth {
            cfg.depth = d;
        }
        cfg.validate().map_err(Error::Config)?;
        Ok(cfg)
    }
}

fn load_models(path: &Path, cfg: &ModelConfig) -> Result<Models, Error> {
    Models::load(&WeightStore::load(path)?, cfg)
}

fn frame_paths(input: &str) -> Result<Vec<PathBuf>, Error> {
    let dir = Path::new(input);
    let paths = if dir.is_dir() {
        frame_io::list_frames(dir)?
    } else {
        let entries = glob::glob(input).map_err(|e| Error::Malformed(format!("pattern {input}: {e}")))?;
        let mut v = Vec::new();
        for e in entries {
            let p = e.map_err(|e| Error::Io(e.into()))?;
            if frame_io::is_frame_file(&p) {
                v.push(p);
            }
        }
        v.sort();
        v
    };
    if paths.is_empty() {
        return Err(Error::Malformed(format!("no frames match {input}")));
    }
    Ok(paths)
}

fn read_frames(input: &str) -> Result<Vec<Tensor>, Error> {
    frame_paths(input)?.iter().map(frame_io::read_frame).collect()
}

fn parse_fps(s: &str) -> Result<(u16, u16), Error> {
    let bad = || Error::Config(format!("fps {s:?} is not A/B with non-zero 16-bit integers"));
    let (n, d) = s.split_once('/').unwrap_or((s, "1"));
    let n: u16 = n.trim().parse().map_err(|_| bad())?;
    let d: u16 = d.trim().parse().map_err(|_| bad())?;
    if n == 0 || d == 0 {
        return Err(bad());
    }
    Ok((n, d))
}

fn encode(args: EncodeArgs, exec: Exec) -> Result<(), Error> {
    let cfg = args.model.resolve()?;
    let models = load_models(&args.weights, &cfg)?;
    let frames = read_frames(&args.input)?;
    let (fps_num, fps_den) = parse_fps(&args.fps)?;
    let keyframe = match (args.keyframe_external, args.keyframe_decoded) {
        (Some(payload), Some(decoded)) => KeyframeInput::External {
            payload: std::fs::read(payload)?,
            decoded: frame_io::read_frame(decoded)?,
        },
        _ => KeyframeInput::Png,
    };
    let opts = EncodeOptions {
        quant: QuantStep::new(args.q_log2)?,
        fps_num,
        fps_den,
        keyframe,
    };
    let enc = encode_sequence(&models, exec, &frames, &opts)?;
    std::fs::write(&args.out, &enc.bytes)?;
    println!("{}", enc.report.to_json());
    Ok(())
}

fn decode(args: DecodeArgs, exec: Exec) -> Result<(), Error> {
    let bytes = std::fs::read(&args.input)?;
    let header = Container::parse_header(&bytes)?;
    let mut cfg = load_config(args.config.as_deref())?;
    // the container fixes K and D; the weights must agree with them
    cfg.keypoints = header.keypoints as usize;
    cfg.depth = header.depth as usize;
    cfg.validate().map_err(Error::Config)?;
    let models = load_models(&args.weights, &cfg)?;
    let opts = DecodeOptions {
        keyframe_sidecar: args.keyframe_sidecar.as_deref().map(frame_io::read_frame).transpose()?,
        keep_motion: false,
    };
    let dec = decode_sequence(&models, exec, &bytes, &opts)?;
    std::fs::create_dir_all(&args.frames_out)?;
    std::fs::create_dir_all(&args.vertices_out)?;
    for (i, f) in dec.frames.iter().enumerate() {
        frame_io::write_frame(args.frames_out.join(format!("frame_{i:05}.png")), f)?;
    }
    // vertex sets exist for inter frames only, numbered by frame index
    for (i, v) in dec.vertices.iter().enumerate() {
        let stem = format!("vertices_{:05}", i + 1);
        v.save(args.vertices_out.join(format!("{stem}.s2dv")))?;
        if args.csv {
            v.write_csv(args.vertices_out.join(format!("{stem}.csv")))?;
        }
    }
    eprintln!(
        "decoded {} frames and {} vertex sets",
        dec.frames.len(),
        dec.vertices.len()
    );
    Ok(())
}

fn inspect(input: &Path) -> Result<(), Error> {
    let container = Container::parse(&std::fs::read(input)?)?;
    let report = RdReport::from_container(&container)?;
    let json = serde_json::json!({
        "header": container.header,
        "frames": report.frames,
        "keyframe_bytes": container.keyframe.len(),
        "total_bits": report.total_bits,
        "keyframe_bits": report.keyframe_bits,
        "keypoint_bits": report.keypoint_bits,
        "header_bits": report.header_bits,
        "per_frame_bits": report.per_frame_bits,
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("plain values"));
    Ok(())
}

fn rd_report(
    input: &Path,
    reference: Option<&str>,
    weights: Option<&Path>,
    model: &ModelArgs,
    exec: Exec,
) -> Result<(), Error> {
    let bytes = std::fs::read(input)?;
    let container = Container::parse(&bytes)?;
    let mut report = RdReport::from_container(&container)?;
    if let (Some(reference), Some(weights)) = (reference, weights) {
        let mut cfg = model.resolve()?;
        cfg.keypoints = container.header.keypoints as usize;
        cfg.depth = container.header.depth as usize;
        let models = load_models(weights, &cfg)?;
        let dec = decode_sequence(&models, exec, &bytes, &DecodeOptions::default())?;
        let originals: Vec<Tensor> = read_frames(reference)?
            .iter()
            .map(frame_io::quantize_frame)
            .collect::<Result<_, _>>()?;
        report = report.with_psnr(&dec.frames, &originals)?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn init_weights(seed: u64, out: &Path, model: &ModelArgs) -> Result<(), Error> {
    let cfg = model.resolve()?;
    let (_, store) = Models::random(&cfg, seed)?;
    store.save(out)?;
    eprintln!("wrote {} tensors to {}", store.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let exec = exec(cli.sequential);
    match cli.command {
        Command::Encode(args) => encode(args, exec),
        Command::Decode(args) => decode(args, exec),
        Command::Inspect { input } => inspect(&input),
        Command::RdReport {
            input,
            reference,
            weights,
            model,
        } => rd_report(&input, reference.as_deref(), weights.as_deref(), &model, exec),
        Command::InitWeights { seed, out, model } => init_weights(seed, &out, &model),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
