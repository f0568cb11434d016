//! `taisp` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O, 2 malformed input, 3 shape or
//! configuration problem (including bad command-line usage), 4 failed
//! verification, 5 runtime failure such as a diverging training run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use taisp::bench::{run_bench, BenchOptions, Precision};
use taisp::classic::{run_classic, run_demosaic, ClassicIspConfig, Engine};
use taisp::kv::KvFile;
use taisp::pipeline::{count_params, load_params, save_params, FastModel, PipelineConfig, PipelineParams};
use taisp::raw_io::{parse_raw, write_ppm, RawImage};
use taisp::training::{train, TrainConfig};
use taisp::verify::{all_passed, default_groups, format_results, run_groups};
use taisp::{Error, ErrorKind, Exec};

const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "taisp", version, about = "Task-aware RAW-to-RGB pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a RAW mosaic (RAWI or binary PGM) to a PPM image.
    Process(ProcessArgs),
    /// Train pipeline parameters on a surrogate objective.
    Train(TrainArgs),
    /// Report parameters, FLOPs and latency on synthetic input.
    Bench(BenchArgs),
    /// Run the built-in invariant suite.
    Verify,
    /// Summarize a parameter file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "taisp")]
    engine: String,
    /// TAIP parameter file; freshly initialized parameters are used when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = "f64")]
    precision: String,
    /// Initialization seed when no parameter file is given.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Where the trained TAIP file goes; reports are written next to it.
    #[arg(long)]
    output: PathBuf,
    /// Starting parameters; freshly initialized when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 3840)]
    width: usize,
    #[arg(long, default_value_t = 2160)]
    height: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value = "f32")]
    precision: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    params: PathBuf,
    /// Configuration the file was trained for (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Io => 1,
            ErrorKind::Format => 2,
            ErrorKind::Shape => 3,
            ErrorKind::Runtime => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure {
        code: 1,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn load_kv(path: Option<&Path>) -> Result<KvFile, Failure> {
    match path {
        None => Ok(KvFile::default()),
        Some(p) => {
            let bytes = read(p)?;
            let text = String::from_utf8(bytes).map_err(|_| Failure {
                code: 3,
                message: format!("{} is not UTF-8", p.display()),
            })?;
            Ok(KvFile::parse(&text)?)
        }
    }
}

fn reject_unused(kv: &KvFile) -> CmdResult {
    let unused = kv.unused_keys();
    if unused.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config keys: {}", unused.join(", "))).into())
    }
}

/// Sets up the thread pool and returns the matching policy.
fn exec_for(threads: usize) -> Exec {
    if threads == 1 {
        return Exec::Sequential;
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        // A second call fails harmlessly; the first configuration wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Exec::Parallel
}

fn load_or_init(path: Option<&Path>, config: &PipelineConfig) -> Result<PipelineParams, Failure> {
    match path {
        Some(p) => Ok(load_params(&read(p)?, config)?),
        None => Ok(PipelineParams::init(config)?),
    }
}

fn process(args: ProcessArgs) -> CmdResult {
    let engine: Engine = args.engine.parse()?;
    let precision: Precision = args.precision.parse()?;
    let exec = exec_for(args.common.threads);
    let kv = load_kv(args.common.config.as_deref())?;
    let mut config = PipelineConfig::from_kv(&kv)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let classic = ClassicIspConfig::from_kv(&kv)?;
    reject_unused(&kv)?;
    let raw: RawImage = parse_raw(&read(&args.input)?)?;
    let start = Instant::now();
    let ppm = match engine {
        Engine::Taisp => {
            let params = load_or_init(args.params.as_deref(), &config)?;
            match precision {
                Precision::F32 => write_ppm(&FastModel::<f32>::new(&params, &config)?.run(&raw, exec)?),
                Precision::F64 => write_ppm(&FastModel::<f64>::new(&params, &config)?.run(&raw, exec)?),
            }
        }
        Engine::Classic => write_ppm(&run_classic(&raw, &classic, exec)?),
        Engine::Demosaic => write_ppm(&run_demosaic(&raw, exec)?),
    };
    let ms = start.elapsed().as_secs_f64() * 1e3;
    write(&args.output, &ppm)?;
    println!(
        "{}x{} {engine} {ms:.1} ms -> {}",
        raw.width,
        raw.height,
        args.output.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(args: TrainArgs) -> CmdResult {
    let exec = exec_for(args.common.threads);
    let kv = load_kv(args.common.config.as_deref())?;
    let config = PipelineConfig::from_kv(&kv)?;
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    reject_unused(&kv)?;
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    let batch = train_cfg.load_batch()?;
    let mut params = load_or_init(args.params.as_deref(), &config)?;
    let report = train(&mut params, &config, &train_cfg, &batch, exec)?;
    write(&args.output, &save_params(&params))?;
    let text = report.to_text();
    write(&with_suffix(&args.output, ".report.txt"), text.as_bytes())?;
    write(&with_suffix(&args.output, ".report.csv"), report.to_csv().as_bytes())?;
    print!("{text}");
    Ok(())
}

fn bench(args: BenchArgs) -> CmdResult {
    let exec = exec_for(args.common.threads);
    let kv = load_kv(args.common.config.as_deref())?;
    let mut config = PipelineConfig::from_kv(&kv)?;
    reject_unused(&kv)?;
    config.seed = args.seed;
    let params = load_or_init(args.params.as_deref(), &config)?;
    let opts = BenchOptions {
        width: args.width,
        height: args.height,
        reps: args.reps,
        warmup: args.warmup,
        precision: args.precision.parse()?,
        exec,
        seed: args.seed,
    };
    println!("{}", run_bench(&params, &config, &opts)?);
    Ok(())
}

fn verify() -> CmdResult {
    let results = run_groups(&default_groups());
    print!("{}", format_results(&results));
    if all_passed(&results) {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: "verification failed".into(),
        })
    }
}

fn inspect(args: InspectArgs) -> CmdResult {
    let kv = load_kv(args.config.as_deref())?;
    let config = PipelineConfig::from_kv(&kv)?;
    reject_unused(&kv)?;
    let params = load_params(&read(&args.params)?, &config)?;
    println!("{:<18} {:<14} {:>6} {:>12} {:>12} {:>12}", "tensor", "shape", "count", "min", "max", "mean");
    for t in &params.tensors {
        let n = t.data.len();
        let min = t.data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = t.data.iter().sum::<f64>() / n as f64;
        let shape = format!("{:?}", t.shape);
        println!("{:<18} {:<14} {:>6} {min:>12.5e} {max:>12.5e} {mean:>12.5e}", t.name, shape, n);
    }
    let total = params.scalar_count();
    println!("total {total} (config expects {})", count_params(&config));
    println!("checksum {}", params.checksum());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Process(a) => process(a),
        Command::Train(a) => train_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Verify => verify(),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
