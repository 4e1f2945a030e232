//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gcmc_core::codec::{lambda_index, CodecModel, ModelConfig, LAMBDA_PRESETS};
use gcmc_core::context::ContextModel;
use gcmc_core::metrics::{ms_ssim, msssim_db, psnr};
use gcmc_core::params::ParamStore;
use gcmc_core::train::TrainConfig;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{self, KeyValues};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::{atomic, eval, imageio, inspect, trainer};

#[derive(Debug, Parser)]
#[command(name = "gcmc", version, about = "Learned image codec with a gated 3D context model")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// Compress an image.
    Encode(EncodeArgs),
    /// Decompress a stream to a PPM image.
    Decode(DecodeArgs),
    /// Rate-distortion evaluation of one or more checkpoints.
    Eval(EvalArgs),
    /// Print a stream header and/or write the context coverage report.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of .ppm/.png training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and CSV files.
    #[arg(long)]
    pub out: PathBuf,
    /// key = value file overriding model and training defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rate point recorded in the header (default: the checkpoint's).
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Original image for MS-SSIM and PSNR.
    #[arg(long)]
    pub original: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoints, one per rate point.
    #[arg(long, num_args = 1.., required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Stream whose header is printed.
    pub input: Option<PathBuf>,
    /// Checkpoint whose context model is audited (default: a fresh one).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Write the causal-coverage CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::usage(format!("{}: file not found", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::usage(format!("{}: {what} not found", path.display())))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    require_file(path)?;
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::usage("--threads must be positive"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already configured: {e}");
        }
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data, "dataset directory")?;
    let kv = match &a.config {
        Some(p) => {
            require_file(p)?;
            KeyValues::load(p)?
        }
        None => KeyValues::default(),
    };
    config::check_keys(&kv, &[]).map_err(Error::usage)?;
    let mut ck = match &a.model {
        Some(p) => {
            require_dir(p, "checkpoint")?;
            let mut ck = Checkpoint::load(p)?;
            ck.train = config::train_config(&kv, ck.train).map_err(Error::usage)?;
            ck
        }
        None => {
            let model_config = config::model_config(&kv, ModelConfig::desk()).map_err(Error::usage)?;
            let train = config::train_config(&kv, TrainConfig::default()).map_err(Error::usage)?;
            let model = CodecModel::new(model_config, &mut ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(train.seed)))?;
            Checkpoint::new(model, train)
        }
    };
    if let Some(l) = a.lambda {
        ck.train.lambda = l;
    }
    if let Some(s) = a.seed {
        ck.train.seed = s;
    }
    ck.train.validate().map_err(|e| Error::usage(e.to_string()))?;
    let data = Dataset::open(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let until = trainer::total_steps(&ck.train, data.len());
    info!("training {} images for {} steps at lambda {}", data.len(), until, ck.train.lambda);
    let result = trainer::train(&mut ck, &data, until, |_| {});
    let ck_path = a.out.join("checkpoint");
    match result {
        Ok(history) => {
            ck.save(&ck_path)?;
            trainer::write_loss_csv(&a.out.join("loss.csv"), &history)?;
            let pts = eval::rd_sweep(&data, &[(ck.train.lambda, &ck.model)])?;
            let mut rows = pts.clone();
            rows.extend(eval::means(&pts));
            eval::write_rd_csv(&a.out.join("rd.csv"), &rows)?;
            if let Some(last) = history.last() {
                println!("step {} loss {:.6} rate {:.4} bpp d {:.6}", last.step, last.loss, last.rate_bpp, last.distortion_d);
            }
            println!("checkpoint {}", ck_path.display());
            Ok(())
        }
        Err(e) => {
            if matches!(e, Error::Diverged { .. }) {
                ck.save(&ck_path)?;
                warn!("kept last good checkpoint at step {}", ck.step);
            }
            Err(e)
        }
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    require_dir(path, "checkpoint")?;
    Checkpoint::load(path)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    require_file(&a.input)?;
    let ck = load_model(&a.model)?;
    let x = imageio::read_image(&a.input)?;
    let index = lambda_index(a.lambda.unwrap_or(ck.train.lambda));
    let start = Instant::now();
    let c = ck.model.compress(&x, index)?;
    let elapsed = start.elapsed();
    atomic::write_bytes(&a.out, &c.bytes)?;
    let pixels = (x.dim(1) * x.dim(2)) as f64;
    println!("size {}x{}", x.dim(2), x.dim(1));
    println!("bytes {}", c.bytes.len());
    println!("bpp {:.6}", c.bytes.len() as f64 * 8.0 / pixels);
    println!("estimate_bpp {:.6}", c.estimated_bits / pixels);
    println!("lambda {}", LAMBDA_PRESETS[index as usize]);
    println!("encode_ms {:.1}", elapsed.as_secs_f64() * 1e3);
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let bytes = read_file(&a.input)?;
    let ck = load_model(&a.model)?;
    let original = a.original.as_deref().map(|p| require_file(p).and_then(|_| imageio::read_image(p))).transpose()?;
    let start = Instant::now();
    let d = ck.model.decompress(&bytes)?;
    let elapsed = start.elapsed();
    imageio::write_ppm(&a.out, &d.image)?;
    println!("size {}x{}", d.header.width, d.header.height);
    println!("decode_ms {:.1}", elapsed.as_secs_f64() * 1e3);
    if let Some(x) = original {
        let xh = imageio::quantize8(&d.image);
        if x.shape() != xh.shape() {
            return Err(Error::usage(format!("original is {:?}, decoded {:?}", x.shape(), xh.shape())));
        }
        let m = ms_ssim(&x, &xh)?;
        println!("msssim {m:.6}");
        println!("msssim_db {:.4}", msssim_db(m));
        println!("psnr {:.4}", psnr(&x, &xh)?);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_dir(&a.data, "dataset directory")?;
    let cks = a.model.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let data = Dataset::open(&a.data)?;
    let models: Vec<(f64, &CodecModel)> = cks.iter().map(|c| (c.train.lambda, &c.model)).collect();
    let pts = eval::rd_sweep(&data, &models)?;
    let means = eval::means(&pts);
    for m in &means {
        println!("lambda {} bpp {:.5} msssim {:.6} msssim_db {:.4} psnr {:.4}", m.lambda, m.bpp, m.msssim, m.msssim_db, m.psnr);
    }
    let mut rows = pts;
    rows.extend(means);
    eval::write_rd_csv(&a.out, &rows)
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    if a.input.is_none() && a.out.is_none() {
        return Err(Error::usage("give a stream to inspect and/or --out for the coverage report"));
    }
    if let Some(p) = &a.input {
        let bytes = read_file(p)?;
        print!("{}", inspect::header_report(&bytes)?);
    }
    if let Some(out) = &a.out {
        let (store, model) = match &a.model {
            Some(p) => {
                let ck = load_model(p)?;
                (ck.model.store.clone(), ck.model.context.clone())
            }
            None => {
                let mut store = ParamStore::new();
                let model = ContextModel::new(&mut store, "ctx", ModelConfig::desk().context, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
                (store, model)
            }
        };
        let rows = inspect::coverage(&model, &store, a.seed)?;
        let causal: Vec<_> = rows.iter().filter(|r| r.is_causal).collect();
        let covered = causal.iter().filter(|r| r.structural && r.sensitivity > 0.0).count();
        let leaks = rows.iter().filter(|r| !r.is_causal && r.sensitivity != 0.0).count();
        inspect::write_coverage_csv(out, &rows)?;
        println!("causal offsets {} covered {} leaks {}", causal.len(), covered, leaks);
    }
    Ok(())
}
