use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gleo::evaluation::{evaluate_dataset, load_exclude_list, EvalOptions, NetworkDetector};
use gleo::inference::{top_k_keypoints, weighted_score_map, write_keypoints, DEFAULT_TOP_K};
use gleo::losses::Objective;
use gleo::model::{Detector, ModelConfig};
use gleo::training::{load_image_dir, synth_dataset, synth_shapes, train, write_toy_hpatches, TrainConfig, TrainOutputs};
use gleo::{DenseMap, Image};

#[derive(Parser, Debug)]
#[command(name = "gleo", version, about = "Train, run and evaluate a guided local-entropy keypoint detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector and write a checkpoint plus a JSON-lines log.
    Train {
        /// Directory of training images, or `synth` for generated shapes.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss: Option<Objective>,
        /// Iterations (default 2000).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value training config; explicit flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training log path (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        image_size: Option<usize>,
        /// tiny or vgg16-shape.
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Write the top-k keypoints of one image as CSV.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        topk: usize,
        #[arg(long, default_value_t = 0)]
        nms: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeatability and matching accuracy on an HPatches-layout dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        topk: usize,
        #[arg(long, default_value_t = 0)]
        nms: usize,
        /// File listing sequences to leave out, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// key=value report path; JSON goes next to it with a .json extension.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Externally computed descriptors, <dir>/<sequence>/<n>.desc.
        #[arg(long)]
        descriptors: Option<PathBuf>,
        /// Write detected keypoints to <dir>/<sequence>/<n>.csv.
        #[arg(long)]
        dump_keypoints: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render the (optionally guider-weighted) score map as a grayscale PNG.
    Scoremap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, action = ArgAction::Set, default_value_t = false)]
        weighted: bool,
    },
    /// Generate synthetic images, or a toy dataset in HPatches layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write `count` illumination and `count` viewpoint sequences instead.
        #[arg(long)]
        hpatches: bool,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<gleo::Error> for Failure {
    fn from(e: gleo::Error) -> Self {
        use gleo::Error as E;
        match e {
            E::NonFinite(_) | E::Singular(_) | E::PointAtInfinity(_) => Failure::Numeric(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(gleo::Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn deterministic() -> bool {
    std::env::var("GLEO_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn load_model(path: &Path) -> Result<Detector<f32>, Failure> {
    Detector::load(path).map_err(with_path(path))
}

/// Score and weighted score maps at the image's own size (edges padded to
/// the grid internally).
fn score_maps(det: &Detector<f32>, img: &Image<f32>) -> Result<(DenseMap<f32>, DenseMap<f32>), Failure> {
    let (h, w) = img.dims();
    let out = det.forward(&img.pad_to_grid())?;
    let sw = weighted_score_map(&out.score_map, &out.weight_map)?;
    Ok((out.score_map.crop(0, 0, h, w)?, sw.crop(0, 0, h, w)?))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train { data, out, loss, iters, seed, config, log, image_size, backbone } => {
            let mut cfg = TrainConfig::default();
            if let Some(p) = &config {
                cfg = TrainConfig::load(p).map_err(with_path(p))?;
            }
            if let Some(v) = loss {
                cfg.objective = v;
            }
            if let Some(v) = iters {
                cfg.iterations = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = image_size {
                cfg.image_size = v;
            }
            if let Some(b) = backbone {
                cfg.model = ModelConfig::preset(&b).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let images: Vec<Image<f32>> = if data == "synth" {
                synth_dataset(&cfg)?
            } else {
                let dir = PathBuf::from(&data);
                let imgs = load_image_dir(&dir).map_err(with_path(&dir))?;
                if imgs.is_empty() {
                    return Err(Failure::Data(format!("{data}: no images found")));
                }
                imgs
            };
            let log = log.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".log.jsonl");
                PathBuf::from(s)
            });
            log::info!("training {} for {} iterations on {} images", cfg.objective, cfg.iterations, images.len());
            let outputs = TrainOutputs { checkpoint: Some(out.clone()), log: Some(log.clone()) };
            let (_, records) = train(&images, &cfg, &outputs)?;
            let skipped = records.iter().filter(|r| !r.stepped).count();
            println!("checkpoint={}", out.display());
            println!("log={}", log.display());
            println!("iterations={} skipped_steps={skipped}", records.len());
            Ok(())
        }
        Command::Detect { model, image, topk, nms, out } => {
            if topk == 0 {
                return Err(Failure::Usage("--topk must be at least 1".into()));
            }
            let det = load_model(&model)?;
            let img = Image::<f32>::load(&image).map_err(with_path(&image))?;
            let (_, sw) = score_maps(&det, &img)?;
            let kps = top_k_keypoints(&sw, topk, nms);
            write_keypoints(&out, &kps).map_err(with_path(&out))?;
            println!("keypoints={} out={}", kps.len(), out.display());
            Ok(())
        }
        Command::Eval { model, dataset, eps, topk, nms, exclude, report, descriptors, dump_keypoints, jobs } => {
            if topk == 0 || jobs == 0 {
                return Err(Failure::Usage("--topk and --jobs must be at least 1".into()));
            }
            let det = load_model(&model)?;
            let exclude = match &exclude {
                Some(p) => load_exclude_list(p).map_err(with_path(p))?,
                None => Vec::new(),
            };
            let jobs = if deterministic() { 1 } else { jobs };
            let opts = EvalOptions { eps, exclude, descriptors, keypoint_dump: dump_keypoints, jobs };
            let net = NetworkDetector { detector: &det, top_k: topk, nms_radius: nms };
            let rep = evaluate_dataset(&net, &dataset, &opts).map_err(with_path(&dataset))?;
            let text = rep.to_text();
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
                let json = path.with_extension("json");
                std::fs::write(&json, rep.to_json()?).map_err(|e| Failure::Data(format!("{}: {e}", json.display())))?;
            }
            Ok(())
        }
        Command::Scoremap { model, image, out, weighted } => {
            let det = load_model(&model)?;
            let img = Image::<f32>::load(&image).map_err(with_path(&image))?;
            let (s, sw) = score_maps(&det, &img)?;
            let map = if weighted { sw } else { s };
            map.to_gray_image().save(&out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
            Ok(())
        }
        Command::Synth { out, count, size, seed, hpatches } => {
            if size == 0 || size % 8 != 0 {
                return Err(Failure::Usage(format!("--size {size} is not a positive multiple of 8")));
            }
            std::fs::create_dir_all(&out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if hpatches {
                write_toy_hpatches(&mut rng, &out, count, size)?;
            } else {
                let imgs: Vec<Image<f32>> = synth_shapes(&mut rng, count, size)?;
                for (i, img) in imgs.iter().enumerate() {
                    img.save(out.join(format!("{i:04}.png")))?;
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
