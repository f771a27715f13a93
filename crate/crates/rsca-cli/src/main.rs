mod commands;
mod imgio;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// Scene-text detection workflows: label generation, probability-map
/// decoding and reconstruction, polygon evaluation, gradient verification
/// and overlay rendering.
#[derive(Parser)]
#[command(name = "rsca", version)]
struct Cli {
    /// RNG seed; falls back to the RSCA_SEED env var, then 0
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-file parallelism
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate shrunk text-spine label masks from polygon annotations
    GenLabels {
        /// Directory of annotation files (.json canonical, .txt comma-separated)
        #[arg(long)]
        annotations: PathBuf,
        /// Output directory for GRD1 masks and summary.json
        #[arg(long)]
        out: PathBuf,
        /// Shrink ratio at epoch 0
        #[arg(long, default_value_t = 0.4)]
        r_a: f64,
        /// Shrink ratio at max-epoch
        #[arg(long, default_value_t = 0.6)]
        r_b: f64,
        #[arg(long, default_value_t = 100)]
        max_epoch: usize,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        /// Image width assumed for .txt annotations
        #[arg(long)]
        txt_width: Option<usize>,
        /// Image height assumed for .txt annotations
        #[arg(long)]
        txt_height: Option<usize>,
    },
    /// Reconstruct detection polygons from probability maps or an image
    Detect {
        /// Directory of GRD1 probability maps (or a single .grd file)
        #[arg(long, conflicts_with = "image")]
        maps: Option<PathBuf>,
        /// PNG or PPM image to run the decoder on
        #[arg(long, requires = "size")]
        image: Option<PathBuf>,
        /// Decoder parameter bundle directory; a seeded decoder is used if absent
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Square resize applied to --image before decoding (multiple of 32)
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        bin_thresh: f64,
        #[arg(long, default_value_t = 1.5)]
        d_ts: f64,
        #[arg(long, default_value_t = 4.0)]
        min_area: f64,
        #[arg(long, default_value_t = 0.01)]
        approx_eps: f64,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        /// Original image width for coordinate rescaling (default: map width)
        #[arg(long)]
        orig_width: Option<usize>,
        /// Original image height for coordinate rescaling (default: map height)
        #[arg(long)]
        orig_height: Option<usize>,
    },
    /// Score detections against ground-truth annotations
    Eval {
        /// Detection JSON produced by `rsca detect`
        #[arg(long)]
        detections: PathBuf,
        /// Directory of canonical annotation JSON files named <image_id>.json
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou_thresh: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify backward passes against central finite differences
    Gradcheck {
        /// One of: all, conv, nearest, bilinear, softmax, deconv,
        /// pixelshuffle, reassembly, lcau, decoder
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Corrupt the analytic gradient to prove the harness can fail
        #[arg(long, default_value_t = false)]
        inject_bug: bool,
    },
    /// Stroke detection polygons over an image
    Overlay {
        #[arg(long)]
        image: PathBuf,
        /// Detection JSON holding the polygons to draw
        #[arg(long)]
        polygons: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("RSCA_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let seed = resolve_seed(cli.seed);
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .ok();

    match cli.command {
        Command::GenLabels {
            annotations,
            out,
            r_a,
            r_b,
            max_epoch,
            epoch,
            txt_width,
            txt_height,
        } => commands::gen_labels(
            &annotations,
            &out,
            r_a,
            r_b,
            max_epoch,
            epoch,
            txt_width,
            txt_height,
        ),
        Command::Detect {
            maps,
            image,
            decoder,
            size,
            out,
            bin_thresh,
            d_ts,
            min_area,
            approx_eps,
            score_thresh,
            orig_width,
            orig_height,
        } => commands::detect(commands::DetectArgs {
            maps,
            image,
            decoder,
            size,
            out,
            params: rsca_core::postproc::DetectParams {
                bin_thresh,
                d_ts,
                min_area,
                approx_eps_frac: approx_eps,
                score_thresh,
            },
            orig_width,
            orig_height,
            seed,
        }),
        Command::Eval {
            detections,
            annotations,
            iou_thresh,
            out,
        } => commands::eval(&detections, &annotations, iou_thresh, &out),
        Command::Gradcheck { op, trials, inject_bug } => {
            commands::gradcheck(&op, seed, trials, inject_bug)
        }
        Command::Overlay { image, polygons, out } => commands::overlay(&image, &polygons, &out),
    }
}
