use anyhow::{bail, Context};
use rayon::prelude::*;
use rsca_core::decoder::{self, DecoderConfig, DecoderParams};
use rsca_core::eval::{self, GroundTruth};
use rsca_core::geometry::ShrinkSchedule;
use rsca_core::gradcheck::{self, CheckReport};
use rsca_core::io::{self, AnnotationFile, DetectionFile, MetricsFile, PerImageMetrics};
use rsca_core::labelgen;
use rsca_core::lcau::UpsamplerKind;
use rsca_core::postproc::{self, DetectParams, Detection};
use rsca_core::Grid;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::imgio;

fn sorted_files(dir: &Path, extensions: &[&str]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map_or(false, |e| extensions.contains(&e))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn load_annotation_file(
    path: &Path,
    txt_width: Option<usize>,
    txt_height: Option<usize>,
) -> anyhow::Result<AnnotationFile> {
    if path.extension().and_then(|e| e.to_str()) == Some("txt") {
        let (w, h) = match (txt_width, txt_height) {
            (Some(w), Some(h)) => (w, h),
            _ => bail!(
                "{}: .txt annotations need --txt-width and --txt-height",
                path.display()
            ),
        };
        let text = std::fs::read_to_string(path)?;
        Ok(io::parse_ctw1500(&text, w, h)?)
    } else {
        Ok(io::read_json(path)?)
    }
}

#[derive(serde::Serialize)]
struct LabelSummaryEntry {
    image_id: String,
    positive_pixels: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn gen_labels(
    annotations: &Path,
    out: &Path,
    r_a: f64,
    r_b: f64,
    max_epoch: usize,
    epoch: usize,
    txt_width: Option<usize>,
    txt_height: Option<usize>,
) -> anyhow::Result<()> {
    let schedule = ShrinkSchedule::new(r_a, r_b, max_epoch)?;
    let files = sorted_files(annotations, &["json", "txt"])?;
    if files.is_empty() {
        bail!("no annotation files in {}", annotations.display());
    }
    std::fs::create_dir_all(out)?;

    let results: Vec<anyhow::Result<LabelSummaryEntry>> = files
        .par_iter()
        .map(|path| {
            let file = load_annotation_file(path, txt_width, txt_height)?;
            let anns = file.to_annotations::<f64>()?;
            let target = labelgen::make_training_target(&anns, &schedule, epoch, file.height, file.width);
            let id = stem(path);
            io::write_grd1(&out.join(format!("{id}.grd")), &target.mask)?;
            if target.ignore.data().iter().any(|&v| v > 0.0) {
                io::write_grd1(&out.join(format!("{id}_ignore.grd")), &target.ignore)?;
            }
            Ok(LabelSummaryEntry {
                image_id: id,
                positive_pixels: target.positives(),
            })
        })
        .collect();

    let mut entries = Vec::new();
    let mut failures = 0usize;
    for (path, res) in files.iter().zip(results) {
        match res {
            Ok(entry) => entries.push(entry),
            Err(e) => {
                log::error!("{}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if entries.is_empty() {
        bail!("all {failures} annotation files failed");
    }
    io::write_json(&out.join("summary.json"), &entries)?;
    println!(
        "wrote {} label masks to {} ({failures} failures)",
        entries.len(),
        out.display()
    );
    Ok(())
}

pub struct DetectArgs {
    pub maps: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
    pub size: Option<usize>,
    pub out: PathBuf,
    pub params: DetectParams<f64>,
    pub orig_width: Option<usize>,
    pub orig_height: Option<usize>,
    pub seed: u64,
}

pub fn detect(args: DetectArgs) -> anyhow::Result<()> {
    let mut decode_ms = 0.0f64;
    // (image_id, probability map, original extents)
    let mut maps: Vec<(String, Grid<f64>, usize, usize)> = Vec::new();

    if let Some(maps_path) = &args.maps {
        let files = if maps_path.is_dir() {
            sorted_files(maps_path, &["grd"])?
        } else {
            vec![maps_path.clone()]
        };
        if files.is_empty() {
            bail!("no .grd maps in {}", maps_path.display());
        }
        for path in files {
            let grid: Grid<f64> = io::read_grd1(&path)?;
            let (ow, oh) = (
                args.orig_width.unwrap_or(grid.w()),
                args.orig_height.unwrap_or(grid.h()),
            );
            maps.push((stem(&path), grid, ow, oh));
        }
    } else if let Some(image_path) = &args.image {
        let size = args.size.expect("clap enforces --size with --image");
        if size % 32 != 0 {
            bail!("--size must be a multiple of 32, got {size}");
        }
        let (image, ow, oh) = imgio::load_image_grid(image_path)?;
        let resized = imgio::resize_grid(&image, size, size);
        let params = match &args.decoder {
            Some(dir) => io::load_decoder_params(dir)?,
            None => DecoderParams::seeded(DecoderConfig::default(), args.seed)?,
        };
        let started = Instant::now();
        let pyramid = decoder::synth_pyramid(&resized, params.config.channels, args.seed)?;
        let prob = decoder::decode(&pyramid, &params)?;
        decode_ms = started.elapsed().as_secs_f64() * 1e3;
        maps.push((stem(image_path), prob, ow, oh));
    } else {
        bail!("either --maps or --image is required");
    }

    let started = Instant::now();
    let detections: Vec<anyhow::Result<DetectionFile>> = maps
        .par_iter()
        .map(|(id, prob, ow, oh)| {
            let dets: Vec<Detection<f64>> = postproc::detect(prob, &args.params, *ow, *oh)?;
            Ok(DetectionFile::from_detections(id, &dets))
        })
        .collect();
    let post_ms = started.elapsed().as_secs_f64() * 1e3;

    let files: Vec<DetectionFile> = detections.into_iter().collect::<anyhow::Result<_>>()?;
    io::write_json(&args.out, &files)?;

    let n = files.len().max(1) as f64;
    let total = files.iter().map(|f| f.detections.len()).sum::<usize>();
    println!(
        "{total} detections over {} image(s); decode {:.2} ms, post-processing {:.2} ms per image ({:.1} FPS)",
        files.len(),
        decode_ms / n,
        post_ms / n,
        1e3 / ((decode_ms + post_ms) / n).max(1e-9)
    );
    Ok(())
}

pub fn eval(detections: &Path, annotations: &Path, iou_thresh: f64, out: &Path) -> anyhow::Result<()> {
    let det_files: Vec<DetectionFile> = io::read_json(detections)?;
    let mut per_image = Vec::new();
    let mut matches = Vec::new();
    for file in &det_files {
        let ann_path = annotations.join(format!("{}.json", file.image_id));
        let ann: AnnotationFile =
            io::read_json(&ann_path).with_context(|| format!("annotation for {}", file.image_id))?;
        let gts: Vec<GroundTruth<f64>> = ann
            .to_annotations::<f64>()?
            .into_iter()
            .map(|a| GroundTruth {
                polygon: a.polygon,
                ignore: a.ignore,
            })
            .collect();
        let dets: Vec<Detection<f64>> = file
            .to_polygons::<f64>()?
            .into_iter()
            .map(|(polygon, score)| Detection { polygon, score })
            .collect();
        let m = eval::match_detections(&dets, &gts, iou_thresh)?;
        per_image.push(PerImageMetrics::from_match(&file.image_id, &m));
        matches.push(m);
    }
    let total = eval::aggregate(&matches);
    let metrics = MetricsFile {
        precision: total.precision,
        recall: total.recall,
        f_measure: total.f_measure,
        per_image,
    };
    io::write_json(out, &metrics)?;

    println!("{:<24} {:>9} {:>9} {:>9}", "image", "precision", "recall", "f");
    for row in &metrics.per_image {
        println!(
            "{:<24} {:>9.4} {:>9.4} {:>9.4}",
            row.image_id, row.precision, row.recall, row.f_measure
        );
    }
    println!(
        "{:<24} {:>9.4} {:>9.4} {:>9.4}",
        "all", metrics.precision, metrics.recall, metrics.f_measure
    );
    Ok(())
}

pub fn gradcheck(op: &str, seed: u64, trials: usize, inject_bug: bool) -> anyhow::Result<()> {
    if trials == 0 {
        log::warn!("--trials 0 checks nothing; passing vacuously");
    }
    let reports: Vec<CheckReport> = if inject_bug {
        vec![gradcheck::check_lcau_with_scale(seed, trials.max(1), 1.01)?]
    } else {
        match op {
            "all" => gradcheck::run_all(seed, trials)?,
            "conv" => vec![gradcheck::check_conv3x3(seed, trials)?],
            "nearest" => vec![gradcheck::check_nearest(seed, trials)?],
            "bilinear" => vec![gradcheck::check_bilinear(seed, trials)?],
            "softmax" => vec![gradcheck::check_softmax(seed, trials)?],
            "deconv" => vec![gradcheck::check_deconv(seed, trials)?],
            "pixelshuffle" => vec![gradcheck::check_pixel_shuffle(seed, trials)?],
            "reassembly" => vec![gradcheck::check_reassembly_frozen(seed, trials)?],
            "lcau" => vec![gradcheck::check_lcau(seed, trials)?],
            "decoder" => UpsamplerKind::ALL
                .into_iter()
                .map(|k| gradcheck::check_decoder(k, seed, trials.min(3)))
                .collect::<Result<_, _>>()?,
            other => bail!("unknown op {other:?}"),
        }
    };
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{} {:<32} trials={:<3} max_rel_err={:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.max_rel_err
        );
        all_passed &= r.passed;
    }
    if !all_passed {
        bail!("gradient check failed");
    }
    Ok(())
}

pub fn overlay(image: &Path, polygons: &Path, out: &Path) -> anyhow::Result<()> {
    let file: DetectionFile = io::read_json(polygons)?;
    let mut img = imgio::load_rgb(image)?;
    for det in &file.detections {
        imgio::stroke_polygon(&mut img, &det.points);
    }
    imgio::save_png(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}
