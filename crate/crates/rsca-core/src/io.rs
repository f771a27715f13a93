//! On-disk formats: the GRD1 binary grid container, the annotation /
//! detection / metrics JSON schemas, the CTW1500-style importer, and
//! parameter serialization for LCAU and the decoder.

use crate::decoder::{DecoderConfig, DecoderParams, UpStage};
use crate::error::{Error, Result};
use crate::eval::MatchResult;
use crate::geometry::Polygon;
use crate::grid::Grid;
use crate::labelgen::Annotation;
use crate::lcau::LcauParams;
use crate::postproc::Detection;
use crate::{real, Real};
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

const GRD1_MAGIC: &[u8; 4] = b"GRD1";

/// Writes bytes via a temp file in the same directory plus an atomic rename,
/// so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_grd1<T: Real>(path: &Path, grid: &Grid<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + 16 + grid.len() * 8);
    bytes.extend_from_slice(GRD1_MAGIC);
    for extent in grid.shape() {
        bytes.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in grid.data() {
        bytes.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn read_grd1<T: Real>(path: &Path) -> Result<Grid<T>> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 20];
    f.read_exact(&mut header)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != GRD1_MAGIC {
        return Err(Error::format(format!("{}: bad magic", path.display())));
    }
    let mut extents = [0usize; 4];
    for (i, e) in extents.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *e = u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
    }
    let count = extents.iter().product::<usize>();
    let mut payload = vec![0u8; count * 8];
    f.read_exact(&mut payload)
        .map_err(|_| Error::format(format!("{}: truncated payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::format(format!("{}: trailing bytes", path.display())));
    }
    let data: Vec<T> = payload
        .chunks_exact(8)
        .map(|c| real::<T>(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Grid::from_vec(extents[0], extents[1], extents[2], extents[3], data)
}

// ---------------------------------------------------------------------------
// JSON schemas

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub points: Vec<[f64; 2]>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionFile {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub image_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub per_image: Vec<PerImageMetrics>,
}

impl AnnotationFile {
    pub fn to_annotations<T: Real>(&self) -> Result<Vec<Annotation<T>>> {
        self.instances
            .iter()
            .map(|inst| {
                let pts: Vec<(f64, f64)> = inst.points.iter().map(|p| (p[0], p[1])).collect();
                Ok(Annotation {
                    polygon: Polygon::from_xy(&pts)?,
                    ignore: inst.ignore,
                })
            })
            .collect()
    }

    pub fn from_annotations<T: Real>(width: usize, height: usize, annotations: &[Annotation<T>]) -> Self {
        AnnotationFile {
            width,
            height,
            instances: annotations
                .iter()
                .map(|a| InstanceRecord {
                    points: polygon_points(&a.polygon),
                    ignore: a.ignore,
                })
                .collect(),
        }
    }
}

pub fn polygon_points<T: Real>(p: &Polygon<T>) -> Vec<[f64; 2]> {
    p.vertices()
        .iter()
        .map(|v| [v.x.to_f64().unwrap_or(f64::NAN), v.y.to_f64().unwrap_or(f64::NAN)])
        .collect()
}

impl DetectionFile {
    pub fn from_detections<T: Real>(image_id: &str, detections: &[Detection<T>]) -> Self {
        DetectionFile {
            image_id: image_id.to_string(),
            detections: detections
                .iter()
                .map(|d| DetectionRecord {
                    points: polygon_points(&d.polygon),
                    score: d.score.to_f64().unwrap_or(0.0),
                })
                .collect(),
        }
    }

    pub fn to_polygons<T: Real>(&self) -> Result<Vec<(Polygon<T>, T)>> {
        self.detections
            .iter()
            .map(|d| {
                let pts: Vec<(f64, f64)> = d.points.iter().map(|p| (p[0], p[1])).collect();
                Ok((Polygon::from_xy(&pts)?, real::<T>(d.score)))
            })
            .collect()
    }
}

impl PerImageMetrics {
    pub fn from_match<T: Real>(image_id: &str, m: &MatchResult<T>) -> Self {
        PerImageMetrics {
            image_id: image_id.to_string(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            precision: m.precision.to_f64().unwrap_or(0.0),
            recall: m.recall.to_f64().unwrap_or(0.0),
            f_measure: m.f_measure.to_f64().unwrap_or(0.0),
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

// ---------------------------------------------------------------------------
// CTW1500-style importer: one instance per line, comma-separated integers
// x1,y1,...,xN,yN.

pub fn parse_ctw1500(text: &str, width: usize, height: usize) -> Result<AnnotationFile> {
    let mut instances = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let coords: Vec<i64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::format(format!("line {}: bad integer {tok:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if coords.len() < 6 || coords.len() % 2 != 0 {
            return Err(Error::format(format!(
                "line {}: expected an even count of at least 6 coordinates, got {}",
                lineno + 1,
                coords.len()
            )));
        }
        let points = coords
            .chunks_exact(2)
            .map(|xy| [xy[0] as f64, xy[1] as f64])
            .collect();
        instances.push(InstanceRecord { points, ignore: false });
    }
    Ok(AnnotationFile {
        width,
        height,
        instances,
    })
}

// ---------------------------------------------------------------------------
// Parameter serialization

/// Saves LCAU parameters as `<base>.grd` (generation weights with the bias
/// appended as one trailing plane row) plus `<base>.json` descriptor.
pub fn save_lcau_params<T: Real>(base: &Path, params: &LcauParams<T>) -> Result<()> {
    write_grd1(&base.with_extension("grd"), &params.gen_weights)?;
    let bias: Vec<f64> = params.gen_bias.iter().map(|b| b.to_f64().unwrap_or(0.0)).collect();
    #[derive(Serialize)]
    struct Sidecar {
        r: usize,
        k: usize,
        #[serde(rename = "C")]
        channels: usize,
        bias: Vec<f64>,
    }
    write_json(
        &base.with_extension("json"),
        &Sidecar {
            r: params.r,
            k: params.k,
            channels: params.channels(),
            bias,
        },
    )
}

pub fn load_lcau_params<T: Real>(base: &Path) -> Result<LcauParams<T>> {
    #[derive(Deserialize)]
    struct Sidecar {
        r: usize,
        k: usize,
        #[serde(rename = "C")]
        channels: usize,
        bias: Vec<f64>,
    }
    let sidecar: Sidecar = read_json(&base.with_extension("json"))?;
    let weights: Grid<T> = read_grd1(&base.with_extension("grd"))?;
    if weights.n() != sidecar.k * sidecar.k || weights.c() != sidecar.channels {
        return Err(Error::format("lcau weights do not match descriptor"));
    }
    if sidecar.bias.len() != sidecar.k * sidecar.k {
        return Err(Error::format("lcau bias length does not match descriptor"));
    }
    let mut params = LcauParams::zeros(sidecar.channels, sidecar.r, sidecar.k)?;
    params.gen_weights = weights;
    params.gen_bias = sidecar.bias.iter().map(|&b| real::<T>(b)).collect();
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StageManifest {
    Nearest,
    Bilinear,
    Deconv { weights: String, bias: Vec<f64> },
    SubPixel { weights: String, bias: Vec<f64> },
    Lcau { params: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct DecoderManifest {
    config: DecoderConfig,
    up_c3: Vec<StageManifest>,
    up_c4: Vec<StageManifest>,
    up_c5: Vec<StageManifest>,
    final_up: Vec<StageManifest>,
    proj_weights: String,
    proj_bias: Vec<f64>,
    head_weights: String,
    head_bias: Vec<f64>,
}

fn to_f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(0.0)).collect()
}

fn from_f64s<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| real::<T>(x)).collect()
}

fn save_chain<T: Real>(dir: &Path, name: &str, chain: &[UpStage<T>]) -> Result<Vec<StageManifest>> {
    let mut out = Vec::new();
    for (i, stage) in chain.iter().enumerate() {
        out.push(match stage {
            UpStage::Nearest => StageManifest::Nearest,
            UpStage::Bilinear => StageManifest::Bilinear,
            UpStage::Deconv { weights, bias } => {
                let file = format!("{name}_{i}_deconv.grd");
                write_grd1(&dir.join(&file), weights)?;
                StageManifest::Deconv {
                    weights: file,
                    bias: to_f64s(bias),
                }
            }
            UpStage::SubPixel { weights, bias } => {
                let file = format!("{name}_{i}_subpixel.grd");
                write_grd1(&dir.join(&file), weights)?;
                StageManifest::SubPixel {
                    weights: file,
                    bias: to_f64s(bias),
                }
            }
            UpStage::Lcau(params) => {
                let base = format!("{name}_{i}_lcau");
                save_lcau_params(&dir.join(&base), params)?;
                StageManifest::Lcau { params: base }
            }
        });
    }
    Ok(out)
}

fn load_chain<T: Real>(dir: &Path, manifest: &[StageManifest]) -> Result<Vec<UpStage<T>>> {
    manifest
        .iter()
        .map(|stage| {
            Ok(match stage {
                StageManifest::Nearest => UpStage::Nearest,
                StageManifest::Bilinear => UpStage::Bilinear,
                StageManifest::Deconv { weights, bias } => UpStage::Deconv {
                    weights: read_grd1(&dir.join(weights))?,
                    bias: from_f64s(bias),
                },
                StageManifest::SubPixel { weights, bias } => UpStage::SubPixel {
                    weights: read_grd1(&dir.join(weights))?,
                    bias: from_f64s(bias),
                },
                StageManifest::Lcau { params } => UpStage::Lcau(load_lcau_params(&dir.join(params))?),
            })
        })
        .collect()
}

/// Saves decoder parameters as a directory of GRD1 files plus a
/// `manifest.json` naming each stage and weight file.
pub fn save_decoder_params<T: Real>(dir: &Path, params: &DecoderParams<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_grd1(&dir.join("proj.grd"), &params.proj_weights)?;
    write_grd1(&dir.join("head.grd"), &params.head_weights)?;
    let manifest = DecoderManifest {
        config: params.config,
        up_c3: save_chain(dir, "up_c3", &params.up_c3)?,
        up_c4: save_chain(dir, "up_c4", &params.up_c4)?,
        up_c5: save_chain(dir, "up_c5", &params.up_c5)?,
        final_up: save_chain(dir, "final_up", &params.final_up)?,
        proj_weights: "proj.grd".to_string(),
        proj_bias: to_f64s(&params.proj_bias),
        head_weights: "head.grd".to_string(),
        head_bias: to_f64s(&params.head_bias),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_decoder_params<T: Real>(dir: &Path) -> Result<DecoderParams<T>> {
    let manifest: DecoderManifest = read_json(&dir.join("manifest.json"))?;
    Ok(DecoderParams {
        config: manifest.config,
        up_c3: load_chain(dir, &manifest.up_c3)?,
        up_c4: load_chain(dir, &manifest.up_c4)?,
        up_c5: load_chain(dir, &manifest.up_c5)?,
        final_up: load_chain(dir, &manifest.final_up)?,
        proj_weights: read_grd1(&dir.join(&manifest.proj_weights))?,
        proj_bias: from_f64s(&manifest.proj_bias),
        head_weights: read_grd1(&dir.join(&manifest.head_weights))?,
        head_bias: from_f64s(&manifest.head_bias),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grd1_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.grd");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Grid::<f64>::random(2, 3, 4, 5, -10.0, 10.0, &mut rng);
        write_grd1(&path, &grid).unwrap();
        let back: Grid<f64> = read_grd1(&path).unwrap();
        assert_eq!(grid.shape(), back.shape());
        assert_eq!(grid.data(), back.data());
    }

    #[test]
    fn grd1_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.grd");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        match read_grd1::<f64>(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("bad magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn grd1_truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.grd");
        let grid = Grid::<f64>::full(1, 1, 2, 2, 1.0);
        write_grd1(&path, &grid).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_grd1::<f64>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn annotation_json_round_trip() {
        let file = AnnotationFile {
            width: 100,
            height: 80,
            instances: vec![InstanceRecord {
                points: vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]],
                ignore: false,
            }],
        };
        let annotations = file.to_annotations::<f64>().unwrap();
        assert_eq!(annotations.len(), 1);
        let back = AnnotationFile::from_annotations(100, 80, &annotations);
        assert_eq!(back.instances[0].points.len(), 4);
    }

    #[test]
    fn ctw1500_lines_parse_to_instances() {
        let text = "0,0,10,0,10,5,0,5\n1, 1, 9, 1, 9, 4, 5, 6, 1, 4\n\n";
        let file = parse_ctw1500(text, 20, 10).unwrap();
        assert_eq!(file.instances.len(), 2);
        assert_eq!(file.instances[0].points.len(), 4);
        assert_eq!(file.instances[1].points.len(), 5);
        assert_eq!(file.instances[1].points[1], [9.0, 1.0]);
        assert!(parse_ctw1500("1,2,3", 20, 10).is_err());
        assert!(parse_ctw1500("1,2,x,4,5,6", 20, 10).is_err());
    }

    #[test]
    fn lcau_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("lcau0");
        let params = LcauParams::<f64>::seeded(4, 2, 5, 11).unwrap();
        save_lcau_params(&base, &params).unwrap();
        let back: LcauParams<f64> = load_lcau_params(&base).unwrap();
        assert_eq!(back.r, 2);
        assert_eq!(back.k, 5);
        assert_eq!(back.gen_weights.data(), params.gen_weights.data());
        assert_eq!(back.gen_bias, params.gen_bias);
    }

    #[test]
    fn decoder_bundle_round_trip_reproduces_output() {
        let dir = tempfile::tempdir().unwrap();
        let config = DecoderConfig {
            channels: 4,
            ..DecoderConfig::default()
        };
        let params = DecoderParams::<f64>::seeded(config, 5).unwrap();
        save_decoder_params(dir.path(), &params).unwrap();
        let back: DecoderParams<f64> = load_decoder_params(dir.path()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = Grid::random(1, 3, 32, 32, 0.0, 1.0, &mut rng);
        let pyramid = decoder::synth_pyramid(&image, 4, 21).unwrap();
        let a = decoder::decode(&pyramid, &params).unwrap();
        let b = decoder::decode(&pyramid, &back).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
    }
}
