//! Synthetic tracking sequences and the on-disk formats for clouds, boxes
//! and sequence manifests.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_motion, Box7, GeometryError, Motion4, PointCloud};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: size {size} bytes is not a multiple of 16")]
    BinarySize { path: PathBuf, size: u64 },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    /// `(w, l, h)` of the target and of every distractor.
    pub size: [f64; 3],
    pub points_per_object: usize,
    /// Per-frame translation is uniform in `±max_translation` per axis.
    pub max_translation: [f64; 3],
    pub max_yaw: f64,
    pub distractors: usize,
    /// Horizontal distance range of distractors from the target.
    pub distractor_offset: [f64; 2],
    pub clutter: usize,
    /// Half-width of the square region around the target that holds clutter.
    pub clutter_extent: f64,
    pub occlusion: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::pedestrian_like(0)
    }
}

impl SceneSpec {
    /// Small, non-rigid, distractor-heavy preset.
    pub fn pedestrian_like(seed: u64) -> Self {
        Self {
            seed,
            frames: 20,
            size: [0.7, 0.9, 1.8],
            points_per_object: 64,
            max_translation: [0.2, 0.2, 0.0],
            max_yaw: 0.05,
            distractors: 2,
            distractor_offset: [2.5, 4.0],
            clutter: 48,
            clutter_extent: 4.0,
            occlusion: 0.1,
        }
    }

    /// Large, rigid preset with sparse context.
    pub fn car_like(seed: u64) -> Self {
        Self {
            seed,
            frames: 20,
            size: [1.8, 4.2, 1.6],
            points_per_object: 128,
            max_translation: [0.6, 0.6, 0.0],
            max_yaw: 0.05,
            distractors: 1,
            distractor_offset: [5.0, 8.0],
            clutter: 64,
            clutter_extent: 8.0,
            occlusion: 0.1,
        }
    }

    /// No clutter and no occlusion; distractors are kept.
    pub fn noiseless(mut self) -> Self {
        self.clutter = 0;
        self.occlusion = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("degenerate object size {:?}", self.size));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return bad(format!("occlusion probability {} outside [0, 1)", self.occlusion));
        }
        if self.max_translation.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || !(self.max_yaw >= 0.0) {
            return bad("motion bounds must be finite and nonnegative".into());
        }
        let [lo, hi] = self.distractor_offset;
        if !(lo >= 0.0 && hi >= lo) {
            return bad(format!("distractor offset range {lo}..{hi} is invalid"));
        }
        if !(self.clutter_extent > 0.0) {
            return bad("clutter_extent must be positive".into());
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.size.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt: Box7,
    /// Generator-side only; not stored on disk.
    pub distractors: Vec<Box7>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Uniform samples on the surface of an origin-centered box of the given size.
pub fn sample_box_surface<R: Rng>(size: [f64; 3], n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let [w, l, h] = size;
    // face pairs normal to x, y, z
    let areas = [l * h, w * h, w * l];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen::<f64>() * total;
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            // kept a hair inside the faces so round-off never pushes a point out
            let side = if rng.gen::<bool>() { 0.5 - 1e-9 } else { -0.5 + 1e-9 };
            let mut p = [0.0; 3];
            for (i, v) in p.iter_mut().enumerate() {
                *v = if i == axis {
                    side * size[i]
                } else {
                    (rng.gen::<f64>() - 0.5) * size[i]
                };
            }
            p
        })
        .collect()
}

/// Deterministic synthetic sequence for a spec.
pub fn generate_sequence(spec: &SceneSpec) -> Result<Sequence, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let yaw0 = rng.gen_range(-PI..PI);
    let mut gt = Box7::new([0.0, 0.0, 0.5 * spec.size[2]], yaw0, spec.size)?;
    let target_local = sample_box_surface(spec.size, spec.points_per_object, &mut rng);

    struct Distractor {
        offset: [f64; 3],
        yaw: f64,
        local: Vec<[f64; 3]>,
    }
    let distractors: Vec<Distractor> = (0..spec.distractors)
        .map(|_| {
            let ang = rng.gen_range(-PI..PI);
            let [lo, hi] = spec.distractor_offset;
            let d = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            Distractor {
                offset: [d * ang.cos(), d * ang.sin(), 0.0],
                yaw: rng.gen_range(-PI..PI),
                local: sample_box_surface(spec.size, spec.points_per_object, &mut rng),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            let mut tr = [0.0; 3];
            for (v, &b) in tr.iter_mut().zip(&spec.max_translation) {
                *v = if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
            }
            let dy = if spec.max_yaw > 0.0 {
                rng.gen_range(-spec.max_yaw..=spec.max_yaw)
            } else {
                0.0
            };
            gt = apply_motion(&gt, &Motion4::new(tr, dy)?);
        }
        let mut pts: Vec<[f64; 3]> = target_local
            .iter()
            .filter(|_| spec.occlusion == 0.0 || rng.gen::<f64>() >= spec.occlusion)
            .map(|&q| gt.to_world(q))
            .collect();
        let mut boxes = Vec::with_capacity(distractors.len());
        for d in &distractors {
            let c = gt.center;
            let b = Box7::new([c[0] + d.offset[0], c[1] + d.offset[1], c[2] + d.offset[2]], d.yaw, spec.size)?;
            pts.extend(d.local.iter().map(|&q| b.to_world(q)));
            boxes.push(b);
        }
        let e = spec.clutter_extent;
        let mut added = 0;
        while added < spec.clutter {
            let p = [
                gt.center[0] + rng.gen_range(-e..e),
                gt.center[1] + rng.gen_range(-e..e),
                rng.gen_range(0.0..spec.size[2]),
            ];
            if !gt.contains(p) {
                pts.push(p);
                added += 1;
            }
        }
        pts.shuffle(&mut rng);
        frames.push(Frame {
            cloud: PointCloud::new(pts)?,
            gt,
            distractors: boxes,
        });
    }
    Ok(Sequence { frames })
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn parse_floats(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>, DataError> {
    let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: e.to_string(),
    })?;
    if vals.len() != expect {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected {expect} fields, found {}", vals.len()),
        });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: "non-finite value".into(),
        });
    }
    Ok(vals)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments skipped.
pub fn load_xyz_text(path: &Path) -> Result<PointCloud, DataError> {
    let text = read_text(path)?;
    let mut pts = Vec::new();
    for (n, line) in content_lines(&text) {
        let v = parse_floats(path, n, line, 3)?;
        pts.push([v[0], v[1], v[2]]);
    }
    Ok(PointCloud::new(pts)?)
}

pub fn write_xyz_text(path: &Path, pc: &PointCloud) -> Result<(), DataError> {
    let text: String = pc.points.iter().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect();
    fs::write(path, text).map_err(io_err(path))
}

/// Little-endian `f32` records of `(x, y, z, intensity)`; intensity is dropped.
pub fn load_lidar_bin(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(DataError::BinarySize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let pts = bytes
        .chunks_exact(16)
        .map(|r| [f(&r[0..4]), f(&r[4..8]), f(&r[8..12])])
        .collect();
    Ok(PointCloud::new(pts)?)
}

/// Writes `f32` coordinates with zero intensity.
pub fn write_lidar_bin(path: &Path, pc: &PointCloud) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn box_from_fields(path: &Path, line: usize, v: &[f64]) -> Result<Box7, DataError> {
    Box7::new([v[0], v[1], v[2]], v[3], [v[4], v[5], v[6]]).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })
}

pub fn format_box(b: &Box7) -> String {
    format!(
        "{} {} {} {} {} {} {}",
        b.center[0], b.center[1], b.center[2], b.yaw, b.size[0], b.size[1], b.size[2]
    )
}

/// One `x y z theta w l h` box per line.
pub fn load_box_file(path: &Path) -> Result<Vec<Box7>, DataError> {
    let text = read_text(path)?;
    content_lines(&text)
        .map(|(n, line)| {
            let v = parse_floats(path, n, line, 7)?;
            box_from_fields(path, n, &v)
        })
        .collect()
}

pub fn write_box_file(path: &Path, boxes: &[Box7]) -> Result<(), DataError> {
    let text: String = boxes.iter().map(|b| format_box(b) + "\n").collect();
    fs::write(path, text).map_err(io_err(path))
}

/// A trackable unit: the first-frame box and the cloud files in frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub init_box: Box7,
    pub clouds: Vec<PathBuf>,
}

/// Loads a cloud by extension: `.bin` is the binary layout, anything else is text.
pub fn load_cloud(path: &Path) -> Result<PointCloud, DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => load_lidar_bin(path),
        _ => load_xyz_text(path),
    }
}

/// First content line is the frame-0 box; every following line is a cloud
/// path, relative paths being resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (n, first) = lines.next().ok_or_else(|| DataError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing frame-0 box".into(),
    })?;
    let init_box = box_from_fields(path, n, &parse_floats(path, n, first, 7)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let clouds = lines
        .map(|(_, l)| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    Ok(Manifest { init_box, clouds })
}

pub fn write_manifest(path: &Path, init_box: &Box7, clouds: &[String]) -> Result<(), DataError> {
    let mut text = format_box(init_box) + "\n";
    for c in clouds {
        text.push_str(c);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BOXES_FILE: &str = "boxes.txt";

/// Writes a sequence as `manifest.txt`, `boxes.txt` and one `.bin` per frame.
pub fn write_sequence_dir(dir: &Path, seq: &Sequence) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::with_capacity(seq.len());
    for (t, f) in seq.frames.iter().enumerate() {
        let name = format!("frame_{t:04}.bin");
        write_lidar_bin(&dir.join(&name), &f.cloud)?;
        names.push(name);
    }
    let boxes: Vec<Box7> = seq.frames.iter().map(|f| f.gt).collect();
    write_box_file(&dir.join(BOXES_FILE), &boxes)?;
    write_manifest(&dir.join(MANIFEST_FILE), &boxes[0], &names)
}

pub fn read_sequence_dir(dir: &Path) -> Result<Sequence, DataError> {
    let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
    let boxes_path = dir.join(BOXES_FILE);
    let boxes = load_box_file(&boxes_path)?;
    if boxes.len() != manifest.clouds.len() {
        return Err(DataError::Parse {
            path: boxes_path,
            line: boxes.len(),
            msg: format!("{} boxes for {} frames", boxes.len(), manifest.clouds.len()),
        });
    }
    let frames = manifest
        .clouds
        .iter()
        .zip(boxes)
        .map(|(p, gt)| {
            Ok(Frame {
                cloud: load_cloud(p)?,
                gt,
                distractors: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Sequence { frames })
}

/// Every subdirectory holding a manifest, in name order.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<Sequence>, DataError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_sequence_dir(d)).collect()
}
