//! Reading and writing TUM RGB-D style sequence directories.
//!
//! Layout:
//!
//! ```text
//! camera.txt              optional "fx fy cx cy width height"
//! rgb.txt                 optional "timestamp filename" index
//! depth.txt               "timestamp filename" index, 16-bit PNGs (raw / 5000 = metres)
//! groundtruth.txt         optional "timestamp tx ty tz qx qy qz qw"
//! masks/<stamp>.png       optional 8-bit instance ids (0 = background)
//! keypoints/<stamp>.csv   frame_ts,idx,u,v,z[,gt_state,gt_kind,track_id]
//! matches/<stamp>.csv     frame_ts,idx_prev,idx_cur
//! ```
//!
//! When `rgb.txt` exists its timestamps drive the frame clock and depth is
//! associated to it; otherwise depth timestamps are used directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageReader, Luma};
use nalgebra::Vector3;
use thiserror::Error;

use crate::classifier::KeypointState;
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::mask::MaskImage;
use crate::sequence::{DepthGrid, Frame, FrameSequence, Keypoint, PointKind, Truth};

pub const DEFAULT_MAX_DIFF: f64 = 0.02;
pub const DEFAULT_WIDTH: usize = 640;
pub const DEFAULT_HEIGHT: usize = 480;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: timestamps must be strictly increasing")]
    NonMonotonicTimestamps { path: PathBuf, line: usize },
    #[error("{path}: unsupported image format ({detail})")]
    UnsupportedBitDepth { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Invalid(String),
}

impl DatasetError {
    pub fn is_io(&self) -> bool {
        matches!(self, DatasetError::Io { .. } | DatasetError::Image { source: image::ImageError::IoError(_), .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<(), DatasetError>) -> Result<(), DatasetError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_text_atomic(path: &Path, text: &str) -> Result<(), DatasetError> {
    write_atomic(path, |tmp| fs::write(tmp, text).map_err(io_err(tmp)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

pub fn parse_trajectory_str(text: &str, origin: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let mut out: Vec<StampedPose> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(origin, line_no, format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| parse_err(origin, line_no, format!("invalid number '{f}'")))?;
        }
        let pose = PoseSE3::from_xyzw(Vector3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]])
            .map_err(|e| parse_err(origin, line_no, e.to_string()))?;
        if out.last().is_some_and(|p| p.timestamp >= v[0]) {
            return Err(DatasetError::NonMonotonicTimestamps { path: origin.to_path_buf(), line: line_no });
        }
        out.push(StampedPose { timestamp: v[0], pose });
    }
    Ok(out)
}

pub fn parse_trajectory(path: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trajectory_str(&text, path)
}

pub fn format_trajectory(poses: &[StampedPose]) -> String {
    let mut s = String::from("# dynakey trajectory\n# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let t = p.pose.translation;
        let q = p.pose.xyzw();
        let _ = writeln!(
            s,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        );
    }
    s
}

pub fn write_trajectory(poses: &[StampedPose], path: &Path) -> Result<(), DatasetError> {
    write_text_atomic(path, &format_trajectory(poses))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    /// `(index into a, index into b)`, sorted by the `a` index.
    pub pairs: Vec<(usize, usize)>,
    pub skipped_a: usize,
    pub skipped_b: usize,
}

/// Greedy globally-nearest one-to-one pairing of two ascending timestamp lists.
pub fn associate(a: &[f64], b: &[f64], max_diff: f64) -> Association {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ta) in a.iter().enumerate() {
        let start = b.partition_point(|tb| *tb < ta - max_diff);
        for (j, tb) in b.iter().enumerate().skip(start) {
            if *tb > ta + max_diff {
                break;
            }
            let gap = (ta - tb).abs();
            if gap <= max_diff {
                candidates.push((gap, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    Association { skipped_a: a.len() - pairs.len(), skipped_b: b.len() - pairs.len(), pairs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    pub stamp: String,
    pub file: String,
}

/// Parses a "timestamp filename" index such as `rgb.txt` or `depth.txt`.
pub fn parse_index(path: &Path) -> Result<Vec<IndexEntry>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out: Vec<IndexEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, i + 1, format!("expected 'timestamp filename', found {} fields", fields.len())));
        }
        let timestamp: f64 = fields[0].parse().map_err(|_| parse_err(path, i + 1, "invalid timestamp"))?;
        if out.last().is_some_and(|e| e.timestamp >= timestamp) {
            return Err(DatasetError::NonMonotonicTimestamps { path: path.to_path_buf(), line: i + 1 });
        }
        out.push(IndexEntry { timestamp, stamp: fields[0].to_string(), file: fields[1].to_string() });
    }
    Ok(out)
}

fn decode_image(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

pub fn load_depth(path: &Path) -> Result<DepthGrid, DatasetError> {
    match decode_image(path)? {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(DepthGrid::new(w as usize, h as usize, buf.into_raw()).expect("buffer matches dimensions"))
        }
        other => Err(DatasetError::UnsupportedBitDepth {
            path: path.to_path_buf(),
            detail: format!("{:?}, expected 16-bit single channel", other.color()),
        }),
    }
}

pub fn save_depth(grid: &DepthGrid, path: &Path) -> Result<(), DatasetError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, grid.raw().to_vec()).expect("dimensions");
    write_atomic(path, |tmp| {
        buf.save_with_format(tmp, image::ImageFormat::Png)
            .map_err(|source| DatasetError::Image { path: tmp.to_path_buf(), source })
    })
}

pub fn load_mask(path: &Path) -> Result<MaskImage, DatasetError> {
    match decode_image(path)? {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(MaskImage::new(w as usize, h as usize, buf.into_raw()).expect("buffer matches dimensions"))
        }
        other => Err(DatasetError::UnsupportedBitDepth {
            path: path.to_path_buf(),
            detail: format!("{:?}, expected 8-bit single channel", other.color()),
        }),
    }
}

pub fn save_mask(mask: &MaskImage, path: &Path) -> Result<(), DatasetError> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, mask.ids().to_vec()).expect("dimensions");
    write_atomic(path, |tmp| {
        buf.save_with_format(tmp, image::ImageFormat::Png)
            .map_err(|source| DatasetError::Image { path: tmp.to_path_buf(), source })
    })
}

const KEYPOINT_HEADER: &str = "frame_ts,idx,u,v,z,gt_state,gt_kind,track_id";
const MATCH_HEADER: &str = "frame_ts,idx_prev,idx_cur";

pub fn format_keypoints(stamp: &str, keypoints: &[Keypoint]) -> String {
    let mut s = String::from(KEYPOINT_HEADER);
    s.push('\n');
    for (i, k) in keypoints.iter().enumerate() {
        let z = k.depth.map(|z| z.to_string()).unwrap_or_default();
        let (state, kind, track) = match &k.truth {
            Some(t) => (t.state.as_str().to_string(), t.kind.as_str().to_string(), t.track.to_string()),
            None => Default::default(),
        };
        let _ = writeln!(s, "{stamp},{i},{},{},{z},{state},{kind},{track}", k.pixel.x, k.pixel.y);
    }
    s
}

pub fn parse_keypoints(text: &str, origin: &Path) -> Result<Vec<Keypoint>, DatasetError> {
    let mut rows: Vec<(usize, Keypoint)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("frame_ts")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 && f.len() != 8 {
            return Err(parse_err(origin, line_no, format!("expected 5 or 8 columns, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64, DatasetError> {
            s.parse::<f64>().map_err(|_| parse_err(origin, line_no, format!("invalid {what} '{s}'")))
        };
        let idx: usize = f[1].parse().map_err(|_| parse_err(origin, line_no, format!("invalid idx '{}'", f[1])))?;
        let depth = match f[4] {
            "" => None,
            z => Some(num(z, "z")?).filter(|z| *z > 0.0),
        };
        let mut kp = Keypoint::new(num(f[2], "u")?, num(f[3], "v")?, depth);
        if f.len() == 8 && !f[5].is_empty() {
            let state = KeypointState::parse(f[5]).ok_or_else(|| parse_err(origin, line_no, "invalid gt_state"))?;
            let kind = PointKind::parse(f[6]).ok_or_else(|| parse_err(origin, line_no, "invalid gt_kind"))?;
            let track = f[7].parse().map_err(|_| parse_err(origin, line_no, "invalid track_id"))?;
            kp.truth = Some(Truth { state, kind, track });
        }
        rows.push((idx, kp));
    }
    rows.sort_by_key(|r| r.0);
    for (expected, (idx, _)) in rows.iter().enumerate() {
        if *idx != expected {
            return Err(parse_err(origin, 0, format!("keypoint indices must be 0..n, missing {expected}")));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

pub fn format_matches(stamp: &str, keypoints: &[Keypoint]) -> String {
    let mut s = String::from(MATCH_HEADER);
    s.push('\n');
    for (i, k) in keypoints.iter().enumerate() {
        if let Some(j) = k.match_prev {
            let _ = writeln!(s, "{stamp},{j},{i}");
        }
    }
    s
}

/// Returns `(idx_prev, idx_cur)` pairs.
pub fn parse_matches(text: &str, origin: &Path) -> Result<Vec<(usize, usize)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("frame_ts")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(parse_err(origin, i + 1, format!("expected 3 columns, found {}", f.len())));
        }
        let prev = f[1].parse().map_err(|_| parse_err(origin, i + 1, "invalid idx_prev"))?;
        let cur = f[2].parse().map_err(|_| parse_err(origin, i + 1, "invalid idx_cur"))?;
        out.push((prev, cur));
    }
    Ok(out)
}

fn format_camera(k: &CameraIntrinsics, width: usize, height: usize) -> String {
    format!("# fx fy cx cy width height\n{} {} {} {} {width} {height}\n", k.fx, k.fy, k.cx, k.cy)
}

fn parse_camera(path: &Path) -> Result<(CameraIntrinsics, Option<(usize, usize)>), DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 && f.len() != 6 {
            return Err(parse_err(path, i + 1, "expected 'fx fy cx cy [width height]'"));
        }
        let v: Vec<f64> = f
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("invalid number '{s}'"))))
            .collect::<Result<_, _>>()?;
        let k = CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let dims = (v.len() == 6).then(|| (v[4] as usize, v[5] as usize));
        return Ok((k, dims));
    }
    Err(parse_err(path, 0, "no calibration line"))
}

/// Reads a sequence directory into memory.
pub fn load_sequence(dir: &Path, max_diff: f64) -> Result<FrameSequence, DatasetError> {
    let camera_path = dir.join("camera.txt");
    let (intrinsics, dims) = if camera_path.exists() {
        parse_camera(&camera_path)?
    } else {
        (CameraIntrinsics::tum_fr3(), None)
    };
    let depth_index = parse_index(&dir.join("depth.txt"))?;
    let rgb_path = dir.join("rgb.txt");
    // (frame timestamp, stamp, depth file)
    let clock: Vec<(f64, String, String)> = if rgb_path.exists() {
        let rgb = parse_index(&rgb_path)?;
        let ta: Vec<f64> = rgb.iter().map(|e| e.timestamp).collect();
        let tb: Vec<f64> = depth_index.iter().map(|e| e.timestamp).collect();
        associate(&ta, &tb, max_diff)
            .pairs
            .into_iter()
            .map(|(i, j)| (rgb[i].timestamp, rgb[i].stamp.clone(), depth_index[j].file.clone()))
            .collect()
    } else {
        depth_index.into_iter().map(|e| (e.timestamp, e.stamp, e.file)).collect()
    };

    let gt_path = dir.join("groundtruth.txt");
    let mut poses: Vec<Option<PoseSE3>> = vec![None; clock.len()];
    if gt_path.exists() {
        let gt = parse_trajectory(&gt_path)?;
        let ta: Vec<f64> = clock.iter().map(|c| c.0).collect();
        let tb: Vec<f64> = gt.iter().map(|p| p.timestamp).collect();
        for (i, j) in associate(&ta, &tb, max_diff).pairs {
            poses[i] = Some(gt[j].pose);
        }
    }

    let mut frames = Vec::with_capacity(clock.len());
    let mut size = dims;
    for ((timestamp, stamp, depth_file), pose) in clock.into_iter().zip(poses) {
        let depth = load_depth(&dir.join(&depth_file))?;
        let (w, h) = *size.get_or_insert((depth.width(), depth.height()));
        if (depth.width(), depth.height()) != (w, h) {
            return Err(DatasetError::Invalid(format!("{depth_file}: expected {w}x{h} depth image")));
        }
        let mask_path = dir.join("masks").join(format!("{stamp}.png"));
        let mask = if mask_path.exists() {
            let m = load_mask(&mask_path)?;
            if (m.width(), m.height()) != (w, h) {
                return Err(DatasetError::Invalid(format!("{}: expected {w}x{h} mask", mask_path.display())));
            }
            m
        } else {
            MaskImage::empty(w, h)
        };
        let kp_path = dir.join("keypoints").join(format!("{stamp}.csv"));
        let mut keypoints = if kp_path.exists() {
            parse_keypoints(&fs::read_to_string(&kp_path).map_err(io_err(&kp_path))?, &kp_path)?
        } else {
            Vec::new()
        };
        let match_path = dir.join("matches").join(format!("{stamp}.csv"));
        if match_path.exists() {
            let text = fs::read_to_string(&match_path).map_err(io_err(&match_path))?;
            for (prev, cur) in parse_matches(&text, &match_path)? {
                let kp = keypoints.get_mut(cur).ok_or_else(|| {
                    DatasetError::Invalid(format!("{}: idx_cur {cur} out of range", match_path.display()))
                })?;
                kp.match_prev = Some(prev);
            }
        }
        frames.push(Frame { timestamp, stamp, pose, keypoints, mask, depth });
    }
    let (width, height) = size.unwrap_or((DEFAULT_WIDTH, DEFAULT_HEIGHT));
    Ok(FrameSequence { intrinsics, width, height, frames })
}

/// Writes a sequence in the layout read by [`load_sequence`].
pub fn export_sequence(seq: &FrameSequence, dir: &Path) -> Result<(), DatasetError> {
    for sub in ["depth", "masks", "keypoints", "matches"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    write_text_atomic(&dir.join("camera.txt"), &format_camera(&seq.intrinsics, seq.width, seq.height))?;
    let mut depth_index = String::from("# timestamp filename\n");
    let mut gt = Vec::new();
    for frame in &seq.frames {
        let stamp = &frame.stamp;
        let _ = writeln!(depth_index, "{stamp} depth/{stamp}.png");
        save_depth(&frame.depth, &dir.join("depth").join(format!("{stamp}.png")))?;
        save_mask(&frame.mask, &dir.join("masks").join(format!("{stamp}.png")))?;
        write_text_atomic(&dir.join("keypoints").join(format!("{stamp}.csv")), &format_keypoints(stamp, &frame.keypoints))?;
        write_text_atomic(&dir.join("matches").join(format!("{stamp}.csv")), &format_matches(stamp, &frame.keypoints))?;
        if let Some(pose) = frame.pose {
            gt.push(StampedPose { timestamp: frame.timestamp, pose });
        }
    }
    write_text_atomic(&dir.join("depth.txt"), &depth_index)?;
    write_trajectory(&gt, &dir.join("groundtruth.txt"))
}
