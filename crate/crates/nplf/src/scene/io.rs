//! Dataset directory I/O.
//!
//! Layout:
//!   images/NNNN.ppm   binary PPM (P6, 8-bit)
//!   points/NNNN.txt   one `x y z` per line
//!   poses.txt         one `frame_id rx ry rz tx ty tz` per line
//!   intrinsics.txt    `fx fy cx cy width height`
//!   tracks.jsonl      one track observation record per line
//!
//! Poses and points serialize with enough digits to round-trip f64 exactly;
//! images round-trip bit-exactly because in-memory values sit on the 8-bit
//! grid (see `quantize_unit`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Frame, Image, SceneDataset, SceneError};
use crate::geometry::{
    self, format_intrinsics, format_poses, parse_intrinsics, parse_poses, Vec3,
};
use crate::motion::{ObjectTrack, PixelMask, TrackObservation};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write an image as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Image) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(image.data.len() + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes());
    for &v in &image.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Write a mask as binary PGM (P5, maxval 255); masked pixels are 255.
pub fn write_pgm(path: &Path, mask: &PixelMask) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(mask.grid.len() + 32);
    buf.extend_from_slice(format!("P5\n{} {}\n255\n", mask.width, mask.height).as_bytes());
    for &m in &mask.grid {
        buf.push(if m { 255 } else { 0 });
    }
    fs::write(path, buf).map_err(io_err(path))
}

struct PnmHeader {
    width: u32,
    height: u32,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<PnmHeader, SceneError> {
    let parse_error = |msg: String| SceneError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg,
    };
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(parse_error(format!("not a {magic} file")));
    }
    // Header tokens: magic, width, height, maxval, then a single whitespace
    // byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 2usize;
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos > start {
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| parse_error("non-ascii header".to_string()))?
                    .to_string(),
            );
        }
    }
    if fields.len() != 3 {
        return Err(parse_error("truncated header".to_string()));
    }
    let width: u32 = fields[0]
        .parse()
        .map_err(|_| parse_error(format!("bad width {:?}", fields[0])))?;
    let height: u32 = fields[1]
        .parse()
        .map_err(|_| parse_error(format!("bad height {:?}", fields[1])))?;
    if fields[2] != "255" {
        return Err(parse_error(format!("unsupported maxval {:?}", fields[2])));
    }
    Ok(PnmHeader {
        width,
        height,
        data_offset: pos + 1,
    })
}

pub fn read_ppm(path: &Path) -> Result<Image, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = parse_pnm_header(&bytes, "P6", path)?;
    let expected = header.width as usize * header.height as usize * 3;
    let raster = &bytes[header.data_offset.min(bytes.len())..];
    if raster.len() < expected {
        return Err(SceneError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("raster holds {} bytes, expected {expected}", raster.len()),
        });
    }
    Ok(Image {
        width: header.width,
        height: header.height,
        data: raster[..expected].iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn read_pgm(path: &Path) -> Result<PixelMask, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = parse_pnm_header(&bytes, "P5", path)?;
    let expected = header.width as usize * header.height as usize;
    let raster = &bytes[header.data_offset.min(bytes.len())..];
    if raster.len() < expected {
        return Err(SceneError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("raster holds {} bytes, expected {expected}", raster.len()),
        });
    }
    Ok(PixelMask {
        width: header.width,
        height: header.height,
        frame_index: 0,
        grid: raster[..expected].iter().map(|&b| b >= 128).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    id: u32,
    frame: usize,
    bbox: [u32; 4],
    motion_score: f64,
}

fn format_points(points: &[Vec3]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{:.17e} {:.17e} {:.17e}", p[0], p[1], p[2]);
    }
    s
}

fn parse_points(text: &str, path: &str) -> Result<Vec<Vec3>, SceneError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(SceneError::Parse {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (i, f) in fields.iter().enumerate() {
            p[i] = f.parse().map_err(|_| SceneError::Parse {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("bad float {f:?}"),
            })?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<(), SceneError> {
    let images_dir = dir.join("images");
    let points_dir = dir.join("points");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    fs::create_dir_all(&points_dir).map_err(io_err(&points_dir))?;

    for frame in &dataset.frames {
        write_ppm(
            &images_dir.join(format!("{:04}.ppm", frame.frame_index)),
            &frame.image,
        )?;
        let ppath = points_dir.join(format!("{:04}.txt", frame.frame_index));
        fs::write(&ppath, format_points(&frame.depth_points)).map_err(io_err(&ppath))?;
    }

    let poses: Vec<(usize, geometry::CameraPose)> = dataset
        .frames
        .iter()
        .map(|f| (f.frame_index, f.pose))
        .collect();
    let poses_path = dir.join("poses.txt");
    fs::write(&poses_path, format_poses(&poses)).map_err(io_err(&poses_path))?;

    let intr_path = dir.join("intrinsics.txt");
    fs::write(&intr_path, format_intrinsics(&dataset.intrinsics)).map_err(io_err(&intr_path))?;

    let tracks_path = dir.join("tracks.jsonl");
    let mut file = fs::File::create(&tracks_path).map_err(io_err(&tracks_path))?;
    for track in &dataset.tracks {
        for obs in &track.observations {
            let record = TrackRecord {
                id: track.object_id,
                frame: obs.frame_index,
                bbox: obs.bbox,
                motion_score: obs.motion_score,
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").map_err(io_err(&tracks_path))?;
        }
    }
    Ok(())
}

pub fn load_tracks(path: &Path) -> Result<Vec<ObjectTrack>, SceneError> {
    let mut text = String::new();
    match fs::File::open(path) {
        Ok(mut f) => {
            f.read_to_string(&mut text).map_err(io_err(path))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    }
    // Records may arrive in any order; group by id, keep frame order.
    let mut by_id: Vec<(u32, Vec<TrackObservation>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrackRecord = serde_json::from_str(line).map_err(|e| SceneError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let obs = TrackObservation {
            frame_index: record.frame,
            bbox: record.bbox,
            motion_score: record.motion_score,
        };
        match by_id.iter_mut().find(|(id, _)| *id == record.id) {
            Some((_, v)) => v.push(obs),
            None => by_id.push((record.id, vec![obs])),
        }
    }
    by_id
        .into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by_key(|o| o.frame_index);
            ObjectTrack::new(id, obs).map_err(SceneError::from)
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset, SceneError> {
    let poses_path = dir.join("poses.txt");
    let poses_text = fs::read_to_string(&poses_path).map_err(io_err(&poses_path))?;
    let poses = parse_poses(&poses_text, &poses_path.display().to_string())?;

    let intr_path = dir.join("intrinsics.txt");
    let intr_text = fs::read_to_string(&intr_path).map_err(io_err(&intr_path))?;
    let intrinsics = parse_intrinsics(&intr_text, &intr_path.display().to_string())?;

    let mut frames = Vec::with_capacity(poses.len());
    for (frame_id, pose) in poses {
        let image = read_ppm(&dir.join("images").join(format!("{frame_id:04}.ppm")))?;
        let ppath = dir.join("points").join(format!("{frame_id:04}.txt"));
        let points_text = fs::read_to_string(&ppath).map_err(io_err(&ppath))?;
        let depth_points = parse_points(&points_text, &ppath.display().to_string())?;
        frames.push(Frame {
            image,
            pose,
            depth_points,
            frame_index: frame_id,
        });
    }
    frames.sort_by_key(|f| f.frame_index);

    let tracks = load_tracks(&dir.join("tracks.jsonl"))?;

    Ok(SceneDataset {
        frames,
        intrinsics,
        tracks,
        holdout_stride: 10,
    })
}
