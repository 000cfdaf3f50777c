//! Frame files: 16-bit binary PGM or CSV matrices, each with an optional
//! `<stem>.meta` sidecar holding acquisition metadata as `key = value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::{Frame, FrameMeta, DEFAULT_PIXEL_SCALE_NM, SENSOR_MAX};
use crate::error::{Error, Result};

pub const SIDECAR_EXTENSION: &str = "meta";

/// Sidecar contents. `frame_id` defaults to the file stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default)]
    pub frame_id: Option<String>,
    pub pixel_scale_nm: f64,
    pub exposure_s: f64,
    pub sequence_id: String,
}

pub fn sidecar_path(frame_path: &Path) -> PathBuf {
    frame_path.with_extension(SIDECAR_EXTENSION)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn meta_for(frame_path: &Path) -> Result<FrameMeta> {
    let stem = file_stem(frame_path);
    let sidecar = sidecar_path(frame_path);
    if !sidecar.exists() {
        return Ok(FrameMeta {
            frame_id: stem.clone(),
            sequence_id: stem,
            pixel_scale_nm: DEFAULT_PIXEL_SCALE_NM,
            exposure_s: 1.0,
        });
    }
    let s = read_sidecar(&sidecar)?;
    Ok(FrameMeta {
        frame_id: s.frame_id.unwrap_or(stem),
        sequence_id: s.sequence_id,
        pixel_scale_nm: s.pixel_scale_nm,
        exposure_s: s.exposure_s,
    })
}

/// True for file names this module can read.
pub fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm") | Some("csv")
    )
}

/// Reads a `.pgm` or `.csv` frame together with its sidecar, if any.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let (width, height, values) = match ext.as_deref() {
        Some("pgm") => decode_pgm(&bytes).map_err(|m| Error::format(path, m))?,
        Some("csv") => decode_csv(&bytes).map_err(|m| Error::format(path, m))?,
        _ => return Err(Error::format(path, "unsupported frame format")),
    };
    let meta = meta_for(path)?;
    Frame::new(width, height, values, meta).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes the frame as a 16-bit PGM plus a sidecar. Values are rounded to the
/// nearest integer count.
pub fn write_frame_pgm(frame: &Frame, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(frame)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        frame_id: Some(frame.meta.frame_id.clone()),
        pixel_scale_nm: frame.meta.pixel_scale_nm,
        exposure_s: frame.meta.exposure_s,
        sequence_id: frame.meta.sequence_id.clone(),
    };
    let side = sidecar_path(path);
    let text = toml::to_string(&sidecar).map_err(|e| Error::format(&side, e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", frame.width(), frame.height()).into_bytes();
    out.reserve(frame.values().len() * 2);
    for v in frame.values() {
        let q = v.round().clamp(0.0, SENSOR_MAX) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P5" {
        return Err(format!("expected binary PGM magic P5, found {:?}", header[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("invalid PGM {what} {s:?}"))
    };
    let width = parse(&header[1], "width")?;
    let height = parse(&header[2], "height")?;
    let maxval = parse(&header[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * sample_bytes;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| format!("PGM raster truncated: need {needed} bytes"))?;
    let values = if sample_bytes == 1 {
        raster.iter().map(|&b| f64::from(b)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    };
    Ok((width, height, values))
}

pub fn decode_csv(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    let mut width = None;
    let mut values = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("line {}: invalid number {:?}", lineno + 1, t.trim()))
            })
            .collect::<std::result::Result<_, _>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format!(
                    "line {}: expected {w} columns, found {}",
                    lineno + 1,
                    row.len()
                ))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or("empty CSV frame")?;
    Ok((width, height, values))
}

/// Lists readable frame files in a directory, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    paths.sort();
    Ok(paths)
}
