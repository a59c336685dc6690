//! 8-bit binary PGM (P5) frames.

use std::path::Path;

use s2dm_core::{Clip, FrameGeometry};

use crate::error::{CliError, CliResult};

/// Maps `[-1, 1]` onto `0..=255` as `round(127.5 (v + 1))`, halves rounding
/// up and out-of-range values clamped. NaN maps to 0.
pub fn to_pixel(v: f32) -> u8 {
    let p = (127.5 * (f64::from(v) + 1.0) + 0.5).floor();
    if p.is_nan() {
        0
    } else {
        p.clamp(0.0, 255.0) as u8
    }
}

pub fn from_pixel(p: u8) -> f32 {
    (f64::from(p) / 127.5 - 1.0) as f32
}

pub fn encode(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(
        values.len(),
        width * height,
        "frame size does not match its geometry"
    );
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_pixel(v)));
    out
}

/// Parses a P5 file with maxval 255, returning `(width, height, values)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), String> {
    let mut pos = 0;
    let mut fields = [0usize; 4];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?;
        *field = if k == 0 {
            if token != "P5" {
                return Err(format!("expected magic P5, found `{token}`"));
            }
            0
        } else {
            token
                .parse()
                .map_err(|_| format!("bad header number `{token}`"))?
        };
    }
    let [_, width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(format!(
            "expected {} pixels, found {}",
            width * height,
            raster.len()
        ));
    }
    Ok((
        width,
        height,
        raster.iter().map(|&p| from_pixel(p)).collect(),
    ))
}

pub fn write_frame(path: &Path, geometry: FrameGeometry, frame: &[f32]) -> CliResult<()> {
    if geometry.channels != 1 {
        return Err(CliError::Range {
            field: "channels".into(),
            msg: format!("PGM export needs one channel, got {}", geometry.channels),
        });
    }
    crate::fsutil::write_atomic(path, &encode(geometry.width, geometry.height, frame))
}

pub fn read_frame(path: &Path) -> CliResult<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|msg| CliError::Io {
        path: path.display().to_string(),
        msg,
    })
}

/// `frame_0001.pgm` for frame index 0.
pub fn frame_name(index: usize) -> String {
    format!("frame_{:04}.pgm", index + 1)
}

/// All frames side by side in one image.
pub fn contact_sheet(clip: &Clip) -> Vec<u8> {
    let g = clip.geometry();
    let (h, w, n) = (g.height, g.width, clip.len());
    let mut values = vec![0.0f32; n * h * w];
    for (i, frame) in clip.frames().enumerate() {
        for y in 0..h {
            let dst = y * n * w + i * w;
            values[dst..dst + w].copy_from_slice(&frame[y * w..(y + 1) * w]);
        }
    }
    encode(n * w, h, &values)
}
