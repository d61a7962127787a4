//! File output: atomic writes, CSV tables and PGM images.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DifferenceMap, FrameAttentionMatrix};
use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::scalar::Scalar;

/// Largest sample value of the 16-bit graymaps.
pub const PGM_MAX: u32 = 65535;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn matrix_csv(frames: usize, get: impl Fn(usize, usize) -> f64) -> String {
    let mut out = String::from("query_frame");
    for b in 0..frames {
        out.push_str(&format!(",key_f{b}"));
    }
    out.push('\n');
    for a in 0..frames {
        out.push_str(&a.to_string());
        for b in 0..frames {
            out.push_str(&format!(",{}", get(a, b)));
        }
        out.push('\n');
    }
    out
}

pub fn frame_attention_csv(m: &FrameAttentionMatrix) -> String {
    matrix_csv(m.frames(), |a, b| m.get(a, b))
}

pub fn difference_csv(d: &DifferenceMap) -> String {
    matrix_csv(d.frames, |a, b| d.get(a, b))
}

fn p2(width: usize, height: usize, samples: impl Iterator<Item = u32>, comment: &str) -> String {
    let mut out = format!("P2\n# {comment}\n{width} {height}\n{PGM_MAX}\n");
    let samples: Vec<u32> = samples.collect();
    for row in samples.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn quantize(x: f64) -> u32 {
    (x.clamp(0.0, 1.0) * PGM_MAX as f64).round() as u32
}

/// Plain 16-bit graymap with `[0, 1]` mapped to `[0, PGM_MAX]`.
pub fn frame_attention_pgm(m: &FrameAttentionMatrix) -> String {
    let f = m.frames();
    p2(f, f, m.values().iter().map(|&v| quantize(v)), "frame attention, 0..1")
}

/// Plain 16-bit graymap of a signed map, mid-gray at zero, scaled by the
/// largest magnitude (or 1 for an all-zero map).
pub fn difference_pgm(d: &DifferenceMap) -> String {
    let scale = d.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    p2(d.frames, d.frames, d.values.iter().map(|&v| quantize(0.5 + 0.5 * v / scale)), &format!("difference, mid-gray = 0, full scale = {scale}"))
}

/// Binary 8-bit graymap of channel 0 of frame `f`, pixels clipped to `[0, 1]`.
pub fn frame_pgm<T: Scalar>(video: &VideoLatent<T>, f: usize) -> Vec<u8> {
    let (h, w) = (video.height(), video.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push((video.get(f, y, x, 0).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Parses a plain (P2) graymap into `(width, height, max, samples)`.
pub fn parse_p2(text: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("missing P2 magic".into()));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Format(format!("bad or missing {what}")))
    };
    let (w, h, max) = (num("width")? as usize, num("height")? as usize, num("maxval")?);
    let samples = (0..w * h).map(|_| num("sample")).collect::<Result<Vec<_>>>()?;
    Ok((w, h, max, samples))
}
