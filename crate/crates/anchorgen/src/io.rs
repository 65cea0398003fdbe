//! Binary PPM (P6) frames, PGM (P5) masks, JSON documents and CSV loss curves.

use std::fs;
use std::path::Path;

use anchorgen_core::numerics::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

/// Encodes `[3, H, W]` (P6) or `[1, H, W]` (P5) in `[0,1]`.
pub fn encode_pnm(img: &Tensor) -> CliResult<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(CliError::Config(format!("cannot write an image of shape {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 3 { "P6" } else { "P5" }).into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

pub fn decode_pnm(buf: &[u8], path: &Path) -> CliResult<Tensor> {
    let mut pos = 0;
    let mut token = || -> CliResult<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CliError::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let magic = token()?;
    let c = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(CliError::format(path, format!("unsupported image type {magic}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| CliError::format(path, format!("bad header field {s}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if max != 255 {
        return Err(CliError::format(path, "only 8-bit images are supported"));
    }
    let body = &buf[pos + 1..];
    if body.len() != c * h * w {
        return Err(CliError::format(path, format!("expected {} pixel bytes, found {}", c * h * w, body.len())));
    }
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        body[p * c + ch] as f32 / 255.0
    }))
}

pub fn write_image(path: &Path, img: &Tensor) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, encode_pnm(img)?).map_err(|e| CliError::io(path, e))
}

pub fn read_image(path: &Path) -> CliResult<Tensor> {
    let buf = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_pnm(&buf, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

/// Writes `step,loss` rows, steps counted from 1.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    let fail = |e: csv::Error| CliError::format(path, e.to_string());
    w.write_record(["step", "loss"]).map_err(fail)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l}")]).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> CliResult<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
            rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| CliError::format(path, "malformed loss row"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_exact_on_the_byte_grid() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f32 / 255.0);
        let back = decode_pnm(&encode_pnm(&img).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, img);
        let mask = Tensor::from_fn(&[1, 3, 3], |i| (i % 2) as f32);
        let bytes = encode_pnm(&mask).unwrap();
        assert!(bytes.starts_with(b"P5\n3 3\n255\n"));
        assert_eq!(decode_pnm(&bytes, Path::new("m")).unwrap(), mask);
    }

    #[test]
    fn pnm_rejects_bad_input() {
        let p = Path::new("x");
        assert!(decode_pnm(b"P3\n1 1\n255\n", p).is_err());
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00\x01", p).is_err());
        assert!(decode_pnm(b"P6\n# c\n1 1\n255\n\x00\x01\x02", p).is_ok());
        assert!(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_loss_csv(&p, &[1.5, 0.25, 1e-3]).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), vec![1.5, 0.25, 1e-3]);
        assert!(fs::read_to_string(&p).unwrap().starts_with("step,loss\n1,1.5\n"));
    }
}
