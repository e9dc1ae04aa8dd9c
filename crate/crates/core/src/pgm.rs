//! Binary 8-bit greymap (P5) reading and writing.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Maps `[lo, hi]` linearly onto `0..=255`, clamping outside values.
pub fn to_bytes(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!("pgm: {} values for {width}x{height}", values.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&to_bytes(values, lo, hi))?;
    f.flush()?;
    Ok(())
}

/// Image in `[−1, 1]`.
pub fn write_image(path: &Path, side: usize, values: &[f64]) -> Result<()> {
    write_pgm(path, side, side, values, -1.0, 1.0)
}

/// Reads a P5 file back into `[lo, hi]`.
pub fn read_pgm(path: &Path, lo: f64, hi: f64) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::BadCheckpoint("truncated pgm header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_owned));
    }
    let bad = || Error::BadCheckpoint("malformed pgm header".into());
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes)?;
    Ok((w, h, bytes.iter().map(|&b| lo + (hi - lo) * b as f64 / 255.0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let v: Vec<f64> = (0..12).map(|i| -1.0 + i as f64 / 6.0).collect();
        write_image(&p, 2, &[0.0]).unwrap_err();
        write_pgm(&p, 4, 3, &v, -1.0, 1.0).unwrap();
        let (w, h, back) = read_pgm(&p, -1.0, 1.0).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
}
