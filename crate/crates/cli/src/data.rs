//! Dataset directory: `manifest.csv` plus one PGM per image.

use std::path::Path;

use jdl_core::phantom::{BBox, Dataset, PhantomSample, CLASS_NAMES, NUM_CLASSES, SIDE};
use jdl_core::pgm;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.csv";
pub const IMAGES: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: String,
    pub labeled: u8,
    pub cardiomegaly: u8,
    pub nodule: u8,
    pub effusion: u8,
    /// Space-separated `class:x0:y0:x1:y1` entries.
    pub bboxes: String,
}

fn bbox_field(b: &[BBox]) -> String {
    b.iter().map(|b| format!("{}:{}:{}:{}:{}", b.class, b.x0, b.y0, b.x1, b.y1)).collect::<Vec<_>>().join(" ")
}

fn parse_bboxes(s: &str) -> CliResult<Vec<BBox>> {
    s.split_whitespace()
        .map(|e| {
            let v: Vec<usize> = e.split(':').map(str::parse).collect::<Result<_, _>>().map_err(|_| CliError::Missing(format!("bad bbox entry {e:?}")))?;
            match v[..] {
                [class, x0, y0, x1, y1] if class < NUM_CLASSES => Ok(BBox { class, x0, y0, x1, y1 }),
                _ => Err(CliError::Missing(format!("bad bbox entry {e:?}"))),
            }
        })
        .collect()
}

impl ManifestRow {
    fn from_sample(s: &PhantomSample, split: &str) -> Self {
        let b = |v: bool| v as u8;
        Self {
            id: s.id.clone(),
            split: split.into(),
            labeled: b(s.labeled),
            cardiomegaly: b(s.labels[0]),
            nodule: b(s.labels[1]),
            effusion: b(s.labels[2]),
            bboxes: bbox_field(&s.bboxes),
        }
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> CliResult<()> {
    let img_dir = dir.join(IMAGES);
    std::fs::create_dir_all(&img_dir)?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    for (split, items) in [("train", &ds.train), ("test", &ds.test)] {
        for s in items {
            w.serialize(ManifestRow::from_sample(s, split))?;
            pgm::write_image(&img_dir.join(format!("{}.pgm", s.id)), SIDE, &s.image)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the dataset back. Pixel values carry 8-bit quantisation.
pub fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    let mut r = csv::Reader::from_path(dir.join(MANIFEST))?;
    let mut ds = Dataset { train: Vec::new(), test: Vec::new() };
    for row in r.deserialize() {
        let row: ManifestRow = row?;
        let (w, h, image) = pgm::read_pgm(&dir.join(IMAGES).join(format!("{}.pgm", row.id)), -1.0, 1.0)?;
        if (w, h) != (SIDE, SIDE) {
            return Err(CliError::Missing(format!("image {} is {w}x{h}, expected {SIDE}x{SIDE}", row.id)));
        }
        let sample = PhantomSample {
            id: row.id.clone(),
            image,
            labels: [row.cardiomegaly == 1, row.nodule == 1, row.effusion == 1],
            bboxes: parse_bboxes(&row.bboxes)?,
            labeled: row.labeled == 1,
            lesion_pixels: Vec::new(),
            anatomy: None,
        };
        match row.split.as_str() {
            "train" => ds.train.push(sample),
            "test" => ds.test.push(sample),
            other => return Err(CliError::Missing(format!("unknown split {other:?} in manifest"))),
        }
    }
    Ok(ds)
}

/// Per-class positive rate.
pub fn prevalence(items: &[PhantomSample]) -> [f64; NUM_CLASSES] {
    let mut p = [0.0; NUM_CLASSES];
    for s in items {
        for (k, &l) in s.labels.iter().enumerate() {
            p[k] += l as u8 as f64;
        }
    }
    p.map(|c| c / items.len().max(1) as f64)
}

/// Accepts a class name or index.
pub fn parse_class(s: &str) -> CliResult<usize> {
    if let Some(k) = CLASS_NAMES.iter().position(|n| n.eq_ignore_ascii_case(s)) {
        return Ok(k);
    }
    match s.parse::<usize>() {
        Ok(k) if k < NUM_CLASSES => Ok(k),
        _ => Err(CliError::Config(format!("unknown class {s:?}; expected one of {CLASS_NAMES:?} or 0..{NUM_CLASSES}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use jdl_core::phantom::build_dataset;

    #[test]
    fn round_trip() {
        let ds = build_dataset(12, 4, [0.5; 3], 0.25, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), 12);
        assert_eq!(back.test.len(), 4);
        for (a, b) in ds.train.iter().chain(&ds.test).zip(back.train.iter().chain(&back.test)) {
            assert_eq!((&a.id, a.labels, &a.bboxes, a.labeled), (&b.id, b.labels, &b.bboxes, b.labeled));
            assert!(a.image.iter().zip(&b.image).all(|(x, y)| (x - y).abs() <= 1.0 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn class_names_and_indices() {
        assert_eq!(parse_class("Nodule").unwrap(), 1);
        assert_eq!(parse_class("2").unwrap(), 2);
        assert!(parse_class("3").is_err());
        assert!(parse_class("fracture").is_err());
    }
}
