//! On-disk formats: PGM images, raw density files, annotation and split CSVs,
//! and heatmap export.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat};

use crate::density::{DensityMap, DotAnnotatedImage, Point};
use crate::error::{Error, Result};
use crate::synth::Split;

/// Load an 8-bit grayscale PGM as `(height, width, pixels in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)?.to_luma8();
    let (w, h) = img.dimensions();
    let pixels = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / 255.0)
        .collect();
    Ok((h as usize, w as usize, pixels))
}

/// Write values in `[0, 1]` as a binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let raw: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Format("pixel buffer does not match image size".into()))?;
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            ExtendedColorType::L8,
        )?;
    fs::write(path, buf)?;
    Ok(())
}

pub const DENSITY_MAGIC: &[u8; 4] = b"DMAP";
pub const DENSITY_VERSION: u32 = 1;

/// 16-byte header (`DMAP`, version, H, W as little-endian u32) then
/// little-endian f32 values in row-major order.
pub fn write_density(w: &mut impl Write, map: &DensityMap) -> Result<()> {
    w.write_all(DENSITY_MAGIC)?;
    for v in [DENSITY_VERSION, map.height as u32, map.width as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &map.values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_density(r: &mut impl Read) -> Result<DensityMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format("density file shorter than its header".into()));
    }
    if &bytes[..4] != DENSITY_MAGIC {
        return Err(Error::Format("bad density magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != DENSITY_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DENSITY_VERSION,
        });
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != h * w * 4 {
        return Err(Error::Format(format!(
            "density body has {} bytes, expected {}",
            body.len(),
            h * w * 4
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    DensityMap::new(h, w, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_density(path: &Path, map: &DensityMap) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * map.values.len());
    write_density(&mut buf, map)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_density(path: &Path) -> Result<DensityMap> {
    read_density(&mut fs::File::open(path)?)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct AnnotationRow {
    id: String,
    row: f64,
    col: f64,
}

/// `id,row,col` rows, one per point, in image order.
pub fn write_annotations(path: &Path, images: &[&DotAnnotatedImage]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for img in images {
        for p in &img.points {
            w.serialize(AnnotationRow {
                id: img.id.clone(),
                row: p.row,
                col: p.col,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<Point>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for row in r.deserialize::<AnnotationRow>() {
        let row = row?;
        out.entry(row.id)
            .or_default()
            .push(Point::new(row.row, row.col));
    }
    Ok(out)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SplitRow {
    id: String,
    split: String,
}

pub fn write_splits(path: &Path, rows: &[(String, Split)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, s) in rows {
        w.serialize(SplitRow {
            id: id.clone(),
            split: s.name().to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_splits(path: &Path) -> Result<Vec<(String, Split)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<SplitRow>()
        .map(|row| {
            let row = row?;
            Ok((row.id, Split::parse(&row.split)?))
        })
        .collect()
}

/// Load every image of `split` from a dataset directory written by `synth`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<DotAnnotatedImage>> {
    let splits = read_splits(&dir.join("split.csv"))?;
    let mut annotations = read_annotations(&dir.join("annotations.csv"))?;
    splits
        .into_iter()
        .filter(|(_, s)| *s == split)
        .map(|(id, _)| {
            let (h, w, pixels) = read_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
            let points = annotations.remove(&id).unwrap_or_default();
            DotAnnotatedImage::new(id, h, w, pixels, points)
        })
        .collect()
}

/// Write `values` affinely rescaled to 0..=255; returns the `(min, max)` used.
pub fn write_heatmap(
    path: &Path,
    height: usize,
    width: usize,
    values: &[f64],
) -> Result<(f64, f64)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    write_pgm(path, height, width, &scaled)?;
    Ok((lo, hi))
}
