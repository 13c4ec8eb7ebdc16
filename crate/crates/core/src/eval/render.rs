use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::metrics::ConfusionMatrix;
use crate::error::{Error, Result};

/// Pixel size of one matrix cell in the heatmap.
pub const CELL: u32 = 24;

const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const BLUE: [f64; 3] = [8.0, 48.0, 107.0];

/// White at 0, dark blue at `t = 1`.
pub fn heat_colour(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb([0, 1, 2].map(|c| (WHITE[c] + (BLUE[c] - WHITE[c]) * t).round() as u8))
}

/// One `CELL`-sized square per entry, shaded relative to the largest count.
pub fn heatmap(cm: &ConfusionMatrix) -> RgbImage {
    let k = cm.classes() as u32;
    let max = cm.counts.iter().copied().max().unwrap_or(0);
    RgbImage::from_fn(k * CELL, k * CELL, |x, y| {
        let v = cm.counts[[(y / CELL) as usize, (x / CELL) as usize]];
        let t = if max == 0 { 0.0 } else { v as f64 / max as f64 };
        heat_colour(t)
    })
}

pub fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut header = vec![String::from("true\\predicted")];
    header.extend(cm.class_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for (name, row) in cm.class_names.iter().zip(cm.counts.rows()) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_confusion_csv(path: &Path) -> Result<ConfusionMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    let header = r.headers().map_err(|e| Error::format(path, e))?.clone();
    let class_names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let k = class_names.len();
    let mut flat = Vec::with_capacity(k * k);
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e))?;
        if record.len() != k + 1 || record.get(0) != Some(class_names.get(i).map(String::as_str).unwrap_or("")) {
            return Err(Error::format(path, format!("row {} does not match the header", i + 1)));
        }
        for cell in record.iter().skip(1) {
            flat.push(cell.parse::<u64>().map_err(|e| Error::format(path, e))?);
        }
    }
    let counts = Array2::from_shape_vec((k, k), flat).map_err(|_| Error::format(path, "matrix is not square"))?;
    Ok(ConfusionMatrix { counts, class_names })
}

/// Writes `<stem>.png` (heatmap) and `<stem>.csv` next to each other.
pub fn render_confusion(cm: &ConfusionMatrix, png: &Path, csv_path: &Path) -> Result<()> {
    heatmap(cm).save(png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(png, io),
        other => Error::format(png, other),
    })?;
    write_confusion_csv(cm, csv_path)
}
