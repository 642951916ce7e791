use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::tensor::Matrix;

use super::Dataset;

/// Outcome of a folder load: files skipped and why.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    pub warnings: Vec<String>,
}

/// Loads every decodable PNM file in `dir`, ordered by file name, resized to
/// `target`. Unreadable files are skipped with one warning each.
pub fn load_folder(dir: &Path, target: ImageShape) -> Result<(Dataset, LoadReport)> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut report = LoadReport::default();
    let mut rows = Vec::new();
    for p in paths {
        let decoded = std::fs::read(&p).map_err(Error::from).and_then(|b| Image::from_pnm(&b)).and_then(|i| i.resized(target));
        match decoded {
            Ok(img) => rows.push(img.data),
            Err(e) => {
                let msg = format!("skipping {}: {e}", p.display());
                log::warn!("{msg}");
                report.warnings.push(msg);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("no readable images in {}", dir.display())));
    }
    report.loaded = rows.len();
    Ok((
        Dataset {
            shape: target,
            images: Matrix::from_rows(&rows)?,
            factors: None,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, v: f64) {
        Image::filled(ImageShape::new(1, 4, 4), v).save_pnm(&dir.join(name)).unwrap();
    }

    #[test]
    fn loads_sorted_and_counts_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "b.pgm", 1.0);
        write(tmp.path(), "a.pgm", -1.0);
        write(tmp.path(), "c.pgm", 0.0);
        std::fs::write(tmp.path().join("broken.ppm"), b"P6\n9 9\n255\nxx").unwrap();
        std::fs::write(tmp.path().join("notes.txt"), b"hello").unwrap();
        let target = ImageShape::new(1, 2, 2);
        let (d, rep) = load_folder(tmp.path(), target).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(rep.warnings.len(), 2);
        assert_eq!(d.images.get(0, 0), -1.0);
        assert_eq!(d.images.get(1, 0), 1.0);
        let (again, _) = load_folder(tmp.path(), target).unwrap();
        assert_eq!(again.images, d.images);
    }

    #[test]
    fn empty_folder_errors() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_folder(tmp.path(), ImageShape::new(1, 2, 2)), Err(Error::EmptyDataset(_))));
    }
}
