//! File input: CSV datasets (header row, numeric features, named label
//! column, optional labeled-flag column) and IDX image/label files.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Labels, TaskKind, WeakDataset};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CsvTask {
    /// Class indices; the class count is inferred as max label + 1 when absent.
    Classification { classes: Option<usize> },
    Regression,
}

/// Load a CSV dataset. Every non-label, non-flag column is a numeric
/// feature, in header order. The labeled-flag column accepts 0/1/true/false.
pub fn load_csv(
    path: &Path,
    label_column: &str,
    labeled_column: Option<&str>,
    task: &CsvTask,
) -> Result<WeakDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|&c| c == label_column)
        .ok_or_else(|| {
            Error::Config(format!(
                "{}: label column '{label_column}' not in header",
                path.display()
            ))
        })?;
    let flag_idx = match labeled_column {
        Some(name) => Some(columns.iter().position(|&c| c == name).ok_or_else(|| {
            Error::Config(format!(
                "{}: labeled column '{name}' not in header",
                path.display()
            ))
        })?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..columns.len())
        .filter(|&i| i != label_idx && Some(i) != flag_idx)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Config(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let mut features: Vec<f64> = Vec::new();
    let mut class_labels: Vec<usize> = Vec::new();
    let mut real_labels: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut rows = 0usize;
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Config(format!(
                "{}:{}: {} fields, header has {}",
                path.display(),
                line_no + 1,
                fields.len(),
                columns.len()
            )));
        }
        for &c in &feature_cols {
            let v: f64 = fields[c].parse().map_err(|_| {
                Error::Config(format!(
                    "{}:{}: non-numeric feature '{}'",
                    path.display(),
                    line_no + 1,
                    fields[c]
                ))
            })?;
            features.push(v);
        }
        match task {
            CsvTask::Classification { .. } => {
                let y: usize = fields[label_idx].parse().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: non-integer class label '{}'",
                        path.display(),
                        line_no + 1,
                        fields[label_idx]
                    ))
                })?;
                class_labels.push(y);
            }
            CsvTask::Regression => {
                let y: f64 = fields[label_idx].parse().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: non-numeric label '{}'",
                        path.display(),
                        line_no + 1,
                        fields[label_idx]
                    ))
                })?;
                real_labels.push(y);
            }
        }
        let flagged = match flag_idx {
            Some(c) => matches!(fields[c], "1" | "true" | "TRUE" | "True"),
            None => true,
        };
        mask.push(flagged);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    let features = Array2::from_shape_vec((rows, feature_cols.len()), features)
        .expect("row-major feature buffer");
    match task {
        CsvTask::Classification { classes } => {
            let k = classes
                .unwrap_or_else(|| class_labels.iter().copied().max().unwrap_or(0) + 1);
            WeakDataset::new(
                features,
                Labels::Classes(class_labels),
                TaskKind::Classification { classes: k },
                mask,
            )
        }
        CsvTask::Regression => WeakDataset::new(
            features,
            Labels::Reals(real_labels),
            TaskKind::Regression,
            mask,
        ),
    }
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Config("IDX file truncated".into()))
}

/// Parse an IDX image file (big-endian magic 0x00000803) into an
/// n x (rows*cols) matrix of pixel intensities scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Config(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    let pixels = n * rows * cols;
    let data = bytes
        .get(16..16 + pixels)
        .ok_or_else(|| Error::Config(format!("{}: truncated pixel data", path.display())))?;
    let features: Vec<f64> = data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array2::from_shape_vec((n, rows * cols), features).expect("sized buffer"))
}

/// Parse an IDX label file (big-endian magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Config(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let data = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Config(format!("{}: truncated label data", path.display())))?;
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Combine IDX image and label files into a dataset.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<WeakDataset> {
    let features = load_idx_images(images)?;
    let ys = load_idx_labels(labels)?;
    if features.nrows() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images but {} labels",
            features.nrows(),
            ys.len()
        )));
    }
    let classes = ys.iter().copied().max().unwrap_or(0) + 1;
    let n = ys.len();
    WeakDataset::new(
        features,
        Labels::Classes(ys),
        TaskKind::Classification { classes },
        vec![true; n],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, content: &[u8]) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pgs-io-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content).unwrap();
        path
    }

    #[test]
    fn loads_classification_csv() {
        let path = write_temp(
            "class.csv",
            b"f0,f1,label,is_labeled\n0.5,1.0,0,1\n-0.25,2.0,1,0\n1.5,0.0,1,1\n",
        );
        let d = load_csv(
            &path,
            "label",
            Some("is_labeled"),
            &CsvTask::Classification { classes: None },
        )
        .unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.task().classes(), Some(2));
        assert_eq!(d.labeled_mask(), &[true, false, true]);
        assert_eq!(d.features()[(1, 0)], -0.25);
    }

    #[test]
    fn loads_regression_csv_without_flag() {
        let path = write_temp("reg.csv", b"x,y,target\n1,2,0.5\n3,4,-1.5\n");
        let d = load_csv(&path, "target", None, &CsvTask::Regression).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels().as_reals().unwrap(), &[0.5, -1.5]);
        assert!(d.labeled_mask().iter().all(|&l| l));
    }

    #[test]
    fn rejects_missing_label_column() {
        let path = write_temp("bad.csv", b"a,b\n1,2\n");
        let err = load_csv(&path, "label", None, &CsvTask::Regression).unwrap_err();
        assert!(err.to_string().contains("label column"));
    }

    #[test]
    fn rejects_non_numeric_feature() {
        let path = write_temp("nonnum.csv", b"a,label\noops,1\n");
        let err = load_csv(
            &path,
            "label",
            None,
            &CsvTask::Classification { classes: Some(2) },
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-numeric feature"));
    }

    fn idx_image_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(IDX_IMAGE_MAGIC.to_be_bytes());
        out.extend(n.to_be_bytes());
        out.extend(rows.to_be_bytes());
        out.extend(cols.to_be_bytes());
        out.extend(pixels);
        out
    }

    #[test]
    fn idx_round_trip() {
        let pixels: Vec<u8> = (0..2 * 2 * 2).map(|i| (i * 30) as u8).collect();
        let img_path = write_temp("img.idx", &idx_image_bytes(2, 2, 2, &pixels));
        let mut label_bytes = Vec::new();
        label_bytes.extend(IDX_LABEL_MAGIC.to_be_bytes());
        label_bytes.extend(2u32.to_be_bytes());
        label_bytes.extend([7u8, 3u8]);
        let lbl_path = write_temp("lbl.idx", &label_bytes);

        let d = load_idx_dataset(&img_path, &lbl_path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.labels().as_classes().unwrap(), &[7, 3]);
        assert!((d.features()[(0, 1)] - 30.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let mut bytes = idx_image_bytes(1, 1, 1, &[0]);
        bytes[3] = 0x99;
        let path = write_temp("badmagic.idx", &bytes);
        assert!(load_idx_images(&path).is_err());
    }
}
