//! Bridge from externally computed embeddings (plain CSV matrices) to FEWEMB.
//!
//! The directory holds a `manifest.toml`:
//!
//! ```toml
//! d_img = 768
//! d_txt = 512
//! d_joint = 512
//! prompt_template = "A photo of {label}."
//!
//! [projection]            # optional zero-shot head
//! image = "w_img.csv"     # d_img rows x d_joint columns
//! text = "w_txt.csv"      # d_txt rows x d_joint columns
//!
//! [[classes]]
//! name = "baltimore oriole"
//! text = "oriole/text.csv"       # 1 row x d_txt
//! train = "oriole/train.csv"     # n_train rows x d_img
//! support = "oriole/support.csv"
//! query = "oriole/query.csv"
//! ```
//!
//! CSV files have no header; every cell is a decimal number.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{ClassRecord, EmbeddingDataset, ProjectionPair};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportManifest {
    pub d_img: usize,
    pub d_txt: usize,
    pub d_joint: usize,
    pub prompt_template: String,
    pub projection: Option<ProjectionFiles>,
    pub classes: Vec<ClassFiles>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionFiles {
    pub image: PathBuf,
    pub text: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFiles {
    pub name: String,
    pub text: PathBuf,
    pub train: PathBuf,
    pub support: PathBuf,
    pub query: PathBuf,
}

fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>()
                    .map(|v| v as f32 as f64)
                    .map_err(|e| Error::Format(format!("{}: row {i} column {j}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn expect_cols(m: &Matrix, cols: usize, path: &Path) -> Result<()> {
    if m.cols() != cols {
        return Err(Error::Validation {
            context: path.display().to_string(),
            reason: format!("expected {cols} columns, found {}", m.cols()),
        });
    }
    Ok(())
}

/// Builds a validated dataset from a CSV directory described by `manifest.toml`.
pub fn import_csv_dir(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ImportManifest = toml::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;

    let pretrained_projection = match &manifest.projection {
        Some(p) => {
            let (img_path, txt_path) = (dir.join(&p.image), dir.join(&p.text));
            let w_img = read_csv_matrix(&img_path)?;
            let w_txt = read_csv_matrix(&txt_path)?;
            expect_cols(&w_img, manifest.d_joint, &img_path)?;
            expect_cols(&w_txt, manifest.d_joint, &txt_path)?;
            Some(ProjectionPair { w_img, w_txt })
        }
        None => None,
    };

    let mut classes = Vec::with_capacity(manifest.classes.len());
    for files in &manifest.classes {
        let text_path = dir.join(&files.text);
        let text = read_csv_matrix(&text_path)?;
        if text.rows() != 1 {
            return Err(Error::Validation {
                context: text_path.display().to_string(),
                reason: format!("text embedding file must have 1 row, found {}", text.rows()),
            });
        }
        let part = |p: &PathBuf| -> Result<Matrix> {
            let path = dir.join(p);
            let m = read_csv_matrix(&path)?;
            expect_cols(&m, manifest.d_img, &path)?;
            Ok(m)
        };
        classes.push(ClassRecord {
            name: files.name.clone(),
            text_embedding: text.into_data(),
            train: part(&files.train)?,
            support: part(&files.support)?,
            query: part(&files.query)?,
        });
    }

    let ds = EmbeddingDataset {
        d_img: manifest.d_img,
        d_txt: manifest.d_txt,
        d_joint: manifest.d_joint,
        prompt_template: manifest.prompt_template,
        classes,
        pretrained_projection,
    };
    ds.validate()?;
    Ok(ds)
}
