//! Embedding datasets: in-memory types, the FEWEMB binary format, synthetic
//! generation and CSV import.
//!
//! A dataset holds frozen pre-projection encoder outputs. Each class carries
//! one text embedding (the encoded filled prompt) and three disjoint image
//! partitions: `train`, `support` and `query`. The partition sizes are the
//! same for every class.

mod format;
mod import;
mod synthetic;

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, FEWEMB_MAGIC, FEWEMB_VERSION};
pub use import::{import_csv_dir, ImportManifest};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_D_IMG: usize = 768;
pub const DEFAULT_D_TXT: usize = 512;
pub const DEFAULT_D_JOINT: usize = 512;
pub const DEFAULT_TEMPLATE: &str = "A photo of {label}.";

const PLACEHOLDER: &str = "{label}";

/// Which per-class image partition to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Support,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub name: String,
    pub text_embedding: Vec<f64>,
    pub train: Matrix,
    pub support: Matrix,
    pub query: Matrix,
}

impl ClassRecord {
    pub fn partition(&self, which: Partition) -> &Matrix {
        match which {
            Partition::Train => &self.train,
            Partition::Support => &self.support,
            Partition::Query => &self.query,
        }
    }
}

/// The zero-shot head: the encoder's original projection pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    /// `d_img × d_joint`
    pub w_img: Matrix,
    /// `d_txt × d_joint`
    pub w_txt: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub d_img: usize,
    pub d_txt: usize,
    pub d_joint: usize,
    pub prompt_template: String,
    pub classes: Vec<ClassRecord>,
    pub pretrained_projection: Option<ProjectionPair>,
}

impl EmbeddingDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Per-class `(train, support, query)` counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        self.classes
            .first()
            .map(|c| (c.train.rows(), c.support.rows(), c.query.rows()))
            .unwrap_or((0, 0, 0))
    }

    /// Text embeddings of the listed classes, one row each, in the given order.
    pub fn text_matrix(&self, class_indices: &[usize]) -> Result<Matrix> {
        let rows: Vec<&[f64]> = class_indices
            .iter()
            .map(|&c| {
                self.classes
                    .get(c)
                    .map(|r| r.text_embedding.as_slice())
                    .ok_or_else(|| Error::Usage(format!("class index {c} out of range")))
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let ctx = |what: &str| what.to_string();
        if self.d_img == 0 || self.d_txt == 0 || self.d_joint == 0 {
            return Err(Error::Validation {
                context: ctx("header"),
                reason: format!(
                    "dimensions must be positive (d_img={}, d_txt={}, d_joint={})",
                    self.d_img, self.d_txt, self.d_joint
                ),
            });
        }
        if self.classes.len() < 2 {
            return Err(Error::Validation {
                context: ctx("header"),
                reason: format!("need at least 2 classes, found {}", self.classes.len()),
            });
        }
        let counts = self.split_counts();
        let mut names = HashSet::new();
        for (i, class) in self.classes.iter().enumerate() {
            let context = format!("class {i} ({:?})", class.name);
            if !names.insert(class.name.as_str()) {
                return Err(Error::Validation {
                    context,
                    reason: "duplicate class name".into(),
                });
            }
            if class.text_embedding.len() != self.d_txt {
                return Err(Error::Validation {
                    context,
                    reason: format!(
                        "text_embedding has length {}, expected d_txt={}",
                        class.text_embedding.len(),
                        self.d_txt
                    ),
                });
            }
            if class.text_embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    context,
                    reason: "text_embedding contains a non-finite value".into(),
                });
            }
            for (label, part) in [
                ("train", &class.train),
                ("support", &class.support),
                ("query", &class.query),
            ] {
                if part.cols() != self.d_img {
                    return Err(Error::Validation {
                        context,
                        reason: format!(
                            "{label} image embeddings have width {}, expected d_img={}",
                            part.cols(),
                            self.d_img
                        ),
                    });
                }
            }
            let these = (class.train.rows(), class.support.rows(), class.query.rows());
            if these != counts {
                return Err(Error::Validation {
                    context,
                    reason: format!("split counts {these:?} differ from class 0's {counts:?}"),
                });
            }
        }
        if let Some(p) = &self.pretrained_projection {
            if p.w_img.shape() != (self.d_img, self.d_joint) {
                return Err(Error::Validation {
                    context: ctx("pretrained_projection"),
                    reason: format!(
                        "W_img0 is {:?}, expected ({}, {})",
                        p.w_img.shape(),
                        self.d_img,
                        self.d_joint
                    ),
                });
            }
            if p.w_txt.shape() != (self.d_txt, self.d_joint) {
                return Err(Error::Validation {
                    context: ctx("pretrained_projection"),
                    reason: format!(
                        "W_txt0 is {:?}, expected ({}, {})",
                        p.w_txt.shape(),
                        self.d_txt,
                        self.d_joint
                    ),
                });
            }
        }
        fill_prompt(&self.prompt_template, "x").map_err(|e| Error::Validation {
            context: ctx("prompt_template"),
            reason: e.to_string(),
        })?;
        Ok(())
    }
}

/// Substitutes `label` into the single `{label}` placeholder of `template`.
pub fn fill_prompt(template: &str, label: &str) -> Result<String> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(template.replacen(PLACEHOLDER, label, 1)),
        n => Err(Error::Template(format!(
            "template {template:?} must contain {PLACEHOLDER} exactly once, found {n}"
        ))),
    }
}
