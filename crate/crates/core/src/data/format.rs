//! FEWEMB v1, little-endian throughout:
//!
//! ```text
//! "FEMB" | u32 version=1 | u32 d_img | u32 d_txt | u32 d_joint | u32 M
//! u8 has_projection
//!   [if 1: d_img*d_joint f32 W_img0 row-major, d_txt*d_joint f32 W_txt0 row-major]
//! u32 template_len | UTF-8 template
//! M times:
//!   u32 name_len | UTF-8 name | d_txt f32 text embedding
//!   u32 n_train | u32 n_support | u32 n_query
//!   (n_train + n_support + n_query) * d_img f32, train then support then query
//! ```

use std::fs;
use std::path::Path;

use super::{ClassRecord, EmbeddingDataset, ProjectionPair};
use crate::binio::{write_atomic, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FEWEMB_MAGIC: &[u8; 4] = b"FEMB";
pub const FEWEMB_VERSION: u32 = 1;

pub fn encode_dataset(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = LeWriter::default();
    w.bytes(FEWEMB_MAGIC);
    w.u32(FEWEMB_VERSION);
    w.u32(ds.d_img as u32);
    w.u32(ds.d_txt as u32);
    w.u32(ds.d_joint as u32);
    w.u32(ds.classes.len() as u32);
    match &ds.pretrained_projection {
        Some(p) => {
            w.u8(1);
            w.f32s(p.w_img.data());
            w.f32s(p.w_txt.data());
        }
        None => w.u8(0),
    }
    w.len_prefixed_str(&ds.prompt_template);
    for class in &ds.classes {
        w.len_prefixed_str(&class.name);
        w.f32s(&class.text_embedding);
        w.u32(class.train.rows() as u32);
        w.u32(class.support.rows() as u32);
        w.u32(class.query.rows() as u32);
        w.f32s(class.train.data());
        w.f32s(class.support.data());
        w.f32s(class.query.data());
    }
    Ok(w.into_inner())
}

pub fn write_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

fn matrix_at(rows: usize, cols: usize, data: Vec<f64>, offset: usize, what: &str) -> Result<Matrix> {
    Matrix::new(rows, cols, data).map_err(|e| Error::Corrupt {
        offset,
        reason: format!("{what}: {e}"),
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = LeReader::new(bytes);
    let magic = r.take(4, "magic").map_err(|_| Error::Format("file shorter than magic".into()))?;
    if magic != FEWEMB_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {FEWEMB_MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != FEWEMB_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEWEMB_VERSION,
        });
    }
    let d_img = r.u32("d_img")? as usize;
    let d_txt = r.u32("d_txt")? as usize;
    let d_joint = r.u32("d_joint")? as usize;
    let m = r.u32("class count")? as usize;
    let pretrained_projection = match r.u8("has_projection")? {
        0 => None,
        1 => {
            let off = r.offset();
            let w_img = r.f32s(d_img * d_joint, "W_img0")?;
            let w_img = matrix_at(d_img, d_joint, w_img, off, "W_img0")?;
            let off = r.offset();
            let w_txt = r.f32s(d_txt * d_joint, "W_txt0")?;
            let w_txt = matrix_at(d_txt, d_joint, w_txt, off, "W_txt0")?;
            Some(ProjectionPair { w_img, w_txt })
        }
        other => {
            return Err(Error::Corrupt {
                offset: r.offset() - 1,
                reason: format!("has_projection flag must be 0 or 1, got {other}"),
            })
        }
    };
    let prompt_template = r.len_prefixed_str("template")?;

    let mut classes = Vec::with_capacity(m.min(4096));
    for i in 0..m {
        let name = r.len_prefixed_str(&format!("class {i} name"))?;
        let text_embedding = r.f32s(d_txt, &format!("class {i} text embedding"))?;
        let n_train = r.u32(&format!("class {i} n_train"))? as usize;
        let n_support = r.u32(&format!("class {i} n_support"))? as usize;
        let n_query = r.u32(&format!("class {i} n_query"))? as usize;
        let mut part = |n: usize, label: &str| -> Result<Matrix> {
            let what = format!("class {i} {label} images");
            let off = r.offset();
            let data = r.f32s(n * d_img, &what)?;
            matrix_at(n, d_img, data, off, &what)
        };
        let train = part(n_train, "train")?;
        let support = part(n_support, "support")?;
        let query = part(n_query, "query")?;
        classes.push(ClassRecord {
            name,
            text_embedding,
            train,
            support,
            query,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: format!("{} trailing bytes after last class", r.remaining()),
        });
    }
    let ds = EmbeddingDataset {
        d_img,
        d_txt,
        d_joint,
        prompt_template,
        classes,
        pretrained_projection,
    };
    ds.validate()?;
    Ok(ds)
}
