//! Contrastive image/text classifier over frozen embeddings.
//!
//! Two bias-free projections map image rows (`d_img`) and per-class text rows
//! (`d_txt`) into a shared `d_joint` space. Logits are scaled dot products
//! between every image and every candidate class text; training uses
//! image-to-text softmax cross-entropy.

use std::fs;
use std::path::Path;

use crate::binio::{write_atomic, LeReader, LeWriter};
use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, kaiming_uniform_init, Matrix, SeededRng};
use crate::tasks::LabeledImages;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPRJ";
pub const CHECKPOINT_VERSION: u32 = 1;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    /// `d_img × d_joint`
    pub w_img: Matrix,
    /// `d_txt × d_joint`
    pub w_txt: Matrix,
    pub scale: f64,
    pub normalize: bool,
}

impl ProjectionModel {
    pub fn new(w_img: Matrix, w_txt: Matrix, scale: f64, normalize: bool) -> Result<Self> {
        if w_img.cols() != w_txt.cols() {
            return Err(Error::DimensionMismatch {
                op: "projection joint dimension",
                left: w_img.shape(),
                right: w_txt.shape(),
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Usage(format!("logit scale must be > 0, got {scale}")));
        }
        Ok(Self {
            w_img,
            w_txt,
            scale,
            normalize,
        })
    }

    /// Fresh projections with Kaiming-uniform entries (bound `1/√d_in`).
    /// Draws the image projection first, then the text projection.
    pub fn kaiming(
        d_img: usize,
        d_txt: usize,
        d_joint: usize,
        scale: f64,
        normalize: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w_img = kaiming_uniform_init(d_joint, d_img, rng)?.transpose();
        let w_txt = kaiming_uniform_init(d_joint, d_txt, rng)?.transpose();
        Self::new(w_img, w_txt, scale, normalize)
    }

    /// The dataset's original projection head.
    pub fn zero_shot(ds: &EmbeddingDataset, scale: f64, normalize: bool) -> Result<Self> {
        let p = ds.pretrained_projection.as_ref().ok_or_else(|| {
            Error::Config("zero-shot evaluation needs a dataset with a pretrained projection".into())
        })?;
        Self::new(p.w_img.clone(), p.w_txt.clone(), scale, normalize)
    }

    pub fn d_img(&self) -> usize {
        self.w_img.rows()
    }

    pub fn d_txt(&self) -> usize {
        self.w_txt.rows()
    }

    pub fn d_joint(&self) -> usize {
        self.w_img.cols()
    }

    pub fn check_dataset(&self, ds: &EmbeddingDataset) -> Result<()> {
        if (self.d_img(), self.d_txt(), self.d_joint()) != (ds.d_img, ds.d_txt, ds.d_joint) {
            return Err(Error::Usage(format!(
                "model dims (d_img={}, d_txt={}, d_joint={}) do not match dataset ({}, {}, {})",
                self.d_img(),
                self.d_txt(),
                self.d_joint(),
                ds.d_img,
                ds.d_txt,
                ds.d_joint
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_img.is_finite() && self.w_txt.is_finite()
    }
}

/// Images with local labels plus one text row per candidate class.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub texts: Matrix,
}

impl Batch {
    pub fn new(images: Matrix, labels: Vec<usize>, texts: Matrix) -> Result<Self> {
        if labels.len() != images.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} image rows",
                labels.len(),
                images.rows()
            )));
        }
        if texts.rows() < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 candidate classes, got {}",
                texts.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= texts.rows()) {
            return Err(Error::Usage(format!(
                "label {bad} out of range for {} classes",
                texts.rows()
            )));
        }
        Ok(Self {
            images,
            labels,
            texts,
        })
    }

    pub fn from_labeled(rows: &LabeledImages, texts: &Matrix) -> Result<Self> {
        Self::new(rows.images.clone(), rows.labels.clone(), texts.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.texts.rows()
    }

    /// Sub-batch of the listed rows, sharing the candidate texts.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            texts: self.texts.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_img: Matrix,
    pub d_txt: Matrix,
}

struct Forward {
    /// Projected (and optionally normalized) image rows.
    p: Matrix,
    q: Matrix,
    p_norms: Vec<f64>,
    q_norms: Vec<f64>,
    logits: Matrix,
}

fn check_shapes(model: &ProjectionModel, batch: &Batch) -> Result<()> {
    if batch.images.cols() != model.d_img() {
        return Err(Error::DimensionMismatch {
            op: "image projection",
            left: batch.images.shape(),
            right: model.w_img.shape(),
        });
    }
    if batch.texts.cols() != model.d_txt() {
        return Err(Error::DimensionMismatch {
            op: "text projection",
            left: batch.texts.shape(),
            right: model.w_txt.shape(),
        });
    }
    Ok(())
}

fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let norms: Vec<f64> = m
        .iter_rows()
        .map(|r| dot(r, r).sqrt().max(NORM_FLOOR))
        .collect();
    let out = Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) / norms[r])?;
    Ok((out, norms))
}

fn forward(model: &ProjectionModel, batch: &Batch) -> Result<Forward> {
    check_shapes(model, batch)?;
    let p = batch.images.matmul(&model.w_img)?;
    let q = batch.texts.matmul(&model.w_txt)?;
    let (p, q, p_norms, q_norms) = if model.normalize {
        let (p, pn) = normalize_rows(&p)?;
        let (q, qn) = normalize_rows(&q)?;
        (p, q, pn, qn)
    } else {
        (p, q, Vec::new(), Vec::new())
    };
    let logits = p.matmul_t(&q)?.scaled(model.scale)?;
    Ok(Forward {
        p,
        q,
        p_norms,
        q_norms,
        logits,
    })
}

/// Row-wise softmax and the mean cross-entropy against `labels`.
fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(Matrix, f64)> {
    let n = logits.cols();
    let mut probs = Vec::with_capacity(logits.rows() * n);
    let mut total = 0.0;
    for (row, &label) in logits.iter_rows().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        probs.extend(row.iter().map(|v| (v - max).exp() / sum));
    }
    let loss = total / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy evaluated to {loss}")));
    }
    Ok((Matrix::new(logits.rows(), n, probs)?, loss))
}

/// `scale · P·Qᵀ` with `P`, `Q` the projected (optionally unit-normalized) rows.
pub fn logits(model: &ProjectionModel, batch: &Batch) -> Result<Matrix> {
    Ok(forward(model, batch)?.logits)
}

pub fn loss(model: &ProjectionModel, batch: &Batch) -> Result<f64> {
    let fwd = forward(model, batch)?;
    Ok(softmax_xent(&fwd.logits, &batch.labels)?.1)
}

/// Back-propagates through unit normalization: `(g - y·⟨g, y⟩) / ‖x‖` per row.
fn normalize_backward(grad: &Matrix, unit: &Matrix, norms: &[f64]) -> Result<Matrix> {
    let mut out = Vec::with_capacity(grad.rows() * grad.cols());
    for ((g, y), &norm) in grad.iter_rows().zip(unit.iter_rows()).zip(norms) {
        let along = dot(g, y);
        out.extend(g.iter().zip(y).map(|(gi, yi)| (gi - yi * along) / norm));
    }
    Matrix::new(grad.rows(), grad.cols(), out)
}

pub fn loss_and_grads(model: &ProjectionModel, batch: &Batch) -> Result<(f64, Gradients)> {
    let fwd = forward(model, batch)?;
    let (probs, loss) = softmax_xent(&fwd.logits, &batch.labels)?;
    let coef = model.scale / batch.len() as f64;
    let n = probs.cols();
    let g = Matrix::from_fn(probs.rows(), n, |b, c| {
        let onehot = if batch.labels[b] == c { 1.0 } else { 0.0 };
        (probs.get(b, c) - onehot) * coef
    })?;
    let mut d_p = g.matmul(&fwd.q)?;
    let mut d_q = g.t_matmul(&fwd.p)?;
    if model.normalize {
        d_p = normalize_backward(&d_p, &fwd.p, &fwd.p_norms)?;
        d_q = normalize_backward(&d_q, &fwd.q, &fwd.q_norms)?;
    }
    let grads = Gradients {
        d_img: batch.images.t_matmul(&d_p)?,
        d_txt: batch.texts.t_matmul(&d_q)?,
    };
    Ok((loss, grads))
}

pub fn grads(model: &ProjectionModel, batch: &Batch) -> Result<Gradients> {
    Ok(loss_and_grads(model, batch)?.1)
}

/// Row-wise argmax of the logits; ties go to the lowest class index.
pub fn predict(model: &ProjectionModel, batch: &Batch) -> Result<Vec<usize>> {
    let logits = logits(model, batch)?;
    Ok(logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(model: &ProjectionModel, batch: &Batch) -> Result<f64> {
    let preds = predict(model, batch)?;
    let hits = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Encodes an `FPRJ` v1 checkpoint:
/// `"FPRJ" | u32 version | u32 d_img | u32 d_txt | u32 d_joint | f64 scale |
/// u8 normalize | W_img f32 row-major | W_txt f32 row-major`.
pub fn encode_checkpoint(model: &ProjectionModel) -> Vec<u8> {
    let mut w = LeWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(model.d_img() as u32);
    w.u32(model.d_txt() as u32);
    w.u32(model.d_joint() as u32);
    w.f64(model.scale);
    w.u8(u8::from(model.normalize));
    w.f32s(model.w_img.data());
    w.f32s(model.w_txt.data());
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ProjectionModel> {
    let mut r = LeReader::new(bytes);
    let magic = r.take(4, "magic").map_err(|_| Error::Format("checkpoint shorter than magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let d_img = r.u32("d_img")? as usize;
    let d_txt = r.u32("d_txt")? as usize;
    let d_joint = r.u32("d_joint")? as usize;
    let scale = r.f64("scale")?;
    let normalize = match r.u8("normalize")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Corrupt {
                offset: r.offset() - 1,
                reason: format!("normalize flag must be 0 or 1, got {other}"),
            })
        }
    };
    let off = r.offset();
    let w_img = r.f32s(d_img * d_joint, "W_img")?;
    let w_img = Matrix::new(d_img, d_joint, w_img).map_err(|e| Error::Corrupt {
        offset: off,
        reason: e.to_string(),
    })?;
    let off = r.offset();
    let w_txt = r.f32s(d_txt * d_joint, "W_txt")?;
    let w_txt = Matrix::new(d_txt, d_joint, w_txt).map_err(|e| Error::Corrupt {
        offset: off,
        reason: e.to_string(),
    })?;
    if r.remaining() != 0 {
        return Err(Error::Corrupt {
            offset: r.offset(),
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    ProjectionModel::new(w_img, w_txt, scale, normalize)
}

pub fn save_checkpoint(model: &ProjectionModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ProjectionModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_diff_grad;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_case(rng: &mut SeededRng, normalize: bool) -> (ProjectionModel, Batch) {
        let b = rng.random_range(1..=16);
        let n = rng.random_range(2..=5);
        let d_img = rng.random_range(2..=12);
        let d_txt = rng.random_range(2..=10);
        let d_joint = rng.random_range(2..=8);
        let model = ProjectionModel::new(
            random(d_img, d_joint, rng),
            random(d_txt, d_joint, rng),
            rng.random_range(0.5..2.0),
            normalize,
        )
        .unwrap();
        let labels = (0..b).map(|_| rng.random_range(0..n)).collect();
        let batch = Batch::new(random(b, d_img, rng), labels, random(n, d_txt, rng)).unwrap();
        (model, batch)
    }

    /// Relative error with an absolute floor for near-zero entries.
    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    fn check_gradients(normalize: bool, tol: f64) {
        let mut rng = SeededRng::new(if normalize { 21 } else { 20 });
        for _ in 0..20 {
            let (model, batch) = random_case(&mut rng, normalize);
            let g = grads(&model, &batch).unwrap();
            let fd_img = finite_diff_grad(
                |w| loss(&ProjectionModel { w_img: w.clone(), ..model.clone() }, &batch).unwrap(),
                &model.w_img,
                1e-5,
            )
            .unwrap();
            let fd_txt = finite_diff_grad(
                |w| loss(&ProjectionModel { w_txt: w.clone(), ..model.clone() }, &batch).unwrap(),
                &model.w_txt,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_err(&g.d_img, &fd_img) < tol);
            assert!(max_rel_err(&g.d_txt, &fd_txt) < tol);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(false, 1e-4);
    }

    #[test]
    fn normalized_gradients_match_finite_differences() {
        check_gradients(true, 1e-3);
    }

    #[test]
    fn zero_projections_give_zero_logits_and_log_n_loss() {
        for n in [2usize, 5, 10] {
            let model = ProjectionModel::new(Matrix::zeros(4, 3), Matrix::zeros(6, 3), 1.0, false).unwrap();
            let mut rng = SeededRng::new(n as u64);
            let batch = Batch::new(random(7, 4, &mut rng), vec![1; 7], random(n, 6, &mut rng)).unwrap();
            assert_eq!(logits(&model, &batch).unwrap().max_abs(), 0.0);
            assert!((loss(&model, &batch).unwrap() - (n as f64).ln()).abs() < 1e-12);
            assert_eq!(predict(&model, &batch).unwrap(), vec![0; 7]);
        }
    }

    fn identity_case(scale: f64) -> (ProjectionModel, Batch) {
        let model = ProjectionModel::new(Matrix::identity(2), Matrix::identity(2), scale, false).unwrap();
        let batch = Batch::new(Matrix::identity(2), vec![0, 1], Matrix::identity(2)).unwrap();
        (model, batch)
    }

    #[test]
    fn orthonormal_construction_gives_scaled_identity() {
        let (model, batch) = identity_case(3.0);
        let l = logits(&model, &batch).unwrap();
        assert_eq!(l, Matrix::identity(2).scaled(3.0).unwrap());
        assert_eq!(accuracy(&model, &batch).unwrap(), 1.0);
        let flipped = Batch::new(batch.images.clone(), vec![1, 0], batch.texts.clone()).unwrap();
        assert_eq!(accuracy(&model, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn identity_logits_closed_form_loss() {
        let (model, batch) = identity_case(1.0);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss(&model, &batch).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn logits_match_pairwise_dot_products() {
        let mut rng = SeededRng::new(9);
        let (model, batch) = random_case(&mut rng, false);
        let l = logits(&model, &batch).unwrap();
        let p = batch.images.matmul(&model.w_img).unwrap();
        let q = batch.texts.matmul(&model.w_txt).unwrap();
        for i in 0..batch.len() {
            for j in 0..batch.num_classes() {
                let mut acc = 0.0;
                for k in 0..model.d_joint() {
                    acc += p.get(i, k) * q.get(j, k);
                }
                assert!((l.get(i, j) - model.scale * acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let model = ProjectionModel::new(Matrix::identity(2), Matrix::identity(2), 1.0, false).unwrap();
        let images = Matrix::from_rows(&[[1e3, -1e3], [-1e3, 1e3]]).unwrap();
        let batch = Batch::new(images, vec![1, 1], Matrix::identity(2)).unwrap();
        let l = loss(&model, &batch).unwrap();
        assert!(l.is_finite());
        assert!((l - 1e3).abs() < 1e-9);
    }

    #[test]
    fn saturated_correct_predictions_have_vanishing_gradients() {
        let (model, batch) = identity_case(200.0);
        let g = grads(&model, &batch).unwrap();
        assert!(g.d_img.max_abs() < 1e-60 && g.d_txt.max_abs() < 1e-60);
    }

    #[test]
    fn prediction_is_scale_invariant() {
        let mut rng = SeededRng::new(4);
        for _ in 0..10 {
            let (model, batch) = random_case(&mut rng, false);
            let base = predict(&model, &batch).unwrap();
            for c in [0.01, 3.0, 250.0] {
                let scaled = ProjectionModel { scale: model.scale * c, ..model.clone() };
                assert_eq!(predict(&scaled, &batch).unwrap(), base);
            }
        }
    }

    #[test]
    fn small_gradient_step_decreases_loss() {
        let mut rng = SeededRng::new(6);
        for _ in 0..10 {
            let (model, batch) = random_case(&mut rng, false);
            let (l0, g) = loss_and_grads(&model, &batch).unwrap();
            let step = 1e-4;
            let next = ProjectionModel {
                w_img: model.w_img.add_scaled(&g.d_img, -step).unwrap(),
                w_txt: model.w_txt.add_scaled(&g.d_txt, -step).unwrap(),
                ..model.clone()
            };
            assert!(loss(&next, &batch).unwrap() < l0);
            assert!(l0 >= 0.0);
        }
    }

    #[test]
    fn shape_errors_are_usage_errors() {
        let model = ProjectionModel::new(Matrix::zeros(4, 3), Matrix::zeros(6, 3), 1.0, false).unwrap();
        let batch = Batch::new(Matrix::zeros(2, 5), vec![0, 1], Matrix::zeros(2, 6)).unwrap();
        assert!(matches!(logits(&model, &batch), Err(Error::DimensionMismatch { .. })));
        assert!(Batch::new(Matrix::zeros(2, 4), vec![0, 2], Matrix::zeros(2, 6)).is_err());
        assert!(ProjectionModel::new(Matrix::zeros(4, 3), Matrix::zeros(6, 3), 0.0, false).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = ProjectionModel::kaiming(6, 4, 3, 2.5, true, &mut SeededRng::new(1)).unwrap();
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.scale, 2.5);
        assert!(back.normalize);
        for (a, b) in back.w_img.data().iter().zip(model.w_img.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_checkpoint(&back), bytes);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 2, .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn kaiming_projections_respect_input_fan() {
        let model = ProjectionModel::kaiming(100, 25, 8, 1.0, false, &mut SeededRng::new(2)).unwrap();
        assert_eq!(model.w_img.shape(), (100, 8));
        assert!(model.w_img.max_abs() <= 0.1);
        assert!(model.w_txt.max_abs() <= 0.2);
    }
}
