use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{fill_prompt, ClassRecord, EmbeddingDataset, ProjectionPair, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

/// Parameters of the latent-cluster generator.
///
/// Class `c` has a latent centroid `μ_c` in the joint space. Image rows are
/// `(μ_c + ε)·A` and the text row is `μ_c·B` for fixed random maps `A` and
/// `B`; the pretrained projection is the pseudo-inverse pair, so projecting
/// with it recovers the latent coordinates.
///
/// With `spurious` set, the last `M` image coordinates carry a one-hot class
/// code of height `spurious_strength`. The code is correct on the train
/// split and shuffled across rows on the support and query splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_joint: usize,
    pub n_train: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    pub spurious: bool,
    pub spurious_strength: f64,
    /// Orthogonal, equal-norm centroids; requires `num_classes <= d_joint`.
    pub orthogonal_centroids: bool,
    pub prompt_template: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            d_img: super::DEFAULT_D_IMG,
            d_txt: super::DEFAULT_D_TXT,
            d_joint: super::DEFAULT_D_JOINT,
            n_train: 60,
            n_support: 10,
            n_query: 10,
            sigma_between: 1.0,
            sigma_within: 0.5,
            spurious: false,
            spurious_strength: 1.0,
            orthogonal_centroids: false,
            prompt_template: DEFAULT_TEMPLATE.into(),
        }
    }
}

impl SyntheticSpec {
    /// Generator seed of the spurious-correlation benchmark.
    pub const BENCHMARK_SEED: u64 = 0;

    /// The spurious-correlation benchmark: default shapes and noise with the
    /// spurious block switched on. Generate it with [`Self::BENCHMARK_SEED`].
    pub fn spurious_benchmark() -> Self {
        Self {
            spurious: true,
            ..Self::default()
        }
    }

    fn spurious_dims(&self) -> usize {
        if self.spurious {
            self.num_classes
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(format!("synthetic spec: {msg}")));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.n_train == 0 || self.n_support == 0 || self.n_query == 0 {
            return bad("per-class split counts must be positive".into());
        }
        if !(self.sigma_within > 0.0) || !self.sigma_within.is_finite() {
            return bad(format!("sigma_within must be > 0, got {}", self.sigma_within));
        }
        if !(self.sigma_between >= 0.0) || !self.sigma_between.is_finite() {
            return bad(format!("sigma_between must be >= 0, got {}", self.sigma_between));
        }
        if !self.spurious_strength.is_finite() {
            return bad("spurious_strength must be finite".into());
        }
        if self.d_joint == 0 || self.d_txt < self.d_joint {
            return bad(format!(
                "need 0 < d_joint <= d_txt, got d_joint={} d_txt={}",
                self.d_joint, self.d_txt
            ));
        }
        let d_signal = self.d_img.saturating_sub(self.spurious_dims());
        if d_signal < self.d_joint {
            return bad(format!(
                "image signal block has {d_signal} dims (d_img={} minus {} spurious), needs >= d_joint={}",
                self.d_img,
                self.spurious_dims(),
                self.d_joint
            ));
        }
        if self.orthogonal_centroids && self.num_classes > self.d_joint {
            return bad(format!(
                "orthogonal centroids need num_classes <= d_joint ({} > {})",
                self.num_classes, self.d_joint
            ));
        }
        fill_prompt(&self.prompt_template, "x")?;
        Ok(())
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn to_f32_grid(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Moore-Penrose pseudo-inverse of a row-major `rows × cols` matrix.
fn pseudo_inverse(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let pinv = m
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::NonFinite(format!("pseudo-inverse failed: {e}")))?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..pinv.nrows() {
        for c in 0..pinv.ncols() {
            out.push(pinv[(r, c)]);
        }
    }
    Ok(out)
}

fn orthogonal_centroids(m: usize, dim: usize, norm: f64, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v = gaussian(1, dim, 1.0, rng);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-8 {
            v.iter_mut().for_each(|x| *x /= len);
            basis.push(v);
        }
    }
    Ok(basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * norm).collect())
        .collect())
}

/// Row-major `(rows × cols) · (cols × out)` on plain slices.
fn project(z: &[f64], map: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for (k, &zk) in z.iter().enumerate() {
        let row = &map[k * out_dim..(k + 1) * out_dim];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += zk * a;
        }
    }
    out
}

pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut SeededRng) -> Result<EmbeddingDataset> {
    spec.validate()?;
    if spec.sigma_between == 0.0 && !spec.spurious {
        log::warn!("sigma_between = 0 without spurious features: labels carry no signal");
    }
    let m = spec.num_classes;
    let dj = spec.d_joint;
    let d_sp = spec.spurious_dims();
    let d_sig = spec.d_img - d_sp;

    let scale = 1.0 / (dj as f64).sqrt();
    let img_map = gaussian(dj, d_sig, scale, rng);
    let txt_map = gaussian(dj, spec.d_txt, scale, rng);

    let centroids: Vec<Vec<f64>> = if spec.orthogonal_centroids {
        orthogonal_centroids(m, dj, spec.sigma_between * (dj as f64).sqrt(), rng)?
    } else {
        (0..m).map(|_| gaussian(1, dj, spec.sigma_between, rng)).collect()
    };

    let per_class = spec.n_train + spec.n_support + spec.n_query;
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(m);
    for mu in &centroids {
        let mut rows = Vec::with_capacity(per_class * spec.d_img);
        for _ in 0..per_class {
            let noise = gaussian(1, dj, spec.sigma_within, rng);
            let z: Vec<f64> = mu.iter().zip(&noise).map(|(a, b)| a + b).collect();
            rows.extend(project(&z, &img_map, d_sig));
            rows.extend(std::iter::repeat_n(0.0, d_sp));
        }
        images.push(rows);
    }

    if spec.spurious {
        let code_at = |row: usize| row * spec.d_img + d_sig;
        for (c, rows) in images.iter_mut().enumerate() {
            for r in 0..spec.n_train {
                rows[code_at(r) + c] = spec.spurious_strength;
            }
        }
        // shuffle the class codes across all rows of each held-out split
        for (offset, count) in [
            (spec.n_train, spec.n_support),
            (spec.n_train + spec.n_support, spec.n_query),
        ] {
            let mut codes: Vec<usize> = (0..m).flat_map(|c| std::iter::repeat_n(c, count)).collect();
            codes.shuffle(rng);
            for (slot, code) in codes.into_iter().enumerate() {
                let (c, r) = (slot / count, offset + slot % count);
                images[c][code_at(r) + code] = spec.spurious_strength;
            }
        }
    }

    let mut w_img0 = pseudo_inverse(dj, d_sig, &img_map)?;
    w_img0.extend(std::iter::repeat_n(0.0, d_sp * dj));
    let mut w_txt0 = pseudo_inverse(dj, spec.d_txt, &txt_map)?;
    to_f32_grid(&mut w_img0);
    to_f32_grid(&mut w_txt0);

    let mut classes = Vec::with_capacity(m);
    for (c, (mu, mut rows)) in centroids.iter().zip(images).enumerate() {
        to_f32_grid(&mut rows);
        let mut text = project(mu, &txt_map, spec.d_txt);
        to_f32_grid(&mut text);
        let split = |from: usize, n: usize| {
            Matrix::new(
                n,
                spec.d_img,
                rows[from * spec.d_img..(from + n) * spec.d_img].to_vec(),
            )
        };
        classes.push(ClassRecord {
            name: format!("class_{c}"),
            text_embedding: text,
            train: split(0, spec.n_train)?,
            support: split(spec.n_train, spec.n_support)?,
            query: split(spec.n_train + spec.n_support, spec.n_query)?,
        });
    }

    let ds = EmbeddingDataset {
        d_img: spec.d_img,
        d_txt: spec.d_txt,
        d_joint: dj,
        prompt_template: spec.prompt_template.clone(),
        classes,
        pretrained_projection: Some(ProjectionPair {
            w_img: Matrix::new(spec.d_img, dj, w_img0)?,
            w_txt: Matrix::new(spec.d_txt, dj, w_txt0)?,
        }),
    };
    ds.validate()?;
    Ok(ds)
}
