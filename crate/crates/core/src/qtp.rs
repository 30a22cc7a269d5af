//! Question-aware token pruning.
//!
//! Document token embeddings from the retrieval stage are scored against every
//! question token (summed cosine similarity), laid out on the retrieval
//! feature grid, resampled onto the QA grid, smoothed with a Gaussian and
//! thresholded after per-page min-max normalization.

use crate::btp::block_coarsen;
use crate::error::{invalid, mismatch, Error, Result};
use crate::mask::{Stage, TokenMask};

/// `count` embeddings of width `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(count: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != count * dim {
            return Err(mismatch("embedding values", count * dim, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix"));
        }
        Ok(Self { count, dim, values })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.count).map(move |i| self.row(i))
    }
}

/// A 2-D grid of relevance scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    rows: usize,
    cols: usize,
    scores: Vec<f32>,
}

impl RelevanceMap {
    pub fn new(rows: usize, cols: usize, scores: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("grid", format!("{rows}x{cols} has a zero side")));
        }
        if scores.len() != rows * cols {
            return Err(mismatch("relevance scores", format!("{rows}x{cols} = {}", rows * cols), scores.len()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("relevance map"));
        }
        Ok(Self { rows, cols, scores })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<f32> {
        self.scores
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.cols + col]
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// `s_i = Σ_j cos(doc_i, qst_j)`; a zero-norm vector contributes 0.
pub fn relevance_scores(doc: &EmbeddingMatrix, qst: &EmbeddingMatrix) -> Result<Vec<f32>> {
    if doc.dim != qst.dim {
        return Err(mismatch(
            "embedding dim",
            format!("doc {}x{}", doc.count, doc.dim),
            format!("question {}x{}", qst.count, qst.dim),
        ));
    }
    let q_norms: Vec<f64> = qst.rows().map(norm).collect();
    let scores = doc
        .rows()
        .map(|d| {
            let dn = norm(d);
            if dn == 0.0 {
                return 0.0;
            }
            qst.rows()
                .zip(&q_norms)
                .filter(|(_, &qn)| qn > 0.0)
                .map(|(q, &qn)| dot(d, q) / (dn * qn))
                .sum::<f64>() as f32
        })
        .collect();
    Ok(scores)
}

pub fn reshape_to_grid(scores: Vec<f32>, rows: usize, cols: usize) -> Result<RelevanceMap> {
    RelevanceMap::new(rows, cols, scores)
}

fn corner_coord(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Align-corners bilinear resampling: output corners land exactly on input
/// corners.
pub fn bilinear_resize(map: &RelevanceMap, rows: usize, cols: usize) -> Result<RelevanceMap> {
    if rows == 0 || cols == 0 {
        return Err(invalid("target grid", format!("{rows}x{cols} has a zero side")));
    }
    let xs: Vec<(usize, usize, f64)> = (0..cols)
        .map(|c| {
            let x = corner_coord(c, cols, map.cols);
            let x0 = (x.floor() as usize).min(map.cols - 1);
            (x0, (x0 + 1).min(map.cols - 1), x - x0 as f64)
        })
        .collect();
    let mut scores = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = corner_coord(r, rows, map.rows);
        let y0 = (y.floor() as usize).min(map.rows - 1);
        let y1 = (y0 + 1).min(map.rows - 1);
        let fy = y - y0 as f64;
        for &(x0, x1, fx) in &xs {
            let top = (1.0 - fx) * map.get(y0, x0) as f64 + fx * map.get(y0, x1) as f64;
            let bottom = (1.0 - fx) * map.get(y1, x0) as f64 + fx * map.get(y1, x1) as f64;
            scores.push(((1.0 - fy) * top + fy * bottom) as f32);
        }
    }
    RelevanceMap::new(rows, cols, scores)
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Half-sample symmetric reflection (`... c b a | a b c ...`), repeated for
/// offsets reaching past the opposite border.
pub fn reflect_index(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian smoothing with reflect padding. `sigma < 1e-6` is the
/// identity.
pub fn gaussian_smooth(map: &RelevanceMap, sigma: f64) -> Result<RelevanceMap> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(invalid("sigma", format!("{sigma} (must be >= 0)")));
    }
    if sigma < 1e-6 {
        return Ok(map.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (rows, cols) = (map.rows, map.cols);

    let mut horizontal = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let line = &map.scores[r * cols..(r + 1) * cols];
        for c in 0..cols {
            horizontal[r * cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * line[reflect_index(c as isize + k as isize - radius, cols)] as f64)
                .sum();
        }
    }
    let mut scores = vec![0.0f32; rows * cols];
    for c in 0..cols {
        for r in 0..rows {
            scores[r * cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    w * horizontal[reflect_index(r as isize + k as isize - radius, rows) * cols + c]
                })
                .sum::<f64>() as f32;
        }
    }
    RelevanceMap::new(rows, cols, scores)
}

/// Min-max normalize the map to [0, 1] and keep cells at or above `tau_qst`.
/// A constant map normalizes to all ones.
pub fn qtp_mask(map: &RelevanceMap, tau_qst: f64) -> Result<TokenMask> {
    if !(0.0..=1.0).contains(&tau_qst) {
        return Err(invalid("tau_qst", format!("{tau_qst} (must lie in [0, 1])")));
    }
    let normalized = normalize_min_max(map.scores());
    let keep = normalized.iter().map(|&v| v >= tau_qst).collect();
    TokenMask::new(map.rows, map.cols, keep, Stage::Qtp)
}

pub fn normalize_min_max(scores: &[f32]) -> Vec<f64> {
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if hi > lo {
        scores.iter().map(|&v| (v as f64 - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; scores.len()]
    }
}

/// Cell-wise AND of two masks of identical geometry.
pub fn combine_masks(a: &TokenMask, b: &TokenMask) -> Result<TokenMask> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(mismatch(
            "mask geometry",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    let keep = a.keep().iter().zip(b.keep()).map(|(&x, &y)| x && y).collect();
    TokenMask::new(a.rows(), a.cols(), keep, Stage::Combined)
}

/// Parameters for a full question-aware pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QtpParams {
    /// Retrieval feature grid the document embeddings are laid out on.
    pub source_grid: (usize, usize),
    /// QA feature grid the mask is produced for.
    pub target_grid: (usize, usize),
    pub sigma: f64,
    pub tau_qst: f64,
    pub block: usize,
}

#[derive(Debug, Clone)]
pub struct QtpOutcome {
    pub relevance: RelevanceMap,
    pub smoothed: RelevanceMap,
    pub mask: TokenMask,
}

/// relevance -> reshape -> resize -> smooth -> threshold -> block-coarsen.
pub fn run_qtp(doc: &EmbeddingMatrix, qst: &EmbeddingMatrix, params: &QtpParams) -> Result<QtpOutcome> {
    let (h, w) = params.source_grid;
    if doc.count() != h * w {
        return Err(mismatch(
            "document tokens vs grid",
            format!("{h}x{w} = {}", h * w),
            format!("{} embeddings", doc.count()),
        ));
    }
    let relevance = reshape_to_grid(relevance_scores(doc, qst)?, h, w)?;
    let (h2, w2) = params.target_grid;
    let resized = bilinear_resize(&relevance, h2, w2)?;
    let smoothed = gaussian_smooth(&resized, params.sigma)?;
    let mask = block_coarsen(&qtp_mask(&smoothed, params.tau_qst)?, params.block)?;
    Ok(QtpOutcome {
        relevance,
        smoothed,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f32]]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        EmbeddingMatrix::new(rows.len(), dim, rows.concat()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let s = relevance_scores(&emb(&[&[2.0, 4.0]]), &emb(&[&[1.0, 2.0]])).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-7);

        let s = relevance_scores(&emb(&[&[1.0, 0.0]]), &emb(&[&[0.0, 3.0], &[0.0, -1.0]])).unwrap();
        assert_eq!(s[0], 0.0);

        let s = relevance_scores(&emb(&[&[1.0, 0.0], &[1.0, 1.0]]), &emb(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-7);
        assert!((s[1] - std::f32::consts::SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn zero_norm_rows_contribute_nothing() {
        let s = relevance_scores(&emb(&[&[0.0, 0.0], &[1.0, 0.0]]), &emb(&[&[0.0, 0.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(s, vec![0.0, 1.0]);
    }

    #[test]
    fn dim_mismatch() {
        let err = relevance_scores(&emb(&[&[1.0, 0.0]]), &emb(&[&[1.0, 0.0, 0.0]])).unwrap_err();
        assert!(err.to_string().contains("doc 1x2"));
        assert!(EmbeddingMatrix::new(1, 2, vec![f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn reshape_row_major() {
        let m = reshape_to_grid(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 0), 3.0);
        let row = reshape_to_grid(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
        assert_eq!(row.clone().into_scores(), vec![1.0, 2.0, 3.0]);
        assert!(reshape_to_grid(vec![1.0; 5], 2, 2).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let m = reshape_to_grid(vec![0.0, 1.0, 2.0, 3.0], 2, 2).unwrap();
        assert_eq!(bilinear_resize(&m, 2, 2).unwrap(), m);
        let up = bilinear_resize(&m, 3, 3).unwrap();
        assert_eq!(up.get(1, 1), 1.5);
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(2, 2), 3.0);
        assert_eq!(up.get(0, 1), 0.5);
        assert_eq!(up.get(1, 0), 1.0);

        let one = reshape_to_grid(vec![4.25], 1, 1).unwrap();
        assert!(bilinear_resize(&one, 3, 5).unwrap().scores().iter().all(|&v| v == 4.25));
        assert!(bilinear_resize(&one, 0, 5).is_err());
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.3, 1.0, 2.5, 7.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
    }

    #[test]
    fn smoothing_identity_and_constants() {
        let m = reshape_to_grid((0..12).map(|v| v as f32).collect(), 3, 4).unwrap();
        assert_eq!(gaussian_smooth(&m, 0.0).unwrap(), m);
        assert!(gaussian_smooth(&m, -1.0).is_err());
        let flat = reshape_to_grid(vec![2.5; 20], 4, 5).unwrap();
        for sigma in [0.5, 1.0, 4.0] {
            let s = gaussian_smooth(&flat, sigma).unwrap();
            assert!(s.scores().iter().all(|v| (v - 2.5).abs() < 1e-6));
        }
    }

    #[test]
    fn delta_center_is_squared_center_tap() {
        let mut v = vec![0.0f32; 49];
        v[24] = 1.0;
        let m = reshape_to_grid(v, 7, 7).unwrap();
        let s = gaussian_smooth(&m, 1.0).unwrap();
        let k0 = gaussian_kernel(1.0)[3];
        assert!((s.get(3, 3) as f64 - k0 * k0).abs() < 1e-7);
    }

    #[test]
    fn threshold_examples() {
        let flat = reshape_to_grid(vec![3.0; 4], 2, 2).unwrap();
        assert_eq!(qtp_mask(&flat, 0.3).unwrap().kept_count(), 4);

        let m = reshape_to_grid(vec![0.0, 5.0, 10.0, 5.0], 2, 2).unwrap();
        assert_eq!(qtp_mask(&m, 0.5).unwrap().kept_indices(), vec![1, 2, 3]);
        assert_eq!(qtp_mask(&m, 1.0).unwrap().kept_indices(), vec![2]);
        assert!(qtp_mask(&m, 1.1).is_err());
    }

    #[test]
    fn combine_identity_and_absorption() {
        let b = TokenMask::from_kept(2, 2, &[1, 2], Stage::Qtp).unwrap();
        let all = TokenMask::filled(2, 2, true, Stage::Btp);
        let none = TokenMask::filled(2, 2, false, Stage::Btp);
        let c = combine_masks(&all, &b).unwrap();
        assert_eq!(c.keep(), b.keep());
        assert_eq!(c.stage(), Stage::Combined);
        assert_eq!(combine_masks(&none, &b).unwrap().kept_count(), 0);
        assert!(combine_masks(&b, &TokenMask::filled(1, 4, true, Stage::Btp)).is_err());
    }

    #[test]
    fn pipeline_checks_grid() {
        let doc = emb(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let qst = emb(&[&[1.0, 0.0]]);
        let params = QtpParams {
            source_grid: (2, 2),
            target_grid: (4, 4),
            sigma: 1.0,
            tau_qst: 0.3,
            block: 2,
        };
        assert!(run_qtp(&doc, &qst, &params).is_err());
    }
}
