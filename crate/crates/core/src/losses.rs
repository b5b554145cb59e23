//! Contrastive, residual and redundancy-reduction losses as tape graphs.
//!
//! Batches stack both augmented views of every image: rows `2i` and `2i+1`
//! belong to image `i`. Auxiliary features are duplicated on both rows so the
//! residual projections share the pairing used by the contrastive term.

use crate::diffcore::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;

/// Stand-in for `-inf` that keeps every tape value finite; `exp` of it
/// underflows to exactly zero.
const MASKED_LOGIT: f64 = -1.0e9;

/// Paired-view embeddings plus the contrastive temperature.
#[derive(Debug, Clone, Copy)]
pub struct ViewBatch {
    pub embeddings: NodeId,
    pub temperature: f64,
    batch_size: usize,
}

impl ViewBatch {
    pub fn new(tape: &Tape, embeddings: NodeId, temperature: f64) -> Result<Self> {
        let rows = tape.value(embeddings).rows();
        if rows % 2 != 0 {
            return Err(LabError::invalid(format!(
                "view batch needs an even row count, got {rows}"
            )));
        }
        if !(temperature > 0.0) {
            return Err(LabError::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            embeddings,
            temperature,
            batch_size: rows / 2,
        })
    }

    /// Number of images (half the row count).
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

/// Constant auxiliary features aligned with a [`ViewBatch`].
#[derive(Debug, Clone)]
pub struct AuxBatch {
    pub features: DenseMatrix,
    /// Per-row flags over the columns; `None` means every column is covered.
    pub coverage: Option<Vec<Vec<bool>>>,
}

impl AuxBatch {
    pub fn new(features: DenseMatrix) -> Self {
        Self {
            features,
            coverage: None,
        }
    }

    /// Duplicates each image's row onto its two view rows.
    pub fn duplicated(per_image: &DenseMatrix) -> Self {
        let idx: Vec<usize> = (0..per_image.rows()).flat_map(|i| [i, i]).collect();
        Self::new(per_image.select_rows(&idx))
    }

    pub fn with_coverage(mut self, coverage: Vec<Vec<bool>>) -> Result<Self> {
        if coverage.len() != self.features.rows()
            || coverage.iter().any(|r| r.len() != self.features.cols())
        {
            return Err(LabError::invalid(
                "coverage mask must match the auxiliary feature shape",
            ));
        }
        self.coverage = Some(coverage);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    fn mask_matrix(&self) -> Option<DenseMatrix> {
        self.coverage.as_ref().map(|cov| {
            DenseMatrix::from_fn(self.features.rows(), self.features.cols(), |i, j| {
                if cov[i][j] {
                    1.0
                } else {
                    0.0
                }
            })
        })
    }

    /// Centered (optionally) and zero-filled where uncovered.
    fn prepared(&self, center: bool) -> DenseMatrix {
        let mut a = if center {
            self.features.center_columns()
        } else {
            self.features.clone()
        };
        if let Some(cov) = &self.coverage {
            for (i, row) in cov.iter().enumerate() {
                for (j, &keep) in row.iter().enumerate() {
                    if !keep {
                        a.set(i, j, 0.0);
                    }
                }
            }
        }
        a
    }
}

/// `R = A - P_H[A]` and `R' = H - P_A[H]`, both on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ResidualPair {
    pub r: NodeId,
    pub r_prime: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnceOptions {
    /// Ridge added to Gram matrices before the solve.
    pub ridge: f64,
    pub aux_weight: f64,
    /// Divide the auxiliary term by `rows * d1`.
    pub normalize: bool,
    /// Mean-center `A` and `H` within the batch before projecting.
    pub center: bool,
}

impl Default for RnceOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            aux_weight: 1.0,
            normalize: false,
            center: true,
        }
    }
}

/// Scalar nodes making up an R-NCE loss.
#[derive(Debug, Clone, Copy)]
pub struct RnceTerms {
    pub total: NodeId,
    pub aux: NodeId,
    pub contrastive: NodeId,
}

/// Pairwise cosine similarities between the rows of `x` and `y`.
pub fn cosine_similarity_rows(x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols() != y.cols() {
        return Err(LabError::ShapeMismatch {
            op: "cosine_similarity_rows",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    let unit = |m: &DenseMatrix, offset: usize| -> Result<DenseMatrix> {
        let mut out = m.clone();
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(LabError::ZeroRow(i + offset));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    };
    let xu = unit(x, 0)?;
    let yu = unit(y, 0)?;
    let s = xu.matmul(&yu.transpose())?;
    Ok(s.map(|v| v.clamp(-1.0, 1.0)))
}

fn partner(k: usize) -> usize {
    k ^ 1
}

/// Temperature-scaled contrastive loss, averaged over all `2B` anchors.
///
/// For anchor `k` the denominator holds every view of every other image
/// plus the anchor's own positive; the anchor itself is excluded.
pub fn nce_loss(tape: &mut Tape, batch: &ViewBatch) -> Result<NodeId> {
    if batch.batch_size() < 2 {
        return Err(LabError::invalid(
            "contrastive loss needs at least two images per batch",
        ));
    }
    let n = 2 * batch.batch_size();
    let unit = tape.normalize_rows(batch.embeddings)?;
    let unit_t = tape.transpose(unit)?;
    let sims = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(sims, 1.0 / batch.temperature)?;

    let self_mask = tape.constant(DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            MASKED_LOGIT
        } else {
            0.0
        }
    }))?;
    let masked = tape.add(logits, self_mask)?;
    let denom = tape.logsumexp_rows(masked)?;

    let pick = tape.constant(DenseMatrix::from_fn(n, n, |i, j| {
        if j == partner(i) {
            1.0
        } else {
            0.0
        }
    }))?;
    let pos_only = tape.mul(logits, pick)?;
    let positive = tape.row_sum(pos_only)?;
    let per_anchor = tape.sub(denom, positive)?;
    tape.mean(per_anchor)
}

/// `X (XᵀX + εI)⁻¹ Xᵀ Y`: projection of `Y`'s columns onto the span of `X`.
pub fn project_span(tape: &mut Tape, x: NodeId, y: NodeId, ridge: f64) -> Result<NodeId> {
    if !(ridge >= 0.0) {
        return Err(LabError::invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    let (xr, xc) = tape.shape(x);
    let (yr, _) = tape.shape(y);
    if xr != yr {
        return Err(LabError::ShapeMismatch {
            op: "project_span",
            lhs: tape.shape(x),
            rhs: tape.shape(y),
        });
    }
    let xt = tape.transpose(x)?;
    let mut gram = tape.matmul(xt, x)?;
    if ridge > 0.0 {
        let r = tape.constant(DenseMatrix::identity(xc).scale(ridge))?;
        gram = tape.add(gram, r)?;
    }
    let rhs = tape.matmul(xt, y)?;
    let coef = tape.spd_solve(gram, rhs)?;
    tape.matmul(x, coef)
}

fn center_node(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let mean = tape.column_mean(x)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_row(x, neg)
}

/// Builds both residuals for representation `h` and constant features `aux`.
pub fn rnce_residuals(
    tape: &mut Tape,
    h: NodeId,
    aux: &AuxBatch,
    opts: &RnceOptions,
) -> Result<ResidualPair> {
    let (rows, d2) = tape.shape(h);
    let d1 = aux.width();
    if aux.features.rows() != rows {
        return Err(LabError::ShapeMismatch {
            op: "rnce_residuals",
            lhs: tape.shape(h),
            rhs: aux.features.shape(),
        });
    }
    if d1 >= rows || d2 >= rows {
        return Err(LabError::invalid(format!(
            "rank prerequisite violated: need rows ({rows}) > max(d1 = {d1}, d2 = {d2})"
        )));
    }
    let a_val = aux.prepared(opts.center);
    let hc = if opts.center { center_node(tape, h)? } else { h };

    // R = A - P_H[A]
    let a = tape.constant(a_val.clone())?;
    let pa = project_span(tape, hc, a, opts.ridge)?;
    let r = tape.sub(a, pa)?;

    // R' = H - P_A[H]; all-zero columns of A span nothing and are dropped
    let live: Vec<usize> = (0..d1)
        .filter(|&j| (0..rows).any(|i| a_val.get(i, j) != 0.0))
        .collect();
    let r_prime = if live.is_empty() {
        hc
    } else {
        let a_live = tape.constant(a_val.select_cols(&live))?;
        let ph = project_span(tape, a_live, hc, opts.ridge)?;
        tape.sub(hc, ph)?
    };
    Ok(ResidualPair { r, r_prime })
}

/// `aux_weight * ‖R‖²_F + NCE(R')`, with the pieces exposed for logging.
pub fn rnce_loss_terms(
    tape: &mut Tape,
    batch: &ViewBatch,
    aux: &AuxBatch,
    opts: &RnceOptions,
) -> Result<RnceTerms> {
    let pair = rnce_residuals(tape, batch.embeddings, aux, opts)?;
    let masked_r = match aux.mask_matrix() {
        Some(mask) => {
            let m = tape.constant(mask)?;
            tape.mul(pair.r, m)?
        }
        None => pair.r,
    };
    let sq = tape.frobenius_sq(masked_r)?;
    let mut weight = opts.aux_weight;
    if opts.normalize {
        let (rows, d1) = aux.features.shape();
        weight /= (rows * d1).max(1) as f64;
    }
    let aux_term = tape.scale(sq, weight)?;
    let residual_batch = ViewBatch::new(tape, pair.r_prime, batch.temperature)?;
    let contrastive = nce_loss(tape, &residual_batch)?;
    let total = tape.add(aux_term, contrastive)?;
    Ok(RnceTerms {
        total,
        aux: aux_term,
        contrastive,
    })
}

pub fn rnce_loss(
    tape: &mut Tape,
    batch: &ViewBatch,
    aux: &AuxBatch,
    opts: &RnceOptions,
) -> Result<NodeId> {
    Ok(rnce_loss_terms(tape, batch, aux, opts)?.total)
}

fn standardize_node(tape: &mut Tape, z: NodeId) -> Result<NodeId> {
    let zv = tape.value(z).clone();
    let centered = zv.center_columns();
    let n = zv.rows() as f64;
    for j in 0..zv.cols() {
        let var = centered.col_vec(j).iter().map(|v| v * v).sum::<f64>() / n;
        let scale = zv.col_vec(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if var <= 1e-24 * scale.max(1.0).powi(2) {
            return Err(LabError::ZeroVariance(j));
        }
    }
    let zc = center_node(tape, z)?;
    let sq = tape.mul(zc, zc)?;
    let var = tape.column_mean(sq)?;
    let inv_std = tape.powf(var, -0.5)?;
    tape.mul_row(zc, inv_std)
}

/// Redundancy-reduction loss on the cross-correlation of two view batches.
///
/// Columns are standardized over the batch, then
/// `Σᵢ (1 - Cᵢᵢ)² + λ Σ_{i≠j} Cᵢⱼ²`.
pub fn barlow_twins_loss(tape: &mut Tape, z1: NodeId, z2: NodeId, lambda: f64) -> Result<NodeId> {
    if tape.shape(z1) != tape.shape(z2) {
        return Err(LabError::ShapeMismatch {
            op: "barlow_twins_loss",
            lhs: tape.shape(z1),
            rhs: tape.shape(z2),
        });
    }
    let (b, d) = tape.shape(z1);
    if b < 2 {
        return Err(LabError::invalid("barlow twins loss needs a batch of at least 2"));
    }
    let n1 = standardize_node(tape, z1)?;
    let n2 = standardize_node(tape, z2)?;
    let n1t = tape.transpose(n1)?;
    let prod = tape.matmul(n1t, n2)?;
    let corr = tape.scale(prod, 1.0 / b as f64)?;

    let eye = tape.constant(DenseMatrix::identity(d))?;
    let off = tape.constant(DenseMatrix::from_fn(d, d, |i, j| {
        if i == j {
            0.0
        } else {
            1.0
        }
    }))?;
    let gap = tape.sub(corr, eye)?;
    let diag = tape.mul(gap, eye)?;
    let on_term = tape.frobenius_sq(diag)?;
    let off_only = tape.mul(corr, off)?;
    let off_sq = tape.frobenius_sq(off_only)?;
    let off_term = tape.scale(off_sq, lambda)?;
    tape.add(on_term, off_term)
}

/// Barlow Twins over a stacked view batch (rows `2i`, `2i+1`).
pub fn barlow_twins_paired(tape: &mut Tape, stacked: NodeId, lambda: f64) -> Result<NodeId> {
    let rows = tape.shape(stacked).0;
    if rows % 2 != 0 {
        return Err(LabError::invalid("paired batch needs an even row count"));
    }
    let even: Vec<usize> = (0..rows).step_by(2).collect();
    let odd: Vec<usize> = (1..rows).step_by(2).collect();
    let z1 = tape.select_rows(stacked, &even)?;
    let z2 = tape.select_rows(stacked, &odd)?;
    barlow_twins_loss(tape, z1, z2, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn nce_of(x: DenseMatrix, tau: f64) -> f64 {
        let mut t = Tape::new();
        let h = t.constant(x).unwrap();
        let b = ViewBatch::new(&t, h, tau).unwrap();
        let l = nce_loss(&mut t, &b).unwrap();
        t.scalar(l)
    }

    #[test]
    fn cosine_reference_values() {
        let s = cosine_similarity_rows(&m(&[&[1.0, 1.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((s.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let s = cosine_similarity_rows(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        let u = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let s = cosine_similarity_rows(&u, &u).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15 && (s.get(1, 1) - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity_rows(&m(&[&[1.0, 0.0], &[0.0, 0.0]]), &u),
            Err(LabError::ZeroRow(1))
        ));
    }

    #[test]
    fn identical_rows_give_log_three() {
        let l = nce_of(DenseMatrix::filled(4, 3, 0.7), 0.5);
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        let x = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((nce_of(x, 0.5) - expect).abs() < 1e-12);
        assert!((expect - 0.239_544_766_221_884_5).abs() < 1e-12);
    }

    #[test]
    fn single_image_batch_rejected() {
        let mut t = Tape::new();
        let h = t.constant(DenseMatrix::filled(2, 2, 1.0)).unwrap();
        let b = ViewBatch::new(&t, h, 0.5).unwrap();
        assert!(nce_loss(&mut t, &b).is_err());
        assert!(ViewBatch::new(&t, h, 0.0).is_err());
    }

    #[test]
    fn projection_hand_case() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0], &[1.0]])).unwrap();
        let y = t.constant(m(&[&[2.0], &[0.0]])).unwrap();
        let p = project_span(&mut t, x, y, 0.0).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 1.0]);
    }

    #[test]
    fn residual_hand_case_without_centering() {
        let mut t = Tape::new();
        let h = t.constant(m(&[&[1.0], &[1.0]])).unwrap();
        let aux = AuxBatch::new(m(&[&[2.0], &[0.0]]));
        let opts = RnceOptions {
            ridge: 0.0,
            center: false,
            ..Default::default()
        };
        let pair = rnce_residuals(&mut t, h, &aux, &opts).unwrap();
        let r = t.value(pair.r);
        assert_eq!(r.data(), &[1.0, -1.0]);
        assert_eq!(r.frobenius_sq(), 2.0);
    }

    #[test]
    fn projection_singular_gram_suggests_ridge() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]])).unwrap();
        let y = t.constant(m(&[&[1.0], &[0.0], &[0.0]])).unwrap();
        let err = project_span(&mut t, x, y, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
        assert!(project_span(&mut t, x, y, 1e-6).is_ok());
    }

    #[test]
    fn zero_auxiliary_reduces_to_plain_nce() {
        let h = DenseMatrix::from_fn(8, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let mut t = Tape::new();
        let hn = t.constant(h.clone()).unwrap();
        let b = ViewBatch::new(&t, hn, 0.5).unwrap();
        let opts = RnceOptions {
            ridge: 0.0,
            center: false,
            ..Default::default()
        };
        let l = rnce_loss(&mut t, &b, &AuxBatch::new(DenseMatrix::zeros(8, 2)), &opts).unwrap();
        assert!((t.scalar(l) - nce_of(h, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rank_prerequisite_enforced() {
        let mut t = Tape::new();
        let h = t.constant(DenseMatrix::filled(4, 4, 1.0)).unwrap();
        let aux = AuxBatch::new(DenseMatrix::filled(4, 1, 1.0));
        assert!(rnce_residuals(&mut t, h, &aux, &RnceOptions::default()).is_err());
    }

    #[test]
    fn barlow_identical_decorrelated_views_is_zero() {
        let z = m(&[&[1.0, 1.0], &[1.0, -1.0], &[-1.0, 1.0], &[-1.0, -1.0]]);
        let mut t = Tape::new();
        let a = t.constant(z.clone()).unwrap();
        let b = t.constant(z).unwrap();
        let l = barlow_twins_loss(&mut t, a, b, 5e-3).unwrap();
        assert!(t.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn barlow_perfectly_correlated_columns() {
        let z = m(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let lambda = 5e-3;
        let mut t = Tape::new();
        let a = t.constant(z.clone()).unwrap();
        let b = t.constant(z).unwrap();
        let l = barlow_twins_loss(&mut t, a, b, lambda).unwrap();
        assert!((t.scalar(l) - 2.0 * lambda).abs() < 1e-12);
    }

    #[test]
    fn barlow_rejects_collapsed_dimension() {
        let z = m(&[&[1.0, 3.0], &[2.0, 3.0], &[3.0, 3.0]]);
        let mut t = Tape::new();
        let a = t.constant(z.clone()).unwrap();
        let b = t.constant(z).unwrap();
        assert!(matches!(
            barlow_twins_loss(&mut t, a, b, 5e-3),
            Err(LabError::ZeroVariance(1))
        ));
    }
}
