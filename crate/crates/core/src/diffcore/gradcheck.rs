use crate::diffcore::tape::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|g_ad - g_fd| / max(1, |g_fd|)` per parameter.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

fn evaluate<F>(build: &F, params: &[DenseMatrix]) -> Result<(Tape, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids = params
        .iter()
        .map(|p| tape.parameter(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = build(&mut tape, &ids)?;
    Ok((tape, ids, root))
}

fn loss_at<F>(build: &F, params: &[DenseMatrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (tape, _, root) = evaluate(build, params)?;
    let v = tape.value(root);
    if !v.is_scalar() {
        return Err(LabError::NonScalarRoot(v.rows(), v.cols()));
    }
    Ok(v.item())
}

/// Checks every entry of every parameter with central differences.
///
/// `build` receives a fresh tape with `params` registered as trainable
/// leaves (in order) and must return a scalar node.
pub fn finite_difference_check<F>(
    build: F,
    params: &[DenseMatrix],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(LabError::invalid(format!(
            "epsilon must lie in (0, 1e-3], got {epsilon}"
        )));
    }
    let (tape, ids, root) = evaluate(&build, params)?;
    let grads = tape.backward(root)?;
    let loss = tape.scalar(root);
    let again = loss_at(&build, params)?;
    if loss.to_bits() != again.to_bits() {
        return Err(LabError::NonDeterministic(loss, again));
    }

    let mut work: Vec<DenseMatrix> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.of(*id);
        let mut worst = 0.0f64;
        for k in 0..params[p].data().len() {
            let base = params[p].data()[k];
            work[p].data_mut()[k] = base + epsilon;
            let up = loss_at(&build, &work)?;
            work[p].data_mut()[k] = base - epsilon;
            let down = loss_at(&build, &work)?;
            work[p].data_mut()[k] = base;
            let fd = (up - down) / (2.0 * epsilon);
            let rel = (analytic.data()[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance,
        loss,
    })
}
