use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;
use crate::trainer::config::AdamConfig;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    t: i32,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<DenseMatrix> = shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
        Self {
            lr,
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut DenseMatrix>, grads: &[&DenseMatrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(LabError::invalid("optimizer state does not match the parameter list"));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
