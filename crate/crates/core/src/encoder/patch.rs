use crate::diffcore::{NodeId, Tape};
use crate::encoder::layout::Region;
use crate::encoder::params::{ParamSet, PatchEncoderParams};
use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;

/// Runs a bound patch encoder over the rows of `x`.
///
/// `vars` are the encoder tensors as returned by [`ParamSet::bind`]:
/// alternating weight and bias per layer. Hidden layers use ELU; the last
/// layer is affine only.
pub fn encode_patch_rows(tape: &mut Tape, vars: &[NodeId], x: NodeId, region: &Region) -> Result<NodeId> {
    let (_, width) = tape.shape(x);
    if width != region.raw_dim {
        return Err(LabError::invalid(format!(
            "region {} expects {} features per row, got {width}",
            region.name, region.raw_dim
        )));
    }
    if vars.len() < 2 || vars.len() % 2 != 0 {
        return Err(LabError::invalid(format!(
            "region {}: malformed encoder binding ({} tensors)",
            region.name,
            vars.len()
        )));
    }
    let n_layers = vars.len() / 2;
    let mut h = x;
    for (i, pair) in vars.chunks(2).enumerate() {
        let lin = tape.matmul(h, pair[0])?;
        h = tape.add_row(lin, pair[1])?;
        if i + 1 < n_layers {
            h = tape.elu(h)?;
        }
    }
    Ok(h)
}

impl PatchEncoderParams {
    /// Inference-only forward pass over a batch of rows.
    pub fn embed_rows(&self, region: &Region, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let input = tape.constant(x.clone())?;
        let out = encode_patch_rows(&mut tape, &vars, input, region)?;
        Ok(tape.value(out).clone())
    }
}

/// Embeds a single region feature vector.
pub fn encode_patch(params: &PatchEncoderParams, region: &Region, x: &[f64]) -> Result<Vec<f64>> {
    let row = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(params.embed_rows(region, &row)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn region(dim: usize) -> Region {
        Region {
            name: "left_mtl".into(),
            raw_dim: dim,
            aux_columns: vec![0],
        }
    }

    #[test]
    fn zero_input_linear_encoder_gives_zero() {
        let cfg = EncoderConfig {
            hidden_layers: 0,
            ..Default::default()
        };
        let p = PatchEncoderParams::init(&mut ChaCha8Rng::seed_from_u64(0), 5, &cfg);
        let out = encode_patch(&p, &region(5), &[0.0; 5]).unwrap();
        assert_eq!(out.len(), 64);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_names_region() {
        let p = PatchEncoderParams::init(&mut ChaCha8Rng::seed_from_u64(0), 5, &EncoderConfig::default());
        let err = encode_patch(&p, &region(5), &[1.0; 4]).unwrap_err();
        assert!(err.to_string().contains("left_mtl"), "{err}");
    }

    #[test]
    fn distinct_inputs_give_distinct_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PatchEncoderParams::init(&mut rng, 6, &EncoderConfig::default());
        for _ in 0..100 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ea = encode_patch(&p, &region(6), &a).unwrap();
            let eb = encode_patch(&p, &region(6), &b).unwrap();
            assert_ne!(ea, eb);
        }
    }
}
