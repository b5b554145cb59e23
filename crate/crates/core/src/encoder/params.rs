use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape};
use crate::encoder::layout::RegionLayout;
use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;

/// Architecture of the patch encoders and the aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Hidden layers per patch encoder; zero gives a single affine map.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    pub ln_eps: f64,
    pub token_init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_width: 128,
            embed_dim: 64,
            n_blocks: 3,
            n_heads: 2,
            mlp_width: 128,
            ln_eps: 1e-5,
            token_init_scale: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(LabError::invalid("hidden width must be positive"));
        }
        if self.embed_dim == 0 || self.mlp_width == 0 || self.n_heads == 0 {
            return Err(LabError::invalid("embedding, MLP and head counts must be positive"));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(LabError::invalid(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Any bundle of trainable tensors with a fixed traversal order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&DenseMatrix>;
    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix>;

    /// Puts every tensor on the tape, trainable or constant, in order.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<NodeId>> {
        self.tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.parameter(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// Order-sensitive checksum of the exact bit patterns.
    fn checksum(&self) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// `y = x W + b` with `W` of shape in x out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl Affine {
    fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        Self {
            weight,
            bias: DenseMatrix::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEncoderParams {
    pub layers: Vec<Affine>,
}

impl PatchEncoderParams {
    pub fn init<R: Rng>(rng: &mut R, raw_dim: usize, cfg: &EncoderConfig) -> Self {
        let mut dims = vec![raw_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        dims.push(cfg.embed_dim);
        let layers = dims
            .windows(2)
            .map(|w| Affine::glorot(rng, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }
}

impl ParamSet for PatchEncoderParams {
    fn tensors(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// One pre-norm transformer block with per-head projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub query: Vec<DenseMatrix>,
    pub key: Vec<DenseMatrix>,
    pub value: Vec<DenseMatrix>,
    /// Per-head output projections (head_dim x embed_dim); summing them is
    /// the same as concatenating heads and applying one projection.
    pub output: Vec<DenseMatrix>,
    pub output_bias: DenseMatrix,
    pub mlp_in: Affine,
    pub mlp_out: Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorParams {
    pub token: DenseMatrix,
    pub positions: DenseMatrix,
    pub blocks: Vec<AttentionBlock>,
}

impl AggregatorParams {
    pub fn init<R: Rng>(rng: &mut R, n_regions: usize, cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let s = cfg.token_init_scale;
        let token = DenseMatrix::from_fn(1, d, |_, _| if s > 0.0 { rng.random_range(-s..s) } else { 0.0 });
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                let mut heads = |rows, cols| -> Vec<DenseMatrix> {
                    (0..cfg.n_heads)
                        .map(|_| Affine::glorot(rng, rows, cols).weight)
                        .collect()
                };
                let query = heads(d, dh);
                let key = heads(d, dh);
                let value = heads(d, dh);
                let output = heads(dh, d);
                AttentionBlock {
                    query,
                    key,
                    value,
                    output,
                    output_bias: DenseMatrix::zeros(1, d),
                    mlp_in: Affine::glorot(rng, d, cfg.mlp_width),
                    mlp_out: Affine::glorot(rng, cfg.mlp_width, d),
                }
            })
            .collect();
        Self {
            token,
            positions: DenseMatrix::zeros(n_regions, d),
            blocks,
        }
    }
}

impl ParamSet for AggregatorParams {
    fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out = vec![&self.token, &self.positions];
        for b in &self.blocks {
            out.extend(b.query.iter());
            out.extend(b.key.iter());
            out.extend(b.value.iter());
            out.extend(b.output.iter());
            out.extend([
                &b.output_bias,
                &b.mlp_in.weight,
                &b.mlp_in.bias,
                &b.mlp_out.weight,
                &b.mlp_out.bias,
            ]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![&mut self.token, &mut self.positions];
        for b in &mut self.blocks {
            out.extend(b.query.iter_mut());
            out.extend(b.key.iter_mut());
            out.extend(b.value.iter_mut());
            out.extend(b.output.iter_mut());
            out.extend([
                &mut b.output_bias,
                &mut b.mlp_in.weight,
                &mut b.mlp_in.bias,
                &mut b.mlp_out.weight,
                &mut b.mlp_out.bias,
            ]);
        }
        out
    }
}

/// Parameters for every patch encoder plus the aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layout: RegionLayout,
    pub config: EncoderConfig,
    pub patches: Vec<PatchEncoderParams>,
    pub aggregator: AggregatorParams,
}

impl ModelParams {
    pub fn patch_seed(seed: u64, region: usize) -> u64 {
        seed ^ region as u64
    }

    /// Deterministic initialization; region `l` draws from its own stream
    /// seeded with `seed ^ l`, the aggregator from `seed ^ 0xA66`.
    pub fn init(layout: &RegionLayout, config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let patches = layout
            .regions()
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let mut rng = ChaCha8Rng::seed_from_u64(Self::patch_seed(seed, l));
                PatchEncoderParams::init(&mut rng, r.raw_dim, config)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA66_u64.rotate_left(48));
        let aggregator = AggregatorParams::init(&mut rng, layout.len(), config);
        Ok(Self {
            layout: layout.clone(),
            config: config.clone(),
            patches,
            aggregator,
        })
    }
}
