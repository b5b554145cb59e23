//! Attention aggregator over per-region patch embeddings.
//!
//! Each view is a set of `(region, embedding)` items. A learnable token is
//! prepended, region positional embeddings are added to the items, and the
//! sequence passes through pre-norm transformer blocks. The token's final
//! row is the view representation. Items are sorted by region index before
//! anything else, so the output is a function of the set alone.

use std::sync::Arc;

use crate::diffcore::{NodeId, Tape};
use crate::encoder::params::{AggregatorParams, EncoderConfig, ParamSet};
use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;

/// One view: `(region index, row of the embedding matrix)` pairs.
pub type ViewItems = Vec<(usize, usize)>;

struct BlockVars<'a> {
    query: &'a [NodeId],
    key: &'a [NodeId],
    value: &'a [NodeId],
    output: &'a [NodeId],
    output_bias: NodeId,
    mlp: [NodeId; 4],
}

fn split_vars<'a>(vars: &'a [NodeId], cfg: &EncoderConfig) -> Result<(NodeId, NodeId, Vec<BlockVars<'a>>)> {
    let h = cfg.n_heads;
    let per_block = 4 * h + 5;
    if vars.len() != 2 + cfg.n_blocks * per_block {
        return Err(LabError::invalid(format!(
            "aggregator binding has {} tensors, expected {}",
            vars.len(),
            2 + cfg.n_blocks * per_block
        )));
    }
    let blocks = vars[2..]
        .chunks(per_block)
        .map(|c| BlockVars {
            query: &c[..h],
            key: &c[h..2 * h],
            value: &c[2 * h..3 * h],
            output: &c[3 * h..4 * h],
            output_bias: c[4 * h],
            mlp: [c[4 * h + 1], c[4 * h + 2], c[4 * h + 3], c[4 * h + 4]],
        })
        .collect();
    Ok((vars[0], vars[1], blocks))
}

/// Sorts each view by region and rejects duplicates or bad indices.
fn canonical_views(views: &[ViewItems], n_regions: usize, n_rows: usize) -> Result<Vec<ViewItems>> {
    views
        .iter()
        .enumerate()
        .map(|(v, items)| {
            if items.is_empty() {
                return Err(LabError::invalid(format!("view {v} has no items")));
            }
            let mut sorted = items.clone();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(LabError::invalid(format!(
                        "view {v} repeats region index {}",
                        w[0].0
                    )));
                }
            }
            if let Some(&(r, row)) = sorted.iter().find(|&&(r, row)| r >= n_regions || row >= n_rows) {
                return Err(LabError::invalid(format!(
                    "view {v} references region {r} / row {row} out of range"
                )));
            }
            Ok(sorted)
        })
        .collect()
}

/// Aggregates every view into one `embed_dim` row; returns a views x d node.
pub fn aggregate_views(
    tape: &mut Tape,
    vars: &[NodeId],
    cfg: &EncoderConfig,
    embeddings: NodeId,
    views: &[ViewItems],
) -> Result<NodeId> {
    let (token, positions, blocks) = split_vars(vars, cfg)?;
    let n_regions = tape.shape(positions).0;
    let (n_rows, width) = tape.shape(embeddings);
    if width != cfg.embed_dim {
        return Err(LabError::invalid(format!(
            "patch embeddings have width {width}, aggregator expects {}",
            cfg.embed_dim
        )));
    }
    let views = canonical_views(views, n_regions, n_rows)?;
    let n_views = views.len();

    let mut rows = Vec::new();
    let mut regions = Vec::new();
    let mut segments = Vec::with_capacity(n_views);
    for (v, items) in views.iter().enumerate() {
        let mut seg = Vec::with_capacity(items.len() + 1);
        seg.push(v);
        for &(r, row) in items {
            seg.push(n_views + rows.len());
            rows.push(row);
            regions.push(r);
        }
        segments.push(seg);
    }
    let segments = Arc::new(segments);

    let tokens = tape.select_rows(token, &vec![0; n_views])?;
    let patches = tape.select_rows(embeddings, &rows)?;
    let pos = tape.select_rows(positions, &regions)?;
    let patches = tape.add(patches, pos)?;
    let mut x = tape.concat_rows(&[tokens, patches])?;

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for b in &blocks {
        let normed = tape.layer_norm_rows(x, cfg.ln_eps)?;
        let mut attn: Option<NodeId> = None;
        for h in 0..cfg.n_heads {
            let q = tape.matmul(normed, b.query[h])?;
            let k = tape.matmul(normed, b.key[h])?;
            let v = tape.matmul(normed, b.value[h])?;
            let o = tape.segment_attention(q, k, v, Arc::clone(&segments), scale)?;
            let proj = tape.matmul(o, b.output[h])?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, proj)?,
                None => proj,
            });
        }
        let attn = tape.add_row(attn.expect("at least one head"), b.output_bias)?;
        x = tape.add(x, attn)?;

        let normed = tape.layer_norm_rows(x, cfg.ln_eps)?;
        let hid = tape.matmul(normed, b.mlp[0])?;
        let hid = tape.add_row(hid, b.mlp[1])?;
        let hid = tape.elu(hid)?;
        let out = tape.matmul(hid, b.mlp[2])?;
        let out = tape.add_row(out, b.mlp[3])?;
        x = tape.add(x, out)?;
    }
    let token_rows: Vec<usize> = (0..n_views).collect();
    tape.select_rows(x, &token_rows)
}

impl AggregatorParams {
    /// Inference-only aggregation of many views over a shared embedding table.
    pub fn embed_views(&self, cfg: &EncoderConfig, embeddings: &DenseMatrix, views: &[ViewItems]) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let e = tape.constant(embeddings.clone())?;
        let out = aggregate_views(&mut tape, &vars, cfg, e, views)?;
        Ok(tape.value(out).clone())
    }
}

/// Aggregates one set of `(region, embedding)` items.
pub fn aggregate(params: &AggregatorParams, cfg: &EncoderConfig, items: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = items.iter().map(|(_, v)| v.as_slice()).collect();
    let table = DenseMatrix::from_rows(&rows)?;
    let view: ViewItems = items.iter().enumerate().map(|(i, (r, _))| (*r, i)).collect();
    Ok(params.embed_views(cfg, &table, &[view])?.into_data())
}
