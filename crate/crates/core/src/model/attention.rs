use crate::error::Result;
use crate::graph::{loop_ranges, NODE_DIM};
use crate::tensor::Var;

use super::{AttentionMode, Mlsa};

/// Runs the `q`-stage convolution stack of loop `lp` over its node block
/// `[r_k×6]` and returns the mask, same shape, entries in `[0, 1]`.
///
/// Each stage convolves the block as a one-channel image, normalizes all of
/// its entries together, then applies ReLU (inner stages) or a sigmoid
/// (last stage).
pub fn loop_attention<'t>(
    model: &Mlsa,
    params: &[Var<'t>],
    lp: usize,
    block: Var<'t>,
) -> Result<Var<'t>> {
    let rows = block.shape()[0];
    let stages = &model.ids.attention[lp];
    let mut x = block.reshape(&[1, rows, NODE_DIM])?;
    for (s, st) in stages.iter().enumerate() {
        let conv = x.conv2d(params[st.kernel.0])?;
        let flat = conv.reshape(&[rows * NODE_DIM, 1])?;
        let normed = flat.batch_norm(params[st.gamma.0], params[st.beta.0], model.config.bn_eps)?;
        let act = if s + 1 == stages.len() {
            normed.sigmoid()
        } else {
            normed.relu()
        };
        x = act.reshape(&[1, rows, NODE_DIM])?;
    }
    Ok(x.reshape(&[rows, NODE_DIM])?)
}

/// Attention-adjusted node features `V'` for a bundle with the given loop
/// offsets. Also returns the three masks (empty when attention is off).
pub fn fuse_masks<'t>(
    model: &Mlsa,
    params: &[Var<'t>],
    nodes: Var<'t>,
    offsets: [usize; 3],
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    if model.config.attention == AttentionMode::Disabled {
        return Ok((nodes, Vec::new()));
    }
    let r = nodes.shape()[0];
    let mut masks = Vec::with_capacity(3);
    let mut fused = Vec::with_capacity(3);
    for (lp, range) in loop_ranges(offsets, r).into_iter().enumerate() {
        let block = nodes.slice_rows(range.start, range.end)?;
        let mask = loop_attention(model, params, lp, block)?;
        fused.push(match model.config.attention {
            AttentionMode::Weighted => mask.mul(block)?,
            _ => mask,
        });
        masks.push(mask);
    }
    Ok((nodes.tape().concat_rows(&fused)?, masks))
}
