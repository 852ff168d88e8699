use crate::data::NUM_AMINO_ACIDS;
use crate::error::{Error, Result};
use crate::tensor::Var;

use super::{Mlsa, MpnIds};

/// Embedding row used for positions whose residue type is not yet known.
pub const UNKNOWN_RESIDUE: usize = NUM_AMINO_ACIDS;

/// Encodes a graph into hidden states `[r×H]`.
///
/// `residues[i]` is an amino-acid index, or [`UNKNOWN_RESIDUE`]. Edge `e`
/// is `(center, neighbour)` and its message flows into `center`.
pub(crate) fn encode<'t>(
    ids: &MpnIds,
    params: &[Var<'t>],
    nodes: Var<'t>,
    residues: &[usize],
    edges: &[(usize, usize)],
    edge_feats: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let r = nodes.shape()[0];
    if residues.len() != r {
        return Err(Error::Contract(format!(
            "{} residue labels for {r} nodes",
            residues.len()
        )));
    }
    if residues.iter().any(|&a| a > UNKNOWN_RESIDUE) {
        return Err(Error::Contract("residue index out of range".into()));
    }
    let embed = params[ids.embed.0].gather_rows(residues)?;
    let mut h = nodes
        .matmul(params[ids.w_in.0])?
        .add_row(params[ids.b_in.0])?
        .add(embed)?;

    let tape = nodes.tape();
    let center: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let nbr: Vec<usize> = edges.iter().map(|e| e.1).collect();
    for layer in &ids.layers {
        let agg = match edge_feats {
            Some(ef) if !edges.is_empty() => {
                let input = tape.concat_cols(&[h.gather_rows(&nbr)?, ef])?;
                let msg = input
                    .matmul(params[layer.w_msg.0])?
                    .add_row(params[layer.b_msg.0])?
                    .relu();
                msg.scatter_mean_rows(&center, r)?
            }
            _ => h.scale(0.0),
        };
        h = tape
            .concat_cols(&[h, agg])?
            .matmul(params[layer.w_upd.0])?
            .add_row(params[layer.b_upd.0])?
            .relu();
    }
    Ok(h)
}

/// Sequence-side (`structure == false`) or structure-side encoder.
pub fn mpn_encode<'t>(
    model: &Mlsa,
    params: &[Var<'t>],
    structure: bool,
    nodes: Var<'t>,
    residues: &[usize],
    edges: &[(usize, usize)],
    edge_feats: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let ids = if structure {
        &model.ids.struct_mpn
    } else {
        &model.ids.seq_mpn
    };
    encode(ids, params, nodes, residues, edges, edge_feats)
}

/// Logits `[1×20]` for the residue whose hidden state is `h_next` (`[1×H]`).
pub fn predict_residue<'t>(model: &Mlsa, params: &[Var<'t>], h_next: Var<'t>) -> Result<Var<'t>> {
    Ok(h_next.matmul(params[model.ids.heads.w_a.0])?)
}

/// Coordinates `[r×3]` for N, CA and C from hidden states `[r×H]`.
pub fn predict_coords<'t>(model: &Mlsa, params: &[Var<'t>], h: Var<'t>) -> Result<[Var<'t>; 3]> {
    let w = &model.ids.heads.w_x;
    Ok([
        h.matmul(params[w[0].0])?,
        h.matmul(params[w[1].0])?,
        h.matmul(params[w[2].0])?,
    ])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{Tape, Tensor};

    fn small() -> Mlsa {
        Mlsa::new(
            ModelConfig {
                hidden: 5,
                mpn_layers: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 20]), 0);
    }

    #[test]
    fn no_edges_means_no_message_flow() {
        let model = small();
        let tape = Tape::new();
        let p = model.bind(&tape);
        let nodes = Tensor::new(vec![3, 6], (0..18).map(|i| i as f64 * 0.1).collect()).unwrap();
        let h = mpn_encode(
            &model,
            &p,
            false,
            tape.constant(nodes.clone()),
            &[0, 1, 20],
            &[],
            None,
        )
        .unwrap();
        // Encoding one node alone gives the same row.
        let single = Tensor::new(vec![1, 6], nodes.row(1).to_vec()).unwrap();
        let h1 = mpn_encode(&model, &p, false, tape.constant(single), &[1], &[], None).unwrap();
        assert_eq!(&h.value()[5..10], &h1.value()[..]);
    }

    #[test]
    fn zero_heads() {
        let mut model = small();
        for id in model.ids.heads.w_x.into_iter().chain([model.ids.heads.w_a]) {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let p = model.bind(&tape);
        let h = tape.constant(Tensor::full(&[4, 5], 0.7));
        for x in predict_coords(&model, &p, h).unwrap() {
            assert!(x.value().iter().all(|&v| v == 0.0));
        }
        let probs = predict_residue(&model, &p, h.slice_rows(0, 1).unwrap())
            .unwrap()
            .softmax();
        assert!(probs.value().iter().all(|&v| (v - 0.05).abs() < 1e-15));
    }
}
