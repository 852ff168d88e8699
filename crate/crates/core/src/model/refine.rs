use crate::data::LoopBundle;
use crate::error::{Error, Result};
use crate::geometry::{Backbone, Point3};
use crate::graph::{build_edges, edge_features_var, node_features_var, CoordVars};
use crate::tensor::{Tape, Var};

use super::attention::fuse_masks;
use super::mpn::{argmax, mpn_encode, predict_coords, predict_residue, UNKNOWN_RESIDUE};
use super::{Mlsa, Mode};

/// Cα spacing of the starting chain, Å.
pub const CA_SPACING: f64 = 3.8;

const N_OFFSET: Point3 = Point3::new(-1.1, 0.8, 0.0);
const C_OFFSET: Point3 = Point3::new(1.1, 0.8, 0.0);

/// Straight starting chain along +x with Cα `i` at `(3.8 i, 0, 0)`.
pub fn initial_backbone(r: usize) -> Vec<Backbone> {
    (0..r)
        .map(|i| {
            let ca = Point3::new(CA_SPACING * i as f64, 0.0, 0.0);
            Backbone {
                n: ca + N_OFFSET,
                ca,
                c: ca + C_OFFSET,
            }
        })
        .collect()
}

/// Graph and sequence state between refinement iterations.
#[derive(Debug, Clone)]
pub struct RefinementState<'t> {
    pub t: usize,
    /// Residue labels fixed so far; `len() == t`.
    pub seq: Vec<usize>,
    pub coords: CoordVars<'t>,
    pub nodes: Var<'t>,
    pub edges: Vec<(usize, usize)>,
    pub edge_feats: Var<'t>,
    /// Structure-side hidden states from the latest step.
    pub hidden: Option<Var<'t>>,
    offsets: [usize; 3],
}

impl RefinementState<'_> {
    pub fn len(&self) -> usize {
        self.nodes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self, known: usize) -> Vec<usize> {
        let mut out = vec![UNKNOWN_RESIDUE; self.len()];
        out[..known].copy_from_slice(&self.seq[..known]);
        out
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<'t> {
    /// `[1×20]` logits for residue `t`.
    pub logits: Var<'t>,
    /// Argmax of `logits`.
    pub predicted: usize,
    /// Coordinates produced by this step.
    pub coords: CoordVars<'t>,
    pub masks: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Trace<'t> {
    pub steps: Vec<StepOutput<'t>>,
    pub final_state: RefinementState<'t>,
}

impl Trace<'_> {
    /// Residue labels placed into the state, in bundle order.
    pub fn sequence(&self) -> &[usize] {
        &self.final_state.seq
    }

    /// Argmax of every step's distribution.
    pub fn predicted(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.predicted).collect()
    }

    pub fn final_backbone(&self) -> Vec<Backbone> {
        self.final_state.coords.to_backbone()
    }
}

fn rebuild<'t>(
    model: &Mlsa,
    coords: &CoordVars<'t>,
    offsets: [usize; 3],
) -> Result<(Var<'t>, Vec<(usize, usize)>, Var<'t>)> {
    let ca = coords.ca.value();
    if ca.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite predicted coordinates".into()));
    }
    let points: Vec<Point3> = ca
        .chunks(3)
        .map(|p| Point3::new(p[0], p[1], p[2]))
        .collect();
    let edges = build_edges(&points, model.config.k_neighbors);
    let nodes = node_features_var(coords, offsets)?;
    let edge_feats = edge_features_var(coords, &edges)?;
    Ok((nodes, edges, edge_feats))
}

impl Mlsa {
    /// State at `t = 0`: straight starting chain, nothing predicted yet.
    pub fn initial_state<'t>(
        &self,
        tape: &'t Tape,
        bundle: &LoopBundle,
    ) -> Result<RefinementState<'t>> {
        let coords = CoordVars::constant(tape, &initial_backbone(bundle.len()));
        let (nodes, edges, edge_feats) = rebuild(self, &coords, bundle.offsets)?;
        Ok(RefinementState {
            t: 0,
            seq: Vec::new(),
            coords,
            nodes,
            edges,
            edge_feats,
            hidden: None,
            offsets: bundle.offsets,
        })
    }

    /// One iteration: attention, next-residue prediction, coordinate
    /// update and graph rebuild.
    ///
    /// In teacher-forced mode `ground[t]` enters the state; otherwise the
    /// argmax does.
    pub fn refine_step<'t>(
        &self,
        params: &[Var<'t>],
        state: &RefinementState<'t>,
        mode: Mode,
        ground: Option<&[usize]>,
    ) -> Result<(RefinementState<'t>, StepOutput<'t>)> {
        let r = state.len();
        let t = state.t;
        if t >= r {
            return Err(Error::Contract(format!(
                "refine_step at t = {t} with r = {r}"
            )));
        }
        let (fused, masks) = fuse_masks(self, params, state.nodes, state.offsets)?;

        let h_seq = mpn_encode(
            self,
            params,
            false,
            fused,
            &state.labels(t),
            &state.edges,
            Some(state.edge_feats),
        )?;
        let logits = predict_residue(self, params, h_seq.slice_rows(t, t + 1)?)?;
        let predicted = argmax(&logits.value());
        let placed = match mode {
            Mode::TeacherForced => {
                let g = ground.ok_or_else(|| {
                    Error::Contract("teacher forcing needs a ground sequence".into())
                })?;
                *g.get(t).ok_or_else(|| {
                    Error::Contract(format!("ground sequence shorter than {}", t + 1))
                })?
            }
            Mode::Generative => predicted,
        };
        let mut seq = state.seq.clone();
        seq.push(placed);
        let mut labels = seq.clone();
        labels.resize(r, UNKNOWN_RESIDUE);

        let h = mpn_encode(
            self,
            params,
            true,
            fused,
            &labels,
            &state.edges,
            Some(state.edge_feats),
        )?;
        let [n, ca, c] = predict_coords(self, params, h)?;
        let coords = CoordVars { n, ca, c };
        let (nodes, edges, edge_feats) = rebuild(self, &coords, state.offsets)?;

        let next = RefinementState {
            t: t + 1,
            seq,
            coords,
            nodes,
            edges,
            edge_feats,
            hidden: Some(h),
            offsets: state.offsets,
        };
        Ok((
            next,
            StepOutput {
                logits,
                predicted,
                coords,
                masks,
            },
        ))
    }

    /// Runs exactly `r` refinement steps over a bundle.
    pub fn run_refinement<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        bundle: &LoopBundle,
        mode: Mode,
    ) -> Result<Trace<'t>> {
        let mut state = self.initial_state(tape, bundle)?;
        let mut steps = Vec::with_capacity(bundle.len());
        for _ in 0..bundle.len() {
            let (next, out) = self.refine_step(params, &state, mode, Some(&bundle.seq))?;
            steps.push(out);
            state = next;
        }
        Ok(Trace {
            steps,
            final_state: state,
        })
    }
}
