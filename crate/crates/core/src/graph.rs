//! Residue graphs over a loop bundle.
//!
//! Nodes carry `(sin, cos)` of φ, ψ and ω; edges connect each residue to its
//! nearest Cα neighbours plus its sequence neighbours. Edge features are the
//! Cα distance expanded on radial basis functions, the unit direction to the
//! neighbour in the residue's local backbone frame, and the clamped
//! sequence separation.
//!
//! Two constructions are provided: plain `f64` functions used for data
//! preparation and as oracles, and tape versions (`*_var`) used inside the
//! model so gradients can flow from features back into predicted
//! coordinates.

use crate::data::{Loop, LoopBundle};
use crate::geometry::{backbone_dihedrals, Backbone, GeometryError, Point3};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const NODE_DIM: usize = 6;
pub const RBF_COUNT: usize = 16;
pub const RBF_MAX: f64 = 20.0;
pub const EDGE_DIM: usize = RBF_COUNT + 3 + 1;
pub const DEFAULT_K: usize = 8;
/// Sequence separations are clamped to `±SEQ_CLAMP` and scaled into [-1, 1].
pub const SEQ_CLAMP: f64 = 8.0;

/// Added under square roots in the tape versions so degenerate predicted
/// geometry stays differentiable.
pub const GUARD: f64 = 1e-6;

fn rbf_spacing() -> f64 {
    RBF_MAX / (RBF_COUNT - 1) as f64
}

fn rbf_center(k: usize) -> f64 {
    k as f64 * rbf_spacing()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeature {
    pub rbf: [f64; RBF_COUNT],
    pub direction: [f64; 3],
    pub seq_offset: f64,
}

impl EdgeFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(EDGE_DIM);
        v.extend_from_slice(&self.rbf);
        v.extend_from_slice(&self.direction);
        v.push(self.seq_offset);
        v
    }
}

/// Graph of one bundle. `edges[e] = (i, j)` means residue `i` receives a
/// message from neighbour `j`; `edge_features` row `e` describes that edge
/// from `i`'s point of view.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopGraph {
    pub nodes: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Tensor,
    pub labels: Vec<Loop>,
    pub offsets: [usize; 3],
}

fn seq_offset(i: usize, j: usize) -> f64 {
    (j as f64 - i as f64).clamp(-SEQ_CLAMP, SEQ_CLAMP) / SEQ_CLAMP
}

/// Loop ranges implied by bundle offsets.
pub fn loop_ranges(offsets: [usize; 3], len: usize) -> [std::ops::Range<usize>; 3] {
    [
        offsets[0]..offsets[1],
        offsets[1]..offsets[2],
        offsets[2]..len,
    ]
}

fn shift_residue(err: GeometryError, offset: usize) -> GeometryError {
    match err {
        GeometryError::Residue {
            index,
            angle,
            source,
        } => GeometryError::Residue {
            index: index + offset,
            angle,
            source,
        },
        other => other,
    }
}

/// `[r×6]` node features. Each loop is its own chain, so angles reaching
/// across a loop boundary are masked and encoded as `(0, 1)`.
pub fn node_features(backbone: &[Backbone], offsets: [usize; 3]) -> Result<Tensor, GeometryError> {
    let r = backbone.len();
    let mut data = Vec::with_capacity(r * NODE_DIM);
    for range in loop_ranges(offsets, r) {
        let start = range.start;
        let chain = &backbone[range];
        if chain.len() < 2 {
            data.extend(std::iter::repeat_n([0.0, 1.0], chain.len() * 3).flatten());
            continue;
        }
        for t in backbone_dihedrals(chain).map_err(|e| shift_residue(e, start))? {
            for (k, angle) in t.angles().into_iter().enumerate() {
                if t.defined[k] {
                    data.extend([angle.sin(), angle.cos()]);
                } else {
                    data.extend([0.0, 1.0]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![r, NODE_DIM], data).expect("r ≥ 1"))
}

/// k-nearest-neighbour edges by Cα distance (ties to the lower index), plus
/// `i±1` when not already present.
pub fn build_edges(ca: &[Point3], k: usize) -> Vec<(usize, usize)> {
    let r = ca.len();
    let mut edges = Vec::with_capacity(r * (k + 2));
    for i in 0..r {
        let mut cand: Vec<(f64, usize)> = (0..r)
            .filter(|&j| j != i)
            .map(|j| ((ca[j] - ca[i]).norm(), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nbrs: Vec<usize> = cand.iter().take(k).map(|&(_, j)| j).collect();
        for j in [i.checked_sub(1), Some(i + 1)].into_iter().flatten() {
            if j < r && !nbrs.contains(&j) {
                nbrs.push(j);
            }
        }
        edges.extend(nbrs.into_iter().map(|j| (i, j)));
    }
    edges
}

/// Orthonormal frame at a residue from `CA→N` and `CA→C` (Gram–Schmidt).
pub fn local_frame(b: &Backbone) -> Result<[Point3; 3], GeometryError> {
    let a = b.n - b.ca;
    let c = b.c - b.ca;
    if a.norm() < 1e-10 {
        return Err(GeometryError::Degenerate("N coincides with CA"));
    }
    let e1 = a * (1.0 / a.norm());
    let perp = c - e1 * c.dot(e1);
    if perp.norm() < 1e-10 {
        return Err(GeometryError::Degenerate("N, CA and C are collinear"));
    }
    let e2 = perp * (1.0 / perp.norm());
    Ok([e1, e2, e1.cross(e2)])
}

pub fn edge_feature(
    backbone: &[Backbone],
    i: usize,
    j: usize,
) -> Result<EdgeFeature, GeometryError> {
    let diff = backbone[j].ca - backbone[i].ca;
    let d = diff.norm();
    let sigma = rbf_spacing();
    let mut rbf = [0.0; RBF_COUNT];
    for (k, v) in rbf.iter_mut().enumerate() {
        let z = (d - rbf_center(k)) / sigma;
        *v = (-z * z).exp();
    }
    let direction = if d > 0.0 {
        let u = diff * (1.0 / d);
        let f = local_frame(&backbone[i]).map_err(|e| GeometryError::Residue {
            index: i,
            angle: "local frame",
            source: Box::new(e),
        })?;
        [u.dot(f[0]), u.dot(f[1]), u.dot(f[2])]
    } else {
        [0.0; 3]
    };
    Ok(EdgeFeature {
        rbf,
        direction,
        seq_offset: seq_offset(i, j),
    })
}

pub fn build_graph(bundle: &LoopBundle, k: usize) -> Result<LoopGraph, GeometryError> {
    let nodes = node_features(&bundle.backbone, bundle.offsets)?;
    let edges = build_edges(&bundle.ca(), k);
    let mut feats = Vec::with_capacity(edges.len() * EDGE_DIM);
    for &(i, j) in &edges {
        feats.extend(edge_feature(&bundle.backbone, i, j)?.to_vec());
    }
    let edge_features = Tensor::new(vec![edges.len().max(1), EDGE_DIM], {
        if edges.is_empty() {
            vec![0.0; EDGE_DIM]
        } else {
            feats
        }
    })
    .expect("edge feature shape");
    Ok(LoopGraph {
        nodes,
        edges,
        edge_features,
        labels: bundle.labels(),
        offsets: bundle.offsets,
    })
}

/// Contiguous node-feature blocks `V₁, V₂, V₃`.
pub fn partition_nodes(graph: &LoopGraph) -> [Tensor; 3] {
    let r = graph.labels.len();
    loop_ranges(graph.offsets, r).map(|range| {
        let data = graph.nodes.data()[range.start * NODE_DIM..range.end * NODE_DIM].to_vec();
        Tensor::new(vec![range.len(), NODE_DIM], data).expect("non-empty loop")
    })
}

/// Backbone coordinates on a tape, one `[r×3]` value per atom type.
#[derive(Debug, Clone, Copy)]
pub struct CoordVars<'t> {
    pub n: Var<'t>,
    pub ca: Var<'t>,
    pub c: Var<'t>,
}

impl<'t> CoordVars<'t> {
    pub fn constant(tape: &'t Tape, backbone: &[Backbone]) -> Self {
        let take = |f: fn(&Backbone) -> Point3| {
            let data = backbone.iter().flat_map(|b| f(b).to_array()).collect();
            tape.constant(Tensor::new(vec![backbone.len(), 3], data).expect("r ≥ 1"))
        };
        Self {
            n: take(|b| b.n),
            ca: take(|b| b.ca),
            c: take(|b| b.c),
        }
    }

    /// Current values as plain backbone records.
    pub fn to_backbone(&self) -> Vec<Backbone> {
        let (n, ca, c) = (self.n.value(), self.ca.value(), self.c.value());
        let pt = |v: &[f64], i: usize| Point3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
        (0..n.len() / 3)
            .map(|i| Backbone {
                n: pt(&n, i),
                ca: pt(&ca, i),
                c: pt(&c, i),
            })
            .collect()
    }
}

fn guarded_norm<'t>(v: Var<'t>) -> Result<Var<'t>, TensorError> {
    Ok(v.dot_rows(v)?.add_scalar(GUARD).sqrt())
}

/// `(sin, cos)` of the torsions `p1-p2-p3-p4`, row-wise; `[m×2]`.
pub fn dihedral_sincos_var<'t>(
    p1: Var<'t>,
    p2: Var<'t>,
    p3: Var<'t>,
    p4: Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let b1 = p2.sub(p1)?;
    let b2 = p3.sub(p2)?;
    let b3 = p4.sub(p3)?;
    let n1 = b1.cross(b2)?;
    let n2 = b2.cross(b3)?;
    let x = n1.dot_rows(n2)?;
    let y = guarded_norm(b2)?.mul(b1.dot_rows(n2)?)?;
    let norm = x.square().add(y.square())?.add_scalar(GUARD).sqrt();
    let tape = x.tape();
    tape.concat_cols(&[y.div(norm)?, x.div(norm)?])
}

/// Cosine of the angle at `b` for row-wise triples; `[m×1]`.
pub fn cos_angle_var<'t>(a: Var<'t>, b: Var<'t>, c: Var<'t>) -> Result<Var<'t>, TensorError> {
    let u = a.sub(b)?;
    let v = c.sub(b)?;
    let denom = u.dot_rows(u)?.mul(v.dot_rows(v)?)?.add_scalar(GUARD).sqrt();
    u.dot_rows(v)?.div(denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Atom {
    N,
    Ca,
    C,
}

/// Atom quadruples `(atom, residue offset)` for φ, ψ and ω of residue `i`.
const TORSIONS: [[(Atom, isize); 4]; 3] = [
    [(Atom::C, -1), (Atom::N, 0), (Atom::Ca, 0), (Atom::C, 0)],
    [(Atom::N, 0), (Atom::Ca, 0), (Atom::C, 0), (Atom::N, 1)],
    [(Atom::Ca, 0), (Atom::C, 0), (Atom::N, 1), (Atom::Ca, 1)],
];

/// Residues of each torsion type whose atoms all lie in the same loop.
pub fn defined_torsions(offsets: [usize; 3], len: usize) -> [Vec<usize>; 3] {
    let ranges = loop_ranges(offsets, len);
    let mut out: [Vec<usize>; 3] = Default::default();
    for range in ranges {
        for i in range.clone() {
            if i > range.start {
                out[0].push(i);
            }
            if i + 1 < range.end {
                out[1].push(i);
                out[2].push(i);
            }
        }
    }
    out
}

/// Row-wise torsion `(sin, cos)` for the given residues of torsion type
/// `kind` (0 = φ, 1 = ψ, 2 = ω); `[m×2]`.
pub fn torsion_sincos_var<'t>(
    coords: &CoordVars<'t>,
    kind: usize,
    residues: &[usize],
) -> Result<Var<'t>, TensorError> {
    let pick = |(atom, shift): (Atom, isize)| {
        let idx: Vec<usize> = residues
            .iter()
            .map(|&i| (i as isize + shift) as usize)
            .collect();
        match atom {
            Atom::N => coords.n,
            Atom::Ca => coords.ca,
            Atom::C => coords.c,
        }
        .gather_rows(&idx)
    };
    let q = TORSIONS[kind];
    dihedral_sincos_var(pick(q[0])?, pick(q[1])?, pick(q[2])?, pick(q[3])?)
}

/// Tape version of [`node_features`].
pub fn node_features_var<'t>(
    coords: &CoordVars<'t>,
    offsets: [usize; 3],
) -> Result<Var<'t>, TensorError> {
    let tape = coords.ca.tape();
    let r = coords.ca.shape()[0];
    let mut blocks = Vec::with_capacity(3);
    for (kind, residues) in defined_torsions(offsets, r).iter().enumerate() {
        let mut fill = vec![0.0; r * 2];
        let mut defined = vec![false; r];
        residues.iter().for_each(|&i| defined[i] = true);
        for i in 0..r {
            if !defined[i] {
                fill[2 * i + 1] = 1.0;
            }
        }
        let fill = tape.constant_from(&[r, 2], fill)?;
        if residues.is_empty() {
            blocks.push(fill);
        } else {
            let sc = torsion_sincos_var(coords, kind, residues)?;
            blocks.push(sc.scatter_mean_rows(residues, r)?.add(fill)?);
        }
    }
    tape.concat_cols(&blocks)
}

/// Tape version of the edge features for a fixed edge list; `[E×EDGE_DIM]`.
pub fn edge_features_var<'t>(
    coords: &CoordVars<'t>,
    edges: &[(usize, usize)],
) -> Result<Var<'t>, TensorError> {
    let tape = coords.ca.tape();
    let center: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let nbr: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let m = edges.len();

    let diff = coords
        .ca
        .gather_rows(&nbr)?
        .sub(coords.ca.gather_rows(&center)?)?;
    let dist = guarded_norm(diff)?;

    let ones = tape.constant(Tensor::full(&[1, RBF_COUNT], 1.0));
    let centers: Vec<f64> = (0..RBF_COUNT).map(|k| -rbf_center(k)).collect();
    let centers = tape.constant_from(&[RBF_COUNT], centers)?;
    let rbf = dist
        .matmul(ones)?
        .add_row(centers)?
        .scale(1.0 / rbf_spacing())
        .square()
        .neg()
        .exp();

    let unit = diff.div(dist.matmul(tape.constant(Tensor::full(&[1, 3], 1.0)))?)?;
    let a = coords.n.sub(coords.ca)?;
    let b = coords.c.sub(coords.ca)?;
    let e1 = a.div(guarded_norm(a)?.matmul(tape.constant(Tensor::full(&[1, 3], 1.0)))?)?;
    let perp = b.sub(e1.mul_col(b.dot_rows(e1)?)?)?;
    let e2 = perp.div(guarded_norm(perp)?.matmul(tape.constant(Tensor::full(&[1, 3], 1.0)))?)?;
    let e3 = e1.cross(e2)?;
    let dir = tape.concat_cols(&[
        unit.dot_rows(e1.gather_rows(&center)?)?,
        unit.dot_rows(e2.gather_rows(&center)?)?,
        unit.dot_rows(e3.gather_rows(&center)?)?,
    ])?;

    let offs: Vec<f64> = edges.iter().map(|&(i, j)| seq_offset(i, j)).collect();
    let offs = tape.constant_from(&[m, 1], offs)?;
    tape.concat_cols(&[rbf, dir, offs])
}
