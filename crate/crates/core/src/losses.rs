//! Training objective: residue cross-entropy plus distance, torsion and
//! Cα-angle terms on every coordinate snapshot.

use serde::{Deserialize, Serialize};

use crate::data::LoopBundle;
use crate::error::{Error, Result};
use crate::graph::{
    cos_angle_var, defined_torsions, loop_ranges, torsion_sincos_var, CoordVars, GUARD,
};
use crate::model::{Mode, Trace};
use crate::tensor::{Tape, Var};

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the sequence term. `None` picks 1 for generative runs and
    /// 0 for teacher-forced runs.
    pub w_seq: Option<f64>,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_seq: None,
            huber_delta: DEFAULT_HUBER_DELTA,
        }
    }
}

impl LossWeights {
    pub fn seq_weight(&self, mode: Mode) -> f64 {
        self.w_seq.unwrap_or(match mode {
            Mode::Generative => 1.0,
            Mode::TeacherForced => 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationLoss {
    pub l_d: f64,
    pub l_beta: f64,
    pub l_ca: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seq: f64,
    pub l_d: f64,
    pub l_beta: f64,
    pub l_ca: f64,
    pub l_struct: f64,
    pub total: f64,
    pub per_iteration: Vec<IterationLoss>,
    /// Set when no torsion was defined, so the torsion term is 0 by
    /// convention.
    pub torsions_all_masked: bool,
}

/// `Σ_t −log p_t(ground_t)` over `[1×20]` logits.
pub fn seq_loss<'t>(logits: &[Var<'t>], ground: &[usize]) -> Result<Var<'t>> {
    if logits.len() != ground.len() {
        return Err(Error::Contract(format!(
            "{} distributions for {} residues",
            logits.len(),
            ground.len()
        )));
    }
    let first = logits
        .first()
        .ok_or_else(|| Error::Contract("empty trace".into()))?;
    let tape = first.tape();
    let mut terms = Vec::with_capacity(logits.len());
    for (l, &g) in logits.iter().zip(ground) {
        let width = *l.shape().last().expect("non-empty shape");
        terms.push(l.log_softmax().reshape(&[width, 1])?.gather_rows(&[g])?);
    }
    Ok(tape.concat_rows(&terms)?.sum().neg())
}

fn pair_indices(r: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..r {
        for j in i + 1..r {
            a.push(i);
            b.push(j);
        }
    }
    (a, b)
}

fn guarded_dist<'t>(d: Var<'t>) -> Result<Var<'t>> {
    Ok(d.dot_rows(d)?.add_scalar(GUARD).sqrt())
}

/// Mean Huber loss over all `i < j` Cα–Cα distance differences.
pub fn dist_loss<'t>(pred_ca: Var<'t>, true_ca: Var<'t>, delta: f64) -> Result<Var<'t>> {
    let r = pred_ca.shape()[0];
    if true_ca.shape() != pred_ca.shape() {
        return Err(Error::Contract("distance loss on unequal lengths".into()));
    }
    let tape = pred_ca.tape();
    if r < 2 {
        return Ok(tape.scalar(0.0));
    }
    let (a, b) = pair_indices(r);
    let dp = guarded_dist(pred_ca.gather_rows(&a)?.sub(pred_ca.gather_rows(&b)?)?)?;
    let dt = guarded_dist(true_ca.gather_rows(&a)?.sub(true_ca.gather_rows(&b)?)?)?;
    Ok(dp.sub(dt)?.huber(delta).mean())
}

/// MSE over the `(sin, cos)` components of every defined φ, ψ, ω.
/// Returns `None` when every torsion is masked.
pub fn dihedral_loss<'t>(
    pred: &CoordVars<'t>,
    truth: &CoordVars<'t>,
    offsets: [usize; 3],
) -> Result<Option<Var<'t>>> {
    let r = pred.ca.shape()[0];
    let tape = pred.ca.tape();
    let mut diffs = Vec::new();
    for (kind, residues) in defined_torsions(offsets, r).iter().enumerate() {
        if residues.is_empty() {
            continue;
        }
        let p = torsion_sincos_var(pred, kind, residues)?;
        let t = torsion_sincos_var(truth, kind, residues)?;
        diffs.push(p.sub(t)?);
    }
    if diffs.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.concat_rows(&diffs)?.square().mean()))
}

/// Consecutive Cα triples `(i-1, i, i+1)` that stay inside one loop.
pub fn ca_triples(offsets: [usize; 3], r: usize) -> Vec<usize> {
    loop_ranges(offsets, r)
        .into_iter()
        .flat_map(|range| (range.start + 1..range.end.saturating_sub(1)).collect::<Vec<_>>())
        .collect()
}

/// MSE of the cosine at every interior Cα of each loop.
pub fn ca_angle_loss<'t>(
    pred_ca: Var<'t>,
    true_ca: Var<'t>,
    offsets: [usize; 3],
) -> Result<Option<Var<'t>>> {
    let mid = ca_triples(offsets, pred_ca.shape()[0]);
    if mid.is_empty() {
        return Ok(None);
    }
    let prev: Vec<usize> = mid.iter().map(|i| i - 1).collect();
    let next: Vec<usize> = mid.iter().map(|i| i + 1).collect();
    let cos = |x: Var<'t>| {
        cos_angle_var(
            x.gather_rows(&prev)?,
            x.gather_rows(&mid)?,
            x.gather_rows(&next)?,
        )
    };
    Ok(Some(cos(pred_ca)?.sub(cos(true_ca)?)?.square().mean()))
}

/// Assembles the full objective for one refinement trace.
pub fn total_loss<'t>(
    tape: &'t Tape,
    trace: &Trace<'t>,
    bundle: &LoopBundle,
    mode: Mode,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    let logits: Vec<Var<'t>> = trace.steps.iter().map(|s| s.logits).collect();
    let l_seq = seq_loss(&logits, &bundle.seq)?;
    let truth = CoordVars::constant(tape, &bundle.backbone);

    let mut report = LossReport::default();
    let mut d_terms = Vec::new();
    let mut b_terms = Vec::new();
    let mut c_terms = Vec::new();
    let zero = tape.scalar(0.0);
    for step in &trace.steps {
        let ld = dist_loss(step.coords.ca, truth.ca, weights.huber_delta)?;
        let lb = dihedral_loss(&step.coords, &truth, bundle.offsets)?;
        report.torsions_all_masked = lb.is_none();
        let lb = lb.unwrap_or(zero);
        let lc = ca_angle_loss(step.coords.ca, truth.ca, bundle.offsets)?.unwrap_or(zero);
        report.per_iteration.push(IterationLoss {
            l_d: ld.item(),
            l_beta: lb.item(),
            l_ca: lc.item(),
        });
        d_terms.push(ld);
        b_terms.push(lb);
        c_terms.push(lc);
    }
    let sum = |v: &[Var<'t>]| -> Result<Var<'t>> {
        if v.is_empty() {
            Ok(zero)
        } else {
            Ok(tape.concat_rows(v)?.sum())
        }
    };
    let l_d = sum(&d_terms)?;
    let l_beta = sum(&b_terms)?;
    let l_ca = sum(&c_terms)?;
    let l_struct = l_d.add(l_beta)?.add(l_ca)?;
    let w = weights.seq_weight(mode);
    let total = l_seq.scale(w).add(l_struct)?;

    report.l_seq = l_seq.item();
    report.l_d = l_d.item();
    report.l_beta = l_beta.item();
    report.l_ca = l_ca.item();
    report.l_struct = l_struct.item();
    report.total = total.item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pts<'t>(tape: &'t Tape, rows: &[[f64; 3]]) -> Var<'t> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        tape.constant(Tensor::from_rows(&rows))
    }

    #[test]
    fn huber_branches() {
        let tape = Tape::new();
        let t = pts(&tape, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let half = pts(&tape, &[[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        let three = pts(&tape, &[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        // GUARD under the square root shifts distances by ~5e-7.
        assert!((dist_loss(half, t, 1.0).unwrap().item() - 0.125).abs() < 1e-6);
        assert!((dist_loss(three, t, 1.0).unwrap().item() - 2.5).abs() < 1e-6);
        assert!(dist_loss(t, t, 1.0).unwrap().item() < 1e-20);
    }

    #[test]
    fn straight_vs_right_angle() {
        let tape = Tape::new();
        let straight = pts(&tape, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let bent = pts(&tape, &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        let l = ca_angle_loss(straight, bent, [0, 3, 3]).unwrap();
        assert!((l.unwrap().item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_ln20() {
        let tape = Tape::new();
        let logits: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::zeros(&[1, 20])))
            .collect();
        let l = seq_loss(&logits, &[0, 5, 19, 3]).unwrap().item();
        assert!((l - 4.0 * 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn triples_stay_inside_loops() {
        assert_eq!(ca_triples([0, 3, 5], 9), vec![1, 6, 7]);
        assert!(ca_triples([0, 1, 2], 3).is_empty());
    }
}
