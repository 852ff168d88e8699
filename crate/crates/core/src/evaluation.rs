//! Kabsch Cα RMSD per loop, per-length tables and improvement arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Loop, LoopBundle};
use crate::error::{Error, Result};
use crate::geometry::{kabsch, Backbone, Point3};
use crate::model::{Mlsa, Mode};
use crate::tensor::Tape;

/// H3 lengths reported in the per-length table.
pub const H3_LENGTHS: std::ops::RangeInclusive<usize> = 7..=17;

/// Reference average H3 RMSDs (Å) used for the improvement table.
pub const DEFAULT_BASELINES: [(&str, f64); 7] = [
    ("RosettaAntibody-G", 2.7037),
    ("ABodyBuilder", 2.4597),
    ("DeepAb", 2.4110),
    ("ABlooper", 2.2737),
    ("RefineGNN", 2.2510),
    ("MLSA-no att", 2.2002),
    ("MLSA-att", 1.9378),
];

/// How predictions are superposed before measuring a loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Each loop is fitted on its own residues.
    Loop,
    /// One fit over all three loops, then each loop is measured under it.
    Joint,
}

impl FromStr for AlignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loop" => Ok(Self::Loop),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown alignment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsdRow {
    pub pdb: String,
    #[serde(rename = "loop")]
    pub lp: Loop,
    pub length: usize,
    pub rmsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub method: String,
    pub baseline: f64,
    pub ours: f64,
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_h1: f64,
    pub mean_h2: f64,
    pub mean_h3: f64,
    pub rows: Vec<RmsdRow>,
    /// Mean H3 RMSD per loop length; lengths without records are absent.
    pub h3_by_length: BTreeMap<usize, f64>,
    pub improvements: Vec<ImprovementRow>,
}

impl EvalReport {
    pub fn mean(&self, lp: Loop) -> f64 {
        match lp {
            Loop::H1 => self.mean_h1,
            Loop::H2 => self.mean_h2,
            Loop::H3 => self.mean_h3,
        }
    }
}

/// `100·(baseline − ours)/baseline`.
pub fn improvement_pct(baseline: f64, ours: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Contract(format!(
            "baseline RMSD {baseline} must be positive"
        )));
    }
    Ok(100.0 * (baseline - ours) / baseline)
}

/// Cα RMSD after optimal proper superposition of `pred` onto `truth`.
pub fn loop_rmsd(truth: &[Point3], pred: &[Point3]) -> Result<f64> {
    Ok(kabsch(pred, truth)?.rmsd)
}

fn ca_of(backbone: &[Backbone]) -> Vec<Point3> {
    backbone.iter().map(|b| b.ca).collect()
}

/// RMSD of each loop of `pred` against the bundle's ground truth.
pub fn bundle_rmsd(bundle: &LoopBundle, pred: &[Backbone], align: AlignMode) -> Result<[f64; 3]> {
    if pred.len() != bundle.len() {
        return Err(Error::Contract(format!(
            "prediction has {} residues, bundle {}",
            pred.len(),
            bundle.len()
        )));
    }
    let truth = bundle.ca();
    let p = ca_of(pred);
    let mut out = [0.0; 3];
    match align {
        AlignMode::Loop => {
            for lp in Loop::ALL {
                let r = bundle.loop_range(lp);
                out[lp.index()] = loop_rmsd(&truth[r.clone()], &p[r])?;
            }
        }
        AlignMode::Joint => {
            let fit = kabsch(&p, &truth)?;
            for lp in Loop::ALL {
                let r = bundle.loop_range(lp);
                let sq: f64 = r
                    .clone()
                    .map(|i| {
                        let d = fit.apply(p[i]) - truth[i];
                        d.dot(d)
                    })
                    .sum();
                out[lp.index()] = (sq / r.len() as f64).sqrt();
            }
        }
    }
    Ok(out)
}

/// Refines one bundle; returns the final backbone.
pub fn predict(model: &Mlsa, bundle: &LoopBundle, mode: Mode) -> Result<Vec<Backbone>> {
    Ok(predict_with_sequence(model, bundle, mode)?.0)
}

/// Final backbone plus the residue placed at each step.
pub fn predict_with_sequence(
    model: &Mlsa,
    bundle: &LoopBundle,
    mode: Mode,
) -> Result<(Vec<Backbone>, Vec<usize>)> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let trace = model.run_refinement(&tape, &params, bundle, mode)?;
    let out = trace.final_backbone();
    if out
        .iter()
        .any(|b| !(b.n.is_finite() && b.ca.is_finite() && b.c.is_finite()))
    {
        return Err(Error::Numerical(format!(
            "record {}: non-finite prediction",
            bundle.pdb_id
        )));
    }
    Ok((out, trace.sequence().to_vec()))
}

/// Mean H3 RMSD per length in [`H3_LENGTHS`].
pub fn length_table(rows: &[RmsdRow]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.lp == Loop::H3 && H3_LENGTHS.contains(&r.length))
    {
        let e = acc.entry(r.length).or_default();
        e.0 += r.rmsd;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

fn mean_of(rows: &[RmsdRow], lp: Loop) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.lp == lp).map(|r| r.rmsd).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Assembles a report from per-record rows.
pub fn build_report(rows: Vec<RmsdRow>, baselines: &[(String, f64)]) -> Result<EvalReport> {
    let mean_h3 = mean_of(&rows, Loop::H3);
    let improvements = baselines
        .iter()
        .map(|(name, b)| {
            Ok(ImprovementRow {
                method: name.clone(),
                baseline: *b,
                ours: mean_h3,
                improvement_pct: improvement_pct(*b, mean_h3)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean_h1: mean_of(&rows, Loop::H1),
        mean_h2: mean_of(&rows, Loop::H2),
        mean_h3,
        h3_by_length: length_table(&rows),
        rows,
        improvements,
    })
}

/// Runs teacher-forced refinement on every bundle and scores each loop.
pub fn evaluate(
    model: &Mlsa,
    bundles: &[LoopBundle],
    align: AlignMode,
    baselines: &[(String, f64)],
) -> Result<EvalReport> {
    let per_record = bundles
        .par_iter()
        .map(|b| {
            let pred = predict(model, b, Mode::TeacherForced)?;
            let rmsd = bundle_rmsd(b, &pred, align)?;
            Ok(Loop::ALL
                .map(|lp| RmsdRow {
                    pdb: b.pdb_id.clone(),
                    lp,
                    length: b.loop_len(lp),
                    rmsd: rmsd[lp.index()],
                })
                .to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(per_record.into_iter().flatten().collect(), baselines)
}

pub fn default_baselines() -> Vec<(String, f64)> {
    DEFAULT_BASELINES
        .iter()
        .map(|(n, v)| (n.to_string(), *v))
        .collect()
}

/// Parses `name = rmsd` lines; `#` starts a comment.
pub fn parse_baselines(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("baselines line {}: expected name = rmsd", n + 1))
        })?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("baselines line {}: bad number", n + 1)))?;
        if !(v > 0.0) {
            return Err(Error::Config(format!(
                "baselines line {}: RMSD must be positive",
                n + 1
            )));
        }
        out.push((k.trim().to_string(), v));
    }
    Ok(out)
}

/// `pdb,loop,length,rmsd` with full-precision values.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("pdb,loop,length,rmsd\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{}", r.pdb, r.lp, r.length, r.rmsd);
    }
    s
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report_csv(report)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Contract(e.to_string()))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}
