//! Backbone geometry: torsions, Cα angles and Kabsch superposition.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cross products shorter than this are treated as degenerate.
const DEGENERATE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("residue {index}: {angle} is undefined ({source})")]
    Residue {
        index: usize,
        angle: &'static str,
        #[source]
        source: Box<GeometryError>,
    },
    #[error("need at least {needed} points, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Cartesian point in Ångström.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for Point3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Self { x, y, z }
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        self.into()
    }
}

impl Add for Point3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Backbone atoms of one residue.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Backbone {
    pub n: Point3,
    pub ca: Point3,
    pub c: Point3,
}

/// φ, ψ, ω of one residue. Undefined (chain-terminal) angles are 0 with
/// their mask bit cleared.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DihedralTriple {
    pub phi: f64,
    pub psi: f64,
    pub omega: f64,
    /// `[phi, psi, omega]` definedness.
    pub defined: [bool; 3],
}

impl DihedralTriple {
    pub fn angles(&self) -> [f64; 3] {
        [self.phi, self.psi, self.omega]
    }
}

/// Signed torsion of `p1-p2-p3-p4` in `(-π, π]`.
///
/// Positive when, looking down `p2→p3`, the far bond is rotated clockwise
/// from the near one (IUPAC convention).
pub fn dihedral(p1: Point3, p2: Point3, p3: Point3, p4: Point3) -> Result<f64> {
    let b1 = p2 - p1;
    let b2 = p3 - p2;
    let b3 = p4 - p3;
    let n1 = b1.cross(b2);
    let n2 = b2.cross(b3);
    if n1.norm() < DEGENERATE || n2.norm() < DEGENERATE {
        return Err(GeometryError::Degenerate(
            "collinear or coincident torsion atoms",
        ));
    }
    let y = b2.norm() * b1.dot(n2);
    let x = n1.dot(n2);
    let angle = y.atan2(x);
    Ok(if angle <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        angle
    })
}

/// φ/ψ/ω for a contiguous chain of at least two residues.
///
/// φ needs the previous residue and ψ/ω the next one; those are masked at
/// the chain ends.
pub fn backbone_dihedrals(chain: &[Backbone]) -> Result<Vec<DihedralTriple>> {
    if chain.len() < 2 {
        return Err(GeometryError::TooFew {
            needed: 2,
            got: chain.len(),
        });
    }
    let wrap = |index: usize, angle: &'static str| {
        move |e: GeometryError| GeometryError::Residue {
            index,
            angle,
            source: Box::new(e),
        }
    };
    let mut out = Vec::with_capacity(chain.len());
    for i in 0..chain.len() {
        let r = chain[i];
        let mut t = DihedralTriple::default();
        if i > 0 {
            let prev = chain[i - 1];
            t.phi = dihedral(prev.c, r.n, r.ca, r.c).map_err(wrap(i, "phi"))?;
            t.defined[0] = true;
        }
        if let Some(next) = chain.get(i + 1) {
            t.psi = dihedral(r.n, r.ca, r.c, next.n).map_err(wrap(i, "psi"))?;
            t.omega = dihedral(r.ca, r.c, next.n, next.ca).map_err(wrap(i, "omega"))?;
            t.defined[1] = true;
            t.defined[2] = true;
        }
        out.push(t);
    }
    Ok(out)
}

/// Interior angle at `b` in `[0, π]`.
pub fn ca_angle(a: Point3, b: Point3, c: Point3) -> Result<f64> {
    let u = a - b;
    let v = c - b;
    if u.norm() < DEGENERATE || v.norm() < DEGENERATE {
        return Err(GeometryError::Degenerate("zero-length angle arm"));
    }
    Ok(u.cross(v).norm().atan2(u.dot(v)))
}

/// Unaligned root-mean-square deviation.
pub fn rmsd_raw(p: &[Point3], q: &[Point3]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(GeometryError::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(GeometryError::TooFew { needed: 1, got: 0 });
    }
    let total: f64 = p.iter().zip(q).map(|(&a, &b)| (a - b).dot(a - b)).sum();
    Ok((total / p.len() as f64).sqrt())
}

/// Proper rigid transform `x ↦ R·x + t` and the RMSD it achieves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superposition {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
    pub rmsd: f64,
}

impl Superposition {
    pub fn apply(&self, p: Point3) -> Point3 {
        rotate(&self.rotation, p) + self.translation
    }
}

pub fn rotate(r: &[[f64; 3]; 3], p: Point3) -> Point3 {
    Point3::new(
        r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
        r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
        r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
    )
}

/// Rodrigues rotation about a (not necessarily unit) axis.
pub fn axis_angle(axis: Point3, angle: f64) -> [[f64; 3]; 3] {
    let k = axis * (1.0 / axis.norm());
    let (s, c) = angle.sin_cos();
    let v = 1.0 - c;
    [
        [
            c + k.x * k.x * v,
            k.x * k.y * v - k.z * s,
            k.x * k.z * v + k.y * s,
        ],
        [
            k.y * k.x * v + k.z * s,
            c + k.y * k.y * v,
            k.y * k.z * v - k.x * s,
        ],
        [
            k.z * k.x * v - k.y * s,
            k.z * k.y * v + k.x * s,
            c + k.z * k.z * v,
        ],
    ]
}

fn centroid(points: &[Point3]) -> Point3 {
    let sum = points.iter().fold(Point3::default(), |acc, &p| acc + p);
    sum * (1.0 / points.len() as f64)
}

/// Kabsch superposition of `p` onto `q`.
///
/// The covariance SVD is corrected for reflections by flipping the sign
/// attached to its smallest singular value, so the returned rotation always
/// has determinant +1.
pub fn kabsch(p: &[Point3], q: &[Point3]) -> Result<Superposition> {
    if p.len() != q.len() {
        return Err(GeometryError::LengthMismatch(p.len(), q.len()));
    }
    if p.len() < 3 {
        return Err(GeometryError::TooFew {
            needed: 3,
            got: p.len(),
        });
    }
    let pc = centroid(p);
    let qc = centroid(q);
    if p.iter().all(|&x| (x - pc).norm() < DEGENERATE) {
        return Err(GeometryError::Degenerate("all points coincide"));
    }

    let mut h = Matrix3::<f64>::zeros();
    for (&a, &b) in p.iter().zip(q) {
        let a = a - pc;
        let b = b - qc;
        let (a, b) = ([a.x, a.y, a.z], [b.x, b.y, b.z]);
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] += a[i] * b[j];
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let mut d = Matrix3::<f64>::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        d[(smallest, smallest)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rotation = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let translation = qc - rotate(&rotation, pc);
    let moved: Vec<Point3> = p
        .iter()
        .map(|&x| rotate(&rotation, x) + translation)
        .collect();
    let rmsd = rmsd_raw(&moved, q)?;
    Ok(Superposition {
        rotation,
        translation,
        rmsd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn planar_dihedrals() {
        let cis = dihedral(p(0., 0., 0.), p(1., 0., 0.), p(1., 1., 0.), p(0., 1., 0.)).unwrap();
        assert!(cis.abs() < 1e-12);
        let trans = dihedral(p(0., 0., 0.), p(1., 0., 0.), p(1., 1., 0.), p(2., 1., 0.)).unwrap();
        assert_eq!(trans, PI);
    }

    #[test]
    fn right_angle_dihedral_is_positive() {
        let a = dihedral(p(0., 0., 0.), p(1., 0., 0.), p(1., 1., 0.), p(1., 1., 1.)).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_dihedral() {
        let r = dihedral(p(0., 0., 0.), p(1., 0., 0.), p(2., 0., 0.), p(2., 1., 0.));
        assert!(matches!(r, Err(GeometryError::Degenerate(_))));
    }

    #[test]
    fn ca_angle_cases() {
        assert_eq!(
            ca_angle(p(-1., 0., 0.), p(0., 0., 0.), p(2., 0., 0.)).unwrap(),
            PI
        );
        let right = ca_angle(p(1., 0., 0.), p(0., 0., 0.), p(0., 1., 0.)).unwrap();
        assert!((right - FRAC_PI_2).abs() < 1e-15);
        assert!(ca_angle(p(0., 0., 0.), p(0., 0., 0.), p(0., 1., 0.)).is_err());
    }

    #[test]
    fn backbone_masks_terminals() {
        let chain = [
            Backbone {
                n: p(-1.2, 0.8, 0.),
                ca: p(0., 0., 0.),
                c: p(1.1, 0.8, 0.3),
            },
            Backbone {
                n: p(2.4, 0.5, 0.1),
                ca: p(3.8, 0.1, 0.),
                c: p(4.9, 0.9, -0.4),
            },
        ];
        let d = backbone_dihedrals(&chain).unwrap();
        assert_eq!(d[0].defined, [false, true, true]);
        assert_eq!(d[1].defined, [true, false, false]);
        assert_eq!(d[0].phi, 0.0);
        assert_eq!(d[1].psi, 0.0);
        assert!(backbone_dihedrals(&chain[..1]).is_err());
    }

    #[test]
    fn rmsd_raw_cases() {
        assert_eq!(rmsd_raw(&[p(0., 0., 0.)], &[p(3., 4., 0.)]).unwrap(), 5.0);
        assert!(rmsd_raw(&[p(0., 0., 0.)], &[]).is_err());
    }

    #[test]
    fn kabsch_identity() {
        let pts = [p(0., 0., 0.), p(1., 0., 0.), p(0., 2., 0.), p(0., 0., 3.)];
        let s = kabsch(&pts, &pts).unwrap();
        assert!(s.rmsd < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.rotation[i][j] - want).abs() < 1e-12);
            }
        }
        assert!(matches!(
            kabsch(&pts[..2], &pts[..2]),
            Err(GeometryError::TooFew { .. })
        ));
    }
}
