//! Synthetic heavy chains with ideal backbone geometry.
//!
//! Chains are grown atom by atom from bond lengths, bond angles and
//! torsions. They feed the tests, gradient checks and the CLI demo data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{bundle_loops, AntibodyRecord, ChainCoords, LoopBundle, Span, AMINO_ACIDS};
use crate::geometry::{Backbone, Point3};

pub const BOND_N_CA: f64 = 1.458;
pub const BOND_CA_C: f64 = 1.525;
pub const BOND_C_N: f64 = 1.329;
pub const ANGLE_N_CA_C: f64 = 111.2;
pub const ANGLE_CA_C_N: f64 = 116.2;
pub const ANGLE_C_N_CA: f64 = 121.7;

/// Framework residues before H1, between loops, and after H3.
const FRAMEWORK: [usize; 4] = [3, 4, 4, 3];

/// Places `d` so that `|cd| = bond`, `∠bcd = angle` and the torsion
/// `a-b-c-d = torsion` (angles in radians).
pub fn place_atom(a: Point3, b: Point3, c: Point3, bond: f64, angle: f64, torsion: f64) -> Point3 {
    let unit = |p: Point3| p * (1.0 / p.norm());
    let bc = unit(c - b);
    let n = unit((b - a).cross(bc));
    let m = n.cross(bc);
    let dx = -bond * angle.cos();
    let dy = bond * angle.sin() * torsion.cos();
    let dz = bond * angle.sin() * torsion.sin();
    c + bc * dx + m * dy + n * dz
}

/// Builds a backbone from per-residue `(φ, ψ)` in radians with trans
/// peptide bonds. `φ` of the first residue is unused.
pub fn build_backbone(torsions: &[(f64, f64)]) -> Vec<Backbone> {
    let rad = f64::to_radians;
    let mut out = Vec::with_capacity(torsions.len());
    if torsions.is_empty() {
        return out;
    }
    let n0 = Point3::new(0.0, 0.0, 0.0);
    let ca0 = Point3::new(BOND_N_CA, 0.0, 0.0);
    let t = std::f64::consts::PI - rad(ANGLE_N_CA_C);
    let c0 = ca0 + Point3::new(BOND_CA_C * t.cos(), BOND_CA_C * t.sin(), 0.0);
    out.push(Backbone {
        n: n0,
        ca: ca0,
        c: c0,
    });
    for i in 1..torsions.len() {
        let prev = out[i - 1];
        let n = place_atom(
            prev.n,
            prev.ca,
            prev.c,
            BOND_C_N,
            rad(ANGLE_CA_C_N),
            torsions[i - 1].1,
        );
        let ca = place_atom(
            prev.ca,
            prev.c,
            n,
            BOND_N_CA,
            rad(ANGLE_C_N_CA),
            std::f64::consts::PI,
        );
        let c = place_atom(prev.c, n, ca, BOND_CA_C, rad(ANGLE_N_CA_C), torsions[i].0);
        out.push(Backbone { n, ca, c });
    }
    out
}

/// Random torsions near the helical or extended basin.
fn random_torsions(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let (phi, psi) = if rng.random_bool(0.5) {
                (-63.0, -43.0)
            } else {
                (-120.0, 130.0)
            };
            (
                (phi + rng.random_range(-25.0..25.0_f64)).to_radians(),
                (psi + rng.random_range(-25.0..25.0_f64)).to_radians(),
            )
        })
        .collect()
}

/// A complete heavy-chain record with loops of the given lengths.
pub fn synthetic_record(id: &str, loop_lens: [usize; 3], seed: u64) -> AntibodyRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = FRAMEWORK.iter().sum::<usize>() + loop_lens.iter().sum::<usize>();
    let backbone = build_backbone(&random_torsions(&mut rng, total));
    let heavy_seq: String = (0..total)
        .map(|_| AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())] as char)
        .collect();

    let mut spans = [Span { start: 0, end: 0 }; 3];
    let mut pos = FRAMEWORK[0];
    for (k, &len) in loop_lens.iter().enumerate() {
        spans[k] = Span {
            start: pos,
            end: pos + len - 1,
        };
        pos += len + FRAMEWORK[k + 1];
    }
    AntibodyRecord {
        pdb_id: id.to_string(),
        resolution: Some(2.0),
        heavy_seq,
        loop_spans: spans,
        coords: ChainCoords {
            n: backbone.iter().map(|b| Some(b.n)).collect(),
            ca: backbone.iter().map(|b| Some(b.ca)).collect(),
            c: backbone.iter().map(|b| Some(b.c)).collect(),
        },
    }
}

/// `n` records with loop lengths drawn from typical ranges.
pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<AntibodyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lens = [
                rng.random_range(5..=7),
                rng.random_range(4..=6),
                rng.random_range(7..=17),
            ];
            synthetic_record(&format!("syn{i:04}"), lens, rng.random())
        })
        .collect()
}

/// Loop bundle of a synthetic record.
pub fn toy_bundle(loop_lens: [usize; 3], seed: u64) -> LoopBundle {
    bundle_loops(&synthetic_record("toy", loop_lens, seed)).expect("synthetic records are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{backbone_dihedrals, ca_angle};

    #[test]
    fn bond_geometry_is_ideal() {
        let tors = vec![(-1.0, 2.0), (-1.2, -0.7), (-2.0, 2.3), (-1.1, -0.8)];
        let bb = build_backbone(&tors);
        for (i, r) in bb.iter().enumerate() {
            assert!(((r.ca - r.n).norm() - BOND_N_CA).abs() < 1e-12);
            assert!(((r.c - r.ca).norm() - BOND_CA_C).abs() < 1e-12);
            let a = ca_angle(r.n, r.ca, r.c).unwrap().to_degrees();
            assert!((a - ANGLE_N_CA_C).abs() < 1e-9);
            if i > 0 {
                assert!(((r.n - bb[i - 1].c).norm() - BOND_C_N).abs() < 1e-12);
            }
        }
        let d = backbone_dihedrals(&bb).unwrap();
        for i in 0..tors.len() {
            if i > 0 {
                assert!((d[i].phi - tors[i].0).abs() < 1e-9, "phi {i}");
            }
            if i + 1 < tors.len() {
                assert!((d[i].psi - tors[i].1).abs() < 1e-9, "psi {i}");
                assert!((d[i].omega.abs() - std::f64::consts::PI).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn records_validate() {
        for r in synthetic_dataset(5, 9) {
            r.validate().unwrap();
        }
        let b = toy_bundle([2, 3, 4], 1);
        assert_eq!(b.offsets, [0, 2, 5]);
        assert_eq!(b.len(), 9);
    }
}
