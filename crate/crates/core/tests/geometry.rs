use cdr_refine::geometry::{backbone_dihedrals, ca_angle, dihedral, kabsch, rmsd_raw, Point3};
use cdr_refine::synthetic::build_backbone;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    (-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = [[f64; 3]; 3]> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(u1, u2, u3)| {
        let tau = std::f64::consts::TAU;
        let (w, x, y, z) = (
            (1.0 - u1).sqrt() * (tau * u2).sin(),
            (1.0 - u1).sqrt() * (tau * u2).cos(),
            u1.sqrt() * (tau * u3).sin(),
            u1.sqrt() * (tau * u3).cos(),
        );
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    })
}

fn apply(r: &[[f64; 3]; 3], t: Point3, p: Point3) -> Point3 {
    cdr_refine::geometry::rotate(r, p) + t
}

#[test]
fn torsions_of_built_chain_match_requested() {
    let want = [
        (-1.1, 2.2),
        (-1.0, -0.8),
        (-2.1, 2.4),
        (-1.2, -0.7),
        (1.0, 0.5),
    ];
    let chain = build_backbone(&want);
    let got = backbone_dihedrals(&chain).unwrap();
    for i in 1..want.len() - 1 {
        assert!((got[i].phi - want[i].0).abs() < 1e-9);
        assert!((got[i].psi - want[i].1).abs() < 1e-9);
        assert!((got[i].omega.abs() - std::f64::consts::PI).abs() < 1e-9);
    }
}

#[test]
fn orthogonal_torsion_sign() {
    let (p1, p2, p3) = (
        Point3::new(1.0, 0.0, 0.0),
        Point3::default(),
        Point3::new(0.0, 0.0, 1.0),
    );
    let up = dihedral(p1, p2, p3, Point3::new(0.0, 1.0, 1.0)).unwrap();
    let down = dihedral(p1, p2, p3, Point3::new(0.0, -1.0, 1.0)).unwrap();
    assert!((up - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    assert!((down + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}

proptest! {
    #[test]
    fn dihedral_in_range_and_rigid_invariant(
        p in prop::array::uniform4(point()), r in rotation(), t in point()
    ) {
        if let Ok(a) = dihedral(p[0], p[1], p[2], p[3]) {
            prop_assert!(a > -std::f64::consts::PI && a <= std::f64::consts::PI);
            let m = p.map(|x| apply(&r, t, x));
            let b = dihedral(m[0], m[1], m[2], m[3]).unwrap();
            let gap = (a - b).abs();
            prop_assert!(gap.min(std::f64::consts::TAU - gap) < 1e-7);
        }
    }

    #[test]
    fn mirror_flips_dihedral_sign(p in prop::array::uniform4(point())) {
        if let Ok(a) = dihedral(p[0], p[1], p[2], p[3]) {
            let m = p.map(|x| Point3::new(-x.x, x.y, x.z));
            let b = dihedral(m[0], m[1], m[2], m[3]).unwrap();
            if a.abs() < std::f64::consts::PI - 1e-6 {
                prop_assert!((a + b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn angle_in_range(a in point(), b in point(), c in point()) {
        if let Ok(x) = ca_angle(a, b, c) {
            prop_assert!((0.0..=std::f64::consts::PI).contains(&x));
        }
    }

    #[test]
    fn kabsch_recovers_rigid_motion(
        p in prop::collection::vec(point(), 3..25), r in rotation(), t in point()
    ) {
        let q: Vec<Point3> = p.iter().map(|&x| apply(&r, t, x)).collect();
        let fit = kabsch(&p, &q);
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        prop_assert!(fit.rmsd < 1e-8);
        for (&a, &b) in p.iter().zip(&q) {
            prop_assert!((fit.apply(a) - b).norm() < 1e-7);
        }
    }

    #[test]
    fn kabsch_never_beats_zero_and_never_loses_to_identity(
        p in prop::collection::vec(point(), 3..15), q in prop::collection::vec(point(), 15)
    ) {
        let q = &q[..p.len()];
        if let Ok(fit) = kabsch(&p, q) {
            prop_assert!(fit.rmsd >= 0.0);
            let centre = |v: &[Point3]| v.iter().fold(Point3::default(), |a, &b| a + b) * (1.0 / v.len() as f64);
            let (cp, cq) = (centre(&p), centre(q));
            let pc: Vec<Point3> = p.iter().map(|&x| x - cp).collect();
            let qc: Vec<Point3> = q.iter().map(|&x| x - cq).collect();
            prop_assert!(fit.rmsd <= rmsd_raw(&pc, &qc).unwrap() + 1e-9);
            let det = {
                let m = fit.rotation;
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            };
            prop_assert!((det - 1.0).abs() < 1e-9);
        }
    }
}
