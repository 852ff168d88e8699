//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so red criteria are reported rather than aborting
//! the run. Set `ACCEPTANCE_STRICT=1` to exit nonzero when any line fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use cdr_refine::data::{
    bundle_loops, parse_jsonl, preprocess, split, write_jsonl, Loop, PreprocessOptions,
};
use cdr_refine::diagnostics::{three_residue_check, GRADCHECK_EPS};
use cdr_refine::evaluation::{bundle_rmsd, improvement_pct, predict, AlignMode};
use cdr_refine::geometry::{ca_angle, dihedral, kabsch, Point3};
use cdr_refine::losses::{total_loss, LossWeights};
use cdr_refine::model::{loop_attention, AttentionMode, Mlsa, Mode, ModelConfig};
use cdr_refine::synthetic::{synthetic_dataset, synthetic_record, toy_bundle};
use cdr_refine::tensor::{Tape, Tensor};
use cdr_refine::training::{fit, Checkpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Uniform unit quaternion.
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let q = [
        (1.0 - u1).sqrt() * (2.0 * PI * u2).sin(),
        (1.0 - u1).sqrt() * (2.0 * PI * u2).cos(),
        u1.sqrt() * (2.0 * PI * u3).sin(),
        u1.sqrt() * (2.0 * PI * u3).cos(),
    ];
    quat_matrix(q)
}

fn quat_matrix([w, x, y, z]: [f64; 4]) -> [[f64; 3]; 3] {
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
}

fn rot(r: &[[f64; 3]; 3], p: Point3) -> Point3 {
    Point3::new(
        r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
        r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
        r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
    )
}

fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> Point3 {
    Point3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn centred(p: &[Point3]) -> Vec<Point3> {
    let c = p.iter().fold(Point3::default(), |a, &b| a + b) * (1.0 / p.len() as f64);
    p.iter().map(|&x| x - c).collect()
}

/// Minimum RMSD over proper rotations by a coarse Euler-angle grid followed
/// by shrinking local search.
fn so3_search_rmsd(p: &[Point3], q: &[Point3]) -> f64 {
    let (p, q) = (centred(p), centred(q));
    let euler = |a: f64, b: f64, c: f64| {
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        [
            [ca * cb * cc - sa * sc, -ca * cb * sc - sa * cc, ca * sb],
            [sa * cb * cc + ca * sc, -sa * cb * sc + ca * cc, sa * sb],
            [-sb * cc, sb * sc, cb],
        ]
    };
    let score = |a: f64, b: f64, c: f64| {
        let r = euler(a, b, c);
        let s: f64 = p
            .iter()
            .zip(&q)
            .map(|(&x, &y)| (rot(&r, x) - y).dot(rot(&r, x) - y))
            .sum();
        (s / p.len() as f64).sqrt()
    };
    let n = 24;
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..=n / 2 {
            for k in 0..n {
                let (a, b, c) = (
                    2.0 * PI * i as f64 / n as f64,
                    PI * j as f64 / (n / 2) as f64,
                    2.0 * PI * k as f64 / n as f64,
                );
                let s = score(a, b, c);
                if s < best.0 {
                    best = (s, a, b, c);
                }
            }
        }
    }
    let mut step = 2.0 * PI / n as f64;
    while step > 1e-7 {
        let mut improved = false;
        for d in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            for sign in [-1.0, 1.0] {
                let (a, b, c) = (
                    best.1 + sign * step * d[0],
                    best.2 + sign * step * d[1],
                    best.3 + sign * step * d[2],
                );
                let s = score(a, b, c);
                if s < best.0 {
                    best = (s, a, b, c);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best.0
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let r = three_residue_check(0).expect("gradient check runs");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "max rel err {:.3e} over {} parameters at eps {:e}; {secs:.2} s",
            r.max_rel_error, r.checked, GRADCHECK_EPS
        ),
    )
}

fn table_arithmetic() -> Outcome {
    let ours = 1.8157;
    let rows = [
        (2.7037, 32.843),
        (2.4597, 26.182),
        (2.4110, 24.691),
        (2.2737, 20.143),
        (2.2510, 19.338),
        (2.2002, 17.475),
        (1.9378, 6.301),
    ];
    let worst = rows
        .iter()
        .map(|&(b, want)| (improvement_pct(b, ours).unwrap() - want).abs())
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-3,
        format!("7 rows, worst deviation {worst:.2e} points"),
    )
}

fn kabsch_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_rigid: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(3..30);
        let p: Vec<Point3> = (0..n).map(|_| random_point(&mut rng, 10.0)).collect();
        let r = random_rotation(&mut rng);
        let shift = random_point(&mut rng, 50.0);
        let q: Vec<Point3> = p.iter().map(|&x| rot(&r, x) + shift).collect();
        worst_rigid = worst_rigid.max(kabsch(&p, &q).unwrap().rmsd);
    }
    let mut worst_mirror: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(4..12);
        let p: Vec<Point3> = (0..n).map(|_| random_point(&mut rng, 5.0)).collect();
        let r = random_rotation(&mut rng);
        let q: Vec<Point3> = p
            .iter()
            .map(|&x| rot(&r, Point3::new(-x.x, x.y, x.z)))
            .collect();
        let fast = kabsch(&p, &q).unwrap().rmsd;
        let oracle = so3_search_rmsd(&p, &q);
        worst_mirror = worst_mirror.max((fast - oracle).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_rigid < 1e-9 && worst_mirror < 1e-3 && secs < 30.0,
        format!("rigid worst {worst_rigid:.2e}; mirror vs grid search worst {worst_mirror:.2e}; {secs:.2} s"),
    )
}

/// Distance on the circle, so `π` and `-π` coincide.
fn angular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % (2.0 * PI);
    d.min(2.0 * PI - d)
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Canonical torsion frame: p2 at the origin, p3 on +z, p1 in the xz
    // half-plane with x > 0, p4 rotated by theta about z.
    let torsion = |theta: f64, l1: f64, l3: f64, a1: f64, a2: f64| {
        let p2 = Point3::new(0.0, 0.0, 0.0);
        let p3 = Point3::new(0.0, 0.0, 1.5);
        let p1 = Point3::new(l1 * a1.sin(), 0.0, l1 * a1.cos());
        let p4 = p3
            + Point3::new(
                l3 * a2.sin() * theta.cos(),
                l3 * a2.sin() * theta.sin(),
                -l3 * a2.cos(),
            );
        [p1, p2, p3, p4]
    };
    let mut worst_value: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    let mut check = |pts: [Point3; 4], want: f64, rng: &mut ChaCha8Rng| {
        let got = dihedral(pts[0], pts[1], pts[2], pts[3]).unwrap();
        worst_value = worst_value.max(angular_gap(got, want));
        let r = random_rotation(rng);
        let s = random_point(rng, 20.0);
        let m = pts.map(|x| rot(&r, x) + s);
        let moved = dihedral(m[0], m[1], m[2], m[3]).unwrap();
        worst_inv = worst_inv.max(angular_gap(moved, got));
    };
    let half = PI / 2.0;
    for theta in [0.0, PI, half, -half] {
        check(torsion(theta, 1.0, 1.0, half, half), theta, &mut rng);
    }
    for _ in 0..500 {
        let theta = rng.random_range(-3.1..3.1);
        let pts = torsion(
            theta,
            rng.random_range(0.8..2.0),
            rng.random_range(0.8..2.0),
            rng.random_range(0.3..2.8),
            rng.random_range(0.3..2.8),
        );
        check(pts, theta, &mut rng);
    }
    // Angles: arms along x and at alpha in the xy plane.
    let mut worst_angle: f64 = 0.0;
    for k in 0..500 {
        let alpha = match k {
            0 => PI,
            1 => half,
            2 => 1e-3,
            _ => rng.random_range(0.01..PI - 0.01),
        };
        let (l1, l2) = (rng.random_range(0.5..4.0), rng.random_range(0.5..4.0));
        let b = random_point(&mut rng, 5.0);
        let a = b + Point3::new(l1, 0.0, 0.0);
        let c = b + Point3::new(l2 * alpha.cos(), l2 * alpha.sin(), 0.0);
        let got = ca_angle(a, b, c).unwrap();
        worst_angle = worst_angle.max((got - alpha).abs());
        let r = random_rotation(&mut rng);
        let s = random_point(&mut rng, 20.0);
        let moved = ca_angle(rot(&r, a) + s, rot(&r, b) + s, rot(&r, c) + s).unwrap();
        worst_inv = worst_inv.max((moved - got).abs());
    }
    outcome(
        worst_value <= 1e-10 && worst_angle <= 1e-10 && worst_inv <= 1e-9,
        format!("dihedral {worst_value:.2e}, angle {worst_angle:.2e}, rigid-motion drift {worst_inv:.2e}"),
    )
}

fn attention_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out_of_range = 0;
    for i in 0..100 {
        let cfg = ModelConfig {
            z: rng.random_range(1..=6),
            q: rng.random_range(2..=10),
            hidden: 4,
            mpn_layers: 1,
            ..ModelConfig::default()
        };
        let model = Mlsa::new(cfg, i).unwrap();
        let tape = Tape::new();
        let params = model.bind(&tape);
        let rows = rng.random_range(1..20);
        let block = Tensor::new(
            vec![rows, 6],
            (0..rows * 6)
                .map(|_| rng.random_range(-10.0..10.0))
                .collect(),
        )
        .unwrap();
        let mask = loop_attention(&model, &params, (i % 3) as usize, tape.constant(block)).unwrap();
        out_of_range += mask
            .value()
            .iter()
            .filter(|&&m| !(0.0..=1.0).contains(&m))
            .count();
    }

    // Saturate the last stage so every mask entry is exactly 1, then copy the
    // shared weights into an attention-free model.
    let bundle = toy_bundle([5, 4, 9], 3);
    let mut unit = Mlsa::new(ModelConfig::desk_scale(), 5).unwrap();
    for lp in ["h1", "h2", "h3"] {
        let g = unit.param_id(&format!("att.{lp}.stage1.gamma")).unwrap();
        unit.params.get_mut(g).data_mut().fill(0.0);
        let b = unit.param_id(&format!("att.{lp}.stage1.beta")).unwrap();
        unit.params.get_mut(b).data_mut().fill(1000.0);
    }
    let mut plain = Mlsa::new(
        ModelConfig {
            attention: AttentionMode::Disabled,
            ..ModelConfig::desk_scale()
        },
        99,
    )
    .unwrap();
    let shared: Vec<(String, Vec<f64>)> = plain
        .params
        .iter()
        .map(|(name, _)| {
            let id = unit.param_id(name).unwrap();
            (name.to_string(), unit.params.get(id).data().to_vec())
        })
        .collect();
    for (name, data) in shared {
        let id = plain.param_id(&name).unwrap();
        plain.params.get_mut(id).data_mut().copy_from_slice(&data);
    }
    let loss = |m: &Mlsa, mode: Mode| {
        let tape = Tape::new();
        let p = m.bind(&tape);
        let trace = m.run_refinement(&tape, &p, &bundle, mode).unwrap();
        total_loss(&tape, &trace, &bundle, mode, &LossWeights::default())
            .unwrap()
            .1
            .total
    };
    let diff = [Mode::TeacherForced, Mode::Generative]
        .map(|mode| (loss(&unit, mode) - loss(&plain, mode)).abs())
        .into_iter()
        .fold(0.0, f64::max);
    outcome(
        out_of_range == 0 && diff <= 1e-12,
        format!("{out_of_range} mask entries outside [0,1] over 100 inputs; unit-mask vs disabled loss diff {diff:.2e}"),
    )
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let bundle = toy_bundle([7, 6, 10], 42);
    let data = vec![bundle.clone(); 8];
    let cfg = TrainConfig {
        epochs: 200,
        patience: 0,
        ..TrainConfig::desk()
    };
    let out = fit(&data, &[], &cfg, |_| {}).expect("training runs");
    let first = out.history.first().unwrap().train.total;
    let last = out.history.last().unwrap().train.total;
    let model = out.last.model().unwrap();
    let pred = predict(&model, &bundle, Mode::TeacherForced).unwrap();
    let h3 = bundle_rmsd(&bundle, &pred, AlignMode::Loop).unwrap()[Loop::H3.index()];
    let r = bundle.loop_range(Loop::H3);
    let mirror: Vec<Point3> = bundle.backbone[r.clone()]
        .iter()
        .map(|b| Point3::new(-b.ca.x, b.ca.y, b.ca.z))
        .collect();
    let pred_h3: Vec<Point3> = pred[r].iter().map(|b| b.ca).collect();
    let h3_mirror = kabsch(&pred_h3, &mirror).unwrap().rmsd;
    let ratio = last / first;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        ratio <= 0.25 && h3 < 1.0 && secs < 600.0,
        format!(
            "loss {first:.2} -> {last:.2} ({:.1}%); H3 RMSD {h3:.3} A (vs mirror image {h3_mirror:.3} A); {secs:.0} s",
            100.0 * ratio
        ),
    )
}

fn determinism() -> Outcome {
    let records = synthetic_dataset(4, 3);
    let data: Vec<_> = records.iter().map(|r| bundle_loops(r).unwrap()).collect();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 17,
        ..TrainConfig::desk()
    };
    let a = fit(&data[..3], &data[3..], &cfg, |_| {}).unwrap();
    let b = fit(&data[..3], &data[3..], &cfg, |_| {}).unwrap();
    let identical = a.last.to_json().unwrap() == b.last.to_json().unwrap()
        && a.best.to_json().unwrap() == b.best.to_json().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    a.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (m0, m1) = (a.last.model().unwrap(), loaded.model().unwrap());
    let exact = data.iter().all(|bundle| {
        [Mode::TeacherForced, Mode::Generative].iter().all(|&mode| {
            let run = |m: &Mlsa| {
                let tape = Tape::new();
                let p = m.bind(&tape);
                let trace = m.run_refinement(&tape, &p, bundle, mode).unwrap();
                let logits: Vec<f64> = trace.steps.iter().flat_map(|s| s.logits.value()).collect();
                (trace.final_backbone(), logits)
            };
            run(&m0) == run(&m1)
        })
    });
    outcome(
        identical && exact,
        format!("checkpoints bit-identical: {identical}; reloaded forward exact: {exact}"),
    )
}

fn data_pipeline() -> Outcome {
    let records = synthetic_dataset(50, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&path, &records).unwrap();
    let back = parse_jsonl(&path, true).unwrap().records;
    let round_trip = back == records;

    let mut noisy = records.clone();
    noisy.push(synthetic_record("dup", [6, 5, 11], 8));
    noisy.push(records[3].clone());
    let opts = PreprocessOptions::default();
    let once = preprocess(&noisy, &opts);
    let idempotent = preprocess(&once, &opts) == once;

    let (train, val) = split(&records, 0.8, 5);
    let mut ids: Vec<&str> = train
        .iter()
        .chain(&val)
        .map(|r| r.pdb_id.as_str())
        .collect();
    ids.sort_unstable();
    let mut want: Vec<&str> = records.iter().map(|r| r.pdb_id.as_str()).collect();
    want.sort_unstable();
    let partition = train.len() == 40 && val.len() == 10 && ids == want;
    outcome(
        round_trip && idempotent && partition,
        format!("JSONL round trip {round_trip}; preprocess idempotent {idempotent}; 40/10 partition {partition}"),
    )
}

fn loss_identities() -> Outcome {
    let bundle = toy_bundle([4, 5, 9], 21);
    let mut bit_exact = true;
    for mode in [Mode::TeacherForced, Mode::Generative] {
        let model = Mlsa::new(ModelConfig::desk_scale(), 2).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape);
        let trace = model.run_refinement(&tape, &p, &bundle, mode).unwrap();
        let (_, rep) = total_loss(&tape, &trace, &bundle, mode, &LossWeights::default()).unwrap();
        bit_exact &= rep.l_struct == rep.l_d + rep.l_beta + rep.l_ca;
    }
    let mut model = Mlsa::new(ModelConfig::desk_scale(), 2).unwrap();
    let wa = model.param_id("head.w_a").unwrap();
    model.params.get_mut(wa).data_mut().fill(0.0);
    let tape = Tape::new();
    let p = model.bind(&tape);
    let trace = model
        .run_refinement(&tape, &p, &bundle, Mode::TeacherForced)
        .unwrap();
    let (_, rep) = total_loss(
        &tape,
        &trace,
        &bundle,
        Mode::TeacherForced,
        &LossWeights::default(),
    )
    .unwrap();
    let want = bundle.len() as f64 * 20f64.ln();
    let dev = (rep.l_seq - want).abs();
    outcome(
        bit_exact && dev <= 1e-9,
        format!("l_struct identity bit-exact: {bit_exact}; uniform l_seq deviation {dev:.2e}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("table arithmetic", table_arithmetic),
        ("kabsch oracle", kabsch_oracle),
        ("geometry oracles", geometry_oracles),
        ("attention contract", attention_contract),
        ("overfit sanity", overfit),
        ("determinism and persistence", determinism),
        ("data pipeline", data_pipeline),
        ("loss identities", loss_identities),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let start = Instant::now();
    for (name, run) in criteria {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let elapsed: Duration = start.elapsed();
    println!(
        "acceptance: {failed} failing, {:.0} s",
        elapsed.as_secs_f64()
    );
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
