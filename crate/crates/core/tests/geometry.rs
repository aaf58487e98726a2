mod common;

use dpose::geometry::{
    build_neighbor_list, minimum_image_displacement, rbf_expand, scale_volume, stretch_bond, GeometryError, Mat3,
    Structure,
};
use rand::Rng;

fn assert_matches_brute(s: &Structure, cutoff: f64) {
    let nl = build_neighbor_list(s, cutoff).unwrap();
    let mut got: Vec<(usize, usize, f64)> = nl.pairs.iter().map(|p| (p.i, p.j, p.distance)).collect();
    let mut want = common::brute_pairs(s, cutoff);
    got.sort_by_key(|p| (p.0, p.1));
    want.sort_by_key(|p| (p.0, p.1));
    assert_eq!(got.len(), want.len(), "pair count");
    for (g, w) in got.iter().zip(&want) {
        assert_eq!((g.0, g.1), (w.0, w.1));
        assert!((g.2 - w.2).abs() <= 1e-10 * w.2.max(1.0), "{g:?} vs {w:?}");
    }
}

#[test]
fn neighbor_list_matches_brute_force_on_random_molecules() {
    let mut rng = common::rng(11);
    for _ in 0..60 {
        let n = rng.random_range(1..=32);
        let s = common::random_cluster(n, &[1, 6, 8], 6.0, 0.7, &mut rng);
        assert_matches_brute(&s, rng.random_range(1.0..4.0));
    }
}

#[test]
fn neighbor_list_matches_brute_force_on_random_triclinic_cells() {
    let mut rng = common::rng(12);
    for _ in 0..60 {
        let n = rng.random_range(1..=32);
        let cell = common::random_cell(9.0, 0.08, &mut rng);
        let s = common::random_periodic(n, &[10, 18], cell, 0.8, &mut rng);
        assert_matches_brute(&s, rng.random_range(1.0..3.2));
    }
}

#[test]
fn neighbor_list_is_symmetric_and_consistent() {
    let mut rng = common::rng(13);
    for _ in 0..20 {
        let cell = common::random_cell(9.0, 0.08, &mut rng);
        let s = common::random_periodic(16, &[10], cell, 0.8, &mut rng);
        let nl = build_neighbor_list(&s, 3.0).unwrap();
        for p in &nl.pairs {
            assert!(p.distance > 0.0 && p.distance <= 3.0);
            let norm = p.displacement.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - p.distance).abs() <= 1e-10 * p.distance);
            let back = nl.pairs.iter().find(|q| q.i == p.j && q.j == p.i).expect("reverse pair");
            assert_eq!(back.distance, p.distance);
            for k in 0..3 {
                assert!((back.displacement[k] + p.displacement[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn triclinic_minimum_image_matches_brute_force() {
    let mut rng = common::rng(14);
    for _ in 0..200 {
        let cell = common::random_cell(6.0, 0.25, &mut rng);
        let s = common::random_periodic(2, &[1], cell, 0.1, &mut rng);
        let v = minimum_image_displacement(&s, 0, 1).unwrap();
        let (d, _) = common::brute_force_min_image(s.positions[0], s.positions[1], &cell);
        let got = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((got - d).abs() < 1e-10, "{got} vs {d}");
    }
}

fn fcc(a: f64, reps: usize) -> Structure {
    let basis = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]];
    let mut pos = Vec::new();
    for i in 0..reps {
        for j in 0..reps {
            for k in 0..reps {
                for b in &basis {
                    pos.push([(i as f64 + b[0]) * a, (j as f64 + b[1]) * a, (k as f64 + b[2]) * a]);
                }
            }
        }
    }
    let l = a * reps as f64;
    let cell: Mat3 = [[l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, l]];
    Structure::periodic(vec![79; pos.len()], pos, cell).unwrap()
}

#[test]
fn fcc_gold_conventional_cell() {
    // a = 4.08 puts the cutoff of 3.0 above half the cell height (2.04), so
    // the single conventional cell is rejected and the 2×2×2 supercell is used.
    assert!(matches!(
        build_neighbor_list(&fcc(4.08, 1), 3.0),
        Err(GeometryError::CutoffTooLarge { .. })
    ));
    let s = fcc(4.08, 2);
    assert_matches_brute(&s, 3.0);
    let nl = build_neighbor_list(&s, 3.0).unwrap();
    assert_eq!(nl.len(), 32 * 12);
}

#[test]
fn worked_examples() {
    let cube: Mat3 = [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]];
    let s = Structure::periodic(vec![1, 1], vec![[1.0, 0.0, 0.0], [9.0, 0.0, 0.0]], cube).unwrap();
    assert_eq!(minimum_image_displacement(&s, 0, 1).unwrap(), [-2.0, 0.0, 0.0]);
    let m = Structure::molecule(vec![1, 1], vec![[0.0; 3], [3.0, 4.0, 0.0]]).unwrap();
    assert_eq!(m.distance(0, 1).unwrap(), 5.0);

    let d = Structure::molecule(vec![1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(build_neighbor_list(&d, 5.0).unwrap().len(), 2);
    assert!(build_neighbor_list(&d, 0.5).unwrap().is_empty());
    assert_eq!(stretch_bond(&d, 0, 1, 2.0).unwrap().positions[1], [2.0, 0.0, 0.0]);

    assert_eq!(rbf_expand(2.0, &[2.0], 10.0), vec![1.0]);
    assert_eq!(rbf_expand(0.0, &[0.0, 1.0], 1.0), vec![1.0, (-1.0f64).exp()]);
}

#[test]
fn rbf_matches_scalar_formula() {
    let mut rng = common::rng(15);
    for _ in 0..100 {
        let d: f64 = rng.random_range(0.0..6.0);
        let gamma: f64 = rng.random_range(0.1..20.0);
        let centers: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..5.0)).collect();
        let got = rbf_expand(d, &centers, gamma);
        for (g, c) in got.iter().zip(&centers) {
            let want = (-gamma * (d - c) * (d - c)).exp();
            assert!((g - want).abs() <= 1e-15);
            assert!(*g > 0.0 || want == 0.0);
            assert!(*g <= 1.0);
        }
    }
}

fn ethane() -> Structure {
    let species = vec![6, 6, 1, 1, 1, 1, 1, 1];
    let pos = vec![
        [0.0, 0.0, 0.0],
        [1.54, 0.0, 0.0],
        [-0.36, 1.03, 0.0],
        [-0.36, -0.51, 0.89],
        [-0.36, -0.51, -0.89],
        [1.90, -1.03, 0.0],
        [1.90, 0.51, 0.89],
        [1.90, 0.51, -0.89],
    ];
    Structure::molecule(species, pos).unwrap()
}

#[test]
fn stretch_bond_moves_only_atom_j() {
    let s = ethane();
    let t = stretch_bond(&s, 0, 1, 1.7).unwrap();
    assert!((common::dist(t.positions[0], t.positions[1]) - 1.7).abs() < 1e-10);
    for k in (0..8).filter(|&k| k != 1) {
        assert_eq!(t.positions[k], s.positions[k]);
    }
    assert_eq!(stretch_bond(&s, 0, 1, s.distance(0, 1).unwrap()).unwrap(), s);
    let mut coincident = s.clone();
    coincident.positions[1] = coincident.positions[0];
    assert!(matches!(stretch_bond(&coincident, 0, 1, 1.0), Err(GeometryError::DegenerateBond(0, 1))));
}

fn det(c: &Mat3) -> f64 {
    c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
}

#[test]
fn scale_volume_contracts() {
    let cube: Mat3 = [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
    let one = Structure::periodic(vec![79], vec![[0.0; 3]], cube).unwrap();
    assert_eq!(scale_volume(&one, 1.0).unwrap(), one);
    let big = scale_volume(&one, 8.0).unwrap();
    assert_eq!(big.cell.unwrap()[0][0], 8.0);
    assert_eq!(big.volume_per_atom().unwrap(), 512.0);

    let mut rng = common::rng(16);
    for _ in 0..20 {
        let cell = common::random_cell(7.0, 0.2, &mut rng);
        let s = common::random_periodic(5, &[10], cell, 0.5, &mut rng);
        let t = scale_volume(&s, 1.2).unwrap();
        assert!((det(&t.cell.unwrap()) / det(&cell) - 1.2).abs() < 1e-12);
        let (a, b) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
        let twice = scale_volume(&scale_volume(&s, a).unwrap(), b).unwrap();
        let once = scale_volume(&s, a * b).unwrap();
        for (p, q) in twice.positions.iter().zip(&once.positions) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }
    }
    let mol = Structure::molecule(vec![1], vec![[0.0; 3]]).unwrap();
    assert_eq!(scale_volume(&mol, 1.1).unwrap_err(), GeometryError::NotPeriodic);
}
