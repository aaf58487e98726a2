//! Independent oracles shared by the integration suites. Nothing here calls
//! into the implementation paths it is used to check.

#![allow(dead_code)]

use dpose::data::oracle::{SPECIES_A, SPECIES_B};
use dpose::geometry::{Mat3, Structure, Vec3};
use dpose::model::ModelParams;
use dpose::training::{batch_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite difference of the batch loss for every component of every
/// tensor, in canonical tensor order.
pub fn finite_difference_gradient(
    params: &ModelParams,
    batch: &[Structure],
    config: &TrainConfig,
    step: f64,
) -> Vec<Vec<f64>> {
    let n_tensors = params.tensors().len();
    let mut out = Vec::with_capacity(n_tensors);
    let mut work = params.clone();
    for t in 0..n_tensors {
        let len = params.tensors()[t].tensor.len();
        let mut g = vec![0.0; len];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work.tensors_mut()[t].data[k];
            work.tensors_mut()[t].data[k] = orig + step;
            let plus = batch_loss(&work, batch, config).unwrap();
            work.tensors_mut()[t].data[k] = orig - step;
            let minus = batch_loss(&work, batch, config).unwrap();
            work.tensors_mut()[t].data[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Uniformly random rotation from a normalized quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = [
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    ];
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Random non-overlapping cluster: atoms placed by rejection with a minimum
/// separation inside a cube of side `box_len`.
pub fn random_cluster(n: usize, species: &[u32], box_len: f64, min_sep: f64, rng: &mut ChaCha8Rng) -> Structure {
    let mut pos: Vec<Vec3> = Vec::with_capacity(n);
    while pos.len() < n {
        let c = [
            rng.random_range(0.0..box_len),
            rng.random_range(0.0..box_len),
            rng.random_range(0.0..box_len),
        ];
        if pos.iter().all(|p| dist(*p, c) >= min_sep) {
            pos.push(c);
        }
    }
    let sp = (0..n).map(|k| species[k % species.len()]).collect();
    Structure::molecule(sp, pos).unwrap()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `frac · cell` for row-vector lattice rows.
pub fn frac_to_cart(f: Vec3, cell: &Mat3) -> Vec3 {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = f[0] * cell[0][k] + f[1] * cell[1][k] + f[2] * cell[2][k];
    }
    out
}

/// Minimum distance over the 27 image offsets `n ∈ {-1,0,1}³` of the raw
/// displacement.
pub fn brute_force_min_image(a: Vec3, b: Vec3, cell: &Mat3) -> (f64, Vec3) {
    let mut best = (f64::INFINITY, [0.0; 3]);
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                let shift = frac_to_cart([i as f64, j as f64, k as f64], cell);
                let v = [b[0] - a[0] + shift[0], b[1] - a[1] + shift[1], b[2] - a[2] + shift[2]];
                let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if d < best.0 {
                    best = (d, v);
                }
            }
        }
    }
    best
}

/// Random cell: a cube of side `len` with off-diagonal shear up to `shear`.
pub fn random_cell(len: f64, shear: f64, rng: &mut ChaCha8Rng) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = if i == j { len * rng.random_range(0.9..1.1) } else { len * rng.random_range(-shear..shear) };
        }
    }
    c
}

pub fn random_periodic(n: usize, species: &[u32], cell: Mat3, min_sep: f64, rng: &mut ChaCha8Rng) -> Structure {
    let mut pos: Vec<Vec3> = Vec::with_capacity(n);
    let mut tries = 0;
    while pos.len() < n {
        tries += 1;
        assert!(tries < 100_000, "could not place atoms");
        let f = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let c = frac_to_cart(f, &cell);
        if pos.iter().all(|p| brute_force_min_image(*p, c, &cell).0 >= min_sep) {
            pos.push(c);
        }
    }
    let sp = (0..n).map(|k| species[k % species.len()]).collect();
    Structure::periodic(sp, pos, cell).unwrap()
}

/// Spearman correlation via explicit average ranks and textbook Pearson.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        // O(n²): rank = 1 + #smaller + (#equal - 1)/2
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// `(ε, σ)` for the two synthetic species, written out independently of the table.
pub fn lj_params(z: u32) -> (f64, f64) {
    match z {
        SPECIES_A => (1.0, 1.0),
        SPECIES_B => (2.0, 1.3),
        _ => panic!("unexpected species {z}"),
    }
}

/// Direct LJ sum over unordered pairs using the 27-image brute-force distance.
pub fn lj_brute(s: &Structure, cutoff: f64) -> f64 {
    let mut e = 0.0;
    for i in 0..s.n_atoms() {
        for j in i + 1..s.n_atoms() {
            let r = match &s.cell {
                Some(cell) if s.is_periodic() => brute_force_min_image(s.positions[i], s.positions[j], cell).0,
                _ => dist(s.positions[i], s.positions[j]),
            };
            if r > cutoff {
                continue;
            }
            let (ei, si) = lj_params(s.species[i]);
            let (ej, sj) = lj_params(s.species[j]);
            let eps = (ei * ej).sqrt();
            let sig = 0.5 * (si + sj);
            e += 4.0 * eps * ((sig / r).powi(12) - (sig / r).powi(6));
        }
    }
    e
}

/// Directed pairs within `cutoff` by brute force over the 27 image offsets.
pub fn brute_pairs(s: &Structure, cutoff: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..s.n_atoms() {
        for j in 0..s.n_atoms() {
            if i == j {
                continue;
            }
            let d = match &s.cell {
                Some(cell) if s.is_periodic() => brute_force_min_image(s.positions[i], s.positions[j], cell).0,
                _ => dist(s.positions[i], s.positions[j]),
            };
            if d <= cutoff {
                out.push((i, j, d));
            }
        }
    }
    out
}

/// Two-pass mean and variance.
pub fn stats_oracle(y: &[f64], unbiased: bool) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / if unbiased { n - 1.0 } else { n })
}

/// R² as squared-sum identity `1 − SS_res / (Σy² − n·ȳ²)`, RMSE, MAE.
pub fn parity_oracle(t: &[f64], p: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let ss_tot = t.iter().map(|y| y * y).sum::<f64>() - n * mean * mean;
    let ss_res: f64 = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    let mae = t.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    (1.0 - ss_res / ss_tot, (ss_res / n).sqrt(), mae)
}
