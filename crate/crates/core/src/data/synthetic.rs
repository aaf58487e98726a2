//! Synthetic labeled datasets built from an [`Oracle`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Oracle, Result};
use crate::geometry::{Structure, Vec3};

/// `n` dimers of species `z` at uniformly spaced separations in
/// `[r_min, r_max]`, labeled by `oracle` and tagged with their separation.
pub fn gen_dimer_scan_dataset(z: u32, r_min: f64, r_max: f64, n: usize, oracle: &Oracle) -> Result<Vec<Structure>> {
    if !(r_min > 0.0 && r_min < r_max) {
        return Err(DataError::InvalidArgument(format!("need 0 < r_min < r_max, got {r_min}, {r_max}")));
    }
    if n < 2 {
        return Err(DataError::InvalidArgument(format!("need at least 2 dimers, got {n}")));
    }
    (0..n)
        .map(|k| {
            let r = if k == n - 1 { r_max } else { r_min + (r_max - r_min) * k as f64 / (n - 1) as f64 };
            let s = Structure::molecule(vec![z, z], vec![[0.0; 3], [r, 0.0, 0.0]])?;
            let e = oracle.energy(&s)?;
            Ok(s.with_energy(e).with_tag(format!("r={r}")))
        })
        .collect()
}

/// Parameters of [`gen_boltzmann_cluster_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub n_atoms: usize,
    pub species: u32,
    /// Largest Gaussian displacement amplitude, Å. Frame `k` of `count` uses
    /// `spread · (k+1)/count`.
    pub spread: f64,
    /// Acceptance temperature, eV.
    pub temperature: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec { n_atoms: 6, species: super::oracle::SPECIES_A, spread: 0.15, temperature: 1.0, count: 200, seed: 0 }
    }
}

const MAX_TRIES: usize = 200;

/// Compact seed geometry: the `n` FCC sites closest to the origin with
/// nearest-neighbor spacing `r_eq`, relaxed under `oracle`.
pub fn relaxed_cluster(n: usize, z: u32, oracle: &Oracle) -> Result<Structure> {
    if n == 0 {
        return Err(DataError::InvalidArgument("cluster needs at least one atom".into()));
    }
    let a = oracle.r_eq(z)? * std::f64::consts::SQRT_2;
    let basis = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]];
    let mut sites: Vec<Vec3> = Vec::new();
    for i in -2..=2 {
        for j in -2..=2 {
            for k in -2..=2 {
                for b in &basis {
                    sites.push([(i as f64 + b[0]) * a, (j as f64 + b[1]) * a, (k as f64 + b[2]) * a]);
                }
            }
        }
    }
    let r2 = |p: &Vec3| p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
    sites.sort_by(|p, q| r2(p).total_cmp(&r2(q)).then(p.partial_cmp(q).unwrap()));
    if n > sites.len() {
        return Err(DataError::InvalidArgument(format!("cluster size {n} too large")));
    }
    sites.truncate(n);
    let s = Structure::molecule(vec![z; n], sites)?;
    relax(s, oracle, 2000)
}

/// Steepest descent with an adaptive step on a central-difference gradient.
pub fn relax(mut s: Structure, oracle: &Oracle, max_steps: usize) -> Result<Structure> {
    const H: f64 = 1e-6;
    let mut energy = oracle.energy(&s)?;
    let mut step = 1e-2;
    for _ in 0..max_steps {
        let mut grad = vec![[0.0; 3]; s.n_atoms()];
        for a in 0..s.n_atoms() {
            for k in 0..3 {
                let orig = s.positions[a][k];
                s.positions[a][k] = orig + H;
                let plus = oracle.energy(&s)?;
                s.positions[a][k] = orig - H;
                let minus = oracle.energy(&s)?;
                s.positions[a][k] = orig;
                grad[a][k] = (plus - minus) / (2.0 * H);
            }
        }
        let gmax = grad.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < 1e-7 {
            break;
        }
        let mut trial = s.clone();
        for (p, g) in trial.positions.iter_mut().zip(&grad) {
            for k in 0..3 {
                p[k] -= step * g[k];
            }
        }
        match oracle.energy(&trial) {
            Ok(e) if e < energy => {
                s = trial;
                energy = e;
                step *= 1.2;
            }
            _ => step *= 0.5,
        }
        if step < 1e-12 {
            break;
        }
    }
    Ok(s)
}

/// Perturbed clusters around a relaxed seed geometry.
///
/// Frame `k` draws Gaussian displacements of amplitude `spread·(k+1)/count`
/// and is accepted with probability `min(1, exp(-(E - E₀)/T))`, so
/// low-energy frames dominate. After [`MAX_TRIES`] rejections the lowest
/// energy proposal is kept. Deterministic in `spec.seed`.
pub fn gen_boltzmann_cluster_dataset(spec: &ClusterSpec, oracle: &Oracle) -> Result<Vec<Structure>> {
    if spec.count == 0 {
        return Err(DataError::InvalidArgument("count must be >= 1".into()));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) || !(spec.temperature >= 0.0) {
        return Err(DataError::InvalidArgument("spread and temperature must be non-negative".into()));
    }
    let seed_geom = relaxed_cluster(spec.n_atoms, spec.species, oracle)?;
    let e0 = oracle.energy(&seed_geom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut out = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let amp = spec.spread * (k + 1) as f64 / spec.count as f64;
        if amp == 0.0 {
            out.push(seed_geom.clone().with_energy(e0));
            continue;
        }
        let normal = Normal::new(0.0, amp).map_err(|e| DataError::InvalidArgument(e.to_string()))?;
        let mut best: Option<(f64, Structure)> = None;
        let mut accepted = None;
        for _ in 0..MAX_TRIES {
            let mut trial = seed_geom.clone();
            for p in &mut trial.positions {
                for c in p.iter_mut() {
                    *c += normal.sample(&mut rng);
                }
            }
            let Ok(e) = oracle.energy(&trial) else { continue };
            let delta = e - e0;
            let p_acc = if delta <= 0.0 {
                1.0
            } else if spec.temperature > 0.0 {
                (-delta / spec.temperature).exp()
            } else {
                0.0
            };
            if rng.random::<f64>() < p_acc {
                accepted = Some((e, trial));
                break;
            }
            if best.as_ref().is_none_or(|(be, _)| e < *be) {
                best = Some((e, trial));
            }
        }
        let (e, s) = accepted.or(best).ok_or_else(|| {
            DataError::InvalidArgument(format!("no valid proposal for frame {k}"))
        })?;
        out.push(s.with_energy(e));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::oracle::{LjTable, SPECIES_A};

    fn lj() -> Oracle {
        Oracle::LennardJones { table: LjTable::two_species(), cutoff: 5.0 }
    }

    #[test]
    fn two_point_scan_hits_ends() {
        let d = gen_dimer_scan_dataset(SPECIES_A, 0.9, 1.3, 2, &lj()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].positions[1][0], 0.9);
        assert_eq!(d[1].positions[1][0], 1.3);
        for s in &d {
            assert_eq!(s.ref_energy.unwrap(), lj().energy(s).unwrap());
        }
    }

    #[test]
    fn scan_minimum_at_r_eq() {
        let r_eq = 2f64.powf(1.0 / 6.0);
        // 41 points on [r_eq - 0.2, r_eq + 0.2] puts a sample exactly mid-range.
        let d = gen_dimer_scan_dataset(SPECIES_A, r_eq - 0.2, r_eq + 0.2, 41, &lj()).unwrap();
        let argmin = (0..d.len()).min_by(|&a, &b| d[a].ref_energy.unwrap().total_cmp(&d[b].ref_energy.unwrap())).unwrap();
        assert_eq!(argmin, 20);
        assert!((d[argmin].positions[1][0] - r_eq).abs() < 1e-12);
    }

    #[test]
    fn scan_rejects_bad_ranges() {
        assert!(gen_dimer_scan_dataset(SPECIES_A, 1.3, 0.9, 5, &lj()).is_err());
        assert!(gen_dimer_scan_dataset(SPECIES_A, 0.9, 1.3, 1, &lj()).is_err());
    }

    #[test]
    fn relaxed_dimer_at_r_eq() {
        let s = relaxed_cluster(2, SPECIES_A, &lj()).unwrap();
        assert!((s.distance(0, 1).unwrap() - 2f64.powf(1.0 / 6.0)).abs() < 1e-5);
    }

    #[test]
    fn zero_spread_frames_equal_seed() {
        let spec = ClusterSpec { spread: 0.0, count: 5, n_atoms: 4, ..ClusterSpec::default() };
        let d = gen_boltzmann_cluster_dataset(&spec, &lj()).unwrap();
        assert!(d.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn clusters_deterministic_and_right_skewed() {
        let spec = ClusterSpec { count: 300, seed: 4, ..ClusterSpec::default() };
        let a = gen_boltzmann_cluster_dataset(&spec, &lj()).unwrap();
        let b = gen_boltzmann_cluster_dataset(&spec, &lj()).unwrap();
        assert_eq!(a, b);
        let mut e: Vec<f64> = a.iter().map(|s| s.ref_energy.unwrap()).collect();
        e.sort_by(f64::total_cmp);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let median = 0.5 * (e[149] + e[150]);
        assert!(median < mean, "median {median} mean {mean}");
    }
}
