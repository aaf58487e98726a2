//! Analytic pair potentials used as ground-truth labels.

use std::collections::BTreeMap;

use super::{DataError, Result};
use crate::geometry::{self, Structure};

/// Lennard-Jones parameters of one species.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LjSpecies {
    pub atomic_number: u32,
    /// eV
    pub epsilon: f64,
    /// Å
    pub sigma: f64,
}

impl LjSpecies {
    pub fn new(atomic_number: u32, epsilon: f64, sigma: f64) -> Result<Self> {
        if !(epsilon > 0.0 && sigma > 0.0) {
            return Err(DataError::InvalidArgument(format!(
                "LJ parameters must be positive (epsilon {epsilon}, sigma {sigma})"
            )));
        }
        Ok(LjSpecies { atomic_number, epsilon, sigma })
    }

    /// Separation of the pair minimum, `2^(1/6) σ`.
    pub fn r_eq(&self) -> f64 {
        2f64.powf(1.0 / 6.0) * self.sigma
    }
}

/// Species → LJ parameters, mixed with Lorentz–Berthelot rules.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LjTable {
    species: BTreeMap<u32, LjSpecies>,
}

/// In-domain synthetic species (neon slot).
pub const SPECIES_A: u32 = 10;
/// Out-of-domain synthetic species (argon slot): ε ×2, σ ×1.3 relative to A.
pub const SPECIES_B: u32 = 18;

impl LjTable {
    pub fn new(entries: impl IntoIterator<Item = LjSpecies>) -> Self {
        LjTable { species: entries.into_iter().map(|s| (s.atomic_number, s)).collect() }
    }

    /// Two reduced-unit species: A (ε = 1 eV, σ = 1 Å) and B (ε = 2 eV, σ = 1.3 Å).
    pub fn two_species() -> Self {
        LjTable::new([
            LjSpecies { atomic_number: SPECIES_A, epsilon: 1.0, sigma: 1.0 },
            LjSpecies { atomic_number: SPECIES_B, epsilon: 2.0, sigma: 1.3 },
        ])
    }

    pub fn get(&self, z: u32) -> Result<&LjSpecies> {
        self.species.get(&z).ok_or(DataError::UnknownSpecies(z))
    }

    pub fn insert(&mut self, s: LjSpecies) {
        self.species.insert(s.atomic_number, s);
    }

    /// Mixed `(ε_ij, σ_ij)`: geometric mean of ε, arithmetic mean of σ.
    pub fn mixed(&self, zi: u32, zj: u32) -> Result<(f64, f64)> {
        let (a, b) = (self.get(zi)?, self.get(zj)?);
        Ok(((a.epsilon * b.epsilon).sqrt(), 0.5 * (a.sigma + b.sigma)))
    }
}

/// Morse pair parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorseParams {
    /// Well depth, eV
    pub d_e: f64,
    /// Width, Å⁻¹
    pub a: f64,
    /// Equilibrium separation, Å
    pub r_e: f64,
}

impl Default for MorseParams {
    fn default() -> Self {
        MorseParams { d_e: 1.0, a: 2.0, r_e: 1.2 }
    }
}

const OVERLAP: f64 = 1e-6;

/// Visits every unordered pair within `cutoff` (minimum image for periodic
/// structures) and sums `term(i, j, distance)`.
fn pair_sum(structure: &Structure, cutoff: f64, mut term: impl FnMut(usize, usize, f64) -> Result<f64>) -> Result<f64> {
    geometry::check_cutoff(structure, cutoff)?;
    let n = structure.n_atoms();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = structure.distance(i, j)?;
            if d < OVERLAP {
                return Err(DataError::OverlappingAtoms { i, j, distance: d });
            }
            if d <= cutoff {
                total += term(i, j, d)?;
            }
        }
    }
    Ok(total)
}

/// `Σ_{pairs, d ≤ cutoff} 4 ε_ij [(σ_ij/d)¹² − (σ_ij/d)⁶]`, eV.
pub fn lj_energy(structure: &Structure, table: &LjTable, cutoff: f64) -> Result<f64> {
    for &z in &structure.species {
        table.get(z)?;
    }
    pair_sum(structure, cutoff, |i, j, d| {
        let (eps, sigma) = table.mixed(structure.species[i], structure.species[j])?;
        let s6 = (sigma / d).powi(6);
        Ok(4.0 * eps * (s6 * s6 - s6))
    })
}

/// `Σ_{pairs, d ≤ cutoff} D_e (1 − e^{−a(d − r_e)})² − D_e`, eV. Species-blind.
pub fn morse_energy(structure: &Structure, params: &MorseParams, cutoff: f64) -> Result<f64> {
    let MorseParams { d_e, a, r_e } = *params;
    pair_sum(structure, cutoff, |_, _, d| {
        let x = 1.0 - (-a * (d - r_e)).exp();
        Ok(d_e * x * x - d_e)
    })
}

/// A labeling function for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub enum Oracle {
    LennardJones { table: LjTable, cutoff: f64 },
    Morse { params: MorseParams, cutoff: f64 },
}

impl Oracle {
    pub fn energy(&self, structure: &Structure) -> Result<f64> {
        match self {
            Oracle::LennardJones { table, cutoff } => lj_energy(structure, table, *cutoff),
            Oracle::Morse { params, cutoff } => morse_energy(structure, params, *cutoff),
        }
    }

    /// Equilibrium pair separation for species `z`.
    pub fn r_eq(&self, z: u32) -> Result<f64> {
        match self {
            Oracle::LennardJones { table, .. } => Ok(table.get(z)?.r_eq()),
            Oracle::Morse { params, .. } => Ok(params.r_e),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Oracle::LennardJones { .. } => "lj",
            Oracle::Morse { .. } => "morse",
        }
    }
}
