//! Atomic structures, minimum-image neighbor lists, Gaussian radial basis,
//! and the geometric perturbations used by bond and volume scans.

use thiserror::Error;

use crate::linalg;

pub use crate::linalg::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("periodic cell is singular")]
    SingularCell,
    #[error("cutoff {cutoff} Å exceeds half the minimum periodic cell height ({limit} Å)")]
    CutoffTooLarge { cutoff: f64, limit: f64 },
    #[error("atoms {0} and {1} coincide, bond direction undefined")]
    DegenerateBond(usize, usize),
    #[error("structure is not periodic along all three axes")]
    NotPeriodic,
    #[error("atom index {index} out of range for {n_atoms} atoms")]
    IndexOutOfRange { index: usize, n_atoms: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// One atomic configuration.
///
/// `cell` rows are lattice vectors. `properties` holds comment-line keys that
/// have no dedicated field so that file round trips are lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub species: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub cell: Option<Mat3>,
    pub periodic: [bool; 3],
    pub ref_energy: Option<f64>,
    pub tag: Option<String>,
    pub properties: Vec<(String, String)>,
}

impl Structure {
    /// Non-periodic structure (molecule or cluster).
    pub fn molecule(species: Vec<u32>, positions: Vec<Vec3>) -> Result<Self> {
        Self::new(species, positions, None, [false; 3])
    }

    /// Fully periodic structure.
    pub fn periodic(species: Vec<u32>, positions: Vec<Vec3>, cell: Mat3) -> Result<Self> {
        Self::new(species, positions, Some(cell), [true; 3])
    }

    pub fn new(
        species: Vec<u32>,
        positions: Vec<Vec3>,
        cell: Option<Mat3>,
        periodic: [bool; 3],
    ) -> Result<Self> {
        let s = Structure {
            species,
            positions,
            cell,
            periodic,
            ref_energy: None,
            tag: None,
            properties: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_energy(mut self, energy: f64) -> Self {
        self.ref_energy = Some(energy);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(GeometryError::InvalidStructure("no atoms".into()));
        }
        if self.species.len() != self.positions.len() {
            return Err(GeometryError::InvalidStructure(format!(
                "{} species but {} positions",
                self.species.len(),
                self.positions.len()
            )));
        }
        if self.species.contains(&0) {
            return Err(GeometryError::InvalidStructure("atomic number 0".into()));
        }
        if self.positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidStructure("non-finite coordinate".into()));
        }
        if let Some(cell) = &self.cell {
            if cell.iter().flatten().any(|c| !c.is_finite()) {
                return Err(GeometryError::InvalidStructure("non-finite cell".into()));
            }
        }
        if self.is_periodic() {
            match &self.cell {
                None => return Err(GeometryError::InvalidStructure("periodic without cell".into())),
                Some(c) if linalg::inverse(c).is_none() => return Err(GeometryError::SingularCell),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic.iter().any(|&p| p)
    }

    pub fn is_fully_periodic(&self) -> bool {
        self.periodic.iter().all(|&p| p)
    }

    /// Cell volume in Å³, if a cell is present.
    pub fn volume(&self) -> Option<f64> {
        self.cell.as_ref().map(|c| linalg::det(c).abs())
    }

    pub fn volume_per_atom(&self) -> Option<f64> {
        self.volume().map(|v| v / self.n_atoms() as f64)
    }

    /// Minimum-image distance between atoms `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        minimum_image_displacement(self, i, j).map(linalg::norm)
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.n_atoms() {
            return Err(GeometryError::IndexOutOfRange { index, n_atoms: self.n_atoms() });
        }
        Ok(())
    }

    /// Copy with every position (and the cell) multiplied by `rotation`
    /// acting on row vectors.
    pub fn rotated(&self, rotation: &Mat3) -> Structure {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = linalg::vec_mat(*p, rotation);
        }
        if let Some(cell) = &mut out.cell {
            for row in cell.iter_mut() {
                *row = linalg::vec_mat(*row, rotation);
            }
        }
        out
    }

    pub fn translated(&self, shift: Vec3) -> Structure {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = linalg::add(*p, shift);
        }
        out
    }

    /// Copy whose atom `k` is atom `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Structure {
        assert_eq!(order.len(), self.n_atoms(), "permutation length");
        let mut out = self.clone();
        out.species = order.iter().map(|&k| self.species[k]).collect();
        out.positions = order.iter().map(|&k| self.positions[k]).collect();
        out
    }
}

/// A directed neighbor pair: atom `j` seen from atom `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// Vector from atom `i` to the nearest image of atom `j`.
    pub displacement: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub pairs: Vec<Pair>,
    pub cutoff: f64,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Perpendicular heights of the cell, `|det| / |a_j × a_k|` per axis.
pub fn cell_heights(cell: &Mat3) -> [f64; 3] {
    let vol = linalg::det(cell).abs();
    [
        vol / linalg::norm(linalg::cross(cell[1], cell[2])),
        vol / linalg::norm(linalg::cross(cell[2], cell[0])),
        vol / linalg::norm(linalg::cross(cell[0], cell[1])),
    ]
}

fn min_image(raw: Vec3, cell: &Mat3, inv: &Mat3, periodic: [bool; 3]) -> Vec3 {
    let frac = linalg::vec_mat(raw, inv);
    let mut images = [0.0; 3];
    for k in 0..3 {
        if periodic[k] {
            images[k] = frac[k].round();
        }
    }
    let wrapped = linalg::sub(raw, linalg::vec_mat(images, cell));
    // Rounding in fractional space is exact for orthogonal cells only; a
    // one-shell search around the wrapped vector covers skewed cells.
    let range = |k: usize| if periodic[k] { -1..=1 } else { 0..=0 };
    let mut best = wrapped;
    let mut best_d2 = linalg::dot(wrapped, wrapped);
    for a in range(0) {
        for b in range(1) {
            for c in range(2) {
                if a == 0 && b == 0 && c == 0 {
                    continue;
                }
                let shift = linalg::vec_mat([a as f64, b as f64, c as f64], cell);
                let cand = linalg::add(wrapped, shift);
                let d2 = linalg::dot(cand, cand);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = cand;
                }
            }
        }
    }
    best
}

/// Displacement from atom `i` to the nearest periodic image of atom `j`.
/// Non-periodic axes are left untouched.
pub fn minimum_image_displacement(structure: &Structure, i: usize, j: usize) -> Result<Vec3> {
    structure.check_index(i)?;
    structure.check_index(j)?;
    if i == j {
        return Err(GeometryError::InvalidArgument("i and j must differ".into()));
    }
    let raw = linalg::sub(structure.positions[j], structure.positions[i]);
    if !structure.is_periodic() {
        return Ok(raw);
    }
    let cell = structure.cell.as_ref().ok_or(GeometryError::SingularCell)?;
    let inv = linalg::inverse(cell).ok_or(GeometryError::SingularCell)?;
    Ok(min_image(raw, cell, &inv, structure.periodic))
}

/// Fails with `CutoffTooLarge` unless `cutoff` is below half of the smallest
/// periodic cell height. Always succeeds for non-periodic structures.
pub fn check_cutoff(structure: &Structure, cutoff: f64) -> Result<()> {
    if !structure.is_periodic() {
        return Ok(());
    }
    let cell = structure.cell.as_ref().ok_or(GeometryError::SingularCell)?;
    let heights = cell_heights(cell);
    let limit = (0..3)
        .filter(|&k| structure.periodic[k])
        .map(|k| 0.5 * heights[k])
        .fold(f64::INFINITY, f64::min);
    if cutoff >= limit {
        return Err(GeometryError::CutoffTooLarge { cutoff, limit });
    }
    Ok(())
}

/// All directed pairs within `cutoff` under the minimum-image convention.
///
/// For periodic structures the cutoff must stay below half of the smallest
/// periodic cell height, which guarantees at most one image per pair.
pub fn build_neighbor_list(structure: &Structure, cutoff: f64) -> Result<NeighborList> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!("cutoff must be positive, got {cutoff}")));
    }
    check_cutoff(structure, cutoff)?;
    let n = structure.n_atoms();
    let mut cell_inv = None;
    if structure.is_periodic() {
        let cell = structure.cell.as_ref().ok_or(GeometryError::SingularCell)?;
        let inv = linalg::inverse(cell).ok_or(GeometryError::SingularCell)?;
        cell_inv = Some((*cell, inv));
    }

    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let raw = linalg::sub(structure.positions[j], structure.positions[i]);
            let displacement = match &cell_inv {
                Some((cell, inv)) => min_image(raw, cell, inv, structure.periodic),
                None => raw,
            };
            let distance = linalg::norm(displacement);
            if distance > 0.0 && distance <= cutoff {
                pairs.push(Pair { i, j, distance, displacement });
            }
        }
    }
    Ok(NeighborList { pairs, cutoff })
}

/// Gaussian radial basis: component `k` is `exp(-gamma (distance - centers[k])²)`.
pub fn rbf_expand(distance: f64, centers: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; centers.len()];
    rbf_expand_into(distance, centers, gamma, &mut out);
    out
}

pub fn rbf_expand_into(distance: f64, centers: &[f64], gamma: f64, out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(centers) {
        let t = distance - c;
        *o = (-gamma * t * t).exp();
    }
}

/// `n` centers spread uniformly over `[0, cutoff]`.
pub fn uniform_centers(cutoff: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| cutoff * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Copy of `structure` with atom `j` translated along the i→j axis so that
/// the i–j distance becomes `new_length`. No other atom moves.
pub fn stretch_bond(structure: &Structure, i: usize, j: usize, new_length: f64) -> Result<Structure> {
    if !(new_length > 0.0 && new_length.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!("bond length must be positive, got {new_length}")));
    }
    let d = minimum_image_displacement(structure, i, j)?;
    let current = linalg::norm(d);
    if current == 0.0 {
        return Err(GeometryError::DegenerateBond(i, j));
    }
    let mut out = structure.clone();
    let step = linalg::scale(d, (new_length - current) / current);
    out.positions[j] = linalg::add(structure.positions[j], step);
    Ok(out)
}

/// Isotropic rescale of a fully periodic structure so that the volume per
/// atom is multiplied by `factor`. Fractional coordinates are preserved.
pub fn scale_volume(structure: &Structure, factor: f64) -> Result<Structure> {
    if !structure.is_fully_periodic() || structure.cell.is_none() {
        return Err(GeometryError::NotPeriodic);
    }
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!("volume factor must be positive, got {factor}")));
    }
    let s = factor.cbrt();
    let mut out = structure.clone();
    for p in &mut out.positions {
        *p = linalg::scale(*p, s);
    }
    if let Some(cell) = &mut out.cell {
        for row in cell.iter_mut() {
            *row = linalg::scale(*row, s);
        }
    }
    Ok(out)
}
