//! Crystal structures: species, fractional coordinates, and a lattice whose
//! rows are the cell vectors. Cartesian positions follow the row-vector
//! convention `x = f · L`.

mod elements;
mod json;
mod poscar;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use elements::{atomic_number, symbol, MAX_Z};
pub use json::{parse_json_record, parse_json_structure, StructureRecord};
pub use poscar::{parse_poscar, serialize_poscar};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-12;

/// Map a fractional coordinate into `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStructure", into = "RawStructure")]
pub struct CrystalStructure {
    species: Vec<u8>,
    frac_coords: Vec<Vec3>,
    lattice: Mat3,
}

impl CrystalStructure {
    /// Validates the invariants and wraps coordinates into the unit cell.
    pub fn new(species: Vec<u8>, frac_coords: Vec<Vec3>, lattice: Mat3) -> Result<Self> {
        if species.is_empty() {
            return Err(Error::InvalidStructure("structure has no atoms".into()));
        }
        if species.len() != frac_coords.len() {
            return Err(Error::InvalidStructure(format!(
                "{} species but {} coordinates",
                species.len(),
                frac_coords.len()
            )));
        }
        if let Some(z) = species.iter().find(|&&z| z == 0 || z > MAX_Z) {
            return Err(Error::InvalidStructure(format!(
                "atomic number {z} out of range"
            )));
        }
        if lattice.iter().any(|v| !v.is_finite())
            || frac_coords.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidStructure("non-finite value".into()));
        }
        let det = lattice.determinant();
        // relative to the cell scale so tiny-but-valid cells are not rejected
        let scale = lattice.row(0).norm() * lattice.row(1).norm() * lattice.row(2).norm();
        if !(det > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            if det.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::SingularLattice(det));
            }
            return Err(Error::InvalidStructure(format!(
                "left-handed lattice (determinant {det:e})"
            )));
        }
        let frac_coords = frac_coords.into_iter().map(|f| f.map(wrap_unit)).collect();
        Ok(Self {
            species,
            frac_coords,
            lattice,
        })
    }

    /// Build from cartesian positions (Å).
    pub fn from_cartesian(species: Vec<u8>, cart: &[Vec3], lattice: Mat3) -> Result<Self> {
        let inv = lattice
            .try_inverse()
            .ok_or_else(|| Error::SingularLattice(lattice.determinant()))?;
        let frac = cart.iter().map(|x| inv.transpose() * x).collect();
        Self::new(species, frac, lattice)
    }

    pub fn species(&self) -> &[u8] {
        &self.species
    }

    pub fn frac_coords(&self) -> &[Vec3] {
        &self.frac_coords
    }

    pub fn lattice(&self) -> &Mat3 {
        &self.lattice
    }

    pub fn num_atoms(&self) -> usize {
        self.species.len()
    }

    /// Lattice vector `m` (row `m` of the lattice matrix).
    pub fn lattice_vector(&self, m: usize) -> Vec3 {
        self.lattice.row(m).transpose()
    }

    /// `k₁ℓ₁ + k₂ℓ₂ + k₃ℓ₃`.
    pub fn translation(&self, k: [i32; 3]) -> Vec3 {
        self.lattice.transpose() * Vec3::new(k[0] as f64, k[1] as f64, k[2] as f64)
    }

    /// Cartesian positions of the zero-offset images.
    pub fn cart_coords(&self) -> Vec<Vec3> {
        let lt = self.lattice.transpose();
        self.frac_coords.iter().map(|f| lt * f).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lattice.determinant()
    }

    /// Distance between opposite faces of the cell, per lattice axis.
    pub fn perpendicular_widths(&self) -> [f64; 3] {
        let a = self.lattice_vector(0);
        let b = self.lattice_vector(1);
        let c = self.lattice_vector(2);
        let v = self.volume();
        [
            v / b.cross(&c).norm(),
            v / c.cross(&a).norm(),
            v / a.cross(&b).norm(),
        ]
    }

    /// Rotate and translate coordinates and lattice together.
    pub fn apply(&self, g: &GroupAction) -> CrystalStructure {
        let cart: Vec<Vec3> = self
            .cart_coords()
            .iter()
            .map(|x| g.rotation * x + g.translation)
            .collect();
        // each lattice row ℓ_m becomes R·ℓ_m
        let lattice = self.lattice * g.rotation.transpose();
        Self::from_cartesian(self.species.clone(), &cart, lattice)
            .expect("rigid motion preserves lattice validity")
    }

    /// Shift every atom by an integer lattice offset.
    pub fn shift_by_images(&self, offsets: &[[i32; 3]]) -> CrystalStructure {
        assert_eq!(offsets.len(), self.num_atoms());
        let frac = self
            .frac_coords
            .iter()
            .zip(offsets)
            .map(|(f, k)| f + Vec3::new(k[0] as f64, k[1] as f64, k[2] as f64))
            .collect();
        Self::new(self.species.clone(), frac, self.lattice).expect("valid structure")
    }

    /// Relabel atoms: new atom `i` is old atom `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> CrystalStructure {
        assert_eq!(perm.len(), self.num_atoms());
        Self {
            species: perm.iter().map(|&i| self.species[i]).collect(),
            frac_coords: perm.iter().map(|&i| self.frac_coords[i]).collect(),
            lattice: self.lattice,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawStructure {
    species: Vec<u8>,
    frac_coords: Vec<[f64; 3]>,
    lattice: [[f64; 3]; 3],
}

impl TryFrom<RawStructure> for CrystalStructure {
    type Error = Error;

    fn try_from(raw: RawStructure) -> Result<Self> {
        let lattice = Mat3::from_fn(|r, c| raw.lattice[r][c]);
        let frac = raw.frac_coords.iter().map(|f| Vec3::from(*f)).collect();
        CrystalStructure::new(raw.species, frac, lattice)
    }
}

impl From<CrystalStructure> for RawStructure {
    fn from(s: CrystalStructure) -> Self {
        RawStructure {
            frac_coords: s.frac_coords.iter().map(|f| [f.x, f.y, f.z]).collect(),
            lattice: [0, 1, 2].map(|r| [0, 1, 2].map(|c| s.lattice[(r, c)])),
            species: s.species,
        }
    }
}

/// A proper rigid motion `x ↦ R·x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAction {
    rotation: Mat3,
    translation: Vec3,
}

impl GroupAction {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation * rotation.transpose() - Mat3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidStructure(format!(
                "not a proper rotation (‖RRᵀ − I‖ = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation_only(rotation: Mat3) -> Result<Self> {
        Self::new(rotation, Vec3::zeros())
    }

    /// Uniformly distributed rotation plus a translation with components in
    /// `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Self {
        let rotation = random_rotation(rng);
        let translation = Vec3::from_fn(|_, _| scale * (2.0 * rng.random::<f64>() - 1.0));
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Uniform random rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    use rand_distr::{Distribution, StandardNormal};
    let q = loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        }
    };
    let m = UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner();
    // re-orthonormalize so the 1e-12 invariant holds with margin
    let svd = m.svd(true, true);
    let r = svd.u.unwrap() * svd.v_t.unwrap();
    if r.determinant() < 0.0 {
        m
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cubic(a: f64) -> Mat3 {
        Mat3::identity() * a
    }

    #[test]
    fn cart_coords_row_vector_convention() {
        let s =
            CrystalStructure::new(vec![11], vec![Vec3::new(0.5, 0.0, 0.0)], cubic(1.0)).unwrap();
        assert_eq!(s.cart_coords()[0], Vec3::new(0.5, 0.0, 0.0));
        let s =
            CrystalStructure::new(vec![11], vec![Vec3::new(0.5, 0.5, 0.0)], cubic(2.0)).unwrap();
        assert_eq!(s.cart_coords()[0], Vec3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn non_cubic_cart_uses_rows() {
        let l = Mat3::new(2.0, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 4.0);
        let s = CrystalStructure::new(vec![1], vec![Vec3::new(0.5, 0.5, 0.25)], l).unwrap();
        // 0.5·(2,0,0) + 0.5·(1,3,0) + 0.25·(0,0,4)
        assert!((s.cart_coords()[0] - Vec3::new(1.5, 1.5, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn wraps_on_construction() {
        let s =
            CrystalStructure::new(vec![11], vec![Vec3::new(1.25, -0.25, 0.0)], cubic(1.0)).unwrap();
        assert_eq!(s.frac_coords()[0], Vec3::new(0.25, 0.75, 0.0));
        assert_eq!(wrap_unit(-1e-20), 0.0);
    }

    #[test]
    fn rejects_bad_structures() {
        assert!(matches!(
            CrystalStructure::new(vec![1], vec![Vec3::zeros()], Mat3::zeros()),
            Err(Error::SingularLattice(_))
        ));
        let left = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CrystalStructure::new(vec![1], vec![Vec3::zeros()], left).is_err());
        assert!(CrystalStructure::new(vec![], vec![], cubic(1.0)).is_err());
        assert!(CrystalStructure::new(vec![1, 2], vec![Vec3::zeros()], cubic(1.0)).is_err());
        assert!(CrystalStructure::new(vec![0], vec![Vec3::zeros()], cubic(1.0)).is_err());
    }

    #[test]
    fn identity_action_is_identity() {
        let s = CrystalStructure::new(
            vec![11, 17],
            vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.5, 0.5, 0.5)],
            Mat3::new(3.0, 0.1, 0.0, 0.2, 2.9, 0.0, 0.1, 0.3, 3.1),
        )
        .unwrap();
        let t = s.apply(&GroupAction::identity());
        assert_eq!(t.species(), s.species());
        for (a, b) in t.frac_coords().iter().zip(s.frac_coords()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let g = GroupAction::rotation_only(r).unwrap();
        let s = CrystalStructure::new(vec![11], vec![Vec3::zeros()], cubic(1.0)).unwrap();
        let t = s.apply(&g);
        assert_eq!(t.frac_coords()[0], Vec3::zeros());
        assert!((t.lattice_vector(0) - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((t.lattice_vector(1) - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((t.lattice_vector(2) - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn lattice_translation_is_periodic() {
        let l = Mat3::new(3.0, 0.1, 0.0, 0.2, 2.9, 0.0, 0.1, 0.3, 3.1);
        let s = CrystalStructure::new(vec![8], vec![Vec3::new(0.3, 0.6, 0.9)], l).unwrap();
        let g = GroupAction::new(Mat3::identity(), s.lattice_vector(0)).unwrap();
        let t = s.apply(&g);
        assert!((t.frac_coords()[0] - s.frac_coords()[0]).norm() < 1e-12);
    }

    #[test]
    fn random_rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = GroupAction::random(&mut rng, 5.0);
            assert!(GroupAction::new(*g.rotation(), *g.translation()).is_ok());
        }
        let bad = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(GroupAction::rotation_only(bad).is_err());
    }

    #[test]
    fn json_serde_round_trip() {
        let s = CrystalStructure::new(
            vec![11, 17],
            vec![Vec3::zeros(), Vec3::repeat(0.5)],
            cubic(5.6),
        )
        .unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: CrystalStructure = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
