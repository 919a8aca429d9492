//! Random crystals for tests, the check suite, and toy datasets.

use rand::Rng;

use crate::structure::{CrystalStructure, Mat3, StructureRecord, Vec3};

/// Species drawn for random structures.
pub const SPECIES_POOL: [u8; 8] = [3, 8, 11, 12, 14, 17, 26, 29];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Lattice lengths are drawn from this range, Å.
    pub length: (f64, f64),
    /// Inter-axial angles are drawn from this range, degrees.
    pub angle: (f64, f64),
    /// Rejection threshold on any interatomic distance, Å.
    pub min_distance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            min_atoms: 2,
            max_atoms: 16,
            length: (3.0, 7.0),
            angle: (65.0, 115.0),
            min_distance: 0.9,
        }
    }
}

/// Lattice from lengths `(a, b, c)` and angles `(α, β, γ)` in degrees, with
/// `a` along x and `b` in the xy-plane.
pub fn lattice_from_parameters(lengths: [f64; 3], angles_deg: [f64; 3]) -> Option<Mat3> {
    let [a, b, c] = lengths;
    let [al, be, ga] = angles_deg.map(f64::to_radians);
    let cx = c * be.cos();
    let cy = c * (al.cos() - be.cos() * ga.cos()) / ga.sin();
    let cz2 = c * c - cx * cx - cy * cy;
    if !(cz2 > 1e-6 * c * c) {
        return None;
    }
    Some(Mat3::new(
        a,
        0.0,
        0.0,
        b * ga.cos(),
        b * ga.sin(),
        0.0,
        cx,
        cy,
        cz2.sqrt(),
    ))
}

/// Shortest distance from `a` to any image of `b`, searching two cells in
/// each direction; `skip_zero` excludes the zero-offset image.
fn image_distance(lattice: &Mat3, a: &Vec3, b: &Vec3, skip_zero: bool) -> f64 {
    let d = (b - a).map(|x| x - x.round());
    let mut best = f64::INFINITY;
    for i in -2..=2 {
        for j in -2..=2 {
            for k in -2..=2 {
                if skip_zero && (i, j, k) == (0, 0, 0) {
                    continue;
                }
                let f = d + Vec3::new(i as f64, j as f64, k as f64);
                best = best.min((lattice.transpose() * f).norm());
            }
        }
    }
    best
}

/// Random triclinic structure; atoms closer than `min_distance` (under
/// periodicity) are re-drawn.
pub fn random_structure<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec) -> CrystalStructure {
    loop {
        let lengths = std::array::from_fn(|_| rng.random_range(spec.length.0..=spec.length.1));
        let angles = std::array::from_fn(|_| rng.random_range(spec.angle.0..=spec.angle.1));
        let Some(lattice) = lattice_from_parameters(lengths, angles) else {
            continue;
        };
        let n = rng.random_range(spec.min_atoms..=spec.max_atoms);
        let mut frac: Vec<Vec3> = Vec::with_capacity(n);
        let mut attempts = 0;
        while frac.len() < n && attempts < 200 * n {
            attempts += 1;
            let cand = Vec3::new(rng.random(), rng.random(), rng.random());
            if frac
                .iter()
                .all(|f| image_distance(&lattice, f, &cand, false) >= spec.min_distance)
            {
                frac.push(cand);
            }
        }
        if frac.len() < n {
            continue;
        }
        let species = (0..n)
            .map(|_| SPECIES_POOL[rng.random_range(0..SPECIES_POOL.len())])
            .collect();
        if let Ok(s) = CrystalStructure::new(species, frac, lattice) {
            return s;
        }
    }
}

/// Mean over atoms of the distance to the nearest other atom or periodic
/// image.
pub fn mean_nearest_neighbor_distance(s: &CrystalStructure) -> f64 {
    let fc = s.frac_coords();
    let total: f64 = fc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            fc.iter()
                .enumerate()
                .map(|(j, b)| image_distance(s.lattice(), a, b, i == j))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / fc.len() as f64
}

/// `n` labelled random structures with ids `toy-0..`, targeting the mean
/// nearest-neighbour distance.
pub fn toy_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    spec: &SyntheticSpec,
) -> Vec<StructureRecord> {
    (0..n)
        .map(|i| {
            let structure = random_structure(rng, spec);
            StructureRecord {
                id: Some(format!("toy-{i}")),
                target: Some(mean_nearest_neighbor_distance(&structure)),
                structure,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, Streams};

    #[test]
    fn lattice_parameters_round_trip() {
        let l = lattice_from_parameters([3.0, 4.0, 5.0], [80.0, 95.0, 110.0]).unwrap();
        let (a, b, c) = (
            l.row(0).transpose(),
            l.row(1).transpose(),
            l.row(2).transpose(),
        );
        assert!((b.norm() - 4.0).abs() < 1e-12 && (c.norm() - 5.0).abs() < 1e-12);
        assert!(((b.dot(&c) / 20.0).acos().to_degrees() - 80.0).abs() < 1e-9);
        assert!(((a.dot(&c) / 15.0).acos().to_degrees() - 95.0).abs() < 1e-9);
        assert!(((a.dot(&b) / 12.0).acos().to_degrees() - 110.0).abs() < 1e-9);
        assert!(lattice_from_parameters([1.0; 3], [10.0, 10.0, 170.0]).is_none());
    }

    #[test]
    fn structures_respect_spec() {
        let mut rng = Streams::new(1).get(Stream::Synthetic, 0);
        let spec = SyntheticSpec::default();
        for _ in 0..10 {
            let s = random_structure(&mut rng, &spec);
            assert!((2..=16).contains(&s.num_atoms()));
            assert!(mean_nearest_neighbor_distance(&s) >= spec.min_distance - 1e-12);
        }
    }

    #[test]
    fn nearest_neighbor_of_simple_cubic() {
        let s =
            CrystalStructure::new(vec![3], vec![Vec3::zeros()], Mat3::identity() * 2.5).unwrap();
        assert!((mean_nearest_neighbor_distance(&s) - 2.5).abs() < 1e-12);
        let s = CrystalStructure::new(
            vec![3, 3],
            vec![Vec3::zeros(), Vec3::new(0.5, 0.5, 0.5)],
            Mat3::identity() * 2.0,
        )
        .unwrap();
        assert!((mean_nearest_neighbor_distance(&s) - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn toy_records_round_trip_through_json() {
        let mut rng = Streams::new(2).get(Stream::Synthetic, 0);
        for r in toy_dataset(&mut rng, 3, &SyntheticSpec::default()) {
            let back = crate::structure::parse_json_record(&r.to_json().to_string()).unwrap();
            assert_eq!(back.id, r.id);
            assert_eq!(back.target, r.target);
            assert_eq!(back.structure, r.structure);
        }
    }
}
