//! Periodic crystal graphs.
//!
//! Each atom `i` (the edge `src`) is connected to every periodic image `j'`
//! of every atom `j` (the edge `dst`) within the cutoff radius, excluding its
//! own zero-offset position. Edges carry both views of the geometry:
//!
//! * invariant scalars: the distance and the three angles between the edge
//!   vector and the node's reference vectors;
//! * the equivariant displacement vector `x_{j'} − x_i`.
//!
//! Reference vectors are the three shortest linearly independent lattice
//! translations, which are the same for every atom of a structure.

use std::cmp::Reverse;

use crate::error::{Error, Result};
use crate::structure::{CrystalStructure, Vec3};

/// Default cap on the number of lattice images enumerated per search.
pub const DEFAULT_IMAGE_CAP: usize = 1_000_000;

const INDEPENDENCE_TOL: f64 = 1e-10;
const RADIUS_GROWTH: f64 = 1.5;

/// Distances closer than this are ordered by index instead of by value so
/// that rigid motions (which perturb the last few bits) keep the same order.
const TIE_QUANTUM: f64 = 1e-9;

fn quantize(x: f64) -> i64 {
    (x / TIE_QUANTUM).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub image_cap: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            cutoff: 8.0,
            max_neighbors: 25,
            image_cap: DEFAULT_IMAGE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicEdge {
    pub src: usize,
    pub dst: usize,
    pub image: [i32; 3],
    pub distance: f64,
    pub vector: Vec3,
    pub angles: [f64; 3],
}

/// Invariant per-edge scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeScalars {
    pub distance: f64,
    pub angles: [f64; 3],
}

/// Equivariant per-edge features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeVector {
    pub distance: f64,
    pub vector: Vec3,
}

#[derive(Debug, Clone)]
pub struct PeriodicGraph {
    structure: CrystalStructure,
    edges: Vec<PeriodicEdge>,
    ref_vectors: Vec<[Vec3; 3]>,
    ref_images: [[i32; 3]; 3],
    radii: Vec<f64>,
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}

fn image_ranges(s: &CrystalStructure, radius: f64, cap: usize) -> Result<[i32; 3]> {
    let widths = s.perpendicular_widths();
    let mut n = [0i32; 3];
    let mut total: usize = 1;
    for a in 0..3 {
        let extent = (radius / widths[a]).ceil() + 1.0;
        if !extent.is_finite() || extent > cap as f64 {
            return Err(Error::ImageBudgetExceeded {
                needed: usize::MAX,
                cap,
            });
        }
        n[a] = extent as i32;
        total = total.saturating_mul(2 * n[a] as usize + 1);
    }
    if total > cap {
        return Err(Error::ImageBudgetExceeded { needed: total, cap });
    }
    Ok(n)
}

fn images(n: [i32; 3]) -> impl Iterator<Item = [i32; 3]> {
    (-n[0]..=n[0])
        .flat_map(move |a| (-n[1]..=n[1]).flat_map(move |b| (-n[2]..=n[2]).map(move |c| [a, b, c])))
}

/// Three shortest linearly independent lattice translations, scanned by
/// increasing length; equal lengths are ordered by descending `(k₁, k₂, k₃)`.
fn reference_vectors(s: &CrystalStructure, cap: usize) -> Result<[[i32; 3]; 3]> {
    // ℓ₁, ℓ₂, ℓ₃ are independent, so the third successive minimum is no
    // longer than the longest of them.
    let reach = (0..3)
        .map(|m| s.lattice_vector(m).norm())
        .fold(0.0, f64::max)
        * (1.0 + 1e-9);
    let n = image_ranges(s, reach, cap)?;
    let mut cands: Vec<([i32; 3], Vec3, f64)> = images(n)
        .filter(|k| *k != [0, 0, 0])
        .map(|k| {
            let t = s.translation(k);
            (k, t, t.norm())
        })
        .filter(|(_, _, len)| *len <= reach)
        .collect();
    cands.sort_by_key(|(k, _, len)| (quantize(*len), Reverse(*k)));

    let mut chosen: Vec<([i32; 3], Vec3)> = Vec::with_capacity(3);
    for (k, t, len) in cands {
        let independent = match chosen.len() {
            0 => true,
            1 => t.cross(&chosen[0].1).norm() / (len * chosen[0].1.norm()) > INDEPENDENCE_TOL,
            _ => {
                let m = nalgebra::Matrix3::from_columns(&[chosen[0].1, chosen[1].1, t]);
                m.determinant().abs() > INDEPENDENCE_TOL
            }
        };
        if independent {
            chosen.push((k, t));
            if chosen.len() == 3 {
                break;
            }
        }
    }
    debug_assert_eq!(chosen.len(), 3);
    Ok([chosen[0].0, chosen[1].0, chosen[2].0])
}

pub fn build_graph(s: &CrystalStructure, params: &GraphParams) -> Result<PeriodicGraph> {
    if !(params.cutoff > 0.0) || params.max_neighbors == 0 {
        return Err(Error::Config(vec![format!(
            "graph parameters must satisfy cutoff > 0 and max_neighbors ≥ 1 (got {} and {})",
            params.cutoff, params.max_neighbors
        )]));
    }
    let ref_images = reference_vectors(s, params.image_cap)?;
    let refs = ref_images.map(|k| s.translation(k));
    let cart = s.cart_coords();
    let n_atoms = s.num_atoms();

    let mut edges = Vec::new();
    let mut radii = Vec::with_capacity(n_atoms);
    for i in 0..n_atoms {
        let mut radius = params.cutoff;
        let mut found = loop {
            let n = image_ranges(s, radius, params.image_cap)?;
            let mut found = Vec::new();
            for k in images(n) {
                let shift = s.translation(k);
                for (j, xj) in cart.iter().enumerate() {
                    if j == i && k == [0, 0, 0] {
                        continue;
                    }
                    let vector = xj + shift - cart[i];
                    let distance = vector.norm();
                    if distance <= radius {
                        found.push((j, k, vector, distance));
                    }
                }
            }
            if !found.is_empty() {
                break found;
            }
            radius *= RADIUS_GROWTH;
        };
        found.sort_by_key(|&(j, k, _, d)| (quantize(d), j, k));
        found.truncate(params.max_neighbors);
        radii.push(radius);
        edges.extend(
            found
                .into_iter()
                .map(|(j, k, vector, distance)| PeriodicEdge {
                    src: i,
                    dst: j,
                    image: k,
                    distance,
                    vector,
                    angles: refs.map(|e| angle_between(&vector, &e)),
                }),
        );
    }

    Ok(PeriodicGraph {
        structure: s.clone(),
        edges,
        ref_vectors: vec![refs; n_atoms],
        ref_images,
        radii,
    })
}

impl PeriodicGraph {
    pub fn structure(&self) -> &CrystalStructure {
        &self.structure
    }

    pub fn num_nodes(&self) -> usize {
        self.structure.num_atoms()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges grouped by `src`, nearest first within a group.
    pub fn edges(&self) -> &[PeriodicEdge] {
        &self.edges
    }

    pub fn ref_vectors(&self) -> &[[Vec3; 3]] {
        &self.ref_vectors
    }

    /// Lattice offsets `(k₁, k₂, k₃)` of the three reference vectors.
    pub fn ref_images(&self) -> [[i32; 3]; 3] {
        self.ref_images
    }

    /// Radius actually used for each node, larger than the cutoff only for
    /// atoms that had no neighbour within it.
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Edge index ranges per source node.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_nodes()];
        for e in &self.edges {
            counts[e.src] += 1;
        }
        counts
    }

    pub fn invariant_view(&self) -> Vec<EdgeScalars> {
        self.edges
            .iter()
            .map(|e| EdgeScalars {
                distance: e.distance,
                angles: e.angles,
            })
            .collect()
    }

    pub fn equivariant_view(&self) -> Vec<EdgeVector> {
        self.edges
            .iter()
            .map(|e| EdgeVector {
                distance: e.distance,
                vector: e.vector,
            })
            .collect()
    }

    /// Debug dump with nodes, reference vectors, and edge records.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = self
            .structure
            .species()
            .iter()
            .zip(self.structure.cart_coords())
            .map(|(z, x)| serde_json::json!({"species": z, "cart": [x.x, x.y, x.z]}))
            .collect();
        let refs: Vec<Vec<[f64; 3]>> = self
            .ref_vectors
            .iter()
            .map(|r| r.iter().map(|v| [v.x, v.y, v.z]).collect())
            .collect();
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|e| {
                serde_json::json!({
                    "src": e.src,
                    "dst": e.dst,
                    "image": e.image,
                    "distance": e.distance,
                    "angles": e.angles,
                    "vector": [e.vector.x, e.vector.y, e.vector.z],
                })
            })
            .collect();
        serde_json::json!({"nodes": nodes, "ref_vectors": refs, "edges": edges})
    }
}
