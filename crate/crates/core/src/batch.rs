//! Featurized graphs concatenated into one disjoint batch.

use std::rc::Rc;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{embed_angles, embed_atoms, embed_edges, AtomTable, RbfSpec};
use crate::graph::PeriodicGraph;
use crate::harmonics::spherical_harmonics;
use crate::tensor::Tensor;

/// Everything needed to turn a graph into feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub atoms: AtomTable,
    pub distance: RbfSpec,
    pub angle: RbfSpec,
    pub cutoff: f64,
    pub l_max: usize,
}

impl Featurizer {
    pub fn new(
        atoms: AtomTable,
        cutoff: f64,
        distance_rbf: usize,
        angle_rbf: usize,
        l_max: usize,
    ) -> Result<Self> {
        Ok(Self {
            atoms,
            distance: RbfSpec::uniform(0.0, cutoff, distance_rbf)?,
            angle: RbfSpec::uniform(-1.0, 1.0, angle_rbf)?,
            cutoff,
            l_max,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let atoms = match &cfg.features.atom_table {
            None => AtomTable::OneHot,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                AtomTable::from_json(&text, cfg.features.atom_dim)?
            }
        };
        Self::new(
            atoms,
            cfg.graph.cutoff,
            cfg.features.distance_rbf,
            cfg.features.angle_rbf,
            cfg.model.l_max,
        )
    }

    /// Width of one lattice-channel feature row.
    pub fn lattice_dim(&self) -> usize {
        self.distance.len() + 3
    }

    /// Per-node lattice features for reference direction `k`: the basis
    /// expansion of `|e_k|`, `|e_k| / cutoff`, and the cosines to the other
    /// two reference vectors.
    fn lattice_row(&self, refs: &[crate::structure::Vec3; 3], k: usize, out: &mut Vec<f64>) {
        let e = refs[k];
        let len = e.norm();
        self.distance.expand_into(len, out);
        out.push(len / self.cutoff);
        for other in [refs[(k + 1) % 3], refs[(k + 2) % 3]] {
            out.push(e.dot(&other) / (len * other.norm()));
        }
    }
}

/// Per-edge perturbations of one graph, in edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNoise {
    /// Realised angle shifts `θ̃ − θ` for the three reference directions.
    pub angle: Vec<[f64; 3]>,
    /// Realised distance shifts `ẽ − e`.
    pub distance: Vec<f64>,
}

/// A batch of graphs with node and edge indices offset into one range.
///
/// The SE3 view reads `se3_distance` and `se3_angles`; the SO3 view reads
/// `so3_distance` and `harmonics`. Without noise the two distance matrices
/// coincide.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub atoms: Tensor,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub node_graph: Rc<[usize]>,
    pub edge_graph: Rc<[usize]>,
    /// `1 / (edges leaving node i)`, `(N, 1)`.
    pub inv_degree: Tensor,
    /// `1 / (nodes in graph g)`, `(G, 1)`.
    pub inv_size: Tensor,
    pub se3_distance: Tensor,
    pub se3_angles: [Tensor; 3],
    pub lattice: [Tensor; 3],
    pub so3_distance: Tensor,
    /// Harmonics of each edge direction, one `(E, 2l+1)` row block per degree.
    pub harmonics: Vec<Vec<f64>>,
    /// Noise targets `(E, 3)` and `(E, 1)` when built from perturbed geometry.
    pub angle_noise: Option<Tensor>,
    pub distance_noise: Option<Tensor>,
}

impl GraphBatch {
    pub fn new(graphs: &[&PeriodicGraph], feat: &Featurizer) -> Result<Self> {
        Self::build(graphs, None, feat)
    }

    /// Batch whose SE3 angles and SO3 distances carry the given noise.
    pub fn with_noise(
        graphs: &[&PeriodicGraph],
        noise: &[&EdgeNoise],
        feat: &Featurizer,
    ) -> Result<Self> {
        if noise.len() != graphs.len() {
            return Err(Error::InvalidStructure(format!(
                "{} noise samples for {} graphs",
                noise.len(),
                graphs.len()
            )));
        }
        Self::build(graphs, Some(noise), feat)
    }

    fn build(
        graphs: &[&PeriodicGraph],
        noise: Option<&[&EdgeNoise]>,
        feat: &Featurizer,
    ) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let num_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let num_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let mut species = Vec::with_capacity(num_nodes);
        let (mut src, mut dst) = (Vec::with_capacity(num_edges), Vec::with_capacity(num_edges));
        let (mut node_graph, mut edge_graph) =
            (Vec::with_capacity(num_nodes), Vec::with_capacity(num_edges));
        let mut degree = vec![0usize; num_nodes];
        let mut inv_size = Vec::with_capacity(graphs.len());
        let mut clean_dist = Vec::with_capacity(num_edges);
        let mut se3_angles = Vec::with_capacity(num_edges);
        let mut so3_dist = Vec::with_capacity(num_edges);
        let mut harmonics: Vec<Vec<f64>> = (0..=feat.l_max)
            .map(|l| Vec::with_capacity(num_edges * (2 * l + 1)))
            .collect();
        let mut lattice: [Vec<f64>; 3] =
            std::array::from_fn(|_| Vec::with_capacity(num_edges * feat.lattice_dim()));
        let mut angle_noise = Vec::new();
        let mut distance_noise = Vec::new();
        let mut node_lattice: [Vec<f64>; 3] = Default::default();

        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            let n = g.num_nodes();
            species.extend_from_slice(g.structure().species());
            node_graph.extend(std::iter::repeat_n(gi, n));
            inv_size.push(1.0 / n as f64);
            for k in 0..3 {
                node_lattice[k].clear();
                for refs in g.ref_vectors() {
                    feat.lattice_row(refs, k, &mut node_lattice[k]);
                }
            }
            let eps = noise.map(|ns| ns[gi]);
            if let Some(eps) = eps {
                if eps.angle.len() != g.num_edges() || eps.distance.len() != g.num_edges() {
                    return Err(Error::InvalidStructure(format!(
                        "noise for graph {gi} covers {} edges, graph has {}",
                        eps.angle.len(),
                        g.num_edges()
                    )));
                }
            }
            for (ei, e) in g.edges().iter().enumerate() {
                src.push(offset + e.src);
                dst.push(offset + e.dst);
                edge_graph.push(gi);
                degree[offset + e.src] += 1;
                clean_dist.push(e.distance);
                let (d_angle, d_dist) = match eps {
                    Some(eps) => (eps.angle[ei], eps.distance[ei]),
                    None => ([0.0; 3], 0.0),
                };
                se3_angles.push(std::array::from_fn::<f64, 3, _>(|k| {
                    e.angles[k] + d_angle[k]
                }));
                so3_dist.push(e.distance + d_dist);
                if eps.is_some() {
                    angle_noise.extend_from_slice(&d_angle);
                    distance_noise.push(d_dist);
                }
                // direction is unaffected by rescaling the length
                for (l, y) in spherical_harmonics(&e.vector, feat.l_max)?
                    .into_iter()
                    .enumerate()
                {
                    harmonics[l].extend(y);
                }
                let w = feat.lattice_dim();
                for k in 0..3 {
                    lattice[k].extend_from_slice(&node_lattice[k][e.src * w..(e.src + 1) * w]);
                }
            }
            offset += n;
        }
        if let Some(i) = degree.iter().position(|&d| d == 0) {
            return Err(Error::InvalidStructure(format!(
                "node {i} has no neighbours"
            )));
        }
        let se3_distance = embed_edges(&clean_dist, &feat.distance);
        let so3_distance = if noise.is_some() {
            embed_edges(&so3_dist, &feat.distance)
        } else {
            se3_distance.clone()
        };
        let w = feat.lattice_dim();
        Ok(Self {
            num_graphs: graphs.len(),
            num_nodes,
            num_edges,
            atoms: embed_atoms(&species, &feat.atoms)?,
            src: src.into(),
            dst: dst.into(),
            node_graph: node_graph.into(),
            edge_graph: edge_graph.into(),
            inv_degree: Tensor::matrix(
                num_nodes,
                1,
                degree.iter().map(|&d| 1.0 / d as f64).collect(),
            ),
            inv_size: Tensor::matrix(graphs.len(), 1, inv_size),
            se3_distance,
            se3_angles: embed_angles(&se3_angles, &feat.angle),
            lattice: lattice.map(|data| Tensor::matrix(num_edges, w, data)),
            so3_distance,
            harmonics,
            angle_noise: noise.map(|_| Tensor::matrix(num_edges, 3, angle_noise)),
            distance_noise: noise.map(|_| Tensor::matrix(num_edges, 1, distance_noise)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphParams};
    use crate::structure::{CrystalStructure, Mat3, Vec3};

    fn cubic(a: f64, species: Vec<u8>, frac: Vec<Vec3>) -> PeriodicGraph {
        let s = CrystalStructure::new(species, frac, Mat3::identity() * a).unwrap();
        build_graph(
            &s,
            &GraphParams {
                cutoff: 1.1 * a,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn offsets_and_shapes() {
        let feat = Featurizer::new(AtomTable::OneHot, 4.0, 8, 6, 2).unwrap();
        let g1 = cubic(1.0, vec![11], vec![Vec3::zeros()]);
        let g2 = cubic(
            2.0,
            vec![17, 11],
            vec![Vec3::zeros(), Vec3::new(0.5, 0.5, 0.5)],
        );
        let b = GraphBatch::new(&[&g1, &g2], &feat).unwrap();
        assert_eq!((b.num_graphs, b.num_nodes), (2, 3));
        assert_eq!(b.num_edges, g1.num_edges() + g2.num_edges());
        assert!(b.src[..6].iter().all(|&s| s == 0));
        assert!(b.src[6..].iter().all(|&s| s >= 1));
        assert_eq!(&b.node_graph[..], &[0, 1, 1]);
        assert_eq!(b.atoms.shape(), &[3, 100]);
        assert_eq!(b.lattice[0].shape(), &[b.num_edges, 11]);
        assert_eq!(b.harmonics[2].len(), b.num_edges * 5);
        assert_eq!(b.inv_size.data(), &[1.0, 0.5]);
        assert_eq!(b.inv_degree.at(0, 0), 1.0 / 6.0);
        assert!(b.angle_noise.is_none());
        assert_eq!(b.se3_distance, b.so3_distance);
    }

    #[test]
    fn noise_enters_only_its_view() {
        let feat = Featurizer::new(AtomTable::OneHot, 4.0, 8, 6, 1).unwrap();
        let g = cubic(1.0, vec![11], vec![Vec3::zeros()]);
        let noise = EdgeNoise {
            angle: vec![[0.1, 0.0, 0.0]; 6],
            distance: vec![0.05; 6],
        };
        let clean = GraphBatch::new(&[&g], &feat).unwrap();
        let noisy = GraphBatch::with_noise(&[&g], &[&noise], &feat).unwrap();
        assert_eq!(clean.se3_distance, noisy.se3_distance);
        assert_ne!(clean.so3_distance, noisy.so3_distance);
        assert_ne!(clean.se3_angles[0], noisy.se3_angles[0]);
        assert_eq!(clean.se3_angles[1], noisy.se3_angles[1]);
        assert_eq!(clean.harmonics, noisy.harmonics);
        assert_eq!(noisy.distance_noise.unwrap().data(), &[0.05; 6]);
    }
}
