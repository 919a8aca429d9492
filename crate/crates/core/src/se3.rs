//! SE3-invariant encoder: one edge-wise transformer layer, a stack of
//! node-wise layers, mean pooling, and a projection head.
//!
//! Every input is an invariant scalar (distances, angles to the reference
//! frame, lattice lengths and cosines), so the embedding is unchanged by any
//! rigid motion of the crystal.

use crate::batch::{Featurizer, GraphBatch};
use crate::config::ModelConfig;
use crate::nn::{BatchNorm, Builder, Forward, LayerNorm, Linear, Mlp};
use crate::tensor::Var;

/// Node-wise attention layer. Node `i` gathers over the edges it emits:
///
/// `K_ij = φ_K(f_K(h_i) ∥ f_K'(h_j) ∥ f_E(e_ij))`, `V_ij` likewise,
/// `out_i = softplus(h_i + BN(Σ_j σ(BN(Q_i ∘ K_ij / √d)) ∘ V_ij))`.
#[derive(Debug, Clone, Copy)]
pub struct NodeLayer {
    pub f_q: Linear,
    pub f_k_src: Linear,
    pub f_k_dst: Linear,
    pub f_k_edge: Linear,
    pub phi_k: Mlp,
    pub f_v_src: Linear,
    pub f_v_dst: Linear,
    pub f_v_edge: Linear,
    pub phi_v: Mlp,
    pub bn_attn: BatchNorm,
    pub bn_msg: BatchNorm,
    pub width: usize,
}

impl NodeLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            f_q: Linear::new(&mut s, "f_q", d, d, true),
            f_k_src: Linear::new(&mut s, "f_k_src", d, d, true),
            f_k_dst: Linear::new(&mut s, "f_k_dst", d, d, true),
            f_k_edge: Linear::new(&mut s, "f_k_edge", d, d, true),
            phi_k: Mlp::new(&mut s, "phi_k", 3 * d, d, d),
            f_v_src: Linear::new(&mut s, "f_v_src", d, d, true),
            f_v_dst: Linear::new(&mut s, "f_v_dst", d, d, true),
            f_v_edge: Linear::new(&mut s, "f_v_edge", d, d, true),
            phi_v: Mlp::new(&mut s, "phi_v", 3 * d, d, d),
            bn_attn: BatchNorm::new(&mut s, "bn_attn", d),
            bn_msg: BatchNorm::new(&mut s, "bn_msg", d),
            width: d,
        }
    }

    pub fn forward<'f>(
        &self,
        f: &'f Forward<'_>,
        h: Var<'f>,
        e: Var<'f>,
        batch: &GraphBatch,
    ) -> Var<'f> {
        let (src, dst) = (&batch.src, &batch.dst);
        let q = self.f_q.forward(f, h).gather_rows(src);
        let k = self.phi_k.forward(
            f,
            Var::concat_cols(&[
                self.f_k_src.forward(f, h).gather_rows(src),
                self.f_k_dst.forward(f, h).gather_rows(dst),
                self.f_k_edge.forward(f, e),
            ]),
        );
        let v = self.phi_v.forward(
            f,
            Var::concat_cols(&[
                self.f_v_src.forward(f, h).gather_rows(src),
                self.f_v_dst.forward(f, h).gather_rows(dst),
                self.f_v_edge.forward(f, e),
            ]),
        );
        let logits = q.mul(&k).scale(1.0 / (self.width as f64).sqrt());
        let alpha = self.bn_attn.forward(f, logits).sigmoid();
        let msg = alpha.mul(&v).scatter_add_rows(src, batch.num_nodes);
        h.add(&self.bn_msg.forward(f, msg)).softplus()
    }
}

/// Edge-wise layer over the three reference directions `k`:
///
/// `K_k = φ_K(f_K(e) ∥ f_{K_k}(ℓ_k) ∥ f_E(θ_k))`, `V_k` likewise,
/// `out = softplus(e + BN(Σ_k σ(BN_k(Q ∘ K_k / √d)) ∘ V_k))`.
#[derive(Debug, Clone)]
pub struct EdgeLayer {
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub f_k_lattice: [Linear; 3],
    pub f_v_lattice: [Linear; 3],
    pub f_k_angle: Linear,
    pub f_v_angle: Linear,
    pub phi_k: Mlp,
    pub phi_v: Mlp,
    pub bn_attn: [BatchNorm; 3],
    pub bn_msg: BatchNorm,
    pub width: usize,
}

impl EdgeLayer {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        d: usize,
        lattice_dim: usize,
        angle_dim: usize,
    ) -> Self {
        let mut s = b.scope(name);
        Self {
            f_q: Linear::new(&mut s, "f_q", d, d, true),
            f_k: Linear::new(&mut s, "f_k", d, d, true),
            f_v: Linear::new(&mut s, "f_v", d, d, true),
            f_k_lattice: std::array::from_fn(|k| {
                Linear::new(&mut s, &format!("f_k_lattice{k}"), lattice_dim, d, true)
            }),
            f_v_lattice: std::array::from_fn(|k| {
                Linear::new(&mut s, &format!("f_v_lattice{k}"), lattice_dim, d, true)
            }),
            f_k_angle: Linear::new(&mut s, "f_k_angle", angle_dim, d, true),
            f_v_angle: Linear::new(&mut s, "f_v_angle", angle_dim, d, true),
            phi_k: Mlp::new(&mut s, "phi_k", 3 * d, d, d),
            phi_v: Mlp::new(&mut s, "phi_v", 3 * d, d, d),
            bn_attn: std::array::from_fn(|k| BatchNorm::new(&mut s, &format!("bn_attn{k}"), d)),
            bn_msg: BatchNorm::new(&mut s, "bn_msg", d),
            width: d,
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, e: Var<'f>, batch: &GraphBatch) -> Var<'f> {
        let q = self.f_q.forward(f, e);
        let fk = self.f_k.forward(f, e);
        let fv = self.f_v.forward(f, e);
        let inv_sqrt_d = 1.0 / (self.width as f64).sqrt();
        let mut msg: Option<Var<'f>> = None;
        for k in 0..3 {
            let lat = f.constant(batch.lattice[k].clone());
            let ang = f.constant(batch.se3_angles[k].clone());
            let key = self.phi_k.forward(
                f,
                Var::concat_cols(&[
                    fk,
                    self.f_k_lattice[k].forward(f, lat),
                    self.f_k_angle.forward(f, ang),
                ]),
            );
            let val = self.phi_v.forward(
                f,
                Var::concat_cols(&[
                    fv,
                    self.f_v_lattice[k].forward(f, lat),
                    self.f_v_angle.forward(f, ang),
                ]),
            );
            let alpha = self.bn_attn[k]
                .forward(f, q.mul(&key).scale(inv_sqrt_d))
                .sigmoid();
            let term = alpha.mul(&val);
            msg = Some(match msg {
                Some(m) => m.add(&term),
                None => term,
            });
        }
        e.add(&self.bn_msg.forward(f, msg.expect("three channels")))
            .softplus()
    }
}

/// `z + LN(f₂(f₁ z + b₁) + b₂)`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub f_l1: Linear,
    pub f_l2: Linear,
    pub norm: LayerNorm,
}

impl ProjectionHead {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            f_l1: Linear::new(&mut s, "f_l1", d, d, true),
            f_l2: Linear::new(&mut s, "f_l2", d, d, true),
            norm: LayerNorm::new(&mut s, "norm", d),
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, z: Var<'f>) -> Var<'f> {
        let inner = self.f_l2.forward(f, self.f_l1.forward(f, z));
        z.add(&self.norm.forward(f, inner))
    }
}

/// Mean over the nodes of each graph, `(G, d)`.
pub fn mean_pool<'f>(f: &'f Forward<'_>, h: Var<'f>, batch: &GraphBatch) -> Var<'f> {
    h.scatter_add_rows(&batch.node_graph, batch.num_graphs)
        .mul_col(&f.constant(batch.inv_size.clone()))
}

pub struct EncoderOutput<'f> {
    pub nodes: Var<'f>,
    pub edges: Var<'f>,
    pub graph: Var<'f>,
}

#[derive(Debug, Clone)]
pub struct Se3Encoder {
    pub atom_embed: Linear,
    pub edge_embed: Linear,
    pub edge_layer: EdgeLayer,
    pub node_layers: Vec<NodeLayer>,
    pub head: ProjectionHead,
}

impl Se3Encoder {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig, feat: &Featurizer) -> Self {
        let d = cfg.width;
        let mut s = b.scope("se3");
        Self {
            atom_embed: Linear::new(&mut s, "atom_embed", feat.atoms.dim(), d, true),
            edge_embed: Linear::new(&mut s, "edge_embed", feat.distance.len(), d, true),
            edge_layer: EdgeLayer::new(&mut s, "edge0", d, feat.lattice_dim(), feat.angle.len()),
            node_layers: (0..cfg.node_layers)
                .map(|i| NodeLayer::new(&mut s, &format!("node{i}"), d))
                .collect(),
            head: ProjectionHead::new(&mut s, "head", d),
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, batch: &GraphBatch) -> EncoderOutput<'f> {
        let mut h = self.atom_embed.forward(f, f.constant(batch.atoms.clone()));
        let e0 = self
            .edge_embed
            .forward(f, f.constant(batch.se3_distance.clone()));
        let e = self.edge_layer.forward(f, e0, batch);
        for layer in &self.node_layers {
            h = layer.forward(f, h, e, batch);
        }
        let graph = self.head.forward(f, mean_pool(f, h, batch));
        EncoderOutput {
            nodes: h,
            edges: e,
            graph,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AtomTable;
    use crate::graph::{build_graph, GraphParams};
    use crate::nn::Mode;
    use crate::rng::Streams;
    use crate::structure::{CrystalStructure, Mat3, Vec3};
    use crate::tensor::{ParamStore, Tensor};

    fn zero(store: &mut ParamStore, l: &Linear) {
        let w = store.value(l.weight).map(|_| 0.0);
        store.set_value(l.weight, w).unwrap();
        if let Some(bias) = l.bias {
            let z = store.value(bias).map(|_| 0.0);
            store.set_value(bias, z).unwrap();
        }
    }

    fn cscl() -> (Featurizer, GraphBatch) {
        let s = CrystalStructure::new(
            vec![26, 26],
            vec![Vec3::zeros(), Vec3::new(0.5, 0.5, 0.5)],
            Mat3::identity() * 3.0,
        )
        .unwrap();
        let g = build_graph(
            &s,
            &GraphParams {
                cutoff: 4.0,
                max_neighbors: 12,
                ..Default::default()
            },
        )
        .unwrap();
        let feat = Featurizer::new(AtomTable::OneHot, 4.0, 10, 8, 1).unwrap();
        let batch = GraphBatch::new(&[&g], &feat).unwrap();
        (feat, batch)
    }

    #[test]
    fn zero_value_paths_reduce_to_softplus_residual() {
        let (feat, batch) = cscl();
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            width: 8,
            node_layers: 1,
            ..Default::default()
        };
        let enc = Se3Encoder::new(&mut Builder::new(&mut store, Streams::new(1)), &cfg, &feat);
        zero(&mut store, &enc.edge_layer.phi_v.second);
        zero(&mut store, &enc.node_layers[0].phi_v.second);
        let f = Forward::new(&store, Mode::Train);
        let e0 = enc
            .edge_embed
            .forward(&f, f.constant(batch.se3_distance.clone()));
        let e = enc.edge_layer.forward(&f, e0, &batch);
        assert!(e.value().max_abs_diff(&e0.softplus().value()) < 1e-15);
        let h0 = enc.atom_embed.forward(&f, f.constant(batch.atoms.clone()));
        let h = enc.node_layers[0].forward(&f, h0, e, &batch);
        assert!(h.value().max_abs_diff(&h0.softplus().value()) < 1e-15);
    }

    #[test]
    fn zero_head_is_identity() {
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut Builder::new(&mut store, Streams::new(2)), "head", 6);
        zero(&mut store, &head.f_l1);
        zero(&mut store, &head.f_l2);
        let f = Forward::new(&store, Mode::Eval);
        let z = Tensor::matrix(2, 6, (0..12).map(|x| x as f64 * 0.3 - 1.0).collect());
        let out = head.forward(&f, f.constant(z.clone())).value();
        assert_eq!(out, z);
    }

    #[test]
    fn symmetric_atoms_get_identical_embeddings() {
        let (feat, batch) = cscl();
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            width: 8,
            node_layers: 2,
            ..Default::default()
        };
        let enc = Se3Encoder::new(&mut Builder::new(&mut store, Streams::new(3)), &cfg, &feat);
        for mode in [Mode::Train, Mode::Eval] {
            let f = Forward::new(&store, mode);
            let out = enc.forward(&f, &batch);
            let h = out.nodes.value();
            let diff = h
                .row_slice(0)
                .iter()
                .zip(h.row_slice(1))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{diff}");
            assert_eq!(out.graph.shape(), vec![1, 8]);
            assert!(out.graph.value().is_finite());
        }
    }
}
