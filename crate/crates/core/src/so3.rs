//! SO3-equivariant encoder.
//!
//! Node features are blocks of degree `l`, stored `(N, C·(2l+1))` with the
//! channel index outer. Two tensor-product layers couple neighbour features
//! with the harmonics of the edge direction, each path scaled per channel by
//! a weight computed from the edge's distance features. The second layer
//! keeps only degree-0 outputs, so everything downstream is invariant.

use std::rc::Rc;

use crate::batch::{Featurizer, GraphBatch};
use crate::config::ModelConfig;
use crate::harmonics::{path_allowed, real_cg};
use crate::nn::{BatchNorm, Builder, Forward, Linear};
use crate::se3::{mean_pool, NodeLayer, ProjectionHead};
use crate::tensor::Var;

/// One coupling `l_in ⊗ l_filter → l_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Path {
    pub l_in: usize,
    pub l_filter: usize,
    pub l_out: usize,
}

impl Path {
    fn new(l_in: usize, l_filter: usize, l_out: usize) -> Self {
        assert!(
            path_allowed(l_in, l_filter, l_out),
            "coupling {l_in} ⊗ {l_filter} → {l_out} violates the selection rule"
        );
        Self {
            l_in,
            l_filter,
            l_out,
        }
    }

    /// Per-edge `(2l_in+1) × (2l_out+1)` matrices `A[i, o] = Σ_f C[o, i, f] Y_f`.
    fn coefficients(&self, batch: &GraphBatch) -> Rc<[f64]> {
        let cg = real_cg(self.l_in, self.l_filter, self.l_out).expect("allowed path");
        let (n_out, n_in, n_f) = cg.dims();
        let y = &batch.harmonics[self.l_filter];
        let mut out = vec![0.0; batch.num_edges * n_in * n_out];
        for e in 0..batch.num_edges {
            let ye = &y[e * n_f..(e + 1) * n_f];
            let a = &mut out[e * n_in * n_out..(e + 1) * n_in * n_out];
            for i in 0..n_in {
                for o in 0..n_out {
                    a[i * n_out + o] = (0..n_f).map(|f| cg.at(o, i, f) * ye[f]).sum();
                }
            }
        }
        out.into()
    }
}

/// `h_i ← mean_{edges i→j} Σ_paths W_p(e_ij) · TP_p(h_j, Y_ij) + h_i`.
#[derive(Debug, Clone)]
pub struct TensorProductLayer {
    pub paths: Vec<Path>,
    /// Distance features to one weight per (path, channel).
    pub weights: Linear,
    pub channels: usize,
    pub out_degrees: Vec<usize>,
}

impl TensorProductLayer {
    fn new(
        b: &mut Builder<'_>,
        name: &str,
        paths: Vec<Path>,
        channels: usize,
        rbf: usize,
        out_degrees: Vec<usize>,
    ) -> Self {
        let weights = Linear::new(b, name, rbf, channels * paths.len(), true);
        Self {
            paths,
            weights,
            channels,
            out_degrees,
        }
    }

    /// `blocks[l]` is the degree-`l` input (`None` when absent); returns the
    /// output blocks for `out_degrees`, in that order.
    pub fn forward<'f>(
        &self,
        f: &'f Forward<'_>,
        blocks: &[Option<Var<'f>>],
        batch: &GraphBatch,
    ) -> Vec<Var<'f>> {
        let c = self.channels;
        let w = self
            .weights
            .forward(f, f.constant(batch.so3_distance.clone()));
        let inv_degree = f.constant(batch.inv_degree.clone());
        let mut gathered: Vec<Option<Var<'f>>> = vec![None; blocks.len()];
        self.out_degrees
            .iter()
            .map(|&l_out| {
                let mut acc: Option<Var<'f>> = None;
                for (p, path) in self
                    .paths
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.l_out == l_out)
                {
                    let hj = *gathered[path.l_in].get_or_insert_with(|| {
                        blocks[path.l_in]
                            .expect("input degree present")
                            .gather_rows(&batch.dst)
                    });
                    let msg = hj
                        .edge_bilinear(
                            &path.coefficients(batch),
                            c,
                            2 * path.l_in + 1,
                            2 * l_out + 1,
                        )
                        .channel_scale(&w.slice_cols(p * c, c), 2 * l_out + 1);
                    acc = Some(match acc {
                        Some(a) => a.add(&msg),
                        None => msg,
                    });
                }
                let agg = acc
                    .expect("every output degree has a path")
                    .scatter_add_rows(&batch.src, batch.num_nodes)
                    .mul_col(&inv_degree);
                match blocks.get(l_out).copied().flatten() {
                    Some(h) => agg.add(&h),
                    None => agg,
                }
            })
            .collect()
    }
}

pub struct So3Output<'f> {
    /// Layer-1 output, one block per degree `0..=l_max`.
    pub tp1: Vec<Var<'f>>,
    /// Layer-2 scalar output, `(N, C)`.
    pub tp2: Var<'f>,
    pub nodes: Var<'f>,
    pub graph: Var<'f>,
}

#[derive(Debug, Clone)]
pub struct So3Encoder {
    pub atom_embed: Linear,
    pub input_proj: Linear,
    pub tp1: TensorProductLayer,
    pub tp2: TensorProductLayer,
    pub readout_bn: BatchNorm,
    pub readout: Linear,
    pub edge_embed: Linear,
    pub node_layers: Vec<NodeLayer>,
    pub head: ProjectionHead,
    pub l_max: usize,
    pub channels: usize,
}

impl So3Encoder {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig, feat: &Featurizer) -> Self {
        let d = cfg.width;
        let c = cfg.so3_channels();
        let l_max = cfg.l_max;
        let rbf = feat.distance.len();
        let mut s = b.scope("so3");
        let paths1: Vec<Path> = (0..=l_max).map(|l| Path::new(0, l, l)).collect();
        let paths2: Vec<Path> = (0..=l_max).map(|l| Path::new(l, l, 0)).collect();
        Self {
            atom_embed: Linear::new(&mut s, "atom_embed", feat.atoms.dim(), d, true),
            input_proj: Linear::new(&mut s, "input_proj", d, c, true),
            tp1: TensorProductLayer::new(&mut s, "tp1", paths1, c, rbf, (0..=l_max).collect()),
            tp2: TensorProductLayer::new(&mut s, "tp2", paths2, c, rbf, vec![0]),
            readout_bn: BatchNorm::new(&mut s, "readout_bn", c),
            readout: Linear::new(&mut s, "readout", c, d, true),
            edge_embed: Linear::new(&mut s, "edge_embed", rbf, d, true),
            node_layers: (0..cfg.so3_node_layers)
                .map(|i| NodeLayer::new(&mut s, &format!("node{i}"), d))
                .collect(),
            head: ProjectionHead::new(&mut s, "head", d),
            l_max,
            channels: c,
        }
    }

    /// `softplus(f_l(softplus(BN(h²)))) + h⁰`.
    pub fn readout<'f>(&self, f: &'f Forward<'_>, h_scalar: Var<'f>, h2: Var<'f>) -> Var<'f> {
        let inner = self.readout_bn.forward(f, h2).softplus();
        self.readout.forward(f, inner).softplus().add(&h_scalar)
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, batch: &GraphBatch) -> So3Output<'f> {
        let h_scalar = self.atom_embed.forward(f, f.constant(batch.atoms.clone()));
        let h0 = self.input_proj.forward(f, h_scalar);
        let mut blocks: Vec<Option<Var<'f>>> = vec![None; self.l_max + 1];
        blocks[0] = Some(h0);
        let tp1 = self.tp1.forward(f, &blocks, batch);
        let blocks1: Vec<Option<Var<'f>>> = tp1.iter().copied().map(Some).collect();
        let tp2 = self.tp2.forward(f, &blocks1, batch)[0];
        let mut h = self.readout(f, h_scalar, tp2);
        let e = self
            .edge_embed
            .forward(f, f.constant(batch.so3_distance.clone()));
        for layer in &self.node_layers {
            h = layer.forward(f, h, e, batch);
        }
        let graph = self.head.forward(f, mean_pool(f, h, batch));
        So3Output {
            tp1,
            tp2,
            nodes: h,
            graph,
        }
    }
}
