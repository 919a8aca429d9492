//! Initial node, edge, and angle features.
//!
//! Atoms are looked up in an [`AtomTable`]; distances and angle cosines are
//! expanded on Gaussian radial basis functions.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Atomic numbers covered by the built-in one-hot table.
pub const ONE_HOT_MAX_Z: u8 = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum AtomTable {
    /// One-hot over Z = 1..=100.
    OneHot,
    /// Externally supplied rows, e.g. CGCNN's 92-dimensional embedding.
    Table {
        dim: usize,
        rows: BTreeMap<u8, Vec<f64>>,
    },
}

impl AtomTable {
    pub fn dim(&self) -> usize {
        match self {
            AtomTable::OneHot => ONE_HOT_MAX_Z as usize,
            AtomTable::Table { dim, .. } => *dim,
        }
    }

    /// Parse `{"<Z>": [f₁, …, f_dim], …}`; every row must have `dim` entries.
    pub fn from_json(text: &str, dim: usize) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Dataset("atom table must be a JSON object".into()))?;
        let mut rows = BTreeMap::new();
        for (k, row) in obj {
            let z: u8 = k
                .trim()
                .parse()
                .ok()
                .filter(|z| (1..=118).contains(z))
                .ok_or_else(|| {
                    Error::Dataset(format!("atom table key `{k}` is not an atomic number"))
                })?;
            let vals: Vec<f64> = row
                .as_array()
                .ok_or_else(|| Error::Dataset(format!("atom table row {z} is not an array")))?
                .iter()
                .map(|x| {
                    x.as_f64().ok_or_else(|| {
                        Error::Dataset(format!("atom table row {z}: non-numeric entry"))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != dim {
                return Err(Error::Dataset(format!(
                    "atom table row {z} has {} entries, declared dim is {dim}",
                    vals.len()
                )));
            }
            rows.insert(z, vals);
        }
        Ok(AtomTable::Table { dim, rows })
    }

    pub fn contains(&self, z: u8) -> bool {
        match self {
            AtomTable::OneHot => (1..=ONE_HOT_MAX_Z).contains(&z),
            AtomTable::Table { rows, .. } => rows.contains_key(&z),
        }
    }
}

/// Row lookup per atom, `(N, dim)`.
pub fn embed_atoms(species: &[u8], table: &AtomTable) -> Result<Tensor> {
    let dim = table.dim();
    let mut data = Vec::with_capacity(species.len() * dim);
    for &z in species {
        match table {
            AtomTable::OneHot => {
                if !table.contains(z) {
                    return Err(Error::UnknownSpecies(z));
                }
                let mut row = vec![0.0; dim];
                row[z as usize - 1] = 1.0;
                data.extend(row);
            }
            AtomTable::Table { rows, .. } => {
                data.extend_from_slice(rows.get(&z).ok_or(Error::UnknownSpecies(z))?);
            }
        }
    }
    Ok(Tensor::matrix(species.len(), dim, data))
}

/// Gaussian basis `exp(−γ (x − μ_k)²)` on ascending centres.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfSpec {
    centers: Vec<f64>,
    gamma: f64,
}

impl RbfSpec {
    pub fn new(centers: Vec<f64>, gamma: f64) -> Result<Self> {
        if centers.len() < 2 || centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(vec![
                "rbf centres must number at least 2 and be strictly ascending".into(),
            ]));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config(vec![format!(
                "rbf gamma must be positive, got {gamma}"
            )]));
        }
        Ok(Self { centers, gamma })
    }

    /// `count` centres evenly spaced on `[lo, hi]`, width matched to the
    /// spacing: `γ = 1 / (2Δμ²)`.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count < 2 || !(hi > lo) {
            return Err(Error::Config(vec![format!(
                "rbf needs count ≥ 2 and hi > lo (got {count} on [{lo}, {hi}])"
            )]));
        }
        let step = (hi - lo) / (count - 1) as f64;
        let centers = (0..count).map(|k| lo + step * k as f64).collect();
        Self::new(centers, 1.0 / (2.0 * step * step))
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Components in `(0, 1]`; far tails are floored at the smallest normal
    /// `f64` instead of underflowing to zero.
    pub fn expand(&self, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.expand_into(x, &mut out);
        out
    }

    pub fn expand_into(&self, x: f64, out: &mut Vec<f64>) {
        out.extend(self.centers.iter().map(|mu| {
            (-self.gamma * (x - mu) * (x - mu))
                .exp()
                .max(f64::MIN_POSITIVE)
        }));
    }
}

/// `(E, K)` distance features.
pub fn embed_edges(distances: &[f64], spec: &RbfSpec) -> Tensor {
    let mut data = Vec::with_capacity(distances.len() * spec.len());
    for &d in distances {
        spec.expand_into(d, &mut data);
    }
    Tensor::matrix(distances.len(), spec.len(), data)
}

/// Three `(E, K)` matrices, one per reference direction, on `cos θ`.
pub fn embed_angles(angles: &[[f64; 3]], spec: &RbfSpec) -> [Tensor; 3] {
    std::array::from_fn(|k| {
        let mut data = Vec::with_capacity(angles.len() * spec.len());
        for a in angles {
            spec.expand_into(a[k].cos(), &mut data);
        }
        Tensor::matrix(angles.len(), spec.len(), data)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn one_hot_lookup() {
        let t = embed_atoms(&[11, 11], &AtomTable::OneHot).unwrap();
        assert_eq!(t.shape(), &[2, 100]);
        assert_eq!(t.at(0, 10), 1.0);
        assert_eq!(t.row_slice(0).iter().sum::<f64>(), 1.0);
        assert_eq!(t.row_slice(0), t.row_slice(1));
        let e = embed_atoms(&[101], &AtomTable::OneHot).unwrap_err();
        assert!(e.to_string().contains("101"));
    }

    #[test]
    fn external_table_enforces_dim() {
        let t = AtomTable::from_json(r#"{"1": [0.5, 1.0], "8": [2.0, 3.0]}"#, 2).unwrap();
        let m = embed_atoms(&[8, 1], &t).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0, 0.5, 1.0]);
        assert!(matches!(
            embed_atoms(&[6], &t),
            Err(Error::UnknownSpecies(6))
        ));
        assert!(AtomTable::from_json(r#"{"1": [0.5]}"#, 2).is_err());
        assert!(AtomTable::from_json(r#"{"x": [0.5, 1]}"#, 2).is_err());
    }

    #[test]
    fn rbf_closed_forms() {
        let spec = RbfSpec::new(vec![1.0, 2.0], 1.0).unwrap();
        let v = spec.expand(0.0);
        assert!((v[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v[0] - 0.367879).abs() < 1e-6);
        assert_eq!(spec.expand(2.0)[1], 1.0);
        assert!(RbfSpec::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(RbfSpec::new(vec![1.0], 1.0).is_err());
        assert!(RbfSpec::new(vec![0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn rbf_decays_away_from_centre() {
        let spec = RbfSpec::uniform(0.0, 8.0, 64).unwrap();
        let mu = spec.centers()[20];
        let mut prev = 1.0;
        for k in 1..20 {
            let v = spec.expand(mu + 0.05 * k as f64)[20];
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        let step = 8.0 / 63.0;
        assert!((spec.gamma() - 1.0 / (2.0 * step * step)).abs() < 1e-9);
    }

    #[test]
    fn angle_features_peak_on_cosine() {
        let spec = RbfSpec::uniform(-1.0, 1.0, 5).unwrap(); // centres −1, −½, 0, ½, 1
        let [a, b, c] = embed_angles(&[[0.0, FRAC_PI_2, PI]], &spec);
        assert_eq!(a.at(0, 4), 1.0);
        assert!((b.at(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(c.at(0, 0), 1.0);
        let d = embed_edges(&[0.5, 1.0], &spec);
        assert_eq!(d.shape(), &[2, 5]);
        assert_eq!(d.at(1, 4), 1.0);
    }
}
