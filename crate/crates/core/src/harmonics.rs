//! Real spherical harmonics up to degree 3 and real-basis Clebsch–Gordan
//! coefficients.
//!
//! Components of degree `l` are ordered `m = −l..=l`; degree 1 is therefore
//! `(y, z, x)` up to the common factor `√(3/4π)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::Complex;

use crate::error::{Error, Result};
use crate::structure::Vec3;

pub const MAX_DEGREE: usize = 3;

/// Harmonics of `v / ‖v‖` for degrees `0..=l_max`, one vector per degree.
pub fn spherical_harmonics(v: &Vec3, l_max: usize) -> Result<Vec<Vec<f64>>> {
    assert!(l_max <= MAX_DEGREE, "degree {l_max} exceeds {MAX_DEGREE}");
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    let (x, y, z) = (v.x / n, v.y / n, v.z / n);
    let mut out = Vec::with_capacity(l_max + 1);
    out.push(vec![0.5 / PI.sqrt()]);
    if l_max >= 1 {
        let c = (3.0 / (4.0 * PI)).sqrt();
        out.push(vec![c * y, c * z, c * x]);
    }
    if l_max >= 2 {
        let c1 = 0.5 * (15.0 / PI).sqrt();
        let c0 = 0.25 * (5.0 / PI).sqrt();
        let c2 = 0.25 * (15.0 / PI).sqrt();
        out.push(vec![
            c1 * x * y,
            c1 * y * z,
            c0 * (3.0 * z * z - 1.0),
            c1 * x * z,
            c2 * (x * x - y * y),
        ]);
    }
    if l_max >= 3 {
        let a = 0.25 * (35.0 / (2.0 * PI)).sqrt();
        let b = 0.5 * (105.0 / PI).sqrt();
        let c = 0.25 * (21.0 / (2.0 * PI)).sqrt();
        let d = 0.25 * (7.0 / PI).sqrt();
        let e = 0.25 * (105.0 / PI).sqrt();
        out.push(vec![
            a * y * (3.0 * x * x - y * y),
            b * x * y * z,
            c * y * (5.0 * z * z - 1.0),
            d * (5.0 * z * z * z - 3.0 * z),
            c * x * (5.0 * z * z - 1.0),
            e * z * (x * x - y * y),
            a * x * (x * x - 3.0 * y * y),
        ]);
    }
    Ok(out)
}

/// Whether `l_out` can appear in `l_in ⊗ l_filter`.
pub fn path_allowed(l_in: usize, l_filter: usize, l_out: usize) -> bool {
    l_in.abs_diff(l_filter) <= l_out && l_out <= l_in + l_filter
}

fn factorial(n: i64) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Condon–Shortley Clebsch–Gordan coefficient `⟨j1 m1 j2 m2 | j3 m3⟩` for
/// integer angular momenta, by Racah's formula.
pub fn clebsch_gordan_complex(j1: i64, m1: i64, j2: i64, m2: i64, j3: i64, m3: i64) -> f64 {
    if m1 + m2 != m3 || m1.abs() > j1 || m2.abs() > j2 || m3.abs() > j3 {
        return 0.0;
    }
    if j3 < (j1 - j2).abs() || j3 > j1 + j2 {
        return 0.0;
    }
    let pre = ((2 * j3 + 1) as f64
        * factorial(j3 + j1 - j2)
        * factorial(j3 - j1 + j2)
        * factorial(j1 + j2 - j3)
        / factorial(j1 + j2 + j3 + 1))
    .sqrt();
    let norm = (factorial(j3 + m3)
        * factorial(j3 - m3)
        * factorial(j1 - m1)
        * factorial(j1 + m1)
        * factorial(j2 - m2)
        * factorial(j2 + m2))
    .sqrt();
    let mut sum = 0.0;
    for k in 0..=(j1 + j2 - j3) {
        let den = [
            j1 + j2 - j3 - k,
            j1 - m1 - k,
            j2 + m2 - k,
            j3 - j2 + m1 + k,
            j3 - j1 - m2 + k,
        ];
        if den.iter().any(|&d| d < 0) {
            continue;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / (factorial(k) * den.iter().map(|&d| factorial(d)).product::<f64>());
    }
    pre * norm * sum
}

/// Row `a` (real index) maps complex components to the real one:
/// `Y_real[a] = Σ_m U[a, m] Y_complex[m]`.
fn real_basis(l: i64) -> Vec<Complex<f64>> {
    let n = (2 * l + 1) as usize;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut u = vec![Complex::new(0.0, 0.0); n * n];
    let idx = |m: i64| (m + l) as usize;
    for m in -l..=l {
        let r = idx(m);
        let parity = if m.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        match m.cmp(&0) {
            std::cmp::Ordering::Equal => u[r * n + idx(0)] = Complex::new(1.0, 0.0),
            std::cmp::Ordering::Greater => {
                u[r * n + idx(m)] = Complex::new(parity * s, 0.0);
                u[r * n + idx(-m)] = Complex::new(s, 0.0);
            }
            std::cmp::Ordering::Less => {
                u[r * n + idx(-m)] = Complex::new(0.0, -parity * s);
                u[r * n + idx(m)] = Complex::new(0.0, s);
            }
        }
    }
    u
}

/// Coupling tensor for one `(l1 ⊗ l2 → l3)` path in the real basis, laid out
/// `[c][a][b]` with shape `(2l3+1, 2l1+1, 2l2+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealCg {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub data: Vec<f64>,
}

impl RealCg {
    pub fn dims(&self) -> (usize, usize, usize) {
        (2 * self.l3 + 1, 2 * self.l1 + 1, 2 * self.l2 + 1)
    }

    pub fn at(&self, c: usize, a: usize, b: usize) -> f64 {
        let (_, n1, n2) = self.dims();
        self.data[(c * n1 + a) * n2 + b]
    }
}

fn compute_real_cg(l1: usize, l2: usize, l3: usize) -> RealCg {
    let (j1, j2, j3) = (l1 as i64, l2 as i64, l3 as i64);
    let (n1, n2, n3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    let (u1, u2, u3) = (real_basis(j1), real_basis(j2), real_basis(j3));
    let mut out = vec![Complex::new(0.0, 0.0); n3 * n1 * n2];
    for m1 in -j1..=j1 {
        for m2 in -j2..=j2 {
            let m3 = m1 + m2;
            if m3.abs() > j3 {
                continue;
            }
            let cg = clebsch_gordan_complex(j1, m1, j2, m2, j3, m3);
            if cg == 0.0 {
                continue;
            }
            let (i1, i2, i3) = ((m1 + j1) as usize, (m2 + j2) as usize, (m3 + j3) as usize);
            for c in 0..n3 {
                let w3 = u3[c * n3 + i3];
                if w3.norm_sqr() == 0.0 {
                    continue;
                }
                for a in 0..n1 {
                    let w1 = u1[a * n1 + i1].conj();
                    if w1.norm_sqr() == 0.0 {
                        continue;
                    }
                    for b in 0..n2 {
                        let w2 = u2[b * n2 + i2].conj();
                        out[(c * n1 + a) * n2 + b] += w3 * w1 * w2 * cg;
                    }
                }
            }
        }
    }
    // The result is purely real or purely imaginary depending on the parity
    // of l1 + l2 + l3; either part is a valid real intertwiner.
    let re: f64 = out.iter().map(|z| z.re.abs()).sum();
    let im: f64 = out.iter().map(|z| z.im.abs()).sum();
    let data = out
        .iter()
        .map(|z| if re >= im { z.re } else { z.im })
        .collect();
    RealCg { l1, l2, l3, data }
}

fn table() -> &'static HashMap<(usize, usize, usize), RealCg> {
    static TABLE: OnceLock<HashMap<(usize, usize, usize), RealCg>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = HashMap::new();
        for l1 in 0..=MAX_DEGREE {
            for l2 in 0..=MAX_DEGREE {
                for l3 in 0..=MAX_DEGREE {
                    if path_allowed(l1, l2, l3) {
                        t.insert((l1, l2, l3), compute_real_cg(l1, l2, l3));
                    }
                }
            }
        }
        t
    })
}

/// Cached real coupling tensor; `None` when the selection rule forbids the path.
pub fn real_cg(l1: usize, l2: usize, l3: usize) -> Option<&'static RealCg> {
    table().get(&(l1, l2, l3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, Streams};
    use crate::structure::random_rotation;
    use nalgebra::{DMatrix, Matrix3};
    use rand::Rng;

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            if v.norm() > 0.1 {
                return v.normalize();
            }
        }
    }

    /// Degree-l rotation matrix fitted by least squares from harmonics sampled
    /// at random points: Y(R v) = D Y(v).
    fn wigner_fit(r: &Matrix3<f64>, l: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let n = 2 * l + 1;
        let samples = 6 * n;
        let mut a = DMatrix::zeros(samples, n);
        let mut b = DMatrix::zeros(samples, n);
        for s in 0..samples {
            let v = random_unit(rng);
            let y = &spherical_harmonics(&v, l).unwrap()[l];
            let yr = &spherical_harmonics(&(r * v), l).unwrap()[l];
            for k in 0..n {
                a[(s, k)] = y[k];
                b[(s, k)] = yr[k];
            }
        }
        // A Dᵀ = B
        let dt = a.svd(true, true).solve(&b, 1e-14).unwrap();
        dt.transpose()
    }

    #[test]
    fn closed_form_values() {
        let y = spherical_harmonics(&Vec3::new(0.0, 0.0, 2.0), 1).unwrap();
        assert!((y[0][0] - 0.2820948).abs() < 1e-7);
        assert_eq!(y[1][0], 0.0);
        assert!((y[1][1] - 0.4886025).abs() < 1e-7);
        assert_eq!(y[1][2], 0.0);
        assert!(matches!(
            spherical_harmonics(&Vec3::zeros(), 2),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn harmonics_are_orthonormal_on_the_sphere() {
        // Lebedev-free check: Monte Carlo would be too loose, so integrate on
        // a product Gauss grid in (cos θ, φ).
        let nt = 24;
        let np = 48;
        let (nodes, weights) = gauss_legendre(nt);
        let mut gram = vec![vec![0.0; 16]; 16];
        for (t, wt) in nodes.iter().zip(&weights) {
            let st = (1.0 - t * t).sqrt();
            for p in 0..np {
                let phi = 2.0 * PI * p as f64 / np as f64;
                let v = Vec3::new(st * phi.cos(), st * phi.sin(), *t);
                let flat: Vec<f64> = spherical_harmonics(&v, 3).unwrap().concat();
                let w = wt * 2.0 * PI / np as f64;
                for i in 0..16 {
                    for j in 0..16 {
                        gram[i][j] += w * flat[i] * flat[j];
                    }
                }
            }
        }
        for (i, row) in gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-10, "gram[{i}][{j}] = {g}");
            }
        }
    }

    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    let (mut p0, mut p1) = (1.0, z);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                    x[i] = z;
                    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                    break;
                }
            }
        }
        (x, w)
    }

    #[test]
    fn degree_one_rotates_by_permuted_matrix() {
        let streams = Streams::new(11);
        let mut rng = streams.get(Stream::Check, 0);
        // P maps (x, y, z) to (y, z, x)
        let p = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let d1 = p * r * p.transpose();
            let v = random_unit(&mut rng);
            let y = Vec3::from_column_slice(&spherical_harmonics(&v, 1).unwrap()[1]);
            let yr = Vec3::from_column_slice(&spherical_harmonics(&(r * v), 1).unwrap()[1]);
            assert!((d1 * y - yr).amax() < 1e-10);
        }
    }

    #[test]
    fn higher_degrees_rotate_linearly() {
        let mut rng = Streams::new(12).get(Stream::Check, 0);
        for l in 2..=3 {
            let r = random_rotation(&mut rng);
            let d = wigner_fit(&r, l, &mut rng);
            // orthogonal, and predicts fresh points
            let eye = DMatrix::<f64>::identity(2 * l + 1, 2 * l + 1);
            assert!((&d * d.transpose() - eye).amax() < 1e-10);
            for _ in 0..5 {
                let v = random_unit(&mut rng);
                let y = DMatrix::from_column_slice(
                    2 * l + 1,
                    1,
                    &spherical_harmonics(&v, l).unwrap()[l],
                );
                let yr = DMatrix::from_column_slice(
                    2 * l + 1,
                    1,
                    &spherical_harmonics(&(r * v), l).unwrap()[l],
                );
                assert!((&d * y - yr).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn complex_coefficients_match_tables() {
        // ⟨1 1 1 −1 | 0 0⟩ = 1/√3, ⟨1 0 1 0 | 2 0⟩ = √(2/3), ⟨1 1 1 0 | 1 1⟩ = 1/√2
        assert!((clebsch_gordan_complex(1, 1, 1, -1, 0, 0) - 1.0 / 3f64.sqrt()).abs() < 1e-14);
        assert!((clebsch_gordan_complex(1, 0, 1, 0, 2, 0) - (2.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((clebsch_gordan_complex(1, 1, 1, 0, 1, 1) - 0.5f64.sqrt()).abs() < 1e-14);
        assert_eq!(clebsch_gordan_complex(1, 0, 1, 0, 1, 0), 0.0);
        assert_eq!(clebsch_gordan_complex(0, 0, 0, 0, 0, 0), 1.0);
    }

    #[test]
    fn selection_rules() {
        assert!(path_allowed(1, 1, 0));
        assert!(path_allowed(2, 1, 3));
        assert!(!path_allowed(2, 0, 1));
        assert!(!path_allowed(1, 1, 3));
        assert!(real_cg(0, 2, 1).is_none());
        assert_eq!(real_cg(0, 0, 0).unwrap().data, vec![1.0]);
    }

    #[test]
    fn real_coefficients_satisfy_orthogonality() {
        for (&(l1, l2, l3), cg) in table() {
            let (n3, n1, n2) = cg.dims();
            for c in 0..n3 {
                for c2 in 0..n3 {
                    let s: f64 = (0..n1)
                        .flat_map(|a| (0..n2).map(move |b| (a, b)))
                        .map(|(a, b)| cg.at(c, a, b) * cg.at(c2, a, b))
                        .sum();
                    let expect = if c == c2 { 1.0 } else { 0.0 };
                    assert!(
                        (s - expect).abs() < 1e-12,
                        "({l1},{l2},{l3}) [{c},{c2}] = {s}"
                    );
                }
            }
        }
    }

    #[test]
    fn real_coefficients_are_equivariant() {
        let mut rng = Streams::new(13).get(Stream::Check, 1);
        let r = random_rotation(&mut rng);
        let d: Vec<DMatrix<f64>> = (0..=MAX_DEGREE)
            .map(|l| wigner_fit(&r, l, &mut rng))
            .collect();
        for (&(l1, l2, l3), cg) in table() {
            let (n3, n1, n2) = cg.dims();
            let x1: Vec<f64> = (0..n1).map(|_| rng.random::<f64>() - 0.5).collect();
            let x2: Vec<f64> = (0..n2).map(|_| rng.random::<f64>() - 0.5).collect();
            let couple = |x1: &[f64], x2: &[f64]| {
                DMatrix::from_fn(n3, 1, |c, _| {
                    let mut s = 0.0;
                    for a in 0..n1 {
                        for b in 0..n2 {
                            s += cg.at(c, a, b) * x1[a] * x2[b];
                        }
                    }
                    s
                })
            };
            let rx1 = &d[l1] * DMatrix::from_column_slice(n1, 1, &x1);
            let rx2 = &d[l2] * DMatrix::from_column_slice(n2, 1, &x2);
            let lhs = couple(rx1.as_slice(), rx2.as_slice());
            let rhs = &d[l3] * couple(&x1, &x2);
            assert!(
                (lhs - rhs).amax() < 1e-10,
                "path ({l1},{l2},{l3}) not equivariant"
            );
        }
    }
}
