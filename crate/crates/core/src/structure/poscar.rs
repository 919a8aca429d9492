//! VASP-5 POSCAR reader and writer.

use std::fmt::Write as _;

use super::{atomic_number, symbol, CrystalStructure, Mat3, Vec3};
use crate::error::{Error, Result};

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::parse(
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }
}

fn floats(line_no: usize, line: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .take(n)
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                Error::parse(line_no, format!("cannot parse `{t}` as a number in {what}"))
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() < n {
        return Err(Error::parse(
            line_no,
            format!("expected {n} numbers in {what}, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

pub fn parse_poscar(text: &str) -> Result<CrystalStructure> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    lines.next("comment line")?;

    let (n, l) = lines.next("scale factor")?;
    let scale = floats(n, l, 1, "scale factor")?[0];
    if !(scale > 0.0) {
        return Err(Error::parse(
            n,
            format!("scale factor must be positive, got {scale}"),
        ));
    }

    let mut rows = [[0.0; 3]; 3];
    for row in &mut rows {
        let (n, l) = lines.next("lattice vector")?;
        let v = floats(n, l, 3, "lattice vector")?;
        *row = [v[0] * scale, v[1] * scale, v[2] * scale];
    }
    let lattice = Mat3::from_fn(|r, c| rows[r][c]);
    let det = lattice.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::parse(
            n + 3,
            format!("singular lattice (determinant {det:e})"),
        ));
    }

    let (sym_line, l) = lines.next("element symbols")?;
    let symbols: Vec<&str> = l.split_whitespace().collect();
    if symbols.is_empty() {
        return Err(Error::parse(sym_line, "missing element symbols"));
    }
    let zs: Vec<u8> = symbols
        .iter()
        .map(|s| {
            atomic_number(s)
                .ok_or_else(|| Error::parse(sym_line, format!("unknown element symbol `{s}`")))
        })
        .collect::<Result<_>>()?;

    let (count_line, l) = lines.next("element counts")?;
    let counts: Vec<usize> = l
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|_| {
                Error::parse(count_line, format!("cannot parse `{t}` as an atom count"))
            })
        })
        .collect::<Result<_>>()?;
    if counts.len() != zs.len() {
        return Err(Error::parse(
            count_line,
            format!("{} element symbols but {} counts", zs.len(), counts.len()),
        ));
    }
    let species: Vec<u8> = zs
        .iter()
        .zip(&counts)
        .flat_map(|(&z, &c)| std::iter::repeat_n(z, c))
        .collect();
    if species.is_empty() {
        return Err(Error::parse(count_line, "structure has no atoms"));
    }

    let (mut mode_line, mut mode) = lines.next("coordinate mode")?;
    if mode.trim_start().starts_with(['S', 's']) {
        (mode_line, mode) = lines.next("coordinate mode")?;
    }
    let cartesian = match mode.trim_start().chars().next() {
        Some('D' | 'd') => false,
        Some('C' | 'c' | 'K' | 'k') => true,
        _ => {
            return Err(Error::parse(
                mode_line,
                format!("expected `Direct` or `Cartesian`, found `{}`", mode.trim()),
            ))
        }
    };

    let mut coords = Vec::with_capacity(species.len());
    for _ in 0..species.len() {
        let (n, l) = lines.next("coordinate row")?;
        let v = floats(n, l, 3, "coordinate row")?;
        coords.push(Vec3::new(v[0], v[1], v[2]));
    }

    if cartesian {
        let cart: Vec<Vec3> = coords.iter().map(|c| c * scale).collect();
        CrystalStructure::from_cartesian(species, &cart, lattice)
    } else {
        CrystalStructure::new(species, coords, lattice)
    }
}

/// Direct-coordinate POSCAR with 12 significant digits. Consecutive atoms of
/// the same species share one symbol block.
pub fn serialize_poscar(s: &CrystalStructure, comment: &str) -> String {
    let mut out = String::new();
    let first_line = comment.lines().next().unwrap_or("");
    writeln!(out, "{first_line}").unwrap();
    writeln!(out, "1.0").unwrap();
    for m in 0..3 {
        let v = s.lattice_vector(m);
        writeln!(out, "  {:.11e} {:.11e} {:.11e}", v.x, v.y, v.z).unwrap();
    }
    let mut blocks: Vec<(u8, usize)> = Vec::new();
    for &z in s.species() {
        match blocks.last_mut() {
            Some((bz, c)) if *bz == z => *c += 1,
            _ => blocks.push((z, 1)),
        }
    }
    let syms: Vec<&str> = blocks.iter().map(|(z, _)| symbol(*z).unwrap()).collect();
    let counts: Vec<String> = blocks.iter().map(|(_, c)| c.to_string()).collect();
    writeln!(out, "  {}", syms.join(" ")).unwrap();
    writeln!(out, "  {}", counts.join(" ")).unwrap();
    writeln!(out, "Direct").unwrap();
    for f in s.frac_coords() {
        writeln!(out, "  {:.11e} {:.11e} {:.11e}", f.x, f.y, f.z).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const NACL: &str =
        "rock salt\n1.0\n5.64 0 0\n0 5.64 0\n0 0 5.64\nNa Cl\n1 1\nDirect\n0 0 0\n0.5 0.5 0.5\n";

    #[test]
    fn one_atom_direct() {
        let s = parse_poscar("x\n1.0\n1 0 0\n0 1 0\n0 0 1\nNa\n1\nDirect\n0 0 0\n").unwrap();
        assert_eq!(s.species(), &[11]);
        assert_eq!(s.frac_coords()[0], Vec3::zeros());
        assert_eq!(*s.lattice(), Mat3::identity());
    }

    #[test]
    fn cartesian_converted() {
        let s =
            parse_poscar("x\n1.0\n1 0 0\n0 1 0\n0 0 1\nNa\n1\nCartesian\n0.5 0.5 0.5\n").unwrap();
        assert_eq!(s.frac_coords()[0], Vec3::repeat(0.5));
    }

    #[test]
    fn direct_wrapped() {
        let s = parse_poscar("x\n1.0\n1 0 0\n0 1 0\n0 0 1\nNa\n1\nDirect\n1.25 -0.25 0\n").unwrap();
        assert_eq!(s.frac_coords()[0], Vec3::new(0.25, 0.75, 0.0));
    }

    #[test]
    fn scale_applies_to_lattice_and_cartesian() {
        let s = parse_poscar("x\n2.0\n1 0 0\n0 1 0\n0 0 1\nNa\n1\nCartesian\n0.5 0 0\n").unwrap();
        assert_eq!(*s.lattice(), Mat3::identity() * 2.0);
        assert!((s.frac_coords()[0] - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn selective_dynamics_and_multiple_species() {
        let text = "x\n1.0\n4 0 0\n0 4 0\n0 0 4\nNa Cl\n2 1\nSelective dynamics\nDirect\n0 0 0 T T T\n0.5 0 0 T T T\n0.5 0.5 0.5 F F F\n";
        let s = parse_poscar(text).unwrap();
        assert_eq!(s.species(), &[11, 11, 17]);
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let e = parse_poscar("x\n-1.0\n1 0 0\n0 1 0\n0 0 1\nNa\n1\nDirect\n0 0 0\n").unwrap_err();
        assert_eq!(line_of(e), 2);
        let e = parse_poscar("x\n1.0\n1 0 0\n0 1 0\n0 0 1\nXx\n1\nDirect\n0 0 0\n").unwrap_err();
        assert!(e.to_string().contains("Xx"));
        assert_eq!(line_of(e), 6);
        let e = parse_poscar("x\n1.0\n1 0 0\n2 0 0\n0 0 1\nNa\n1\nDirect\n0 0 0\n").unwrap_err();
        assert!(e.to_string().contains("singular"));
        let e = parse_poscar("x\n1.0\n1 0 0\n0 1 0\n0 0 1\nNa\n2\nDirect\n0 0 0\n").unwrap_err();
        assert_eq!(line_of(e), 10);
        let e = parse_poscar("x\n1.0\n1 0 0\n0 1 0\n0 0 1\nNa Cl\n2\nDirect\n0 0 0\n").unwrap_err();
        assert_eq!(line_of(e), 7);
        let e = parse_poscar("x\n1.0\n1 0 0\n0 1\n").unwrap_err();
        assert_eq!(line_of(e), 4);
    }

    #[test]
    fn serialize_groups_species() {
        let s = parse_poscar(NACL).unwrap();
        let text = serialize_poscar(&s, "rock salt");
        assert!(text.contains("Na Cl"));
        assert!(text.contains("Direct"));
        let back = parse_poscar(&text).unwrap();
        assert_eq!(back.species(), s.species());
    }
}
