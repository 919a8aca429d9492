use serde_json::Value;

use super::{atomic_number, CrystalStructure, Mat3, Vec3};
use crate::error::{Error, Result};

/// One line of a JSONL dataset: a structure plus the optional fields the
/// pipeline consumes.
#[derive(Debug, Clone)]
pub struct StructureRecord {
    pub id: Option<String>,
    pub structure: CrystalStructure,
    pub target: Option<f64>,
}

impl StructureRecord {
    /// Inverse of [`parse_json_record`]: one JSON object, species as
    /// atomic numbers.
    pub fn to_json(&self) -> Value {
        let s = &self.structure;
        let frac: Vec<[f64; 3]> = s.frac_coords().iter().map(|f| [f.x, f.y, f.z]).collect();
        let lattice: Vec<[f64; 3]> = (0..3).map(|m| s.lattice_vector(m).into()).collect();
        let mut v =
            serde_json::json!({"species": s.species(), "frac_coords": frac, "lattice": lattice});
        if let Some(id) = &self.id {
            v["id"] = id.clone().into();
        }
        if let Some(t) = self.target {
            v["target"] = t.into();
        }
        v
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidStructure(msg.into())
}

fn number(v: &Value, what: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| bad(format!("{what}: expected a number, found {v}")))
}

fn triple(v: &Value, what: &str) -> Result<[f64; 3]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| bad(format!("{what}: expected an array of 3 numbers")))?;
    Ok([
        number(&arr[0], what)?,
        number(&arr[1], what)?,
        number(&arr[2], what)?,
    ])
}

pub fn parse_json_record(text: &str) -> Result<StructureRecord> {
    let v: Value = serde_json::from_str(text)?;
    let obj = v.as_object().ok_or_else(|| bad("expected a JSON object"))?;
    let get = |k: &str| obj.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));

    let species = get("species")?
        .as_array()
        .ok_or_else(|| bad("`species` must be an array"))?
        .iter()
        .map(|s| match s {
            Value::String(sym) => {
                atomic_number(sym).ok_or_else(|| Error::UnknownElement(sym.clone()))
            }
            Value::Number(n) => n
                .as_u64()
                .filter(|&z| (1..=118).contains(&z))
                .map(|z| z as u8)
                .ok_or_else(|| bad(format!("atomic number {n} out of range 1..=118"))),
            other => Err(bad(format!(
                "species entry {other} is neither symbol nor number"
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;

    let frac = get("frac_coords")?
        .as_array()
        .ok_or_else(|| bad("`frac_coords` must be an array"))?
        .iter()
        .map(|r| triple(r, "frac_coords").map(Vec3::from))
        .collect::<Result<Vec<_>>>()?;
    if frac.len() != species.len() {
        return Err(bad(format!(
            "shape mismatch: {} species but {} frac_coords rows",
            species.len(),
            frac.len()
        )));
    }

    let rows = get("lattice")?
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| bad("shape mismatch: `lattice` must be 3×3"))?
        .iter()
        .map(|r| triple(r, "lattice"))
        .collect::<Result<Vec<_>>>()?;
    let lattice = Mat3::from_fn(|r, c| rows[r][c]);

    let target = match obj.get("target") {
        None | Some(Value::Null) => None,
        Some(t) => Some(number(t, "target")?),
    };
    let id = match obj.get("id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => Some(other.to_string()),
    };

    Ok(StructureRecord {
        id,
        structure: CrystalStructure::new(species, frac, lattice)?,
        target,
    })
}

/// Structure-only view; any `target` or `id` field is ignored.
pub fn parse_json_structure(text: &str) -> Result<CrystalStructure> {
    parse_json_record(text).map(|r| r.structure)
}
