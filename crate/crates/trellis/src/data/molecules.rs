//! Molecule dataset reader: one JSON object per line.
//!
//! Each object carries `"atoms"`, a list of N equal-length float lists,
//! and `"pairs"`, an N×N matrix of equal-length float lists with
//! `pairs[i][j] == pairs[j][i]`. Symmetry is validated on load since the
//! weave module's pair update assumes it.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::host::HostValue;

/// Parses every non-empty line of `text` as one molecule.
pub fn parse_molecules(text: &str) -> Result<Vec<HostValue>> {
    let mut molecules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        molecules.push(parse_molecule(line, i + 1)?);
    }
    Ok(molecules)
}

/// Parses a single JSON molecule, reporting errors against `line_no`.
pub fn parse_molecule(line: &str, line_no: usize) -> Result<HostValue> {
    let fail = |message: String| Error::Parse { line: line_no, message };
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| fail(format!("not JSON: {e}")))?;
    let molecule = HostValue::from_json(&v);
    validate(&molecule).map_err(fail)?;
    Ok(molecule)
}

/// Reads a molecule file, one JSON object per line.
pub fn load_molecules(path: &Path) -> Result<Vec<HostValue>> {
    parse_molecules(&fs::read_to_string(path)?)
}

/// Renders a molecule map as one line of JSON.
pub fn format_molecule(molecule: &HostValue) -> Result<String> {
    fn json(v: &HostValue) -> Result<serde_json::Value> {
        Ok(match v {
            HostValue::Float(f) => serde_json::json!(f),
            HostValue::Int(i) => serde_json::json!(i),
            HostValue::List(items) => {
                serde_json::Value::Array(items.iter().map(json).collect::<Result<_>>()?)
            }
            HostValue::Map(fields) => serde_json::Value::Object(
                fields.iter().map(|(k, v)| Ok((k.clone(), json(v)?))).collect::<Result<_>>()?,
            ),
            other => {
                return Err(Error::Input(format!("{} does not belong in a molecule", other.kind())))
            }
        })
    }
    Ok(json(molecule)?.to_string())
}

/// Generates a random molecule with symmetric pair features and a zero
/// diagonal.
pub fn random_molecule<R: Rng + ?Sized>(
    n_atoms: usize,
    atom_dim: usize,
    pair_dim: usize,
    rng: &mut R,
) -> HostValue {
    let feature = |rng: &mut R, dim: usize| -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let atoms: Vec<Vec<f64>> = (0..n_atoms).map(|_| feature(rng, atom_dim)).collect();
    let mut pairs = vec![vec![vec![0.0; pair_dim]; n_atoms]; n_atoms];
    for i in 0..n_atoms {
        for j in (i + 1)..n_atoms {
            let f = feature(rng, pair_dim);
            pairs[i][j] = f.clone();
            pairs[j][i] = f;
        }
    }
    let row = |r: &[f64]| HostValue::List(r.iter().map(|v| HostValue::Float(*v)).collect());
    HostValue::map(vec![
        ("atoms", HostValue::List(atoms.iter().map(|a| row(a)).collect())),
        (
            "pairs",
            HostValue::List(
                pairs
                    .iter()
                    .map(|r| HostValue::List(r.iter().map(|p| row(p)).collect()))
                    .collect(),
            ),
        ),
    ])
}

fn float_row(v: &HostValue, what: &str) -> std::result::Result<Vec<f64>, String> {
    let items = v.as_list().map_err(|_| format!("{what} should be a list of numbers"))?;
    items
        .iter()
        .map(|x| x.as_float().map_err(|_| format!("{what} should hold numbers only")))
        .collect()
}

fn validate(molecule: &HostValue) -> std::result::Result<(), String> {
    let atoms = molecule
        .field("atoms")
        .and_then(|v| v.as_list())
        .map_err(|_| "a molecule needs an \"atoms\" list".to_string())?;
    if atoms.is_empty() {
        return Err("a molecule needs at least one atom".to_string());
    }
    let n = atoms.len();
    let atom_dim = float_row(&atoms[0], "atoms[0]")?.len();
    for (i, a) in atoms.iter().enumerate() {
        let row = float_row(a, &format!("atoms[{i}]"))?;
        if row.len() != atom_dim {
            return Err(format!(
                "atoms[{i}] has {} features where atoms[0] has {atom_dim}",
                row.len()
            ));
        }
    }

    let pairs = molecule
        .field("pairs")
        .and_then(|v| v.as_list())
        .map_err(|_| "a molecule needs a \"pairs\" matrix".to_string())?;
    if pairs.len() != n {
        return Err(format!("pairs has {} rows for {n} atoms", pairs.len()));
    }
    let mut matrix: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut pair_dim: Option<usize> = None;
    for (i, row) in pairs.iter().enumerate() {
        let cells = row
            .as_list()
            .map_err(|_| format!("pairs[{i}] should be a list of feature lists"))?;
        if cells.len() != n {
            return Err(format!("pairs[{i}] has {} entries for {n} atoms", cells.len()));
        }
        let mut parsed = Vec::with_capacity(n);
        for (j, cell) in cells.iter().enumerate() {
            let f = float_row(cell, &format!("pairs[{i}][{j}]"))?;
            let dim = *pair_dim.get_or_insert(f.len());
            if f.len() != dim {
                return Err(format!(
                    "pairs[{i}][{j}] has {} features where pairs[0][0] has {dim}",
                    f.len()
                ));
            }
            parsed.push(f);
        }
        matrix.push(parsed);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if matrix[i][j] != matrix[j][i] {
                return Err(format!("pairs[{i}][{j}] differs from pairs[{j}][{i}]"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn loads_a_valid_molecule() {
        let line = r#"{"atoms": [[1.0, 2.0], [3.0, 4.0]],
                       "pairs": [[[0.0], [0.5]], [[0.5], [0.0]]]}"#
            .replace('\n', " ");
        let m = parse_molecule(&line, 1).unwrap();
        assert_eq!(m.field("atoms").unwrap().as_list().unwrap().len(), 2);
    }

    #[test]
    fn rejects_asymmetric_pairs() {
        let line = r#"{"atoms": [[1], [2]], "pairs": [[[0], [1]], [[2], [0]]]}"#;
        let err = parse_molecule(line, 4).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("differs"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_ragged_and_misshapen_input() {
        let bad = [
            r#"{"atoms": [], "pairs": []}"#,
            r#"{"atoms": [[1], [2, 3]], "pairs": [[[0], [0]], [[0], [0]]]}"#,
            r#"{"atoms": [[1], [2]], "pairs": [[[0], [0]]]}"#,
            r#"{"atoms": [[1], [2]], "pairs": [[[0], [0, 1]], [[0], [0]]]}"#,
            r#"{"pairs": [[[0]]]}"#,
            r#"not json"#,
        ];
        for line in bad {
            assert!(parse_molecule(line, 1).is_err(), "{line} should not load");
        }
    }

    #[test]
    fn random_molecules_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m = random_molecule(4, 3, 2, &mut rng);
        let line = format_molecule(&m).unwrap();
        let back = parse_molecule(&line, 1).unwrap();
        assert_eq!(format_molecule(&back).unwrap(), line);
    }

    #[test]
    fn blank_lines_are_skipped_and_numbered() {
        let text = "\n{\"atoms\": [[1]], \"pairs\": [[[0]]]}\n\nnot json\n";
        let err = parse_molecules(text).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
