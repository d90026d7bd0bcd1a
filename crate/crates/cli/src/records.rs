//! Records to screen: JSONL of `{id, inputs}` objects, or CSV whose header
//! names the declared fields (an `id` column is optional).

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use slrc_core::screening::AbstractRecord;
use slrc_core::taskspec::TaskDeclaration;

use crate::CliError;

pub fn read_records(path: &Path, decl: &TaskDeclaration) -> Result<Vec<AbstractRecord>, CliError> {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if is_csv {
        read_csv(file, decl)
    } else {
        read_jsonl(std::io::BufReader::new(file))
    }
}

fn read_jsonl(reader: impl BufRead) -> Result<Vec<AbstractRecord>, CliError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AbstractRecord =
            serde_json::from_str(&line).map_err(|e| CliError::Failed(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

fn read_csv(reader: impl std::io::Read, decl: &TaskDeclaration) -> Result<Vec<AbstractRecord>, CliError> {
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers().map_err(|e| CliError::Failed(e.to_string()))?.clone();
    let fields: Vec<&str> = decl.record_fields().collect();
    let mut out = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let row = row.map_err(|e| CliError::Failed(e.to_string()))?;
        let mut inputs = BTreeMap::new();
        let mut id = None;
        for (name, value) in header.iter().zip(row.iter()) {
            if name == "id" {
                id = Some(value.to_string());
            } else if fields.contains(&name) {
                inputs.insert(name.to_string(), value.to_string());
            }
        }
        out.push(AbstractRecord {
            id: id.unwrap_or_else(|| format!("row-{}", i + 1)),
            inputs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use slrc_core::taskspec::UnsurePolicy;

    #[test]
    fn csv_maps_declared_columns_and_numbers_rows() {
        let text = "title,abstract\nT1,\"An RCT, adults\"\nT2,cohort\n";
        let decl = TaskDeclaration::screening(UnsurePolicy::RouteToReview);
        let got = read_csv(text.as_bytes(), &decl).unwrap();
        assert_eq!(got[0].id, "row-1");
        assert_eq!(got[0].inputs["abstract"], "An RCT, adults");
        assert!(!got[0].inputs.contains_key("title"));
        assert_eq!(got[1].id, "row-2");
    }

    #[test]
    fn jsonl_skips_blank_lines() {
        let text = "{\"id\":\"a\",\"inputs\":{\"abstract\":\"x\"}}\n\n{\"id\":\"b\",\"inputs\":{\"abstract\":\"y\"}}\n";
        let got = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(got.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }
}
