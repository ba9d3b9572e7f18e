//! Long-format visit CSV plus a per-patient events CSV.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CohortDataset, ItemDef, PatientRecord, ScaleDefinition, Visit};
use crate::error::{Error, Result};
use crate::util::{csv_bytes, csv_writer, fmt_f64, write_atomic};

/// Column mapping for the two cohort files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSchema {
    pub id_column: String,
    pub time_column: String,
    /// `None` when the visits file carries no stage column.
    pub stage_column: Option<String>,
    pub event_time_column: String,
    pub event_cause_column: String,
    /// Item columns of the visits file; column name = item id.
    pub items: Vec<ItemDef>,
    /// Numeric covariate columns of the events file.
    pub covariates: Vec<String>,
    pub n_stages: u32,
    pub n_causes: u32,
}

impl Default for CohortSchema {
    fn default() -> Self {
        CohortSchema {
            id_column: "id".into(),
            time_column: "time".into(),
            stage_column: Some("stage".into()),
            event_time_column: "event_time".into(),
            event_cause_column: "event_cause".into(),
            items: Vec::new(),
            covariates: Vec::new(),
            n_stages: 2,
            n_causes: 1,
        }
    }
}

impl CohortSchema {
    /// Default column names with the items, covariates and counts of `data`.
    pub fn for_dataset(data: &CohortDataset) -> Self {
        let mut covariates: Vec<String> = data
            .patients
            .iter()
            .flat_map(|p| p.covariates.keys().cloned())
            .collect();
        covariates.sort();
        covariates.dedup();
        CohortSchema {
            items: data.scale.items.clone(),
            covariates,
            n_stages: data.n_stages,
            n_causes: data.n_causes,
            ..Default::default()
        }
    }
}

struct Columns {
    index: HashMap<String, usize>,
    path: PathBuf,
}

impl Columns {
    fn new(headers: &csv::StringRecord, path: &Path) -> Self {
        Columns {
            index: headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect(),
            path: path.to_path_buf(),
        }
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            row: 1,
            message: format!("missing column {name}"),
        })
    }
}

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn parse_f64(cell: &str, path: &Path, row: usize, column: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| parse_err(path, row, format!("column {column}: '{cell}' is not a finite number")))
}

fn parse_int(cell: &str, path: &Path, row: usize, column: &str) -> Result<i64> {
    cell.parse::<i64>()
        .map_err(|_| parse_err(path, row, format!("column {column}: '{cell}' is not an integer")))
}

/// Read and validate a cohort. Patients are ordered as in the events file;
/// visits are sorted by time within each patient.
pub fn load_cohort(visits_path: &Path, events_path: &Path, schema: &CohortSchema) -> Result<CohortDataset> {
    let scale = ScaleDefinition::new(schema.items.clone())?;
    if scale.is_empty() {
        return Err(Error::validation("schema declares no items"));
    }

    let mut events = reader(events_path)?;
    let headers = events.headers().map_err(|e| parse_err(events_path, 1, e.to_string()))?.clone();
    let cols = Columns::new(&headers, events_path);
    let id_col = cols.require(&schema.id_column)?;
    let time_col = cols.require(&schema.event_time_column)?;
    let cause_col = cols.require(&schema.event_cause_column)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| cols.require(c).map(|i| (c.clone(), i)))
        .collect::<Result<Vec<_>>>()?;

    let mut patients = Vec::new();
    let mut by_id = HashMap::new();
    for rec in events.records() {
        let rec = rec.map_err(|e| parse_err(events_path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(parse_err(events_path, row, "empty patient id"));
        }
        let event_time = parse_f64(rec.get(time_col).unwrap_or(""), events_path, row, &schema.event_time_column)?;
        let cause = parse_int(rec.get(cause_col).unwrap_or(""), events_path, row, &schema.event_cause_column)?;
        if cause < 0 || cause > schema.n_causes as i64 {
            return Err(Error::validation(format!(
                "patient {id}: event cause {cause} outside 0..={}",
                schema.n_causes
            )));
        }
        let mut covariates = BTreeMap::new();
        for (name, i) in &cov_cols {
            let cell = rec.get(*i).unwrap_or("");
            let v = if cell.is_empty() {
                None
            } else {
                Some(parse_f64(cell, events_path, row, name)?)
            };
            covariates.insert(name.clone(), v);
        }
        if by_id.insert(id.clone(), patients.len()).is_some() {
            return Err(Error::validation(format!("duplicate patient id {id} in events file")));
        }
        patients.push(PatientRecord {
            id,
            covariates,
            visits: Vec::new(),
            event_time,
            event_cause: cause as u32,
        });
    }

    let mut visits = reader(visits_path)?;
    let headers = visits.headers().map_err(|e| parse_err(visits_path, 1, e.to_string()))?.clone();
    let cols = Columns::new(&headers, visits_path);
    let id_col = cols.require(&schema.id_column)?;
    let time_col = cols.require(&schema.time_column)?;
    let stage_col = schema.stage_column.as_deref().map(|s| cols.require(s)).transpose()?;
    let item_cols = scale
        .items
        .iter()
        .map(|it| cols.require(&it.id))
        .collect::<Result<Vec<_>>>()?;

    for rec in visits.records() {
        let rec = rec.map_err(|e| parse_err(visits_path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec.get(id_col).unwrap_or("");
        let Some(&pi) = by_id.get(id) else {
            return Err(Error::validation(format!(
                "row {row}: patient {id} has visits but no events row"
            )));
        };
        let time = parse_f64(rec.get(time_col).unwrap_or(""), visits_path, row, &schema.time_column)?;
        let stage = match stage_col {
            Some(c) => {
                let cell = rec.get(c).unwrap_or("");
                if cell.is_empty() {
                    None
                } else {
                    let s = parse_int(cell, visits_path, row, "stage")?;
                    if s < 1 || s > schema.n_stages as i64 {
                        return Err(Error::validation(format!(
                            "patient {id}: stage {s} outside 1..={} at row {row}",
                            schema.n_stages
                        )));
                    }
                    Some(s as u32)
                }
            }
            None => None,
        };
        let mut responses = Vec::with_capacity(item_cols.len());
        for (item, &c) in scale.items.iter().zip(&item_cols) {
            let cell = rec.get(c).unwrap_or("");
            if cell.is_empty() {
                responses.push(None);
                continue;
            }
            let level = parse_int(cell, visits_path, row, &item.id)?;
            if level < 0 || level > item.max_level as i64 {
                return Err(Error::validation(format!(
                    "patient {id}: item {} level {level} outside 0..={} at row {row}",
                    item.id, item.max_level
                )));
            }
            responses.push(Some(level as u32));
        }
        patients[pi].visits.push(Visit { time, responses, stage });
    }
    for p in &mut patients {
        p.visits.sort_by(|a, b| a.time.total_cmp(&b.time));
    }

    let data = CohortDataset {
        scale,
        patients,
        n_stages: schema.n_stages,
        n_causes: schema.n_causes,
    };
    data.validate()?;
    Ok(data)
}

/// Canonical encodings of the two cohort files.
pub fn cohort_csv(data: &CohortDataset, schema: &CohortSchema) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut w = csv_writer();
    let mut header = vec![schema.id_column.clone(), schema.time_column.clone()];
    if let Some(s) = &schema.stage_column {
        header.push(s.clone());
    }
    header.extend(data.scale.items.iter().map(|i| i.id.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for p in &data.patients {
        for v in &p.visits {
            let mut row = vec![p.id.clone(), fmt_f64(v.time)];
            if schema.stage_column.is_some() {
                row.push(v.stage.map(|s| s.to_string()).unwrap_or_default());
            }
            row.extend(v.responses.iter().map(|r| r.map(|l| l.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let visits = csv_bytes(w)?;

    let mut w = csv_writer();
    let mut header = vec![
        schema.id_column.clone(),
        schema.event_time_column.clone(),
        schema.event_cause_column.clone(),
    ];
    header.extend(schema.covariates.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for p in &data.patients {
        let mut row = vec![p.id.clone(), fmt_f64(p.event_time), p.event_cause.to_string()];
        row.extend(
            schema
                .covariates
                .iter()
                .map(|c| p.covariate(c).map(fmt_f64).unwrap_or_default()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    let events = csv_bytes(w)?;
    Ok((visits, events))
}

/// Write the canonical visit and events files atomically.
pub fn save_cohort(data: &CohortDataset, schema: &CohortSchema, visits_path: &Path, events_path: &Path) -> Result<()> {
    let (visits, events) = cohort_csv(data, schema)?;
    write_atomic(visits_path, &visits)?;
    write_atomic(events_path, &events)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv encoding: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn schema() -> CohortSchema {
        CohortSchema {
            items: vec![
                ItemDef { id: "a".into(), max_level: 3 },
                ItemDef { id: "b".into(), max_level: 3 },
            ],
            covariates: vec!["sex".into()],
            n_stages: 3,
            n_causes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn minimal_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", "id,time,stage,a,b\np1,2,2,3,2\np1,0,1,1,0\np1,1.1,,2,\n");
        let e = write(dir.path(), "e.csv", "id,event_time,event_cause,sex\np1,2.5,1,1\n");
        let d = load_cohort(&v, &e, &schema()).unwrap();
        assert_eq!(d.patients.len(), 1);
        assert_eq!(d.n_visits(), 3);
        assert_eq!(d, toy_dataset());
    }

    #[test]
    fn level_out_of_range_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = schema();
        s.items[1].max_level = 4;
        let v = write(dir.path(), "v.csv", "id,time,stage,a,b\np1,0,1,1,5\n");
        let e = write(dir.path(), "e.csv", "id,event_time,event_cause,sex\np1,2.5,1,1\n");
        let err = load_cohort(&v, &e, &s).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("item b") && m.contains("p1")), "{err}");
    }

    #[test]
    fn malformed_cell_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", "id,time,stage,a,b\np1,0,1,1,0\np1,abc,1,1,0\n");
        let e = write(dir.path(), "e.csv", "id,event_time,event_cause,sex\np1,2.5,1,1\n");
        match load_cohort(&v, &e, &schema()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn event_before_last_visit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", "id,time,stage,a,b\np1,0,1,1,0\np1,3,1,1,0\n");
        let e = write(dir.path(), "e.csv", "id,event_time,event_cause,sex\np1,2.5,1,1\n");
        assert!(matches!(load_cohort(&v, &e, &schema()), Err(Error::Validation(_))));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let d = toy_dataset();
        let s = schema();
        let (vp, ep) = (dir.path().join("v.csv"), dir.path().join("e.csv"));
        save_cohort(&d, &s, &vp, &ep).unwrap();
        let first = (std::fs::read(&vp).unwrap(), std::fs::read(&ep).unwrap());
        let back = load_cohort(&vp, &ep, &s).unwrap();
        assert_eq!(back, d);
        save_cohort(&back, &s, &vp, &ep).unwrap();
        assert_eq!(first, (std::fs::read(&vp).unwrap(), std::fs::read(&ep).unwrap()));
    }
}
