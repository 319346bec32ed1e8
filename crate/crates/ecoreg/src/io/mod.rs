//! Data ingestion and persistence.
//!
//! All loaders take `impl Read` so the same entry points serve files,
//! in-memory buffers, and fuzzing. Loaders reject rather than coerce: a
//! malformed field is an error with its line number, never a silent
//! default.

mod container;
mod synth;

pub use container::{
    load_embedding, load_embedding_bytes, load_fit, load_fit_bytes, save_embedding, save_fit,
    EmbeddingArtifact,
};
pub use synth::{generate_synthetic, EffectSpec, SyntheticData, SyntheticSpec};

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{
    validate, OutcomeCounts, Record, RegionRow, RegionTable, RowKind, Schema, Value, VariableKind,
};
use crate::featurizer::FittedMaps;
use crate::inference::{subgroup_embedding, QueryError, SubgroupQuery};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("header does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("geography `{0}` has no crosswalk entry")]
    UnmappedGeography(String),
    #[error("allocation weights for `{geo}` sum to {sum}, expected 1")]
    BadAllocation { geo: String, sum: f64 },
    #[error("year {0} missing from the per-year record sets")]
    MissingYear(i32),
    #[error("exit-poll subgroup `{group}` matches no microdata in state `{state}`")]
    EmptySubgroup { state: String, group: String },
    #[error("bad subgroup query: {0}")]
    Query(#[from] QueryError),
    #[error(transparent)]
    Featurizer(#[from] crate::featurizer::FeaturizerError),
    #[error("unrecognized or incompatible container: {0}")]
    IncompatibleVersion(String),
    #[error("container content hash does not match; file corrupt or tampered")]
    HashMismatch,
    #[error("region `{0}` has no state mapping")]
    UnmappedState(String),
    #[error(transparent)]
    Outcome(#[from] crate::data_model::OutcomeError),
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64, IoError> {
    field.trim().parse::<f64>().map_err(|_| IoError::Parse {
        line,
        message: format!("malformed {what} `{field}`"),
    })
}

/// Read `records.csv`: header `region_id,weight,<var1>,<var2>,...` whose
/// variable columns must cover the schema exactly. Records are validated
/// against the schema before being returned.
pub fn read_records_csv<R: Read>(reader: R, schema: &Schema) -> Result<Vec<Record>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 2 || headers[0] != "region_id" || headers[1] != "weight" {
        return Err(IoError::SchemaMismatch(
            "header must start with `region_id,weight`".into(),
        ));
    }
    let var_cols = &headers[2..];
    for var in &schema.variables {
        if !var_cols.iter().any(|c| c == &var.name) {
            return Err(IoError::SchemaMismatch(format!(
                "schema variable `{}` missing from header",
                var.name
            )));
        }
    }
    for col in var_cols {
        if schema.variable(col).is_none() {
            return Err(IoError::SchemaMismatch(format!(
                "column `{col}` is not a schema variable"
            )));
        }
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row?;
        if row.len() != headers.len() {
            return Err(IoError::Parse {
                line,
                message: format!("expected {} fields, got {}", headers.len(), row.len()),
            });
        }
        let weight = parse_f64(&row[1], line, "weight")?;
        let mut values = BTreeMap::new();
        for (col, field) in var_cols.iter().zip(row.iter().skip(2)) {
            let var = schema.variable(col).expect("header checked");
            let value = match var.kind {
                VariableKind::Real => Value::Real(parse_f64(field, line, "numeric field")?),
                VariableKind::Categorical { .. } => Value::Level(field.trim().to_string()),
            };
            values.insert(col.clone(), value);
        }
        records.push(Record {
            region_id: row[0].trim().to_string(),
            weight,
            values,
        });
    }

    let violations = validate(schema, &records);
    if let Some(v) = violations.first() {
        return Err(IoError::Parse {
            line: v.record_index + 2,
            message: v.message.clone(),
        });
    }
    Ok(records)
}

pub fn load_records(path: &Path, schema: &Schema) -> Result<Vec<Record>, IoError> {
    read_records_csv(std::fs::File::open(path)?, schema)
}

/// Write records in the `records.csv` contract. Floats use the shortest
/// round-trip representation, so write-then-read is the identity.
pub fn write_records_csv<W: std::io::Write>(
    writer: W,
    records: &[Record],
    schema: &Schema,
) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["region_id".to_string(), "weight".to_string()];
    header.extend(schema.variables.iter().map(|v| v.name.clone()));
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![r.region_id.clone(), format!("{}", r.weight)];
        for var in &schema.variables {
            row.push(r.values.get(&var.name).map(|v| v.to_string()).unwrap_or_default());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Stream records grouped by consecutive `region_id` runs, holding only one
/// region's records in memory at a time. Input must be grouped by region.
pub fn stream_by_region<R: Read>(
    reader: R,
    schema: &Schema,
    mut f: impl FnMut(&str, Vec<Record>) -> Result<(), IoError>,
) -> Result<(), IoError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 2 || headers[0] != "region_id" || headers[1] != "weight" {
        return Err(IoError::SchemaMismatch(
            "header must start with `region_id,weight`".into(),
        ));
    }
    let var_cols: Vec<String> = headers[2..].to_vec();
    let mut current: Option<(String, Vec<Record>)> = None;
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let region = row[0].trim().to_string();
        let weight = parse_f64(&row[1], line, "weight")?;
        let mut values = BTreeMap::new();
        for (col, field) in var_cols.iter().zip(row.iter().skip(2)) {
            let var = schema
                .variable(col)
                .ok_or_else(|| IoError::SchemaMismatch(format!("unknown column `{col}`")))?;
            let value = match var.kind {
                VariableKind::Real => Value::Real(parse_f64(field, line, "numeric field")?),
                VariableKind::Categorical { .. } => Value::Level(field.trim().to_string()),
            };
            values.insert(col.clone(), value);
        }
        let record = Record {
            region_id: region.clone(),
            weight,
            values,
        };
        match &mut current {
            Some((id, batch)) if *id == region => batch.push(record),
            Some(_) => {
                let (id, batch) = current.take().unwrap();
                f(&id, batch)?;
                current = Some((region, vec![record]));
            }
            None => current = Some((region, vec![record])),
        }
    }
    if let Some((id, batch)) = current {
        f(&id, batch)?;
    }
    Ok(())
}

/// Read `outcomes.csv`: header `geo_id,count_A,count_B,count_other`.
pub fn read_outcomes_csv<R: Read>(reader: R) -> Result<Vec<(String, OutcomeCounts)>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers != ["geo_id", "count_A", "count_B", "count_other"] {
        return Err(IoError::SchemaMismatch(format!(
            "expected header geo_id,count_A,count_B,count_other; got {}",
            headers.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != 4 {
            return Err(IoError::Parse {
                line,
                message: format!("expected 4 fields, got {}", row.len()),
            });
        }
        let counts = [
            parse_f64(&row[1], line, "count_A")?,
            parse_f64(&row[2], line, "count_B")?,
            parse_f64(&row[3], line, "count_other")?,
        ];
        let counts = OutcomeCounts::new(counts).map_err(|e| IoError::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push((row[0].trim().to_string(), counts));
    }
    Ok(out)
}

pub fn load_outcomes(path: &Path) -> Result<Vec<(String, OutcomeCounts)>, IoError> {
    read_outcomes_csv(std::fs::File::open(path)?)
}

pub fn write_outcomes_csv<W: std::io::Write>(
    writer: W,
    outcomes: &[(String, OutcomeCounts)],
) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["geo_id", "count_A", "count_B", "count_other"])?;
    for (geo, y) in outcomes {
        wtr.write_record([
            geo.clone(),
            format!("{}", y.counts[0]),
            format!("{}", y.counts[1]),
            format!("{}", y.counts[2]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Source geography to analysis region mapping with allocation weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Crosswalk {
    /// geo_id -> [(region_id, allocation weight)]; weights per geo sum to 1.
    pub map: BTreeMap<String, Vec<(String, f64)>>,
}

impl Crosswalk {
    /// Identity crosswalk: every geography is its own region.
    pub fn identity<S: AsRef<str>>(ids: impl IntoIterator<Item = S>) -> Self {
        Crosswalk {
            map: ids
                .into_iter()
                .map(|id| {
                    let id = id.as_ref().to_string();
                    (id.clone(), vec![(id, 1.0)])
                })
                .collect(),
        }
    }
}

/// Read `crosswalk.csv`: header `geo_id,region_id,allocation`; allocation
/// weights per geography must sum to 1 within 1e-9.
pub fn read_crosswalk_csv<R: Read>(reader: R) -> Result<Crosswalk, IoError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers != ["geo_id", "region_id", "allocation"] {
        return Err(IoError::SchemaMismatch(format!(
            "expected header geo_id,region_id,allocation; got {}",
            headers.join(",")
        )));
    }
    let mut map: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let alloc = parse_f64(&row[2], line, "allocation")?;
        if !(alloc > 0.0 && alloc <= 1.0) {
            return Err(IoError::Parse {
                line,
                message: format!("allocation must be in (0, 1], got {alloc}"),
            });
        }
        map.entry(row[0].trim().to_string())
            .or_default()
            .push((row[1].trim().to_string(), alloc));
    }
    for (geo, targets) in &map {
        let sum: f64 = targets.iter().map(|(_, a)| a).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(IoError::BadAllocation {
                geo: geo.clone(),
                sum,
            });
        }
    }
    Ok(Crosswalk { map })
}

pub fn load_crosswalk(path: &Path) -> Result<Crosswalk, IoError> {
    read_crosswalk_csv(std::fs::File::open(path)?)
}

/// Allocate source-geography counts onto analysis regions. Global totals
/// are conserved because each geography's allocations sum to 1.
pub fn merge_outcomes(
    county_counts: &[(String, OutcomeCounts)],
    crosswalk: &Crosswalk,
) -> Result<RegionTable, IoError> {
    let mut region_counts: BTreeMap<String, [f64; 3]> = BTreeMap::new();
    for (geo, y) in county_counts {
        let targets = crosswalk
            .map
            .get(geo)
            .ok_or_else(|| IoError::UnmappedGeography(geo.clone()))?;
        for (region, alloc) in targets {
            let slot = region_counts.entry(region.clone()).or_default();
            for k in 0..3 {
                slot[k] += alloc * y.counts[k];
            }
        }
    }
    let rows = region_counts
        .into_iter()
        .map(|(region, counts)| {
            Ok(RegionRow {
                row_id: region.clone(),
                region_id: region,
                kind: RowKind::TrueOutcome,
                outcome: OutcomeCounts::new(counts)?,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(RegionTable::new(rows).expect("region ids unique by construction"))
}

/// Rescale the target year's person weights so each region's target-year
/// weight total matches the mean per-year total over the reference years.
/// Returns all years' records with the target year adjusted.
pub fn adjust_weights(
    records_by_year: &BTreeMap<i32, Vec<Record>>,
    reference_years: &[i32],
    target_year: i32,
) -> Result<Vec<Record>, IoError> {
    assert!(!reference_years.is_empty(), "need at least one reference year");
    if !records_by_year.contains_key(&target_year) {
        return Err(IoError::MissingYear(target_year));
    }
    for y in reference_years {
        if !records_by_year.contains_key(y) {
            return Err(IoError::MissingYear(*y));
        }
    }

    // region -> mean per-year weight total over reference years (a region
    // absent in a reference year contributes 0 for that year).
    let mut ref_totals: BTreeMap<String, f64> = BTreeMap::new();
    for y in reference_years {
        for r in &records_by_year[y] {
            *ref_totals.entry(r.region_id.clone()).or_default() += r.weight;
        }
    }
    let n_ref = reference_years.len() as f64;
    let mut target_totals: BTreeMap<String, f64> = BTreeMap::new();
    for r in &records_by_year[&target_year] {
        *target_totals.entry(r.region_id.clone()).or_default() += r.weight;
    }

    let mut out = Vec::new();
    for (year, records) in records_by_year {
        if *year != target_year && !reference_years.contains(year) {
            continue;
        }
        if *year == target_year {
            for r in records {
                let ref_mean = ref_totals.get(&r.region_id).copied().unwrap_or(0.0) / n_ref;
                let target_total = target_totals[&r.region_id];
                let factor = if ref_mean > 0.0 { ref_mean / target_total } else { 1.0 };
                let mut adjusted = r.clone();
                adjusted.weight *= factor;
                out.push(adjusted);
            }
        } else {
            out.extend(records.iter().cloned());
        }
    }
    Ok(out)
}

/// One state-level exit-poll observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPollRecord {
    pub state: String,
    pub group: String,
    /// Subgroup query in the clause syntax, e.g. `sex=w` or `age=[18,29]`.
    pub query: String,
    pub share_a: f64,
    pub share_b: f64,
    /// Fraction of the subgroup voting two-party; `None` when the source
    /// does not report it.
    pub participation: Option<f64>,
}

/// Read `exitpoll.csv`: header `state,group,query,share_A,share_B,participation`
/// with an empty participation field meaning unknown.
pub fn read_exitpoll_csv<R: Read>(reader: R) -> Result<Vec<ExitPollRecord>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers != ["state", "group", "query", "share_A", "share_B", "participation"] {
        return Err(IoError::SchemaMismatch(format!(
            "expected header state,group,query,share_A,share_B,participation; got {}",
            headers.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let share_a = parse_f64(&row[3], line, "share_A")?;
        let share_b = parse_f64(&row[4], line, "share_B")?;
        for (name, v) in [("share_A", share_a), ("share_B", share_b)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(IoError::Parse {
                    line,
                    message: format!("{name} must be in [0, 1], got {v}"),
                });
            }
        }
        if share_a + share_b > 1.0 + 1e-9 {
            return Err(IoError::Parse {
                line,
                message: format!("share_A + share_B = {} exceeds 1", share_a + share_b),
            });
        }
        let participation = {
            let field = row[5].trim();
            if field.is_empty() {
                None
            } else {
                let p = parse_f64(field, line, "participation")?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(IoError::Parse {
                        line,
                        message: format!("participation must be in [0, 1], got {p}"),
                    });
                }
                Some(p)
            }
        };
        out.push(ExitPollRecord {
            state: row[0].trim().to_string(),
            group: row[1].trim().to_string(),
            query: row[2].trim().to_string(),
            share_a,
            share_b,
            participation,
        });
    }
    Ok(out)
}

pub fn load_exitpoll(path: &Path) -> Result<Vec<ExitPollRecord>, IoError> {
    read_exitpoll_csv(std::fs::File::open(path)?)
}

/// One exit-poll pseudo-observation ready to append to the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRow {
    pub row_id: String,
    pub embedding: ndarray::Array1<f64>,
    pub weight_total: f64,
    pub outcome: OutcomeCounts,
}

/// Turn state-level exit-poll shares into pseudo-observations: the subgroup
/// embedding over the state's matching microdata, with pseudo-counts
/// W * participation * (share_A, share_B) and the remainder in class 3.
pub fn build_augmentation_rows(
    exit_polls: &[ExitPollRecord],
    region_records: &BTreeMap<String, Vec<Record>>,
    maps: &FittedMaps,
    region_to_state: &BTreeMap<String, String>,
    default_participation: f64,
) -> Result<Vec<AugmentationRow>, IoError> {
    // state -> concatenated records over its regions.
    let mut by_state: BTreeMap<&str, Vec<Record>> = BTreeMap::new();
    for (region, records) in region_records {
        let state = region_to_state
            .get(region)
            .ok_or_else(|| IoError::UnmappedState(region.clone()))?;
        by_state
            .entry(state.as_str())
            .or_default()
            .extend(records.iter().cloned());
    }

    let mut rows = Vec::new();
    for poll in exit_polls {
        let query = SubgroupQuery::parse(poll.group.clone(), &poll.query)?;
        query.validate(&maps.schema)?;
        let state_records = by_state.get(poll.state.as_str()).map_or(&[][..], |v| v);
        let embedded = subgroup_embedding(state_records, &query, maps)?;
        let Some((mu, w)) = embedded else {
            return Err(IoError::EmptySubgroup {
                state: poll.state.clone(),
                group: poll.group.clone(),
            });
        };
        let participation = poll.participation.unwrap_or(default_participation);
        let a = w * participation * poll.share_a;
        let b = w * participation * poll.share_b;
        let other = w - a - b;
        rows.push(AugmentationRow {
            row_id: format!("xp:{}:{}", poll.state, poll.group),
            embedding: mu,
            weight_total: w,
            outcome: OutcomeCounts::new([a, b, other])?,
        });
    }
    Ok(rows)
}
