//! Core domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Kind of a declared variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableKind {
    Real,
    Categorical {
        levels: Vec<String>,
        reference: String,
    },
}

/// Declaration of a single variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
}

impl VariableSpec {
    pub fn real(name: impl Into<String>) -> Self {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Real,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
        reference: impl Into<String>,
    ) -> Self {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Categorical {
                levels: levels.into_iter().map(Into::into).collect(),
                reference: reference.into(),
            },
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self.kind, VariableKind::Real)
    }

    /// Non-reference levels in declared order; empty for real variables.
    pub fn non_reference_levels(&self) -> Vec<&str> {
        match &self.kind {
            VariableKind::Real => Vec::new(),
            VariableKind::Categorical { levels, reference } => levels
                .iter()
                .filter(|l| *l != reference)
                .map(String::as_str)
                .collect(),
        }
    }
}

/// Declaration of every variable plus the interaction pairs to featurize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub variables: Vec<VariableSpec>,
    #[serde(default)]
    pub interactions: Vec<(String, String)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate variable name `{0}`")]
    DuplicateVariable(String),
    #[error("interaction references unknown variable `{0}`")]
    UnknownInteractionVariable(String),
    #[error("interaction pair (`{0}`, `{0}`) must reference two distinct variables")]
    SelfInteraction(String),
    #[error("categorical variable `{0}` needs at least 2 levels")]
    TooFewLevels(String),
    #[error("categorical variable `{name}` has duplicate level `{level}`")]
    DuplicateLevel { name: String, level: String },
    #[error("reference level `{reference}` of `{name}` is not among its levels")]
    BadReference { name: String, reference: String },
}

impl Schema {
    pub fn new(
        variables: Vec<VariableSpec>,
        interactions: Vec<(String, String)>,
    ) -> Result<Self, SchemaError> {
        let schema = Schema {
            variables,
            interactions,
        };
        schema.check()?;
        Ok(schema)
    }

    /// Validate the schema invariants.
    pub fn check(&self) -> Result<(), SchemaError> {
        let mut seen = std::collections::BTreeSet::new();
        for var in &self.variables {
            if !seen.insert(var.name.as_str()) {
                return Err(SchemaError::DuplicateVariable(var.name.clone()));
            }
            if let VariableKind::Categorical { levels, reference } = &var.kind {
                if levels.len() < 2 {
                    return Err(SchemaError::TooFewLevels(var.name.clone()));
                }
                let mut level_seen = std::collections::BTreeSet::new();
                for level in levels {
                    if !level_seen.insert(level.as_str()) {
                        return Err(SchemaError::DuplicateLevel {
                            name: var.name.clone(),
                            level: level.clone(),
                        });
                    }
                }
                if !levels.contains(reference) {
                    return Err(SchemaError::BadReference {
                        name: var.name.clone(),
                        reference: reference.clone(),
                    });
                }
            }
        }
        for (a, b) in &self.interactions {
            if a == b {
                return Err(SchemaError::SelfInteraction(a.clone()));
            }
            for name in [a, b] {
                if !seen.contains(name.as_str()) {
                    return Err(SchemaError::UnknownInteractionVariable(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }
}

/// Value of one variable for one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Level(String),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            Value::Level(_) => None,
        }
    }

    pub fn as_level(&self) -> Option<&str> {
        match self {
            Value::Level(l) => Some(l),
            Value::Real(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(x) => write!(f, "{x}"),
            Value::Level(l) => write!(f, "{l}"),
        }
    }
}

/// One weighted individual observation from the survey microdata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub region_id: String,
    /// Survey person weight: number of population members this row represents.
    pub weight: f64,
    pub values: BTreeMap<String, Value>,
}

impl Record {
    pub fn value(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }
}

/// Per-row 3-vector of outcome counts: [candidate A, candidate B, other/non-vote].
///
/// Counts are reals, not integers: exit-poll augmentation rows carry
/// fractional pseudo-counts, and multinomial deviance is well-defined for
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub counts: [f64; 3],
}

#[derive(Debug, Error, PartialEq)]
pub enum OutcomeError {
    #[error("outcome counts must be finite and nonnegative, got {0:?}")]
    InvalidCounts([f64; 3]),
    #[error("outcome counts must have positive total, got {0:?}")]
    ZeroTotal([f64; 3]),
}

impl OutcomeCounts {
    pub fn new(counts: [f64; 3]) -> Result<Self, OutcomeError> {
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(OutcomeError::InvalidCounts(counts));
        }
        if counts.iter().sum::<f64>() <= 0.0 {
            return Err(OutcomeError::ZeroTotal(counts));
        }
        Ok(OutcomeCounts { counts })
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Empirical shares y / total.
    pub fn shares(&self) -> [f64; 3] {
        let t = self.total();
        [
            self.counts[0] / t,
            self.counts[1] / t,
            self.counts[2] / t,
        ]
    }
}

/// Whether a training row is a real regional outcome or an exit-poll
/// pseudo-observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    TrueOutcome,
    ExitPollSubgroup,
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKind::TrueOutcome => write!(f, "true_outcome"),
            RowKind::ExitPollSubgroup => write!(f, "exit_poll_subgroup"),
        }
    }
}

/// One labeled training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub row_id: String,
    pub region_id: String,
    pub kind: RowKind,
    pub outcome: OutcomeCounts,
}

/// Outcome counts for every training row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionTable {
    pub rows: Vec<RegionRow>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RegionTableError {
    #[error("duplicate row id `{0}`")]
    DuplicateRowId(String),
}

impl RegionTable {
    pub fn new(rows: Vec<RegionRow>) -> Result<Self, RegionTableError> {
        let mut seen = std::collections::BTreeSet::new();
        for row in &rows {
            if !seen.insert(row.row_id.as_str()) {
                return Err(RegionTableError::DuplicateRowId(row.row_id.clone()));
            }
        }
        Ok(RegionTable { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One schema-conformance violation found in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Index of the offending record in the input order.
    pub record_index: usize,
    pub message: String,
}

/// Check every record against the schema.
///
/// Violations are data, not failures: the returned list is empty iff the
/// dataset is conformant, and its order follows record order.
pub fn validate(schema: &Schema, records: &[Record]) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (idx, record) in records.iter().enumerate() {
        if !(record.weight > 0.0 && record.weight.is_finite()) {
            violations.push(Violation {
                record_index: idx,
                message: format!("weight must be positive and finite, got {}", record.weight),
            });
        }
        for var in &schema.variables {
            match record.values.get(&var.name) {
                None => violations.push(Violation {
                    record_index: idx,
                    message: format!("missing value for variable `{}`", var.name),
                }),
                Some(value) => match (&var.kind, value) {
                    (VariableKind::Real, Value::Real(x)) => {
                        if !x.is_finite() {
                            violations.push(Violation {
                                record_index: idx,
                                message: format!("non-finite value {x} for `{}`", var.name),
                            });
                        }
                    }
                    (VariableKind::Real, Value::Level(l)) => violations.push(Violation {
                        record_index: idx,
                        message: format!("expected real for `{}`, got level `{l}`", var.name),
                    }),
                    (VariableKind::Categorical { levels, .. }, Value::Level(l)) => {
                        if !levels.contains(l) {
                            violations.push(Violation {
                                record_index: idx,
                                message: format!("unknown level `{l}` for `{}`", var.name),
                            });
                        }
                    }
                    (VariableKind::Categorical { .. }, Value::Real(x)) => {
                        violations.push(Violation {
                            record_index: idx,
                            message: format!("expected level for `{}`, got real {x}", var.name),
                        })
                    }
                },
            }
        }
        for name in record.values.keys() {
            if schema.variable(name).is_none() {
                violations.push(Violation {
                    record_index: idx,
                    message: format!("unknown variable `{name}`"),
                });
            }
        }
    }
    violations
}
