//! Ecological inference for demographic subgroups.
//!
//! A fitted model is applied to restricted mean embeddings: a subgroup query
//! selects records, their weight-normalized embedding goes through the
//! global coefficients unchanged, and the predicted probabilities are scaled
//! by the subgroup's weight total to get expected counts. Exit-poll-style
//! tables, the per-region gender-gap series, and the fit scatter are all
//! post-processing of those expected counts.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Record, RowKind, Schema, Value, VariableKind};
use crate::featurizer::{FeaturizerError, FittedMaps};
use crate::solver::{DesignProblem, ModelFit};

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("empty query string")]
    Empty,
    #[error("malformed clause `{0}`")]
    MalformedClause(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown level `{level}` for variable `{var}`")]
    UnknownLevel { var: String, level: String },
    #[error("interval for `{var}` has lo {lo} > hi {hi}")]
    EmptyInterval { var: String, lo: f64, hi: f64 },
    #[error("clause kind does not match variable kind for `{0}`")]
    KindMismatch(String),
}

/// One atomic predicate clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Clause {
    Levels { var: String, levels: Vec<String> },
    Range { var: String, lo: f64, hi: f64 },
}

impl Clause {
    fn matches(&self, record: &Record) -> bool {
        match self {
            Clause::Levels { var, levels } => matches!(
                record.value(var),
                Some(Value::Level(l)) if levels.iter().any(|x| x == l)
            ),
            Clause::Range { var, lo, hi } => matches!(
                record.value(var),
                Some(Value::Real(x)) if *lo <= *x && *x <= *hi
            ),
        }
    }
}

/// A named conjunction of clauses over schema variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupQuery {
    pub name: String,
    pub clauses: Vec<Clause>,
}

impl SubgroupQuery {
    pub fn new(name: impl Into<String>, clauses: Vec<Clause>) -> Self {
        SubgroupQuery {
            name: name.into(),
            clauses,
        }
    }

    /// Parse the compact clause syntax:
    /// `sex=female` / `race=black|asian` / `age=[18,29]`, clauses joined
    /// by `;`. Interval bounds may be `-inf`/`inf`.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, QueryError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(QueryError::Empty);
        }
        let mut clauses = Vec::new();
        for raw in text.split(';') {
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let (var, rhs) = raw
                .split_once('=')
                .ok_or_else(|| QueryError::MalformedClause(raw.to_string()))?;
            let var = var.trim().to_string();
            let rhs = rhs.trim();
            if var.is_empty() || rhs.is_empty() {
                return Err(QueryError::MalformedClause(raw.to_string()));
            }
            if let Some(body) = rhs.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let (lo, hi) = body
                    .split_once(',')
                    .ok_or_else(|| QueryError::MalformedClause(raw.to_string()))?;
                let parse_bound = |s: &str| -> Result<f64, QueryError> {
                    let s = s.trim();
                    match s {
                        "-inf" => Ok(f64::NEG_INFINITY),
                        "inf" | "+inf" => Ok(f64::INFINITY),
                        _ => s
                            .parse::<f64>()
                            .map_err(|_| QueryError::MalformedClause(raw.to_string())),
                    }
                };
                let lo = parse_bound(lo)?;
                let hi = parse_bound(hi)?;
                if lo > hi {
                    return Err(QueryError::EmptyInterval { var, lo, hi });
                }
                clauses.push(Clause::Range { var, lo, hi });
            } else {
                let levels: Vec<String> = rhs
                    .split('|')
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect();
                if levels.is_empty() {
                    return Err(QueryError::MalformedClause(raw.to_string()));
                }
                clauses.push(Clause::Levels { var, levels });
            }
        }
        if clauses.is_empty() {
            return Err(QueryError::Empty);
        }
        Ok(SubgroupQuery {
            name: name.into(),
            clauses,
        })
    }

    /// Check every clause against the schema.
    pub fn validate(&self, schema: &Schema) -> Result<(), QueryError> {
        for clause in &self.clauses {
            match clause {
                Clause::Levels { var, levels } => {
                    let spec = schema
                        .variable(var)
                        .ok_or_else(|| QueryError::UnknownVariable(var.clone()))?;
                    match &spec.kind {
                        VariableKind::Categorical { levels: declared, .. } => {
                            for level in levels {
                                if !declared.contains(level) {
                                    return Err(QueryError::UnknownLevel {
                                        var: var.clone(),
                                        level: level.clone(),
                                    });
                                }
                            }
                        }
                        VariableKind::Real => return Err(QueryError::KindMismatch(var.clone())),
                    }
                }
                Clause::Range { var, lo, hi } => {
                    let spec = schema
                        .variable(var)
                        .ok_or_else(|| QueryError::UnknownVariable(var.clone()))?;
                    if !spec.is_real() {
                        return Err(QueryError::KindMismatch(var.clone()));
                    }
                    if lo > hi {
                        return Err(QueryError::EmptyInterval {
                            var: var.clone(),
                            lo: *lo,
                            hi: *hi,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn matches(&self, record: &Record) -> bool {
        self.clauses.iter().all(|c| c.matches(record))
    }
}

impl FromStr for SubgroupQuery {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubgroupQuery::parse(s.to_string(), s)
    }
}

/// Mean embedding over the records a query selects; `None` when the
/// subgroup is empty in this record set.
pub fn subgroup_embedding(
    records: &[Record],
    query: &SubgroupQuery,
    maps: &FittedMaps,
) -> Result<Option<(Array1<f64>, f64)>, FeaturizerError> {
    let matching: Vec<&Record> = records.iter().filter(|r| query.matches(r)).collect();
    if matching.is_empty() {
        return Ok(None);
    }
    maps.mean_embedding(&matching).map(Some)
}

/// Predicted class probabilities and expected counts for one subgroup.
pub fn predict_subgroup(fit: &ModelFit, mu: ArrayView1<f64>, weight_total: f64) -> ([f64; 3], [f64; 3]) {
    let eta = mu.dot(&fit.beta);
    let probs = crate::solver::softmax([
        eta[0] + fit.intercepts[0],
        eta[1] + fit.intercepts[1],
        eta[2] + fit.intercepts[2],
    ]);
    let counts = [
        probs[0] * weight_total,
        probs[1] * weight_total,
        probs[2] * weight_total,
    ];
    (probs, counts)
}

/// Aggregation level for exit-poll tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    National,
    PerState,
    PerRegion,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::National => write!(f, "national"),
            Level::PerState => write!(f, "state"),
            Level::PerRegion => write!(f, "region"),
        }
    }
}

/// One exit-poll-style output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPollRow {
    pub group: String,
    /// Two-party share for candidate A; share_a + share_b = 1.
    pub share_a: f64,
    pub share_b: f64,
    /// Share of the partition's predicted two-party voters; only present
    /// when the query list is a declared partition.
    pub fraction_of_electorate: Option<f64>,
    pub participation_rate: f64,
    pub other_nonvoting: f64,
    pub level: Level,
    pub unit_id: String,
    /// Subgroup weight total below the support floor.
    pub low_support: bool,
}

#[derive(Debug, Clone)]
pub struct TableConfig {
    pub level: Level,
    /// Declares the query list a partition of the population, enabling the
    /// fraction-of-electorate column.
    pub is_partition: bool,
    /// Regions represented by fewer persons than this are flagged, not
    /// suppressed.
    pub low_support_floor: f64,
    /// Region id -> state id; required for `Level::PerState`.
    pub region_to_state: Option<BTreeMap<String, String>>,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            level: Level::National,
            is_partition: true,
            low_support_floor: 10.0,
            region_to_state: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Featurizer(#[from] FeaturizerError),
    #[error("per-state aggregation requires a region-to-state map")]
    MissingStateMap,
    #[error("region `{0}` is missing from the region-to-state map")]
    UnmappedRegion(String),
}

#[derive(Default, Clone, Copy)]
struct UnitAccum {
    expected: [f64; 3],
    weight_total: f64,
}

/// Exit-poll-style table over the requested aggregation level.
///
/// Expected counts are summed over regions within each unit before shares
/// are formed, so unit rows aggregate consistently up to the national row.
pub fn exit_poll_table(
    fit: &ModelFit,
    region_records: &BTreeMap<String, Vec<Record>>,
    maps: &FittedMaps,
    queries: &[SubgroupQuery],
    config: &TableConfig,
) -> Result<Vec<ExitPollRow>, InferenceError> {
    assert!(!queries.is_empty(), "queries must be nonempty");
    let unit_of = |region: &str| -> Result<String, InferenceError> {
        match config.level {
            Level::National => Ok("national".to_string()),
            Level::PerRegion => Ok(region.to_string()),
            Level::PerState => {
                let map = config
                    .region_to_state
                    .as_ref()
                    .ok_or(InferenceError::MissingStateMap)?;
                map.get(region)
                    .cloned()
                    .ok_or_else(|| InferenceError::UnmappedRegion(region.to_string()))
            }
        }
    };

    // unit -> query -> accumulated expected counts and weight totals.
    let mut accum: BTreeMap<String, BTreeMap<String, UnitAccum>> = BTreeMap::new();
    for (region, records) in region_records {
        let unit = unit_of(region)?;
        for query in queries {
            if let Some((mu, w)) = subgroup_embedding(records, query, maps)? {
                let (_, expected) = predict_subgroup(fit, mu.view(), w);
                let slot = accum
                    .entry(unit.clone())
                    .or_default()
                    .entry(query.name.clone())
                    .or_default();
                for k in 0..3 {
                    slot.expected[k] += expected[k];
                }
                slot.weight_total += w;
            }
        }
    }

    let mut rows = Vec::new();
    for (unit, by_query) in &accum {
        let two_party_total: f64 = by_query
            .values()
            .map(|a| a.expected[0] + a.expected[1])
            .sum();
        // Preserve query declaration order within a unit.
        for query in queries {
            let Some(a) = by_query.get(&query.name) else {
                continue;
            };
            let two_party = a.expected[0] + a.expected[1];
            let participation = two_party / a.weight_total;
            rows.push(ExitPollRow {
                group: query.name.clone(),
                share_a: a.expected[0] / two_party,
                share_b: a.expected[1] / two_party,
                fraction_of_electorate: if config.is_partition {
                    Some(two_party / two_party_total)
                } else {
                    None
                },
                participation_rate: participation,
                other_nonvoting: 1.0 - participation,
                level: config.level,
                unit_id: unit.clone(),
                low_support: a.weight_total < config.low_support_floor,
            });
        }
    }
    Ok(rows)
}

/// Per-region gender-gap-style series, in percentage points of the
/// two-party share for candidate B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// (region id, gap in percentage points); regions where either subgroup
    /// is empty are listed in `omitted` instead.
    pub per_region: Vec<(String, f64)>,
    pub omitted: Vec<String>,
    pub national_gap: f64,
}

/// Two-party share_B difference between two subgroups, per region and
/// nationally.
pub fn gender_gap(
    fit: &ModelFit,
    region_records: &BTreeMap<String, Vec<Record>>,
    maps: &FittedMaps,
    query_first: &SubgroupQuery,
    query_second: &SubgroupQuery,
) -> Result<GapReport, InferenceError> {
    let mut per_region = Vec::new();
    let mut omitted = Vec::new();
    let mut national = [UnitAccum::default(), UnitAccum::default()];
    for (region, records) in region_records {
        let first = subgroup_embedding(records, query_first, maps)?;
        let second = subgroup_embedding(records, query_second, maps)?;
        match (first, second) {
            (Some((mu_f, w_f)), Some((mu_s, w_s))) => {
                let (_, e_f) = predict_subgroup(fit, mu_f.view(), w_f);
                let (_, e_s) = predict_subgroup(fit, mu_s.view(), w_s);
                let share_b_f = e_f[1] / (e_f[0] + e_f[1]);
                let share_b_s = e_s[1] / (e_s[0] + e_s[1]);
                per_region.push((region.clone(), 100.0 * (share_b_f - share_b_s)));
                for k in 0..3 {
                    national[0].expected[k] += e_f[k];
                    national[1].expected[k] += e_s[k];
                }
            }
            _ => omitted.push(region.clone()),
        }
    }
    let nat_f = national[0].expected[1] / (national[0].expected[0] + national[0].expected[1]);
    let nat_s = national[1].expected[1] / (national[1].expected[0] + national[1].expected[1]);
    Ok(GapReport {
        per_region,
        omitted,
        national_gap: 100.0 * (nat_f - nat_s),
    })
}

/// One fit-scatter point: observed vs. predicted shares for a training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub row_id: String,
    pub kind: RowKind,
    pub observed: [f64; 3],
    pub predicted: [f64; 3],
}

/// Observed vs. predicted shares per training row, labeled by provenance.
pub fn fit_scatter(fit: &ModelFit, problem: &DesignProblem) -> Vec<ScatterRow> {
    let probs = fit.predict_probs(problem.x.view());
    let totals = problem.totals();
    (0..problem.n_rows())
        .map(|i| ScatterRow {
            row_id: problem.row_ids[i].clone(),
            kind: problem.row_kinds[i],
            observed: [
                problem.y[[i, 0]] / totals[i],
                problem.y[[i, 1]] / totals[i],
                problem.y[[i, 2]] / totals[i],
            ],
            predicted: [probs[[i, 0]], probs[[i, 1]], probs[[i, 2]]],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Schema, VariableSpec};
    use crate::featurizer::{fit_maps, group_by_region, BandwidthRule, FeaturizerConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn schema() -> Schema {
        Schema::new(
            vec![
                VariableSpec::categorical("sex", ["m", "w"], "m"),
                VariableSpec::real("age"),
            ],
            vec![],
        )
        .unwrap()
    }

    fn rec(region: &str, weight: f64, sex: &str, age: f64) -> Record {
        let mut values = BTreeMap::new();
        values.insert("sex".into(), Value::Level(sex.into()));
        values.insert("age".into(), Value::Real(age));
        Record {
            region_id: region.into(),
            weight,
            values,
        }
    }

    fn records() -> Vec<Record> {
        vec![
            rec("r1", 2.0, "m", 30.0),
            rec("r1", 3.0, "w", 40.0),
            rec("r2", 1.0, "m", 50.0),
            rec("r2", 4.0, "w", 20.0),
        ]
    }

    fn maps() -> FittedMaps {
        let mut config = FeaturizerConfig::new(4, 7);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        fit_maps(&records(), &schema(), &config).unwrap()
    }

    fn null_fit(maps: &FittedMaps) -> ModelFit {
        ModelFit {
            beta: Array2::zeros((maps.layout.total_dim(), 3)),
            intercepts: [0.0, 0.0, 0.0],
            alpha: 1.0,
            lambda: 1.0,
            lambda_path: vec![1.0],
            nonzero_groups: 0,
            cv_table: vec![],
            layout: maps.layout.clone(),
            converged: true,
            final_change: 0.0,
        }
    }

    #[test]
    fn query_parsing() {
        let q = SubgroupQuery::parse("women", "sex=w").unwrap();
        assert_eq!(
            q.clauses,
            vec![Clause::Levels {
                var: "sex".into(),
                levels: vec!["w".into()]
            }]
        );
        let q = SubgroupQuery::parse("young", "age=[18,29]; sex=m|w").unwrap();
        assert_eq!(q.clauses.len(), 2);
        assert!(q.validate(&schema()).is_ok());

        let open = SubgroupQuery::parse("older", "age=[65,inf]").unwrap();
        assert!(open.validate(&schema()).is_ok());

        assert_eq!(SubgroupQuery::parse("x", ""), Err(QueryError::Empty));
        assert!(matches!(
            SubgroupQuery::parse("x", "sex"),
            Err(QueryError::MalformedClause(_))
        ));
        assert!(matches!(
            SubgroupQuery::parse("x", "age=[5,1]"),
            Err(QueryError::EmptyInterval { .. })
        ));
        assert!(matches!(
            SubgroupQuery::parse("x", "nope=w").unwrap().validate(&schema()),
            Err(QueryError::UnknownVariable(_))
        ));
        assert!(matches!(
            SubgroupQuery::parse("x", "sex=q").unwrap().validate(&schema()),
            Err(QueryError::UnknownLevel { .. })
        ));
        assert!(matches!(
            SubgroupQuery::parse("x", "age=w").unwrap().validate(&schema()),
            Err(QueryError::KindMismatch(_))
        ));
    }

    #[test]
    fn full_restriction_equals_region_embedding() {
        let maps = maps();
        let all = SubgroupQuery::parse("all", "sex=m|w").unwrap();
        let grouped = group_by_region(&records());
        let r1 = &grouped["r1"];
        let (mu_q, w_q) = subgroup_embedding(r1, &all, &maps).unwrap().unwrap();
        let refs: Vec<&Record> = r1.iter().collect();
        let (mu, w) = maps.mean_embedding(&refs).unwrap();
        assert_eq!(w_q, w);
        for (a, b) in mu_q.iter().zip(mu.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn empty_subgroup_is_a_value() {
        let maps = maps();
        let nobody = SubgroupQuery::parse("nobody", "age=[200,300]").unwrap();
        let grouped = group_by_region(&records());
        assert!(subgroup_embedding(&grouped["r1"], &nobody, &maps)
            .unwrap()
            .is_none());
    }

    #[test]
    fn complementary_queries_reconstruct_full_embedding() {
        let maps = maps();
        let grouped = group_by_region(&records());
        let r1 = &grouped["r1"];
        let men = SubgroupQuery::parse("men", "sex=m").unwrap();
        let women = SubgroupQuery::parse("women", "sex=w").unwrap();
        let (mu_m, w_m) = subgroup_embedding(r1, &men, &maps).unwrap().unwrap();
        let (mu_w, w_w) = subgroup_embedding(r1, &women, &maps).unwrap().unwrap();
        let refs: Vec<&Record> = r1.iter().collect();
        let (mu, w) = maps.mean_embedding(&refs).unwrap();
        assert_abs_diff_eq!(w_m + w_w, w, epsilon = 1e-12);
        let combined = (mu_m * w_m + mu_w * w_w) / (w_m + w_w);
        for (a, b) in combined.iter().zip(mu.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn widening_interval_is_monotone_in_weight() {
        let maps = maps();
        let grouped = group_by_region(&records());
        let narrow = SubgroupQuery::parse("n", "age=[25,35]").unwrap();
        let wide = SubgroupQuery::parse("w", "age=[15,45]").unwrap();
        let w_narrow = subgroup_embedding(&grouped["r1"], &narrow, &maps)
            .unwrap()
            .map_or(0.0, |(_, w)| w);
        let w_wide = subgroup_embedding(&grouped["r1"], &wide, &maps)
            .unwrap()
            .map_or(0.0, |(_, w)| w);
        assert!(w_wide >= w_narrow);
    }

    #[test]
    fn null_model_prediction() {
        let maps = maps();
        let fit = null_fit(&maps);
        let mu = Array1::zeros(maps.layout.total_dim());
        let (probs, counts) = predict_subgroup(&fit, mu.view(), 9.0);
        for k in 0..3 {
            assert_abs_diff_eq!(probs[k], 1.0 / 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(counts[k], 3.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(counts.iter().sum::<f64>(), 9.0, epsilon = 1e-9);
    }

    #[test]
    fn table_identities_and_single_group_equivalence() {
        let maps = maps();
        let fit = null_fit(&maps);
        let grouped = group_by_region(&records());
        let queries = vec![
            SubgroupQuery::parse("men", "sex=m").unwrap(),
            SubgroupQuery::parse("women", "sex=w").unwrap(),
        ];
        let config = TableConfig::default();
        let rows = exit_poll_table(&fit, &grouped, &maps, &queries, &config).unwrap();
        assert_eq!(rows.len(), 2);
        let frac_sum: f64 = rows.iter().map(|r| r.fraction_of_electorate.unwrap()).sum();
        assert_abs_diff_eq!(frac_sum, 1.0, epsilon = 1e-9);
        for row in &rows {
            assert_abs_diff_eq!(row.share_a + row.share_b, 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(
                row.participation_rate + row.other_nonvoting,
                1.0,
                epsilon = 1e-9
            );
        }

        // Single-region, single-group table is predict_subgroup post-processed.
        let single: BTreeMap<String, Vec<Record>> =
            [("r1".to_string(), grouped["r1"].clone())].into();
        let rows = exit_poll_table(
            &fit,
            &single,
            &maps,
            &queries[..1],
            &TableConfig {
                is_partition: false,
                ..TableConfig::default()
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].fraction_of_electorate, None);
        let (mu, w) = subgroup_embedding(&grouped["r1"], &queries[0], &maps)
            .unwrap()
            .unwrap();
        let (_, e) = predict_subgroup(&fit, mu.view(), w);
        assert_abs_diff_eq!(rows[0].share_a, e[0] / (e[0] + e[1]), epsilon = 1e-12);
        assert_abs_diff_eq!(
            rows[0].participation_rate,
            (e[0] + e[1]) / w,
            epsilon = 1e-12
        );
        assert!(rows[0].low_support); // weight total 2 < floor 10
    }

    #[test]
    fn per_region_rows_are_independent() {
        let maps = maps();
        let fit = null_fit(&maps);
        let grouped = group_by_region(&records());
        let queries = vec![SubgroupQuery::parse("men", "sex=m").unwrap()];
        let config = TableConfig {
            level: Level::PerRegion,
            is_partition: false,
            ..TableConfig::default()
        };
        let both = exit_poll_table(&fit, &grouped, &maps, &queries, &config).unwrap();
        let only_r1: BTreeMap<String, Vec<Record>> =
            [("r1".to_string(), grouped["r1"].clone())].into();
        let r1_rows = exit_poll_table(&fit, &only_r1, &maps, &queries, &config).unwrap();
        let r1_in_both: Vec<_> = both.iter().filter(|r| r.unit_id == "r1").cloned().collect();
        assert_eq!(r1_in_both, r1_rows);
    }

    #[test]
    fn identical_groups_have_zero_gap() {
        let maps = maps();
        let fit = null_fit(&maps);
        let grouped = group_by_region(&records());
        let q = SubgroupQuery::parse("men", "sex=m").unwrap();
        let gap = gender_gap(&fit, &grouped, &maps, &q, &q).unwrap();
        for (_, g) in &gap.per_region {
            assert_abs_diff_eq!(*g, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(gap.national_gap, 0.0, epsilon = 1e-12);
        assert!(gap.omitted.is_empty());
    }

    #[test]
    fn empty_subgroup_region_is_omitted_with_note() {
        let maps = maps();
        let fit = null_fit(&maps);
        let mut grouped = group_by_region(&records());
        // r3 has only men; the women query is empty there.
        grouped.insert("r3".to_string(), vec![rec("r3", 1.0, "m", 33.0)]);
        let men = SubgroupQuery::parse("men", "sex=m").unwrap();
        let women = SubgroupQuery::parse("women", "sex=w").unwrap();
        let gap = gender_gap(&fit, &grouped, &maps, &men, &women).unwrap();
        assert_eq!(gap.omitted, vec!["r3".to_string()]);
        assert_eq!(gap.per_region.len(), 2);
    }

    #[test]
    fn scatter_has_one_row_per_training_row() {
        let maps = maps();
        let fit = null_fit(&maps);
        let grouped = group_by_region(&records());
        let emb = crate::featurizer::build_embedding_matrix(&grouped, &maps).unwrap();
        let n = emb.n_rows();
        let y = ndarray::array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let problem = DesignProblem::new(
            emb.rows.clone(),
            y,
            emb.layout.clone(),
            emb.row_ids.clone(),
            emb.row_kinds.clone(),
        )
        .unwrap();
        let scatter = fit_scatter(&fit, &problem);
        assert_eq!(scatter.len(), n);
        // Uniform counts against the null model sit exactly on the diagonal.
        for row in &scatter {
            for k in 0..3 {
                assert_abs_diff_eq!(row.observed[k], row.predicted[k], epsilon = 1e-12);
            }
        }
    }
}
