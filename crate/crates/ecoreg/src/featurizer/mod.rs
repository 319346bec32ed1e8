//! Map individual records to feature vectors and aggregate them into
//! per-row weighted mean embeddings.
//!
//! Real variables are standardized and passed through orthogonal random
//! Fourier features; categorical variables get reference-omitted indicator
//! coding; declared interactions are featurized as flattened outer products
//! (with a fresh joint feature map for real-by-real pairs). A region's
//! embedding is the weight-normalized mean of its records' feature vectors,
//! with the weight total carried separately.

mod orf;

pub use orf::{build_orf, gaussian_kernel, orthonormal_blocks, OrfMap};

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Record, RowKind, Schema, Value, VariableKind, VariableSpec};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum FeaturizerError {
    #[error("variable `{0}` has zero weighted variance")]
    ConstantVariable(String),
    #[error("variable `{0}` needs at least 2 distinct values")]
    TooFewDistinct(String),
    #[error("non-finite input for variable `{0}`")]
    NonFiniteInput(String),
    #[error("unknown level `{level}` for variable `{var}`")]
    UnknownLevel { var: String, level: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("type mismatch for variable `{0}`")]
    TypeMismatch(String),
    #[error("empty record subset")]
    EmptySubset,
}

/// How the Gaussian bandwidth is chosen per feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "sigma", rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Median pairwise distance of standardized values on a deterministic
    /// seeded subsample of at most 2000 points.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    /// Output dimension D per real variable (even).
    pub rff_features_per_real: usize,
    pub bandwidth_rule: BandwidthRule,
    pub seed: u64,
    pub include_interactions: bool,
    /// Use the single-cosine-with-offset feature form (dimension D/2)
    /// instead of the paired cos/sin form (dimension D).
    #[serde(default)]
    pub offset_form: bool,
}

impl FeaturizerConfig {
    pub fn new(rff_features_per_real: usize, seed: u64) -> Self {
        assert!(
            rff_features_per_real >= 2 && rff_features_per_real % 2 == 0,
            "rff_features_per_real must be even and >= 2"
        );
        FeaturizerConfig {
            rff_features_per_real,
            bandwidth_rule: BandwidthRule::Median,
            seed,
            include_interactions: false,
            offset_form: false,
        }
    }

    /// Feature-vector length contributed by one real variable.
    pub fn real_dim(&self) -> usize {
        if self.offset_form {
            self.rff_features_per_real / 2
        } else {
            self.rff_features_per_real
        }
    }
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig::new(64, 0)
    }
}

/// Weighted mean and population standard deviation per real variable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardizer {
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub fn standardize(&self, var: &str, value: f64) -> Result<f64, FeaturizerError> {
        if !value.is_finite() {
            return Err(FeaturizerError::NonFiniteInput(var.to_string()));
        }
        let m = self
            .moments
            .get(var)
            .ok_or_else(|| FeaturizerError::UnknownVariable(var.to_string()))?;
        Ok((value - m.mean) / m.sd)
    }
}

/// Fit weighted moments for every real variable in the schema.
pub fn fit_standardizer(records: &[Record], schema: &Schema) -> Result<Standardizer, FeaturizerError> {
    let mut moments = BTreeMap::new();
    for var in schema.variables.iter().filter(|v| v.is_real()) {
        let mut w_sum = 0.0;
        let mut wx_sum = 0.0;
        let mut distinct: Option<(f64, bool)> = None;
        for r in records {
            let x = real_value(r, &var.name)?;
            let w = r.weight;
            w_sum += w;
            wx_sum += w * x;
            distinct = match distinct {
                None => Some((x, false)),
                Some((first, many)) => Some((first, many || x != first)),
            };
        }
        if !matches!(distinct, Some((_, true))) {
            return Err(FeaturizerError::TooFewDistinct(var.name.clone()));
        }
        let mean = wx_sum / w_sum;
        let mut wss = 0.0;
        for r in records {
            let x = real_value(r, &var.name)?;
            wss += r.weight * (x - mean) * (x - mean);
        }
        let variance = wss / w_sum;
        if variance <= 1e-12 {
            return Err(FeaturizerError::ConstantVariable(var.name.clone()));
        }
        moments.insert(
            var.name.clone(),
            Moments {
                mean,
                sd: variance.sqrt(),
            },
        );
    }
    Ok(Standardizer { moments })
}

fn real_value(record: &Record, var: &str) -> Result<f64, FeaturizerError> {
    match record.value(var) {
        Some(Value::Real(x)) if x.is_finite() => Ok(*x),
        Some(Value::Real(_)) => Err(FeaturizerError::NonFiniteInput(var.to_string())),
        Some(Value::Level(_)) => Err(FeaturizerError::TypeMismatch(var.to_string())),
        None => Err(FeaturizerError::UnknownVariable(var.to_string())),
    }
}

fn level_value<'a>(record: &'a Record, var: &str) -> Result<&'a str, FeaturizerError> {
    match record.value(var) {
        Some(Value::Level(l)) => Ok(l),
        Some(Value::Real(_)) => Err(FeaturizerError::TypeMismatch(var.to_string())),
        None => Err(FeaturizerError::UnknownVariable(var.to_string())),
    }
}

/// What a feature group encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GroupSource {
    Variable { name: String },
    Interaction { first: String, second: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub source: GroupSource,
    pub start: usize,
    pub end: usize,
}

impl FeatureGroup {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Ordered feature groups with contiguous disjoint column spans covering
/// [0, p). Group order is deterministic: schema variables first in declared
/// order, then declared interactions in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub groups: Vec<FeatureGroup>,
}

impl FeatureLayout {
    pub fn total_dim(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    pub fn group(&self, name: &str) -> Option<&FeatureGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn interaction_group_name(a: &str, b: &str) -> String {
    format!("{a}*{b}")
}

fn variable_dim(var: &VariableSpec, config: &FeaturizerConfig) -> usize {
    match &var.kind {
        VariableKind::Real => config.real_dim(),
        VariableKind::Categorical { levels, .. } => levels.len() - 1,
    }
}

fn interaction_dim(a: &VariableSpec, b: &VariableSpec, config: &FeaturizerConfig) -> usize {
    match (a.is_real(), b.is_real()) {
        // Joint feature map on the standardized pair, not a product of marginals.
        (true, true) => config.real_dim(),
        _ => variable_dim(a, config) * variable_dim(b, config),
    }
}

/// Build the column layout for a schema under a config.
pub fn build_layout(schema: &Schema, config: &FeaturizerConfig) -> FeatureLayout {
    let mut groups = Vec::new();
    let mut offset = 0;
    for var in &schema.variables {
        let width = variable_dim(var, config);
        groups.push(FeatureGroup {
            name: var.name.clone(),
            source: GroupSource::Variable {
                name: var.name.clone(),
            },
            start: offset,
            end: offset + width,
        });
        offset += width;
    }
    if config.include_interactions {
        for (a, b) in &schema.interactions {
            let sa = schema.variable(a).expect("schema checked");
            let sb = schema.variable(b).expect("schema checked");
            let width = interaction_dim(sa, sb, config);
            groups.push(FeatureGroup {
                name: interaction_group_name(a, b),
                source: GroupSource::Interaction {
                    first: a.clone(),
                    second: b.clone(),
                },
                start: offset,
                end: offset + width,
            });
            offset += width;
        }
    }
    FeatureLayout { groups }
}

/// Everything needed to featurize new records exactly as during fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMaps {
    pub schema: Schema,
    pub config: FeaturizerConfig,
    pub standardizer: Standardizer,
    /// Feature map per real variable.
    pub var_orfs: BTreeMap<String, OrfMap>,
    /// Joint feature map per real-by-real interaction, keyed by group name.
    pub pair_orfs: BTreeMap<String, OrfMap>,
    pub layout: FeatureLayout,
}

/// Median pairwise distance on a seeded subsample of at most 2000 points.
fn median_heuristic(points: &[Vec<f64>], sample_seed: u64) -> f64 {
    const MAX_POINTS: usize = 2000;
    let mut indices: Vec<usize> = (0..points.len()).collect();
    if indices.len() > MAX_POINTS {
        let mut rng = seed::rng(sample_seed, "bandwidth-subsample");
        indices.shuffle(&mut rng);
        indices.truncate(MAX_POINTS);
        indices.sort_unstable();
    }
    let mut dists = Vec::with_capacity(indices.len() * (indices.len() - 1) / 2);
    for (i, &a) in indices.iter().enumerate() {
        for &b in &indices[i + 1..] {
            let d2: f64 = points[a]
                .iter()
                .zip(points[b].iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dists[dists.len() / 2];
    if median > 0.0 {
        median
    } else {
        // Heavily duplicated data; fall back to the mean positive distance.
        let positive: Vec<f64> = dists.into_iter().filter(|d| *d > 0.0).collect();
        if positive.is_empty() {
            1.0
        } else {
            positive.iter().sum::<f64>() / positive.len() as f64
        }
    }
}

/// Fit the standardizer, bandwidths, and feature maps on a record set.
pub fn fit_maps(
    records: &[Record],
    schema: &Schema,
    config: &FeaturizerConfig,
) -> Result<FittedMaps, FeaturizerError> {
    let standardizer = fit_standardizer(records, schema)?;
    let d = config.rff_features_per_real;

    let mut var_orfs = BTreeMap::new();
    for var in schema.variables.iter().filter(|v| v.is_real()) {
        let bandwidth = match config.bandwidth_rule {
            BandwidthRule::Fixed(s) => s,
            BandwidthRule::Median => {
                let z: Vec<Vec<f64>> = records
                    .iter()
                    .map(|r| Ok(vec![standardizer.standardize(&var.name, real_value(r, &var.name)?)?]))
                    .collect::<Result<_, FeaturizerError>>()?;
                median_heuristic(&z, seed::derive(config.seed, &format!("bw:{}", var.name)))
            }
        };
        let map_seed = seed::derive(config.seed, &format!("orf:{}", var.name));
        var_orfs.insert(var.name.clone(), build_orf(1, d, bandwidth, map_seed));
    }

    let mut pair_orfs = BTreeMap::new();
    if config.include_interactions {
        for (a, b) in &schema.interactions {
            let sa = schema.variable(a).expect("schema checked");
            let sb = schema.variable(b).expect("schema checked");
            if !(sa.is_real() && sb.is_real()) {
                continue;
            }
            let key = interaction_group_name(a, b);
            let bandwidth = match config.bandwidth_rule {
                BandwidthRule::Fixed(s) => s,
                BandwidthRule::Median => {
                    let z: Vec<Vec<f64>> = records
                        .iter()
                        .map(|r| {
                            Ok(vec![
                                standardizer.standardize(a, real_value(r, a)?)?,
                                standardizer.standardize(b, real_value(r, b)?)?,
                            ])
                        })
                        .collect::<Result<_, FeaturizerError>>()?;
                    median_heuristic(&z, seed::derive(config.seed, &format!("bw:{key}")))
                }
            };
            let map_seed = seed::derive(config.seed, &format!("orf:{key}"));
            pair_orfs.insert(key, build_orf(2, d, bandwidth, map_seed));
        }
    }

    Ok(FittedMaps {
        schema: schema.clone(),
        config: config.clone(),
        standardizer,
        var_orfs,
        pair_orfs,
        layout: build_layout(schema, config),
    })
}

impl FittedMaps {
    fn orf_encode(&self, orf: &OrfMap, z: &Array1<f64>) -> Array1<f64> {
        if self.config.offset_form {
            orf.encode_offset_form(z.view())
        } else {
            orf.encode(z.view())
        }
    }

    /// Encode one real value: standardize then apply the variable's feature map.
    pub fn encode_real(&self, var: &str, value: f64) -> Result<Array1<f64>, FeaturizerError> {
        let z = self.standardizer.standardize(var, value)?;
        let orf = self
            .var_orfs
            .get(var)
            .ok_or_else(|| FeaturizerError::UnknownVariable(var.to_string()))?;
        Ok(self.orf_encode(orf, &Array1::from(vec![z])))
    }

    /// Indicator vector over non-reference levels in declared order.
    pub fn encode_categorical(
        &self,
        var: &VariableSpec,
        level: &str,
    ) -> Result<Array1<f64>, FeaturizerError> {
        let non_ref = var.non_reference_levels();
        match &var.kind {
            VariableKind::Categorical { levels, .. } => {
                if !levels.iter().any(|l| l == level) {
                    return Err(FeaturizerError::UnknownLevel {
                        var: var.name.clone(),
                        level: level.to_string(),
                    });
                }
            }
            VariableKind::Real => return Err(FeaturizerError::TypeMismatch(var.name.clone())),
        }
        let mut out = Array1::zeros(non_ref.len());
        if let Some(pos) = non_ref.iter().position(|l| *l == level) {
            out[pos] = 1.0;
        }
        Ok(out)
    }

    fn encode_variable(&self, record: &Record, var: &VariableSpec) -> Result<Array1<f64>, FeaturizerError> {
        match &var.kind {
            VariableKind::Real => self.encode_real(&var.name, real_value(record, &var.name)?),
            VariableKind::Categorical { .. } => {
                self.encode_categorical(var, level_value(record, &var.name)?)
            }
        }
    }

    /// Interaction features for one record and one declared pair.
    ///
    /// Real-by-real pairs use the joint feature map on the standardized
    /// 2-vector; every other combination is the flattened outer product of
    /// the per-variable encodings (first variable outer, second inner).
    pub fn encode_interaction(
        &self,
        record: &Record,
        first: &str,
        second: &str,
    ) -> Result<Array1<f64>, FeaturizerError> {
        let sa = self
            .schema
            .variable(first)
            .ok_or_else(|| FeaturizerError::UnknownVariable(first.to_string()))?;
        let sb = self
            .schema
            .variable(second)
            .ok_or_else(|| FeaturizerError::UnknownVariable(second.to_string()))?;
        if sa.is_real() && sb.is_real() {
            let key = interaction_group_name(first, second);
            let orf = self
                .pair_orfs
                .get(&key)
                .ok_or_else(|| FeaturizerError::UnknownVariable(key.clone()))?;
            let z = Array1::from(vec![
                self.standardizer.standardize(first, real_value(record, first)?)?,
                self.standardizer.standardize(second, real_value(record, second)?)?,
            ]);
            return Ok(self.orf_encode(orf, &z));
        }
        let va = self.encode_variable(record, sa)?;
        let vb = self.encode_variable(record, sb)?;
        let mut out = Array1::zeros(va.len() * vb.len());
        for (i, a) in va.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in vb.iter().enumerate() {
                out[i * vb.len() + j] = a * b;
            }
        }
        Ok(out)
    }

    /// Full feature vector for one record, in layout column order.
    pub fn encode_record(&self, record: &Record) -> Result<Array1<f64>, FeaturizerError> {
        let mut out = Array1::zeros(self.layout.total_dim());
        for group in &self.layout.groups {
            let block = match &group.source {
                GroupSource::Variable { name } => {
                    let var = self.schema.variable(name).expect("layout from schema");
                    self.encode_variable(record, var)?
                }
                GroupSource::Interaction { first, second } => {
                    self.encode_interaction(record, first, second)?
                }
            };
            debug_assert_eq!(block.len(), group.width());
            out.slice_mut(ndarray::s![group.span()]).assign(&block);
        }
        Ok(out)
    }

    /// Weight-normalized mean embedding of a record subset, with the raw
    /// weight total carried separately.
    pub fn mean_embedding(&self, records: &[&Record]) -> Result<(Array1<f64>, f64), FeaturizerError> {
        if records.is_empty() {
            return Err(FeaturizerError::EmptySubset);
        }
        let mut sum = Array1::zeros(self.layout.total_dim());
        let mut w_total = 0.0;
        for r in records {
            let phi = self.encode_record(r)?;
            sum.scaled_add(r.weight, &phi);
            w_total += r.weight;
        }
        Ok((sum / w_total, w_total))
    }
}

/// Row-per-region matrix of mean embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub row_weight_totals: Array1<f64>,
    pub row_ids: Vec<String>,
    pub row_kinds: Vec<RowKind>,
    pub layout: FeatureLayout,
}

impl EmbeddingMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }
}

/// Embed every region, rows ordered by region id.
///
/// Per-region work runs on the rayon pool; record order within a region is
/// fixed, so the result is identical at any worker count.
pub fn build_embedding_matrix(
    region_records: &BTreeMap<String, Vec<Record>>,
    maps: &FittedMaps,
) -> Result<EmbeddingMatrix, FeaturizerError> {
    let regions: Vec<(&String, &Vec<Record>)> = region_records.iter().collect();
    let embedded: Vec<(Array1<f64>, f64)> = regions
        .par_iter()
        .map(|(_, records)| {
            let refs: Vec<&Record> = records.iter().collect();
            maps.mean_embedding(&refs)
        })
        .collect::<Result<_, _>>()?;

    let p = maps.layout.total_dim();
    let mut rows = Array2::zeros((regions.len(), p));
    let mut totals = Array1::zeros(regions.len());
    let mut ids = Vec::with_capacity(regions.len());
    for (i, ((id, _), (mu, w))) in regions.iter().zip(embedded).enumerate() {
        rows.row_mut(i).assign(&mu);
        totals[i] = w;
        ids.push((*id).clone());
    }
    Ok(EmbeddingMatrix {
        rows,
        row_weight_totals: totals,
        row_kinds: vec![RowKind::TrueOutcome; ids.len()],
        row_ids: ids,
        layout: maps.layout.clone(),
    })
}

/// Group records by region id, preserving input order within each region.
pub fn group_by_region(records: &[Record]) -> BTreeMap<String, Vec<Record>> {
    let mut grouped: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.region_id.clone()).or_default().push(r.clone());
    }
    grouped
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::VariableSpec;
    use approx::assert_abs_diff_eq;

    fn schema_cat_real() -> Schema {
        Schema::new(
            vec![
                VariableSpec::categorical("color", ["a", "b", "c"], "a"),
                VariableSpec::real("age"),
            ],
            vec![("color".into(), "age".into())],
        )
        .unwrap()
    }

    fn rec(region: &str, weight: f64, color: &str, age: f64) -> Record {
        let mut values = BTreeMap::new();
        values.insert("color".into(), Value::Level(color.into()));
        values.insert("age".into(), Value::Real(age));
        Record {
            region_id: region.into(),
            weight,
            values,
        }
    }

    fn sample_records() -> Vec<Record> {
        vec![
            rec("r1", 1.0, "a", 1.0),
            rec("r1", 1.0, "b", 2.0),
            rec("r2", 1.0, "c", 3.0),
            rec("r2", 1.0, "a", 4.0),
        ]
    }

    #[test]
    fn standardizer_two_point_case() {
        let schema = Schema::new(vec![VariableSpec::real("x")], vec![]).unwrap();
        let records = vec![
            Record {
                region_id: "r".into(),
                weight: 1.0,
                values: [("x".to_string(), Value::Real(1.0))].into(),
            },
            Record {
                region_id: "r".into(),
                weight: 1.0,
                values: [("x".to_string(), Value::Real(3.0))].into(),
            },
        ];
        let s = fit_standardizer(&records, &schema).unwrap();
        let m = s.moments["x"];
        assert_abs_diff_eq!(m.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.sd, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn standardizer_weighted_moments() {
        // values {1,2,3,4}, weights {1,1,1,7}: mean 3.4, population sd from
        // weighted moments.
        let schema = Schema::new(vec![VariableSpec::real("x")], vec![]).unwrap();
        let records: Vec<Record> = [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (4.0, 7.0)]
            .iter()
            .map(|(x, w)| Record {
                region_id: "r".into(),
                weight: *w,
                values: [("x".to_string(), Value::Real(*x))].into(),
            })
            .collect();
        let s = fit_standardizer(&records, &schema).unwrap();
        let m = s.moments["x"];
        assert_abs_diff_eq!(m.mean, 3.4, epsilon = 1e-12);
        let expect_var = (1.0 * (1.0f64 - 3.4).powi(2)
            + 1.0 * (2.0f64 - 3.4).powi(2)
            + 1.0 * (3.0f64 - 3.4).powi(2)
            + 7.0 * (4.0f64 - 3.4).powi(2))
            / 10.0;
        assert_abs_diff_eq!(m.sd, expect_var.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn constant_variable_rejected() {
        let schema = Schema::new(vec![VariableSpec::real("x")], vec![]).unwrap();
        let records: Vec<Record> = (0..3)
            .map(|_| Record {
                region_id: "r".into(),
                weight: 1.0,
                values: [("x".to_string(), Value::Real(0.0))].into(),
            })
            .collect();
        assert!(matches!(
            fit_standardizer(&records, &schema),
            Err(FeaturizerError::TooFewDistinct(_))
        ));
    }

    #[test]
    fn categorical_encoding_matches_definition() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(4, 1);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        let maps = fit_maps(&sample_records(), &schema, &config).unwrap();
        let var = schema.variable("color").unwrap();
        assert_eq!(
            maps.encode_categorical(var, "b").unwrap().to_vec(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            maps.encode_categorical(var, "a").unwrap().to_vec(),
            vec![0.0, 0.0]
        );
        assert!(matches!(
            maps.encode_categorical(var, "d"),
            Err(FeaturizerError::UnknownLevel { .. })
        ));
    }

    #[test]
    fn real_encoding_is_bounded_and_unit_norm() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(8, 1);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        let maps = fit_maps(&sample_records(), &schema, &config).unwrap();
        let phi = maps.encode_real("age", 2.5).unwrap();
        let bound = (2.0 / 8.0f64).sqrt();
        for v in phi.iter() {
            assert!(v.abs() <= bound + 1e-12);
        }
        assert_abs_diff_eq!(phi.dot(&phi), 1.0, epsilon = 1e-12);
        // Identical inputs have unit kernel.
        let phi2 = maps.encode_real("age", 2.5).unwrap();
        assert_abs_diff_eq!(phi.dot(&phi2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn record_encoding_lengths() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(4, 1);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        // color (K=3) -> 2, age (D=4) -> 4.
        let maps = fit_maps(&sample_records(), &schema, &config).unwrap();
        assert_eq!(maps.layout.total_dim(), 6);
        assert_eq!(maps.encode_record(&sample_records()[0]).unwrap().len(), 6);

        let mut config_ix = config.clone();
        config_ix.include_interactions = true;
        // interaction color*age -> 2*4 = 8 more columns.
        let maps_ix = fit_maps(&sample_records(), &schema, &config_ix).unwrap();
        assert_eq!(maps_ix.layout.total_dim(), 14);
        assert_eq!(maps_ix.encode_record(&sample_records()[0]).unwrap().len(), 14);
    }

    #[test]
    fn cat_real_interaction_matches_outer_product() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(8, 1);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        config.include_interactions = true;
        let maps = fit_maps(&sample_records(), &schema, &config).unwrap();
        let record = rec("r1", 1.0, "c", 2.0);
        let inter = maps.encode_interaction(&record, "color", "age").unwrap();
        assert_eq!(inter.len(), 16);
        // color=c -> indicator [0,1]; block 0 is zero, block 1 is phi(age).
        let phi = maps.encode_real("age", 2.0).unwrap();
        assert_eq!(inter.slice(ndarray::s![0..8]).sum(), 0.0);
        for i in 0..8 {
            assert_abs_diff_eq!(inter[8 + i], phi[i], epsilon = 1e-14);
        }
        // Reference level zeroes the whole interaction.
        let ref_rec = rec("r1", 1.0, "a", 2.0);
        let inter_ref = maps.encode_interaction(&ref_rec, "color", "age").unwrap();
        assert_eq!(inter_ref.sum(), 0.0);
    }

    #[test]
    fn cat_cat_interaction_single_cross_indicator() {
        let schema = Schema::new(
            vec![
                VariableSpec::categorical("u", ["a", "b"], "a"),
                VariableSpec::categorical("v", ["x", "y"], "x"),
            ],
            vec![("u".into(), "v".into())],
        )
        .unwrap();
        let mut config = FeaturizerConfig::new(4, 1);
        config.include_interactions = true;
        let make = |u: &str, v: &str| {
            let mut values = BTreeMap::new();
            values.insert("u".into(), Value::Level(u.into()));
            values.insert("v".into(), Value::Level(v.into()));
            Record {
                region_id: "r".into(),
                weight: 1.0,
                values,
            }
        };
        let maps = fit_maps(&[make("a", "x"), make("b", "y")], &schema, &config).unwrap();
        assert_eq!(
            maps.encode_interaction(&make("b", "y"), "u", "v").unwrap().to_vec(),
            vec![1.0]
        );
        assert_eq!(
            maps.encode_interaction(&make("a", "y"), "u", "v").unwrap().to_vec(),
            vec![0.0]
        );
    }

    #[test]
    fn mean_embedding_basics() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(4, 1);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        let records = sample_records();
        let maps = fit_maps(&records, &schema, &config).unwrap();

        // Single record: embedding equals its feature vector.
        let (mu, w) = maps.mean_embedding(&[&records[0]]).unwrap();
        let phi = maps.encode_record(&records[0]).unwrap();
        assert_abs_diff_eq!((&mu - &phi).mapv(f64::abs).sum(), 0.0, epsilon = 1e-14);
        assert_eq!(w, 1.0);

        // Two identical records with different weights: same embedding.
        let mut heavy = records[0].clone();
        heavy.weight = 5.0;
        let (mu2, w2) = maps.mean_embedding(&[&records[0], &heavy]).unwrap();
        assert_abs_diff_eq!((&mu2 - &phi).mapv(f64::abs).sum(), 0.0, epsilon = 1e-12);
        assert_eq!(w2, 6.0);

        assert!(matches!(
            maps.mean_embedding(&[]),
            Err(FeaturizerError::EmptySubset)
        ));
    }

    #[test]
    fn partition_property() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(8, 3);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);
        let records = sample_records();
        let maps = fit_maps(&records, &schema, &config).unwrap();
        let all: Vec<&Record> = records.iter().collect();
        let (mu, w) = maps.mean_embedding(&all).unwrap();
        let (mu1, w1) = maps.mean_embedding(&all[..1]).unwrap();
        let (mu2, w2) = maps.mean_embedding(&all[1..]).unwrap();
        let combined = (mu1 * w1 + mu2 * w2) / (w1 + w2);
        assert!(w1 + w2 - w < 1e-12);
        for (a, b) in combined.iter().zip(mu.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn embedding_matrix_is_deterministic() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(8, 3);
        config.bandwidth_rule = BandwidthRule::Median;
        let records = sample_records();
        let grouped = group_by_region(&records);
        let maps = fit_maps(&records, &schema, &config).unwrap();
        let a = build_embedding_matrix(&grouped, &maps).unwrap();
        let b = build_embedding_matrix(&grouped, &maps).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row_ids, vec!["r1".to_string(), "r2".to_string()]);
        assert!(a.row_weight_totals.iter().all(|w| *w > 0.0));
        assert!(a.rows.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permuting_schema_order_permutes_blocks_not_contents() {
        let records = sample_records();
        let mut config = FeaturizerConfig::new(4, 1);
        config.bandwidth_rule = BandwidthRule::Fixed(1.0);

        let schema_fwd = Schema::new(
            vec![
                VariableSpec::categorical("color", ["a", "b", "c"], "a"),
                VariableSpec::real("age"),
            ],
            vec![],
        )
        .unwrap();
        let schema_rev = Schema::new(
            vec![
                VariableSpec::real("age"),
                VariableSpec::categorical("color", ["a", "b", "c"], "a"),
            ],
            vec![],
        )
        .unwrap();
        let maps_fwd = fit_maps(&records, &schema_fwd, &config).unwrap();
        let maps_rev = fit_maps(&records, &schema_rev, &config).unwrap();
        let r = &records[1];
        let enc_fwd = maps_fwd.encode_record(r).unwrap();
        let enc_rev = maps_rev.encode_record(r).unwrap();
        let g_fwd = maps_fwd.layout.group("age").unwrap();
        let g_rev = maps_rev.layout.group("age").unwrap();
        assert_eq!(
            enc_fwd.slice(ndarray::s![g_fwd.span()]).to_vec(),
            enc_rev.slice(ndarray::s![g_rev.span()]).to_vec()
        );
        let c_fwd = maps_fwd.layout.group("color").unwrap();
        let c_rev = maps_rev.layout.group("color").unwrap();
        assert_eq!(
            enc_fwd.slice(ndarray::s![c_fwd.span()]).to_vec(),
            enc_rev.slice(ndarray::s![c_rev.span()]).to_vec()
        );
    }

    #[test]
    fn layout_spans_are_contiguous_and_cover() {
        let schema = schema_cat_real();
        let mut config = FeaturizerConfig::new(6, 1);
        config.include_interactions = true;
        let layout = build_layout(&schema, &config);
        let mut expected_start = 0;
        for g in &layout.groups {
            assert_eq!(g.start, expected_start);
            assert!(g.end > g.start);
            expected_start = g.end;
        }
        assert_eq!(layout.total_dim(), expected_start);
    }
}
