//! Synthetic dataset generator with known ground truth.
//!
//! Outcomes are drawn from the model itself: region embeddings are computed
//! with the real feature maps, pushed through planted coefficients, and
//! counts sampled from the resulting multinomial. Recovery tests therefore
//! have an exact target, not an asymptotic one.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    OutcomeCounts, Record, RegionRow, RegionTable, RowKind, Schema, Value, VariableKind,
};
use crate::featurizer::{build_embedding_matrix, fit_maps, group_by_region, FeaturizerConfig, FittedMaps};
use crate::seed;
use crate::solver::{softmax, DesignProblem};

use super::IoError;

/// Planted coefficients for one feature group; groups not mentioned are
/// identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EffectSpec {
    /// Explicit per-column coefficients for the two free classes, length
    /// equal to the group span.
    Coefficients(Vec<[f64; 2]>),
    /// Draw the group's coefficients from Normal(0, scale).
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub schema: Schema,
    pub featurizer: FeaturizerConfig,
    pub n_regions: usize,
    /// Regions are assigned to states round-robin; region ids are
    /// `<state>-<index>` so the state is recoverable from the id prefix.
    pub n_states: usize,
    /// Inclusive range of individuals per region.
    pub samples_per_region: (usize, usize),
    /// True intercepts; the third entry sets the baseline rate of the
    /// other/non-voting class.
    pub intercepts: [f64; 3],
    /// Group name -> planted effect.
    pub effects: BTreeMap<String, EffectSpec>,
    /// Scales region weight totals into multinomial trial counts.
    pub count_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(schema: Schema, featurizer: FeaturizerConfig, n_regions: usize, seed: u64) -> Self {
        SyntheticSpec {
            schema,
            featurizer,
            n_regions,
            n_states: 1,
            samples_per_region: (40, 80),
            intercepts: [0.0, 0.0, 0.0],
            effects: BTreeMap::new(),
            count_scale: 100.0,
            seed,
        }
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub records: Vec<Record>,
    pub table: RegionTable,
    pub maps: FittedMaps,
    pub problem: DesignProblem,
    /// Planted coefficients in full p x 3 form (third column zero).
    pub true_beta: Array2<f64>,
    pub true_intercepts: [f64; 3],
    pub region_to_state: BTreeMap<String, String>,
}

fn sample_region_profile(
    schema: &Schema,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (BTreeMap<String, Vec<f64>>, BTreeMap<String, f64>) {
    let mut cat_freqs = BTreeMap::new();
    let mut real_means = BTreeMap::new();
    for var in &schema.variables {
        match &var.kind {
            VariableKind::Categorical { levels, .. } => {
                // Exponential draws normalized: a flat-Dirichlet frequency vector.
                let mut f: Vec<f64> = (0..levels.len())
                    .map(|_| -rng.gen_range(1e-12..1.0f64).ln())
                    .collect();
                let s: f64 = f.iter().sum();
                f.iter_mut().for_each(|v| *v /= s);
                cat_freqs.insert(var.name.clone(), f);
            }
            VariableKind::Real => {
                let m: f64 = StandardNormal.sample(rng);
                real_means.insert(var.name.clone(), m);
            }
        }
    }
    (cat_freqs, real_means)
}

/// Multinomial draw by sequential conditional binomials.
fn sample_multinomial(total: u64, probs: [f64; 3], rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    let p_a = probs[0].clamp(0.0, 1.0);
    let n_a = Binomial::new(total, p_a).expect("valid binomial").sample(rng);
    let rest = total - n_a;
    let p_b_cond = if probs[0] < 1.0 {
        (probs[1] / (1.0 - probs[0])).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let n_b = Binomial::new(rest, p_b_cond).expect("valid binomial").sample(rng);
    [n_a as f64, n_b as f64, (rest - n_b) as f64]
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, IoError> {
    assert!(spec.n_regions > 0 && spec.n_states > 0);
    assert!(spec.samples_per_region.0 > 0 && spec.samples_per_region.0 <= spec.samples_per_region.1);

    let mut profile_rng = seed::rng(spec.seed, "synth:profiles");
    let mut record_rng = seed::rng(spec.seed, "synth:records");
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut records = Vec::new();
    let mut region_to_state = BTreeMap::new();
    for i in 0..spec.n_regions {
        let state = format!("s{:02}", i % spec.n_states);
        let region_id = format!("{state}-{i:04}");
        region_to_state.insert(region_id.clone(), state);
        let (cat_freqs, real_means) = sample_region_profile(&spec.schema, &mut profile_rng);
        let n = record_rng.gen_range(spec.samples_per_region.0..=spec.samples_per_region.1);
        for _ in 0..n {
            let mut values = BTreeMap::new();
            for var in &spec.schema.variables {
                let value = match &var.kind {
                    VariableKind::Categorical { levels, .. } => {
                        let freqs = &cat_freqs[&var.name];
                        let u: f64 = record_rng.gen_range(0.0..1.0);
                        let mut acc = 0.0;
                        let mut chosen = levels.len() - 1;
                        for (k, f) in freqs.iter().enumerate() {
                            acc += f;
                            if u < acc {
                                chosen = k;
                                break;
                            }
                        }
                        Value::Level(levels[chosen].clone())
                    }
                    VariableKind::Real => {
                        Value::Real(real_means[&var.name] + normal.sample(&mut record_rng))
                    }
                };
                values.insert(var.name.clone(), value);
            }
            records.push(Record {
                region_id: region_id.clone(),
                weight: record_rng.gen_range(0.5..2.0),
                values,
            });
        }
    }

    let maps = fit_maps(&records, &spec.schema, &spec.featurizer)?;
    let grouped = group_by_region(&records);
    let matrix = build_embedding_matrix(&grouped, &maps)?;
    let layout = matrix.layout.clone();
    let p = layout.total_dim();

    let mut true_beta = Array2::zeros((p, 3));
    for (name, effect) in &spec.effects {
        let group = layout
            .group(name)
            .unwrap_or_else(|| panic!("effect names unknown group `{name}`"));
        match effect {
            EffectSpec::Coefficients(cols) => {
                assert_eq!(cols.len(), group.width(), "effect length for `{name}`");
                for (j, c) in cols.iter().enumerate() {
                    true_beta[[group.start + j, 0]] = c[0];
                    true_beta[[group.start + j, 1]] = c[1];
                }
            }
            EffectSpec::Random { scale } => {
                let mut rng = seed::rng(spec.seed, &format!("synth:beta:{name}"));
                for j in group.span() {
                    for k in 0..2 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        true_beta[[j, k]] = scale * z;
                    }
                }
            }
        }
    }

    let mut count_rng = seed::rng(spec.seed, "synth:counts");
    let mut rows = Vec::with_capacity(matrix.n_rows());
    let mut y = Array2::zeros((matrix.n_rows(), 3));
    for (i, row_id) in matrix.row_ids.iter().enumerate() {
        let mu = matrix.rows.row(i);
        let eta = [
            spec.intercepts[0] + mu.dot(&true_beta.column(0)),
            spec.intercepts[1] + mu.dot(&true_beta.column(1)),
            spec.intercepts[2] + mu.dot(&true_beta.column(2)),
        ];
        let probs = softmax(eta);
        let total = (matrix.row_weight_totals[i] * spec.count_scale).round().max(3.0) as u64;
        let counts = sample_multinomial(total, probs, &mut count_rng);
        for k in 0..3 {
            y[[i, k]] = counts[k];
        }
        rows.push(RegionRow {
            row_id: row_id.clone(),
            region_id: row_id.clone(),
            kind: RowKind::TrueOutcome,
            outcome: OutcomeCounts::new(counts)?,
        });
    }
    let table = RegionTable::new(rows).expect("region ids unique");
    let problem = DesignProblem::new(
        matrix.rows.clone(),
        y,
        layout,
        matrix.row_ids.clone(),
        matrix.row_kinds.clone(),
    )
    .expect("generated problem is well formed");

    Ok(SyntheticData {
        records,
        table,
        maps,
        problem,
        true_beta,
        true_intercepts: spec.intercepts,
        region_to_state,
    })
}
