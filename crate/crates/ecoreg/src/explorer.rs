//! Group-based exploratory analysis.
//!
//! Refits the model restricted to one feature group at a time (a variable or
//! a declared interaction), ranks the groups by cross-validated deviance,
//! and emits square-plot marginal-effect data (two-party share vs.
//! participation per category level, bubble-sized by subgroup weight).

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Record, VariableKind};
use crate::featurizer::{FeatureLayout, FeaturizerConfig, FittedMaps};
use crate::inference::{predict_subgroup, subgroup_embedding, Clause, SubgroupQuery};
use crate::solver::{
    cross_validate, fit_path, fraction_deviance_explained, DesignProblem, PathConfig, SolverError,
};

#[derive(Debug, Error)]
pub enum ExplorerError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Featurizer(#[from] crate::featurizer::FeaturizerError),
    #[error("`{0}` is not a categorical variable or categorical interaction")]
    NotCategorical(String),
    #[error("feature group `{0}` not found in the layout")]
    UnknownGroup(String),
}

/// Result of fitting one restricted feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRun {
    pub feature_set: Vec<String>,
    pub cv_deviance: f64,
    pub frac_deviance: f64,
    pub n_active: usize,
    pub flagged: bool,
}

impl GroupRun {
    pub fn label(&self) -> String {
        self.feature_set.join("+")
    }
}

/// One feature set per declared variable plus one per declared interaction,
/// in declaration order.
pub fn enumerate_feature_sets(schema: &crate::data_model::Schema, config: &FeaturizerConfig) -> Vec<Vec<String>> {
    let mut sets: Vec<Vec<String>> = schema
        .variables
        .iter()
        .map(|v| vec![v.name.clone()])
        .collect();
    if config.include_interactions {
        for (a, b) in &schema.interactions {
            sets.push(vec![crate::featurizer::interaction_group_name(a, b)]);
        }
    }
    sets
}

#[derive(Debug, Clone)]
pub struct ExplorationConfig {
    pub alpha_grid: Vec<f64>,
    pub path: PathConfig,
    pub n_folds: usize,
    pub fold_seed: u64,
}

/// Cross-validate each restricted feature set and rank ascending by best
/// mean CV deviance (per unit count). Ties break on the set label so the
/// ranking is reproducible byte for byte.
pub fn run_exploration(
    problem: &DesignProblem,
    feature_sets: &[Vec<String>],
    config: &ExplorationConfig,
) -> Result<Vec<GroupRun>, ExplorerError> {
    let mut runs = Vec::with_capacity(feature_sets.len());
    for set in feature_sets {
        for name in set {
            if problem.layout.group(name).is_none() {
                return Err(ExplorerError::UnknownGroup(name.clone()));
            }
        }
        let restricted = problem.restrict_to_groups(set);
        let cv = cross_validate(
            &restricted,
            &config.alpha_grid,
            &config.path,
            config.n_folds,
            config.fold_seed,
        )?;
        let best = cv
            .table
            .iter()
            .find(|e| e.alpha == cv.best_alpha && e.lambda == cv.best_lambda)
            .expect("best entry present")
            .clone();
        // Refit on the full restricted problem at the selected point for the
        // in-sample diagnostics.
        let path_to_best = PathConfig {
            n_lambda: 20,
            lambda_min_ratio: Some((cv.best_lambda
                / crate::solver::lambda_grid(&restricted, cv.best_alpha, &config.path)?[0])
                .min(1.0)),
            ..config.path
        };
        let fits = fit_path(&restricted, cv.best_alpha, &path_to_best)?;
        let fit = fits.last().expect("non-empty path");
        runs.push(GroupRun {
            feature_set: set.clone(),
            cv_deviance: best.mean_deviance,
            frac_deviance: fraction_deviance_explained(fit, &restricted),
            n_active: fit.nonzero_groups,
            flagged: best.flagged,
        });
    }
    runs.sort_by(|a, b| {
        a.cv_deviance
            .partial_cmp(&b.cv_deviance)
            .unwrap()
            .then_with(|| a.label().cmp(&b.label()))
    });
    Ok(runs)
}

/// One bubble in the square plot: a category level's two-party share for
/// candidate B against its participation rate, sized by population weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquarePlotPoint {
    pub category_level: String,
    pub share_b_two_party: f64,
    pub participation_rate: f64,
    pub bubble_size: f64,
}

/// Restrict a full-layout embedding to the columns of a restricted layout,
/// matching groups by name.
pub fn restrict_embedding(
    mu: &Array1<f64>,
    full: &FeatureLayout,
    restricted: &FeatureLayout,
) -> Result<Array1<f64>, ExplorerError> {
    let mut out = Array1::zeros(restricted.total_dim());
    for g in &restricted.groups {
        let src = full
            .group(&g.name)
            .ok_or_else(|| ExplorerError::UnknownGroup(g.name.clone()))?;
        out.slice_mut(ndarray::s![g.span()])
            .assign(&mu.slice(ndarray::s![src.span()]));
    }
    Ok(out)
}

fn level_queries(
    maps: &FittedMaps,
    target: &str,
) -> Result<Vec<(String, SubgroupQuery)>, ExplorerError> {
    // A plain categorical variable, or a categorical-by-categorical
    // interaction group named "a*b".
    if let Some(var) = maps.schema.variable(target) {
        let VariableKind::Categorical { levels, .. } = &var.kind else {
            return Err(ExplorerError::NotCategorical(target.to_string()));
        };
        return Ok(levels
            .iter()
            .map(|level| {
                (
                    level.clone(),
                    SubgroupQuery::new(
                        level.clone(),
                        vec![Clause::Levels {
                            var: var.name.clone(),
                            levels: vec![level.clone()],
                        }],
                    ),
                )
            })
            .collect());
    }
    if let Some((a, b)) = target.split_once('*') {
        let (sa, sb) = (maps.schema.variable(a), maps.schema.variable(b));
        if let (Some(sa), Some(sb)) = (sa, sb) {
            if let (
                VariableKind::Categorical { levels: la, .. },
                VariableKind::Categorical { levels: lb, .. },
            ) = (&sa.kind, &sb.kind)
            {
                let mut out = Vec::new();
                for x in la {
                    for y in lb {
                        out.push((
                            format!("{x}/{y}"),
                            SubgroupQuery::new(
                                format!("{x}/{y}"),
                                vec![
                                    Clause::Levels {
                                        var: sa.name.clone(),
                                        levels: vec![x.clone()],
                                    },
                                    Clause::Levels {
                                        var: sb.name.clone(),
                                        levels: vec![y.clone()],
                                    },
                                ],
                            ),
                        ));
                    }
                }
                return Ok(out);
            }
        }
    }
    Err(ExplorerError::NotCategorical(target.to_string()))
}

/// National square-plot data for a categorical variable (or cat-by-cat
/// interaction) under a model restricted to that group.
///
/// `top_k` keeps only the most-populous levels; `None` keeps all.
pub fn square_plot_data(
    fit_restricted: &crate::solver::ModelFit,
    region_records: &BTreeMap<String, Vec<Record>>,
    maps: &FittedMaps,
    target: &str,
    top_k: Option<usize>,
) -> Result<Vec<SquarePlotPoint>, ExplorerError> {
    let queries = level_queries(maps, target)?;
    let mut points = Vec::new();
    for (level, query) in &queries {
        let mut expected = [0.0f64; 3];
        let mut weight = 0.0f64;
        for records in region_records.values() {
            if let Some((mu, w)) = subgroup_embedding(records, query, maps)? {
                let mu_r = restrict_embedding(&mu, &maps.layout, &fit_restricted.layout)?;
                let (_, e) = predict_subgroup(fit_restricted, mu_r.view(), w);
                for k in 0..3 {
                    expected[k] += e[k];
                }
                weight += w;
            }
        }
        if weight == 0.0 {
            continue;
        }
        let two_party = expected[0] + expected[1];
        points.push(SquarePlotPoint {
            category_level: level.clone(),
            share_b_two_party: expected[1] / two_party,
            participation_rate: two_party / weight,
            bubble_size: weight,
        });
    }
    if let Some(k) = top_k {
        points.sort_by(|a, b| {
            b.bubble_size
                .partial_cmp(&a.bubble_size)
                .unwrap()
                .then_with(|| a.category_level.cmp(&b.category_level))
        });
        points.truncate(k);
    }
    Ok(points)
}
