//! Grouped elastic-net penalized multinomial-logit regression.
//!
//! The model is y_i ~ Multinomial(T_i, softmax(intercept + x_i beta)) with
//! three outcome classes and the third class as the reference (its
//! coefficient column is identically zero). The penalized objective is
//!
//!   (1/N) NLL + lambda * [ (1-alpha)/2 * ||beta||_F^2
//!                          + alpha * sum_g sqrt(3*span_g) * ||beta_g||_F ]
//!
//! minimized by block-proximal descent: a quadratic majorization of the
//! multinomial NLL per feature group, a closed-form group soft-threshold
//! update, and warm starts along a descending lambda path. Zeroed groups are
//! exact zeros, so the group sparsity pattern never has partial groups.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::RowKind;
use crate::featurizer::FeatureLayout;
use crate::seed;

pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("design matrix or counts contain non-finite values")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {folds} rows for {folds}-fold cross-validation, have {rows}")]
    TooFewRows { rows: usize, folds: usize },
    #[error("lambda_max is undefined for alpha = 0 (pure ridge)")]
    AlphaZero,
    #[error("solver did not converge at lambda = {lambda} (final relative change {final_change:e})")]
    NotConverged {
        lambda: f64,
        final_change: f64,
        fit: Box<ModelFit>,
    },
}

/// Training inputs: mean embeddings, outcome counts, and the group layout.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub x: Array2<f64>,
    /// n x 3 nonnegative counts.
    pub y: Array2<f64>,
    pub layout: FeatureLayout,
    /// Per-row likelihood weight relative to its count total; defaults to
    /// the count totals themselves (weight factor 1 per unit count).
    pub row_cv_weights: Array1<f64>,
    pub row_ids: Vec<String>,
    pub row_kinds: Vec<RowKind>,
}

impl DesignProblem {
    pub fn new(
        x: Array2<f64>,
        y: Array2<f64>,
        layout: FeatureLayout,
        row_ids: Vec<String>,
        row_kinds: Vec<RowKind>,
    ) -> Result<Self, SolverError> {
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SolverError::NonFinite);
        }
        if x.nrows() != y.nrows() || y.ncols() != 3 {
            return Err(SolverError::ShapeMismatch(format!(
                "x is {:?}, y is {:?}",
                x.shape(),
                y.shape()
            )));
        }
        if x.ncols() != layout.total_dim() {
            return Err(SolverError::ShapeMismatch(format!(
                "x has {} columns, layout covers {}",
                x.ncols(),
                layout.total_dim()
            )));
        }
        if row_ids.len() != x.nrows() || row_kinds.len() != x.nrows() {
            return Err(SolverError::ShapeMismatch(
                "row ids/kinds must match row count".into(),
            ));
        }
        let row_cv_weights = y.sum_axis(Axis(1));
        Ok(DesignProblem {
            x,
            y,
            layout,
            row_cv_weights,
            row_ids,
            row_kinds,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Per-row count totals T_i.
    pub fn totals(&self) -> Array1<f64> {
        self.y.sum_axis(Axis(1))
    }

    /// Counts rescaled so each row contributes `row_cv_weights[i]` total
    /// likelihood weight. With the default weights this is `y` itself.
    pub fn effective_counts(&self) -> Array2<f64> {
        let totals = self.totals();
        let mut y = self.y.clone();
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            if totals[i] > 0.0 {
                let f = self.row_cv_weights[i] / totals[i];
                row.mapv_inplace(|v| v * f);
            }
        }
        y
    }

    /// Restrict the design to the named feature groups, renumbering spans.
    pub fn restrict_to_groups(&self, group_names: &[String]) -> DesignProblem {
        let mut cols = Vec::new();
        let mut groups = Vec::new();
        let mut offset = 0;
        for g in &self.layout.groups {
            if group_names.iter().any(|n| *n == g.name) {
                cols.extend(g.span());
                let width = g.width();
                groups.push(crate::featurizer::FeatureGroup {
                    name: g.name.clone(),
                    source: g.source.clone(),
                    start: offset,
                    end: offset + width,
                });
                offset += width;
            }
        }
        let x = self.x.select(Axis(1), &cols);
        DesignProblem {
            x,
            y: self.y.clone(),
            layout: FeatureLayout { groups },
            row_cv_weights: self.row_cv_weights.clone(),
            row_ids: self.row_ids.clone(),
            row_kinds: self.row_kinds.clone(),
        }
    }

    fn select_rows(&self, indices: &[usize]) -> DesignProblem {
        DesignProblem {
            x: self.x.select(Axis(0), indices),
            y: self.y.select(Axis(0), indices),
            layout: self.layout.clone(),
            row_cv_weights: self.row_cv_weights.select(Axis(0), indices),
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
            row_kinds: indices.iter().map(|&i| self.row_kinds[i]).collect(),
        }
    }
}

/// One cross-validation grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub alpha: f64,
    pub lambda: f64,
    pub mean_deviance: f64,
    pub se: f64,
    /// True when any fold fit at this grid point failed to converge.
    pub flagged: bool,
}

/// A fitted model in the reference-class parameterization: `beta` is p x 3
/// with the third column identically zero, likewise `intercepts[2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub beta: Array2<f64>,
    pub intercepts: [f64; 3],
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_path: Vec<f64>,
    pub nonzero_groups: usize,
    pub cv_table: Vec<CvEntry>,
    pub layout: FeatureLayout,
    pub converged: bool,
    pub final_change: f64,
}

impl ModelFit {
    /// Names of groups with any nonzero coefficient.
    pub fn active_groups(&self) -> Vec<&str> {
        self.layout
            .groups
            .iter()
            .filter(|g| {
                self.beta
                    .slice(s![g.span(), ..])
                    .iter()
                    .any(|v| *v != 0.0)
            })
            .map(|g| g.name.as_str())
            .collect()
    }

    /// Linear predictors then softmax for each row of `x`.
    pub fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let eta = x.dot(&self.beta);
        let mut probs = Array2::zeros((x.nrows(), 3));
        for (i, row) in eta.rows().into_iter().enumerate() {
            let p = softmax([
                row[0] + self.intercepts[0],
                row[1] + self.intercepts[1],
                row[2] + self.intercepts[2],
            ]);
            probs.row_mut(i).assign(&Array1::from(p.to_vec()));
        }
        probs
    }
}

/// Numerically stable softmax over three classes.
pub fn softmax(eta: [f64; 3]) -> [f64; 3] {
    let m = eta[0].max(eta[1]).max(eta[2]);
    let e = [
        (eta[0] - m).exp(),
        (eta[1] - m).exp(),
        (eta[2] - m).exp(),
    ];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

/// Multinomial deviance per unit count: twice the log-likelihood gap to the
/// saturated model, divided by the total count. Terms with y_ik = 0
/// contribute nothing.
pub fn deviance(probs: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let totals = y.sum_axis(Axis(1));
    let n_total: f64 = totals.sum();
    let mut dev = 0.0;
    for i in 0..y.nrows() {
        for k in 0..3 {
            let yik = y[[i, k]];
            if yik > 0.0 {
                dev += yik * (yik / (totals[i] * probs[[i, k]])).ln();
            }
        }
    }
    2.0 * dev / n_total
}

/// Deviance of the intercept-only model with closed-form pooled shares.
pub fn null_deviance(y: ArrayView2<f64>) -> f64 {
    let shares = pooled_shares(y);
    let mut probs = Array2::zeros((y.nrows(), 3));
    for mut row in probs.rows_mut() {
        row.assign(&Array1::from(shares.to_vec()));
    }
    deviance(probs.view(), y)
}

/// 1 - deviance(fit) / deviance(null model).
pub fn fraction_deviance_explained(fit: &ModelFit, problem: &DesignProblem) -> f64 {
    let probs = fit.predict_probs(problem.x.view());
    let null = null_deviance(problem.y.view());
    if null == 0.0 {
        return 0.0;
    }
    1.0 - deviance(probs.view(), problem.y.view()) / null
}

fn pooled_shares(y: ArrayView2<f64>) -> [f64; 3] {
    let sums = y.sum_axis(Axis(0));
    let total = sums.sum();
    [sums[0] / total, sums[1] / total, sums[2] / total]
}

/// Closed-form intercept-only MLE in the reference parameterization.
pub fn pooled_share_intercepts(y: ArrayView2<f64>) -> [f64; 3] {
    let s = pooled_shares(y);
    // Zero pooled counts in a class would need an infinite intercept; clamp.
    let floor = 1e-12;
    [
        (s[0].max(floor) / s[2].max(floor)).ln(),
        (s[1].max(floor) / s[2].max(floor)).ln(),
        0.0,
    ]
}

fn group_weight(span: usize) -> f64 {
    ((3 * span) as f64).sqrt()
}

/// Count-normalized negative log-likelihood at a full p x 3 coefficient
/// matrix (third column is ignored as the reference).
pub fn count_normalized_nll(
    beta: ArrayView2<f64>,
    intercepts: &[f64; 3],
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> f64 {
    let eta = x.dot(&beta);
    let totals = y.sum_axis(Axis(1));
    let n_total: f64 = totals.sum();
    let mut nll = 0.0;
    for i in 0..y.nrows() {
        let e = [
            eta[[i, 0]] + intercepts[0],
            eta[[i, 1]] + intercepts[1],
            eta[[i, 2]] + intercepts[2],
        ];
        let m = e[0].max(e[1]).max(e[2]);
        let lse = m + ((e[0] - m).exp() + (e[1] - m).exp() + (e[2] - m).exp()).ln();
        nll += totals[i] * lse - y[[i, 0]] * e[0] - y[[i, 1]] * e[1] - y[[i, 2]] * e[2];
    }
    nll / n_total
}

/// Analytic gradient of `count_normalized_nll` with respect to the free
/// coefficients (columns 0 and 1) and intercepts.
pub fn nll_gradient(
    beta: ArrayView2<f64>,
    intercepts: &[f64; 3],
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> (Array2<f64>, [f64; 2]) {
    let eta = x.dot(&beta);
    let totals = y.sum_axis(Axis(1));
    let n_total: f64 = totals.sum();
    let mut resid = Array2::zeros((y.nrows(), 2));
    for i in 0..y.nrows() {
        let p = softmax([
            eta[[i, 0]] + intercepts[0],
            eta[[i, 1]] + intercepts[1],
            eta[[i, 2]] + intercepts[2],
        ]);
        resid[[i, 0]] = totals[i] * p[0] - y[[i, 0]];
        resid[[i, 1]] = totals[i] * p[1] - y[[i, 1]];
    }
    let grad_beta = x.t().dot(&resid) / n_total;
    let grad_int = [
        resid.column(0).sum() / n_total,
        resid.column(1).sum() / n_total,
    ];
    (grad_beta, grad_int)
}

/// Smallest lambda at which every feature group is zero at the optimum.
pub fn lambda_max(problem: &DesignProblem, alpha: f64) -> Result<f64, SolverError> {
    if alpha <= 0.0 {
        return Err(SolverError::AlphaZero);
    }
    let y = problem.effective_counts();
    let intercepts = pooled_share_intercepts(y.view());
    let beta = Array2::zeros((problem.n_features(), 3));
    let (grad, _) = nll_gradient(beta.view(), &intercepts, problem.x.view(), y.view());
    let mut lm = 0.0f64;
    for g in &problem.layout.groups {
        let norm: f64 = grad
            .slice(s![g.span(), ..])
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        lm = lm.max(norm / (alpha * group_weight(g.width())));
    }
    Ok(lm.max(1e-10))
}

/// Lambda grid settings for `fit_path`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub n_lambda: usize,
    /// Ratio of the smallest to the largest lambda; when unset, 1e-3 if
    /// n > p and 1e-2 otherwise.
    pub lambda_min_ratio: Option<f64>,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            n_lambda: 100,
            lambda_min_ratio: None,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            tol: DEFAULT_TOL,
        }
    }
}

impl PathConfig {
    fn ratio(&self, n: usize, p: usize) -> f64 {
        self.lambda_min_ratio
            .unwrap_or(if n > p { 1e-3 } else { 1e-2 })
    }
}

/// Log-spaced descending lambda grid for a problem.
pub fn lambda_grid(problem: &DesignProblem, alpha: f64, path: &PathConfig) -> Result<Vec<f64>, SolverError> {
    let lm = if alpha > 0.0 {
        lambda_max(problem, alpha)?
    } else {
        // Pure ridge has no finite zeroing threshold; start the path at a
        // fixed large multiple of the group-lasso threshold.
        100.0 * lambda_max(problem, 1.0)?
    };
    let ratio = path.ratio(problem.n_rows(), problem.n_features());
    if path.n_lambda == 1 {
        return Ok(vec![lm]);
    }
    let log_max = lm.ln();
    let log_min = (lm * ratio).ln();
    Ok((0..path.n_lambda)
        .map(|i| {
            let t = i as f64 / (path.n_lambda - 1) as f64;
            (log_max + t * (log_min - log_max)).exp()
        })
        .collect())
}

struct FitState {
    beta: Array2<f64>,      // p x 2, free columns only
    intercepts: [f64; 2],
}

fn penalized_objective(
    state: &FitState,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    layout: &FeatureLayout,
    alpha: f64,
    lambda: f64,
) -> f64 {
    let mut beta3 = Array2::zeros((x.ncols(), 3));
    beta3.slice_mut(s![.., 0..2]).assign(&state.beta);
    let intercepts = [state.intercepts[0], state.intercepts[1], 0.0];
    let nll = count_normalized_nll(beta3.view(), &intercepts, x, y);
    let mut ridge = 0.0;
    let mut group = 0.0;
    for g in &layout.groups {
        let block = state.beta.slice(s![g.span(), ..]);
        let sq: f64 = block.iter().map(|v| v * v).sum();
        ridge += sq;
        group += group_weight(g.width()) * sq.sqrt();
    }
    nll + lambda * ((1.0 - alpha) / 2.0 * ridge + alpha * group)
}

/// Fit one (alpha, lambda) point by majorized block-proximal descent.
///
/// `warm` seeds the coefficients; without it the fit starts from zero with
/// closed-form pooled-share intercepts. Returns the fit with a convergence
/// flag instead of erroring so a path can continue past a hard point; use
/// [`fit_at`] for the erroring contract.
#[allow(clippy::too_many_arguments)]
fn fit_point(
    problem: &DesignProblem,
    y_eff: &Array2<f64>,
    alpha: f64,
    lambda: f64,
    path: &PathConfig,
    group_lipschitz: &[f64],
    warm: Option<&FitState>,
) -> (FitState, bool, f64) {
    let x = &problem.x;
    let n = problem.n_rows();
    let p = problem.n_features();
    let totals = y_eff.sum_axis(Axis(1));
    let n_total: f64 = totals.sum();

    let mut state = match warm {
        Some(w) => FitState {
            beta: w.beta.clone(),
            intercepts: w.intercepts,
        },
        None => {
            let ints = pooled_share_intercepts(y_eff.view());
            FitState {
                beta: Array2::zeros((p, 2)),
                intercepts: [ints[0], ints[1]],
            }
        }
    };

    let mut eta = x.dot(&state.beta);
    // Residual matrix R_ik = T_i p_ik - y_ik for the two free classes.
    let mut resid = Array2::zeros((n, 2));
    let recompute_resid = |eta: &Array2<f64>, intercepts: &[f64; 2], resid: &mut Array2<f64>| {
        for i in 0..n {
            let pr = softmax([
                eta[[i, 0]] + intercepts[0],
                eta[[i, 1]] + intercepts[1],
                0.0,
            ]);
            resid[[i, 0]] = totals[i] * pr[0] - y_eff[[i, 0]];
            resid[[i, 1]] = totals[i] * pr[1] - y_eff[[i, 1]];
        }
    };

    let mut converged = false;
    let mut final_change = f64::INFINITY;
    let mut prev_objective = f64::INFINITY;
    for _sweep in 0..path.max_sweeps {
        let mut max_delta = 0.0f64;
        let mut max_coef = 0.0f64;

        // Intercepts first so the group zeroing threshold is evaluated
        // against up-to-date intercepts (majorization constant 1/2).
        recompute_resid(&eta, &state.intercepts, &mut resid);
        for k in 0..2 {
            let grad = resid.column(k).sum() / n_total;
            let delta = -grad / 0.5;
            state.intercepts[k] += delta;
            max_delta = max_delta.max(delta.abs());
            max_coef = max_coef.max(state.intercepts[k].abs());
        }

        for (gi, g) in problem.layout.groups.iter().enumerate() {
            let l = group_lipschitz[gi];
            if l <= 0.0 {
                continue;
            }
            recompute_resid(&eta, &state.intercepts, &mut resid);
            let xg = x.slice(s![.., g.span()]);
            let grad = xg.t().dot(&resid) / n_total;
            let old = state.beta.slice(s![g.span(), ..]).to_owned();
            // v = l*beta_g - grad_g; group soft threshold then ridge shrink.
            let v = &old * l - &grad;
            let v_norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let threshold = lambda * alpha * group_weight(g.width());
            // Tiny relative slack so a group sitting exactly at the
            // lambda_max threshold is zeroed despite roundoff.
            let new = if v_norm <= threshold * (1.0 + 1e-9) {
                Array2::zeros(old.raw_dim())
            } else {
                &v * ((1.0 - threshold / v_norm) / (l + lambda * (1.0 - alpha)))
            };
            let delta = &new - &old;
            let delta_max = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if delta_max > 0.0 {
                let update = xg.dot(&delta);
                eta += &update;
                state.beta.slice_mut(s![g.span(), ..]).assign(&new);
            }
            max_delta = max_delta.max(delta_max);
            max_coef = max_coef.max(new.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }

        let objective = penalized_objective(&state, x.view(), y_eff.view(), &problem.layout, alpha, lambda);
        debug_assert!(
            objective <= prev_objective + 1e-9 * (1.0 + prev_objective.abs()),
            "majorized sweep increased the objective: {prev_objective} -> {objective}"
        );
        prev_objective = objective;

        final_change = max_delta / (max_coef + 1e-10);
        if final_change < path.tol {
            converged = true;
            break;
        }
    }

    (state, converged, final_change)
}

fn state_to_fit(
    state: &FitState,
    problem: &DesignProblem,
    alpha: f64,
    lambda: f64,
    lambda_path: Vec<f64>,
    converged: bool,
    final_change: f64,
) -> ModelFit {
    let p = problem.n_features();
    let mut beta = Array2::zeros((p, 3));
    beta.slice_mut(s![.., 0..2]).assign(&state.beta);
    let mut fit = ModelFit {
        beta,
        intercepts: [state.intercepts[0], state.intercepts[1], 0.0],
        alpha,
        lambda,
        lambda_path,
        nonzero_groups: 0,
        cv_table: Vec::new(),
        layout: problem.layout.clone(),
        converged,
        final_change,
    };
    fit.nonzero_groups = fit.active_groups().len();
    fit
}

fn group_lipschitz_constants(problem: &DesignProblem, y_eff: &Array2<f64>) -> Vec<f64> {
    let totals = y_eff.sum_axis(Axis(1));
    let n_total: f64 = totals.sum();
    problem
        .layout
        .groups
        .iter()
        .map(|g| {
            let mut s = 0.0;
            for i in 0..problem.n_rows() {
                let row = problem.x.slice(s![i, g.span()]);
                s += totals[i] * row.dot(&row);
            }
            0.5 * s / n_total
        })
        .collect()
}

/// Fit the whole descending lambda path with warm starts.
///
/// Non-converged points are returned with `converged == false` rather than
/// aborting the path.
pub fn fit_path(
    problem: &DesignProblem,
    alpha: f64,
    path: &PathConfig,
) -> Result<Vec<ModelFit>, SolverError> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
    assert!(path.n_lambda >= 1);
    let grid = lambda_grid(problem, alpha, path)?;
    let y_eff = problem.effective_counts();
    let lipschitz = group_lipschitz_constants(problem, &y_eff);

    let mut fits = Vec::with_capacity(grid.len());
    let mut warm: Option<FitState> = None;
    for &lambda in &grid {
        let (state, converged, change) = fit_point(
            problem,
            &y_eff,
            alpha,
            lambda,
            path,
            &lipschitz,
            warm.as_ref(),
        );
        fits.push(state_to_fit(
            &state,
            problem,
            alpha,
            lambda,
            grid.clone(),
            converged,
            change,
        ));
        warm = Some(state);
    }
    Ok(fits)
}

/// Fit a single (alpha, lambda) point cold-start.
///
/// Errors with `NotConverged` (carrying the partial fit) when the sweep
/// limit is reached.
pub fn fit_at(
    problem: &DesignProblem,
    alpha: f64,
    lambda: f64,
    path: &PathConfig,
) -> Result<ModelFit, SolverError> {
    let y_eff = problem.effective_counts();
    let lipschitz = group_lipschitz_constants(problem, &y_eff);
    let (state, converged, change) =
        fit_point(problem, &y_eff, alpha, lambda, path, &lipschitz, None);
    let fit = state_to_fit(&state, problem, alpha, lambda, vec![lambda], converged, change);
    if converged {
        Ok(fit)
    } else {
        Err(SolverError::NotConverged {
            lambda,
            final_change: change,
            fit: Box::new(fit),
        })
    }
}

/// Cross-validation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub best_alpha: f64,
    pub best_lambda: f64,
    /// Largest lambda whose mean deviance is within one standard error of
    /// the minimum, at the best alpha.
    pub lambda_1se: f64,
    pub table: Vec<CvEntry>,
}

/// K-fold cross-validation over an alpha grid and the per-alpha lambda path.
///
/// Folds are a seeded shuffle of the true-outcome rows; exit-poll
/// augmentation rows are never held out and join every training fold. The
/// criterion is mean held-out deviance per unit count.
pub fn cross_validate(
    problem: &DesignProblem,
    alpha_grid: &[f64],
    path: &PathConfig,
    n_folds: usize,
    fold_seed: u64,
) -> Result<CvSelection, SolverError> {
    assert!(n_folds >= 2, "need at least 2 folds");
    let holdout_eligible: Vec<usize> = (0..problem.n_rows())
        .filter(|&i| problem.row_kinds[i] == RowKind::TrueOutcome)
        .collect();
    let always_train: Vec<usize> = (0..problem.n_rows())
        .filter(|&i| problem.row_kinds[i] != RowKind::TrueOutcome)
        .collect();
    if holdout_eligible.len() < n_folds {
        return Err(SolverError::TooFewRows {
            rows: holdout_eligible.len(),
            folds: n_folds,
        });
    }

    let mut shuffled = holdout_eligible;
    shuffled.shuffle(&mut seed::rng(fold_seed, "cv-folds"));
    let folds: Vec<Vec<usize>> = (0..n_folds)
        .map(|f| {
            shuffled
                .iter()
                .copied()
                .skip(f)
                .step_by(n_folds)
                .collect()
        })
        .collect();

    // Per alpha: the lambda grid comes from the full problem so every fold
    // shares it.
    let mut table = Vec::new();
    let mut per_alpha_grids = Vec::new();
    for &alpha in alpha_grid {
        per_alpha_grids.push(lambda_grid(problem, alpha, path)?);
    }

    // (alpha index, fold index) tasks run in parallel; results are gathered
    // in task order so the table is deterministic.
    let tasks: Vec<(usize, usize)> = (0..alpha_grid.len())
        .flat_map(|a| (0..n_folds).map(move |f| (a, f)))
        .collect();
    let results: Vec<Vec<(f64, bool)>> = tasks
        .par_iter()
        .map(|&(a, f)| {
            let alpha = alpha_grid[a];
            let grid = &per_alpha_grids[a];
            let mut train: Vec<usize> = shuffled
                .iter()
                .copied()
                .filter(|i| !folds[f].contains(i))
                .collect();
            train.extend(always_train.iter().copied());
            train.sort_unstable();
            let train_problem = problem.select_rows(&train);
            let holdout = problem.select_rows(&folds[f]);

            let y_eff = train_problem.effective_counts();
            let lipschitz = group_lipschitz_constants(&train_problem, &y_eff);
            let mut warm: Option<FitState> = None;
            let mut fold_devs = Vec::with_capacity(grid.len());
            for &lambda in grid {
                let (state, converged, _) = fit_point(
                    &train_problem,
                    &y_eff,
                    alpha,
                    lambda,
                    path,
                    &lipschitz,
                    warm.as_ref(),
                );
                let fit = state_to_fit(&state, &train_problem, alpha, lambda, vec![], converged, 0.0);
                let probs = fit.predict_probs(holdout.x.view());
                fold_devs.push((deviance(probs.view(), holdout.y.view()), !converged));
                warm = Some(state);
            }
            fold_devs
        })
        .collect();

    for (a, &alpha) in alpha_grid.iter().enumerate() {
        let grid = &per_alpha_grids[a];
        for (li, &lambda) in grid.iter().enumerate() {
            let devs: Vec<f64> = (0..n_folds)
                .map(|f| results[a * n_folds + f][li].0)
                .collect();
            let flagged = (0..n_folds).any(|f| results[a * n_folds + f][li].1);
            let mean = devs.iter().sum::<f64>() / n_folds as f64;
            let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                / (n_folds as f64 - 1.0);
            let se = (var / n_folds as f64).sqrt();
            table.push(CvEntry {
                alpha,
                lambda,
                mean_deviance: mean,
                se,
                flagged,
            });
        }
    }

    let best = table
        .iter()
        .min_by(|a, b| a.mean_deviance.partial_cmp(&b.mean_deviance).unwrap())
        .expect("non-empty grid")
        .clone();
    let lambda_1se = table
        .iter()
        .filter(|e| e.alpha == best.alpha && e.mean_deviance <= best.mean_deviance + best.se)
        .map(|e| e.lambda)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(CvSelection {
        best_alpha: best.alpha,
        best_lambda: best.lambda,
        lambda_1se,
        table,
    })
}
