//! Shared fixtures for integration tests.
//!
//! The multinomial MLE here is an independent oracle: full Newton steps with
//! a backtracking line search on the exact likelihood, no proximal updates,
//! no shared code with the solver under test beyond the data structures.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rand::SeedableRng;

use ecoreg::data_model::RowKind;
use ecoreg::featurizer::{FeatureGroup, FeatureLayout, GroupSource};
use ecoreg::solver::DesignProblem;

/// Unpenalized multinomial logit MLE in the reference-class
/// parameterization. Returns (beta p x 2, intercepts [2]).
pub fn newton_mle(
    x: &Array2<f64>,
    y: &Array2<f64>,
    max_iter: usize,
    tol: f64,
) -> (Array2<f64>, [f64; 2]) {
    let n = x.nrows();
    let p = x.ncols();
    let m = 2 * (p + 1);
    let big_n: f64 = y.sum();
    assert!(big_n > 0.0);

    // theta layout: [b_0, beta_0 (p), b_1, beta_1 (p)]
    let mut theta = vec![0.0f64; m];

    let probs_of = |theta: &[f64]| -> Array2<f64> {
        let mut probs = Array2::zeros((n, 3));
        for i in 0..n {
            let mut eta = [0.0f64; 3];
            for k in 0..2 {
                let off = k * (p + 1);
                let mut e = theta[off];
                for j in 0..p {
                    e += theta[off + 1 + j] * x[[i, j]];
                }
                eta[k] = e;
            }
            let mx = eta[0].max(eta[1]).max(eta[2]);
            let exps = [(eta[0] - mx).exp(), (eta[1] - mx).exp(), (eta[2] - mx).exp()];
            let s = exps[0] + exps[1] + exps[2];
            for k in 0..3 {
                probs[[i, k]] = exps[k] / s;
            }
        }
        probs
    };
    let nll_of = |theta: &[f64]| -> f64 {
        let probs = probs_of(theta);
        let mut nll = 0.0;
        for i in 0..n {
            for k in 0..3 {
                if y[[i, k]] > 0.0 {
                    nll -= y[[i, k]] * probs[[i, k]].max(1e-300).ln();
                }
            }
        }
        nll / big_n
    };

    for _ in 0..max_iter {
        let probs = probs_of(&theta);
        let totals: Vec<f64> = (0..n).map(|i| y.row(i).sum()).collect();

        let mut grad = vec![0.0f64; m];
        let mut hess = vec![0.0f64; m * m];
        for i in 0..n {
            let mut xt = Vec::with_capacity(p + 1);
            xt.push(1.0);
            for j in 0..p {
                xt.push(x[[i, j]]);
            }
            for k in 0..2 {
                let resid = totals[i] * probs[[i, k]] - y[[i, k]];
                let off = k * (p + 1);
                for a in 0..=p {
                    grad[off + a] += resid * xt[a] / big_n;
                }
                for l in 0..2 {
                    let w = totals[i]
                        * (probs[[i, k]] * if k == l { 1.0 } else { 0.0 }
                            - probs[[i, k]] * probs[[i, l]])
                        / big_n;
                    let off_l = l * (p + 1);
                    for a in 0..=p {
                        for b in 0..=p {
                            hess[(off + a) * m + (off_l + b)] += w * xt[a] * xt[b];
                        }
                    }
                }
            }
        }

        let gmax = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if gmax < tol {
            break;
        }

        // Jittered Newton system; partial-pivot Gaussian elimination.
        for a in 0..m {
            hess[a * m + a] += 1e-10;
        }
        let mut rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let step = solve_dense(&mut hess, &mut rhs);

        let f0 = nll_of(&theta);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            if nll_of(&trial) <= f0 {
                theta = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        assert!(accepted, "line search failed");
    }

    let mut beta = Array2::zeros((p, 2));
    let mut intercepts = [0.0f64; 2];
    for k in 0..2 {
        let off = k * (p + 1);
        intercepts[k] = theta[off];
        for j in 0..p {
            beta[[j, k]] = theta[off + 1 + j];
        }
    }
    (beta, intercepts)
}

/// In-place Gaussian elimination with partial pivoting; `a` is m x m
/// row-major, consumed. Returns the solution of a x = b.
fn solve_dense(a: &mut [f64], b: &mut [f64]) -> Vec<f64> {
    let m = b.len();
    assert_eq!(a.len(), m * m);
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..m {
                a.swap(col * m + c, piv * m + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * m + col];
        assert!(d.abs() > 1e-300, "singular system");
        for r in col + 1..m {
            let f = a[r * m + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..m {
                a[r * m + c] -= f * a[col * m + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; m];
    for col in (0..m).rev() {
        let mut s = b[col];
        for c in col + 1..m {
            s -= a[col * m + c] * x[c];
        }
        x[col] = s / a[col * m + col];
    }
    x
}

/// Multinomial draw via sequential conditional binomials.
pub fn sample_multinomial(total: u64, probs: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let p_a = probs[0].clamp(0.0, 1.0);
    let n_a = Binomial::new(total, p_a).unwrap().sample(rng);
    let rest = total - n_a;
    let p_b = if probs[0] < 1.0 {
        (probs[1] / (1.0 - probs[0])).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let n_b = Binomial::new(rest, p_b).unwrap().sample(rng);
    [n_a as f64, n_b as f64, (rest - n_b) as f64]
}

pub fn softmax3(eta: [f64; 3]) -> [f64; 3] {
    let mx = eta[0].max(eta[1]).max(eta[2]);
    let e = [(eta[0] - mx).exp(), (eta[1] - mx).exp(), (eta[2] - mx).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Layout of `n_groups` equal-width groups named g00, g01, ...
pub fn uniform_layout(n_groups: usize, width: usize) -> FeatureLayout {
    let groups = (0..n_groups)
        .map(|g| FeatureGroup {
            name: format!("g{g:02}"),
            source: GroupSource::Variable {
                name: format!("g{g:02}"),
            },
            start: g * width,
            end: (g + 1) * width,
        })
        .collect();
    FeatureLayout { groups }
}

/// Random design with multinomial counts drawn from planted group
/// coefficients. `active` maps group index to its coefficient scale.
pub fn planted_problem(
    n: usize,
    n_groups: usize,
    width: usize,
    active: &[(usize, f64)],
    total_per_row: u64,
    seed: u64,
) -> (DesignProblem, Array2<f64>) {
    let p = n_groups * width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, p));
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = 0.5 * z;
    }
    let mut beta = Array2::zeros((p, 2));
    for (g, scale) in active {
        for j in (*g * width)..((*g + 1) * width) {
            for k in 0..2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                beta[[j, k]] = scale * z;
            }
        }
    }
    let mut y = Array2::zeros((n, 3));
    for i in 0..n {
        let eta = [
            x.row(i).dot(&beta.column(0)),
            x.row(i).dot(&beta.column(1)),
            0.0,
        ];
        let counts = sample_multinomial(total_per_row, softmax3(eta), &mut rng);
        for k in 0..3 {
            y[[i, k]] = counts[k];
        }
    }
    let layout = uniform_layout(n_groups, width);
    let row_ids = (0..n).map(|i| format!("r{i:04}")).collect();
    let row_kinds = vec![RowKind::TrueOutcome; n];
    let problem = DesignProblem::new(x, y, layout, row_ids, row_kinds).unwrap();
    (problem, beta)
}

/// Random counts with no structure, for gradient checks.
pub fn random_counts(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut y = Array2::zeros((n, 3));
    for i in 0..n {
        for k in 0..3 {
            y[[i, k]] = rng.gen_range(1.0..30.0f64).round();
        }
    }
    y
}
