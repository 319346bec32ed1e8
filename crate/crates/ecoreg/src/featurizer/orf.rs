//! Orthogonal random Fourier features for the Gaussian kernel.
//!
//! The projection is built from square Gaussian blocks that are
//! orthogonalized and then row-rescaled by independent chi-distributed
//! norms, which keeps the marginal row distribution Gaussian while reducing
//! kernel-approximation variance.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;

/// Fitted random-feature map for one real variable or one standardized
/// interaction pair. Regenerable bit-identically from
/// `(input_dim, num_features, bandwidth, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrfMap {
    pub input_dim: usize,
    /// Output dimension D (even); the projection has D/2 rows.
    pub num_features: usize,
    pub bandwidth: f64,
    pub seed: u64,
    pub projection: Array2<f64>,
    pub offsets: Array1<f64>,
}

/// Orthonormal square blocks drawn before chi rescaling.
///
/// Exposed separately so the orthogonality property can be checked on the
/// exact blocks the builder consumes.
pub fn orthonormal_blocks(input_dim: usize, n_blocks: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut g = Array2::zeros((input_dim, input_dim));
        for v in g.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        // Modified Gram-Schmidt on rows.
        for i in 0..input_dim {
            for j in 0..i {
                let proj: f64 = g.row(i).dot(&g.row(j));
                let prev = g.row(j).to_owned();
                g.row_mut(i).scaled_add(-proj, &prev);
            }
            let norm = g.row(i).dot(&g.row(i)).sqrt();
            // A degenerate draw is astronomically unlikely with continuous
            // Gaussians; resampling would break stream alignment, so fail loudly.
            assert!(norm > 1e-12, "degenerate Gaussian block during orthogonalization");
            g.row_mut(i).mapv_inplace(|v| v / norm);
        }
        blocks.push(g);
    }
    blocks
}

fn chi_sample(dim: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut s = 0.0;
    for _ in 0..dim {
        let z: f64 = StandardNormal.sample(rng);
        s += z * z;
    }
    s.sqrt()
}

/// Build the feature map: stacked orthogonalized Gaussian blocks with
/// chi-distributed row norms, scaled by the bandwidth, plus uniform phase
/// offsets.
pub fn build_orf(input_dim: usize, num_features: usize, bandwidth: f64, map_seed: u64) -> OrfMap {
    assert!(input_dim > 0, "input_dim must be positive");
    assert!(
        num_features >= 2 && num_features % 2 == 0,
        "num_features must be even and >= 2"
    );
    assert!(
        bandwidth > 0.0 && bandwidth.is_finite(),
        "bandwidth must be positive"
    );
    let rows = num_features / 2;
    let n_blocks = rows.div_ceil(input_dim);
    let mut rng = seed::rng(map_seed, "orf");
    let blocks = orthonormal_blocks(input_dim, n_blocks, &mut rng);

    let mut projection = Array2::zeros((rows, input_dim));
    let mut row = 0;
    'outer: for block in &blocks {
        for i in 0..input_dim {
            if row == rows {
                break 'outer;
            }
            let scale = chi_sample(input_dim, &mut rng) / bandwidth;
            for j in 0..input_dim {
                projection[[row, j]] = block[[i, j]] * scale;
            }
            row += 1;
        }
    }

    let mut offsets = Array1::zeros(rows);
    for v in offsets.iter_mut() {
        *v = rng.gen_range(0.0..std::f64::consts::TAU);
    }

    OrfMap {
        input_dim,
        num_features,
        bandwidth,
        seed: map_seed,
        projection,
        offsets,
    }
}

impl OrfMap {
    /// Paired-form features: sqrt(2/D)·[cos(Wz+b); sin(Wz+b)].
    ///
    /// Inner products are exactly (2/D)·Σ cos(wᵀ(z−z′)), so the self-kernel
    /// is 1 and the phase offsets cancel.
    pub fn encode(&self, z: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(z.len(), self.input_dim);
        let t = self.projection.dot(&z) + &self.offsets;
        let half = self.num_features / 2;
        let scale = (2.0 / self.num_features as f64).sqrt();
        let mut out = Array1::zeros(self.num_features);
        for i in 0..half {
            out[i] = scale * t[i].cos();
            out[half + i] = scale * t[i].sin();
        }
        out
    }

    /// Offset form: sqrt(2/(D/2))·cos(Wz+b), dimension D/2.
    pub fn encode_offset_form(&self, z: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(z.len(), self.input_dim);
        let t = self.projection.dot(&z) + &self.offsets;
        let half = self.num_features / 2;
        let scale = (2.0 / half as f64).sqrt();
        t.mapv(|v| scale * v.cos())
    }

    /// Output dimension under the given form.
    pub fn output_dim(&self, offset_form: bool) -> usize {
        if offset_form {
            self.num_features / 2
        } else {
            self.num_features
        }
    }
}

/// Gaussian kernel exp(−‖x−y‖² / (2σ²)).
pub fn gaussian_kernel(x: ArrayView1<f64>, y: ArrayView1<f64>, bandwidth: f64) -> f64 {
    let d2: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}
