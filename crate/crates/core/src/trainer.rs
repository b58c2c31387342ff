//! Gradients, aggregation and the model update for least-squares
//! regression.
//!
//! Systematic gradients are raw sums over points. The parity gradient
//! carries `1/c`. Their sum is divided by `m` once, inside the step.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{CompositeParity, LocalDataset};

/// NMSE above which a run is declared divergent.
pub const DIVERGENCE_NMSE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("gradient from {source_name} has length {got}, model has {expected}")]
    Dimension {
        source_name: String,
        expected: usize,
        got: usize,
    },
    #[error("device {0} delivered more than one gradient this epoch")]
    DuplicateSource(usize),
    #[error("non-finite gradient from {source_name} at epoch {epoch}")]
    NonFinite { source_name: String, epoch: usize },
    #[error("systematic index {index} out of range for {points} points on device {device_id}")]
    IndexOutOfRange {
        device_id: usize,
        index: usize,
        points: usize,
    },
    #[error("the server parity gradient was passed as a device gradient")]
    ParityAmongDevices,
    #[error("true model is identically zero")]
    ZeroReference,
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("diverged at epoch {epoch}: NMSE {nmse:e}")]
    Diverged { epoch: usize, nmse: f64 },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub beta: Array1<f64>,
    pub learning_rate: f64,
    pub epoch: usize,
}

impl ModelState {
    pub fn new(beta: Array1<f64>, learning_rate: f64) -> Result<Self, TrainError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TrainError::InvalidLearningRate(learning_rate));
        }
        Ok(Self {
            beta,
            learning_rate,
            epoch: 0,
        })
    }

    pub fn zeros(d: usize, learning_rate: f64) -> Result<Self, TrainError> {
        Self::new(Array1::zeros(d), learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradientSource {
    Device(usize),
    ServerParity,
}

impl GradientSource {
    fn name(self) -> String {
        match self {
            Self::Device(id) => format!("device {id}"),
            Self::ServerParity => "server parity".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialGradient {
    pub source: GradientSource,
    pub vector: Array1<f64>,
    pub points_covered: usize,
}

impl PartialGradient {
    pub fn zero(source: GradientSource, d: usize) -> Self {
        Self {
            source,
            vector: Array1::zeros(d),
            points_covered: 0,
        }
    }

    /// A zero parity gradient stands for "no parity", i.e. uncoded training.
    pub fn is_absent(&self) -> bool {
        self.points_covered == 0
    }
}

/// `Xᵀ(Xβ − y)` over all rows.
pub fn least_squares_gradient(
    features: ArrayView2<'_, f64>,
    labels: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> Array1<f64> {
    // A row loop on contiguous rows beats ndarray's matrix-vector and
    // matrix-matrix paths by a wide margin for these skinny shapes.
    let mut gradient = Array1::zeros(beta.len());
    for (row, &label) in features.rows().into_iter().zip(labels) {
        let residual = row.dot(&beta) - label;
        gradient.scaled_add(residual, &row);
    }
    gradient
}

/// Gradient over the rows in `systematic_set`. A set covering every row in
/// order uses the dataset in place.
pub fn systematic_gradient(
    data: &LocalDataset,
    systematic_set: &[usize],
    beta: ArrayView1<'_, f64>,
) -> Result<PartialGradient, TrainError> {
    let source = GradientSource::Device(data.device_id);
    let d = beta.len();
    if data.dim() != d {
        return Err(TrainError::Dimension {
            source_name: source.name(),
            expected: d,
            got: data.dim(),
        });
    }
    if systematic_set.is_empty() {
        return Ok(PartialGradient::zero(source, d));
    }
    if let Some(&index) = systematic_set.iter().find(|&&k| k >= data.len()) {
        return Err(TrainError::IndexOutOfRange {
            device_id: data.device_id,
            index,
            points: data.len(),
        });
    }
    let whole = systematic_set.len() == data.len() && systematic_set.iter().enumerate().all(|(i, &k)| i == k);
    let vector = if whole {
        least_squares_gradient(data.features.view(), data.labels.view(), beta)
    } else {
        let x = data.features.select(ndarray::Axis(0), systematic_set);
        let y = data.labels.select(ndarray::Axis(0), systematic_set);
        least_squares_gradient(x.view(), y.view(), beta)
    };
    Ok(PartialGradient {
        source,
        vector,
        points_covered: systematic_set.len(),
    })
}

/// `(1/c) X̃ᵀ(X̃β − ỹ)`; zero and absent when `c = 0`.
pub fn parity_gradient(parity: &CompositeParity, beta: ArrayView1<'_, f64>) -> PartialGradient {
    let c = parity.rows();
    if c == 0 {
        return PartialGradient::zero(GradientSource::ServerParity, beta.len());
    }
    let mut vector = least_squares_gradient(parity.features.view(), parity.labels.view(), beta);
    vector /= c as f64;
    PartialGradient {
        source: GradientSource::ServerParity,
        vector,
        points_covered: c,
    }
}

/// Combined gradient: the parity vector plus the received device vectors
/// summed in device order, so the result does not depend on arrival order.
pub fn combine_gradients(
    d: usize,
    epoch: usize,
    received: &[PartialGradient],
    parity: &PartialGradient,
) -> Result<Array1<f64>, TrainError> {
    let mut ordered: Vec<&PartialGradient> = received.iter().collect();
    ordered.sort_by_key(|g| g.source);
    for pair in ordered.windows(2) {
        if pair[0].source == pair[1].source {
            if let GradientSource::Device(id) = pair[0].source {
                return Err(TrainError::DuplicateSource(id));
            }
        }
    }
    for g in ordered.iter().copied().chain(std::iter::once(parity)) {
        if g.vector.len() != d {
            return Err(TrainError::Dimension {
                source_name: g.source.name(),
                expected: d,
                got: g.vector.len(),
            });
        }
        if g.vector.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                source_name: g.source.name(),
                epoch,
            });
        }
    }
    if ordered.iter().any(|g| g.source == GradientSource::ServerParity) {
        return Err(TrainError::ParityAmongDevices);
    }
    let mut total = parity.vector.clone();
    for g in ordered {
        total += &g.vector;
    }
    Ok(total)
}

/// `β ← β − (μ/m)·∇` and advances the epoch counter.
pub fn aggregate_and_step(
    state: &mut ModelState,
    received: &[PartialGradient],
    parity: &PartialGradient,
    m: usize,
) -> Result<Array1<f64>, TrainError> {
    let gradient = combine_gradients(state.beta.len(), state.epoch, received, parity)?;
    state.beta.scaled_add(-state.learning_rate / m as f64, &gradient);
    state.epoch += 1;
    Ok(gradient)
}

pub fn nmse(estimate: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>) -> Result<f64, TrainError> {
    if estimate.len() != truth.len() {
        return Err(TrainError::LengthMismatch(estimate.len(), truth.len()));
    }
    let reference = truth.dot(&truth);
    if reference == 0.0 {
        return Err(TrainError::ZeroReference);
    }
    let diff = &estimate - &truth;
    Ok(diff.dot(&diff) / reference)
}

/// Divergence guard on a freshly computed NMSE.
pub fn check_divergence(epoch: usize, nmse: f64) -> Result<(), TrainError> {
    if !nmse.is_finite() || nmse > DIVERGENCE_NMSE {
        Err(TrainError::Diverged { epoch, nmse })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{accumulate_parity, build_weights, encode_local, select_systematic_set, GeneratorFamily};
    use crate::DeviceProfile;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    fn random_dataset(id: usize, rows: usize, d: usize, rng: &mut ChaCha8Rng) -> LocalDataset {
        let x = gaussian(rows, d, rng);
        let y = gaussian(rows, 1, rng).column(0).to_owned();
        LocalDataset::new(id, x, y).unwrap()
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn true_model_without_noise_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(10, 4, &mut rng);
        let beta = array![1.0, -2.0, 0.5, 3.0];
        let y = x.dot(&beta);
        let data = LocalDataset::new(0, x, y).unwrap();
        let g = systematic_gradient(&data, &all(10), beta.view()).unwrap();
        assert!(g.vector.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(g.points_covered, 10);
    }

    #[test]
    fn unit_point_gradient() {
        let data = LocalDataset::new(0, array![[1.0, 0.0, 0.0]], array![0.0]).unwrap();
        let g = systematic_gradient(&data, &[0], array![1.0, 0.0, 0.0].view()).unwrap();
        assert_eq!(g.vector, array![1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_set_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_dataset(4, 5, 3, &mut rng);
        let g = systematic_gradient(&data, &[], array![1.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(g.points_covered, 0);
        assert!(g.vector.iter().all(|&v| v == 0.0));
        assert!(matches!(
            systematic_gradient(&data, &[5], array![1.0, 1.0, 1.0].view()),
            Err(TrainError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_dataset(0, 20, 5, &mut rng);
        let beta = gaussian(5, 1, &mut rng).column(0).to_owned();
        let g = systematic_gradient(&data, &all(20), beta.view()).unwrap();
        let cost = |b: &Array1<f64>| {
            let r = data.features.dot(b) - &data.labels;
            0.5 * r.dot(&r)
        };
        let h = 1e-5;
        for j in 0..5 {
            let mut plus = beta.clone();
            plus[j] += h;
            let mut minus = beta.clone();
            minus[j] -= h;
            let fd = (cost(&plus) - cost(&minus)) / (2.0 * h);
            assert!(
                (fd - g.vector[j]).abs() <= 1e-5 * g.vector[j].abs().max(1.0),
                "{j}: {fd} vs {}",
                g.vector[j]
            );
        }
    }

    #[test]
    fn subset_gradient_matches_selected_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_dataset(0, 12, 3, &mut rng);
        let beta = array![0.3, -0.1, 0.7];
        let set = [1, 4, 9];
        let g = systematic_gradient(&data, &set, beta.view()).unwrap();
        let mut oracle = Array1::zeros(3);
        for &k in &set {
            let row = data.features.row(k);
            let r = row.dot(&beta) - data.labels[k];
            oracle.scaled_add(r, &row);
        }
        for j in 0..3 {
            assert!((g.vector[j] - oracle[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn parity_gradient_edges() {
        let zero = CompositeParity {
            features: Array2::zeros((3, 2)),
            labels: array![1.0, 2.0, 3.0],
            contributor_count: 1,
        };
        let g = parity_gradient(&zero, array![1.0, 1.0].view());
        assert!(g.vector.iter().all(|&v| v == 0.0));
        assert_eq!(g.points_covered, 3);

        let absent = parity_gradient(&CompositeParity::empty(2), array![1.0, 1.0].view());
        assert!(absent.is_absent());

        let one = CompositeParity {
            features: array![[2.0, 1.0]],
            labels: array![1.0],
            contributor_count: 1,
        };
        let g = parity_gradient(&one, array![1.0, -1.0].view());
        // x̃ᵀ(x̃β − ỹ) = [2, 1]·(1 − 1) = 0
        assert_eq!(g.vector, array![0.0, 0.0]);
        let g = parity_gradient(&one, array![1.0, 1.0].view());
        assert_eq!(g.vector, array![4.0, 2.0]);
    }

    #[test]
    fn zero_gradients_leave_beta_unchanged() {
        let mut state = ModelState::new(array![1.0, 2.0], 0.1).unwrap();
        let parity = PartialGradient::zero(GradientSource::ServerParity, 2);
        let received = vec![PartialGradient::zero(GradientSource::Device(0), 2)];
        aggregate_and_step(&mut state, &received, &parity, 10).unwrap();
        assert_eq!(state.beta, array![1.0, 2.0]);
        assert_eq!(state.epoch, 1);
    }

    #[test]
    fn uncoded_step_is_batch_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let datasets: Vec<_> = (0..3).map(|i| random_dataset(i, 6, 4, &mut rng)).collect();
        let mut state = ModelState::zeros(4, 0.05).unwrap();
        let received: Vec<_> = datasets
            .iter()
            .map(|d| systematic_gradient(d, &all(6), state.beta.view()).unwrap())
            .collect();
        let parity = PartialGradient::zero(GradientSource::ServerParity, 4);
        aggregate_and_step(&mut state, &received, &parity, 18).unwrap();

        let mut x = Array2::zeros((18, 4));
        let mut y = Array1::zeros(18);
        for (i, d) in datasets.iter().enumerate() {
            x.slice_mut(ndarray::s![i * 6..(i + 1) * 6, ..]).assign(&d.features);
            y.slice_mut(ndarray::s![i * 6..(i + 1) * 6]).assign(&d.labels);
        }
        let expected = -(0.05 / 18.0) * x.t().dot(&(-&y));
        for j in 0..4 {
            assert!((state.beta[j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_rejects_bad_inputs() {
        let mut state = ModelState::zeros(2, 0.1).unwrap();
        let parity = PartialGradient::zero(GradientSource::ServerParity, 2);
        let dup = vec![
            PartialGradient::zero(GradientSource::Device(1), 2),
            PartialGradient::zero(GradientSource::Device(1), 2),
        ];
        assert_eq!(
            aggregate_and_step(&mut state, &dup, &parity, 4),
            Err(TrainError::DuplicateSource(1))
        );
        let nan = vec![PartialGradient {
            source: GradientSource::Device(0),
            vector: array![f64::NAN, 0.0],
            points_covered: 1,
        }];
        assert!(matches!(
            aggregate_and_step(&mut state, &nan, &parity, 4),
            Err(TrainError::NonFinite { .. })
        ));
        let short = vec![PartialGradient::zero(GradientSource::Device(0), 3)];
        assert!(matches!(
            aggregate_and_step(&mut state, &short, &parity, 4),
            Err(TrainError::Dimension { .. })
        ));
        assert_eq!(state.epoch, 0);
        assert!(ModelState::zeros(2, 0.0).is_err());
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grads: Vec<_> = (0..10)
            .map(|i| PartialGradient {
                source: GradientSource::Device(i),
                vector: gaussian(8, 1, &mut rng).column(0).to_owned() * 1e3,
                points_covered: 1,
            })
            .collect();
        let parity = PartialGradient {
            source: GradientSource::ServerParity,
            vector: gaussian(8, 1, &mut rng).column(0).to_owned(),
            points_covered: 5,
        };
        let forward = combine_gradients(8, 0, &grads, &parity).unwrap();
        let mut shuffled = grads.clone();
        shuffled.reverse();
        shuffled.swap(2, 7);
        let backward = combine_gradients(8, 0, &shuffled, &parity).unwrap();
        for j in 0..8 {
            assert!((forward[j] - backward[j]).abs() <= 1e-12 * forward[j].abs().max(1.0));
        }
    }

    #[test]
    fn nmse_cases() {
        let truth = array![1.0, -2.0, 2.0];
        assert_eq!(nmse(truth.view(), truth.view()).unwrap(), 0.0);
        assert_eq!(nmse(Array1::zeros(3).view(), truth.view()).unwrap(), 1.0);
        assert_eq!(nmse((&truth * 2.0).view(), truth.view()).unwrap(), 1.0);
        assert_eq!(
            nmse(truth.view(), Array1::zeros(3).view()),
            Err(TrainError::ZeroReference)
        );
        assert!(check_divergence(3, 2e6).is_err());
        assert!(check_divergence(3, f64::NAN).is_err());
        assert!(check_divergence(3, 10.0).is_ok());
    }

    #[test]
    fn noiseless_descent_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let beta_true = gaussian(d, 1, &mut rng).column(0).to_owned();
        let datasets: Vec<_> = (0..4)
            .map(|i| {
                let x = gaussian(15, d, &mut rng);
                let y = x.dot(&beta_true);
                LocalDataset::new(i, x, y).unwrap()
            })
            .collect();
        let mut state = ModelState::zeros(d, 0.5).unwrap();
        let parity = PartialGradient::zero(GradientSource::ServerParity, d);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let received: Vec<_> = datasets
                .iter()
                .map(|data| systematic_gradient(data, &all(15), state.beta.view()).unwrap())
                .collect();
            aggregate_and_step(&mut state, &received, &parity, 60).unwrap();
            let now = nmse(state.beta.view(), beta_true.view()).unwrap();
            assert!(now <= last);
            last = now;
        }
        assert!(last < 1e-8, "{last}");
    }

    /// For Gaussian `G`, `E‖(1/c)BᵀGᵀG r − Bᵀr‖² = (‖B‖²_F ‖r‖² + ‖Bᵀr‖²)/c`
    /// with `B = WX`, `r = W(Xβ − y)`. The test checks the measured error
    /// against that prediction and that the prediction is within 5%.
    #[test]
    fn parity_gradient_approximates_weighted_full_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, ell, d, c) = (4, 40, 4, 4000);
        let profile = DeviceProfile::client(0, 0.0003255, 6144.0, 0.08148, 0.1, ell).unwrap();
        let beta_true = gaussian(d, 1, &mut rng).column(0).to_owned();
        let beta = gaussian(d, 1, &mut rng).column(0).to_owned();
        let mut shards = Vec::new();
        let mut oracle = Array1::<f64>::zeros(d);
        let (mut b_frob, mut r_norm) = (0.0, 0.0);
        for i in 0..n {
            let x = gaussian(ell, d, &mut rng);
            let y = x.dot(&beta_true) + gaussian(ell, 1, &mut rng).column(0).to_owned() * 0.1;
            let data = LocalDataset::new(i, x, y).unwrap();
            let set = select_systematic_set(ell, 25, &mut rng);
            let weights = build_weights(&profile, 25, 0.2, &set).unwrap();
            for k in 0..ell {
                let row = data.features.row(k);
                let w = weights.0[k];
                let r = row.dot(&beta) - data.labels[k];
                oracle.scaled_add(w * w * r, &row);
                b_frob += w * w * row.dot(&row);
                r_norm += w * w * r * r;
            }
            let (shard, _) = encode_local(&data, weights, set, c, GeneratorFamily::Gaussian, &mut rng).unwrap();
            shards.push(shard);
        }
        let composite = accumulate_parity(&shards).unwrap();
        let g = parity_gradient(&composite, beta.view());
        let norm = |v: &Array1<f64>| v.dot(v).sqrt();
        let err = norm(&(&g.vector - &oracle)) / norm(&oracle);
        let oracle_sq = oracle.dot(&oracle);
        let predicted = ((b_frob * r_norm + oracle_sq) / (c as f64 * oracle_sq)).sqrt();
        assert!(predicted < 0.05, "predicted {predicted}");
        assert!(err < 0.05, "relative error {err}, predicted {predicted}");
    }
}
