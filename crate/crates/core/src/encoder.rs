//! Weighted random linear encoding of local data and server-side parity
//! assembly.
//!
//! Device `i` draws a private generator `G_i` (c x l_i), scales its rows
//! by the diagonal weights `W_i` and ships `G_i W_i X_i`, `G_i W_i y_i`.
//! The server only ever sees the sum over devices.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay_model::DeviceProfile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("dataset for device {device_id}: {rows} feature rows but {labels} labels")]
    RaggedDataset {
        device_id: usize,
        rows: usize,
        labels: usize,
    },
    #[error("device {device_id}: systematic set has {got} indices, plan assigns {expected}")]
    SystematicSetSize {
        device_id: usize,
        expected: usize,
        got: usize,
    },
    #[error("device {device_id}: systematic index {index} out of range for {points} points")]
    IndexOutOfRange {
        device_id: usize,
        index: usize,
        points: usize,
    },
    #[error("device {device_id}: assigned load {load} exceeds {points} local points")]
    LoadExceedsData {
        device_id: usize,
        load: usize,
        points: usize,
    },
    #[error("device {device_id}: generator is {rows}x{cols}, expected {c}x{points}")]
    GeneratorShape {
        device_id: usize,
        rows: usize,
        cols: usize,
        c: usize,
        points: usize,
    },
    #[error("device {device_id}: {weights} weights for {points} points")]
    WeightCount {
        device_id: usize,
        weights: usize,
        points: usize,
    },
    #[error("shard from device {device_id} is {rows}x{cols}, expected {c}x{d}")]
    ShardShape {
        device_id: usize,
        rows: usize,
        cols: usize,
        c: usize,
        d: usize,
    },
    #[error("no shards to accumulate")]
    NoShards,
    #[error("malformed shard bytes: {0}")]
    Malformed(String),
}

/// A device's raw training data. Rows of `features` are points.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub device_id: usize,
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
}

impl LocalDataset {
    pub fn new(device_id: usize, features: Array2<f64>, labels: Array1<f64>) -> Result<Self, EncodeError> {
        if features.nrows() != labels.len() {
            return Err(EncodeError::RaggedDataset {
                device_id,
                rows: features.nrows(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            device_id,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Distribution of the generator entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorFamily {
    /// iid standard normal.
    #[default]
    Gaussian,
    /// A fair coin in {0, 1}, mapped to {-1, +1} so entries have zero mean
    /// and unit variance.
    BernoulliHalf,
}

impl GeneratorFamily {
    pub fn sample<R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
        match self {
            Self::Gaussian => Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal)),
            Self::BernoulliHalf => {
                let coin = Bernoulli::new(0.5).expect("0.5 is a valid probability");
                Array2::from_shape_simple_fn((rows, cols), || if coin.sample(rng) { 1.0 } else { -1.0 })
            }
        }
    }
}

impl fmt::Display for GeneratorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::BernoulliHalf => "bernoulli-half",
        })
    }
}

/// Sorted indices of the points a device processes itself. A full load
/// keeps every point and consumes no randomness.
pub fn select_systematic_set<R: Rng + ?Sized>(points: usize, load: usize, rng: &mut R) -> Vec<usize> {
    if load >= points {
        return (0..points).collect();
    }
    let mut chosen = index::sample(rng, points, load).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Diagonal of `W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointWeights(pub Array1<f64>);

impl PointWeights {
    pub fn identity(points: usize) -> Self {
        Self(Array1::ones(points))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }
}

/// `sqrt(Pr{T_i >= t*})` at the assigned load on the systematic set, 1 on
/// punctured points. A device that returns surely gets weight 0.
pub fn build_weights(
    profile: &DeviceProfile,
    assigned_load: usize,
    t_star: f64,
    systematic_set: &[usize],
) -> Result<PointWeights, EncodeError> {
    let points = profile.local_points;
    if systematic_set.len() != assigned_load {
        return Err(EncodeError::SystematicSetSize {
            device_id: profile.device_id,
            expected: assigned_load,
            got: systematic_set.len(),
        });
    }
    if assigned_load > points {
        return Err(EncodeError::LoadExceedsData {
            device_id: profile.device_id,
            load: assigned_load,
            points,
        });
    }
    let mut weights = Array1::ones(points);
    if assigned_load == 0 {
        return Ok(PointWeights(weights));
    }
    let miss = (1.0 - profile.return_probability(assigned_load, t_star)).clamp(0.0, 1.0);
    let w = miss.sqrt();
    for &k in systematic_set {
        if k >= points {
            return Err(EncodeError::IndexOutOfRange {
                device_id: profile.device_id,
                index: k,
                points,
            });
        }
        weights[k] = w;
    }
    Ok(PointWeights(weights))
}

/// The only artifact that leaves a device before training.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedShard {
    pub device_id: usize,
    pub parity_features: Array2<f64>,
    pub parity_labels: Array1<f64>,
}

const HEADER_BYTES: usize = 24;

impl EncodedShard {
    pub fn rows(&self) -> usize {
        self.parity_labels.len()
    }

    /// Header of three little-endian u64 (c, d, device_id) followed by the
    /// features row-major and then the labels, all as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, d) = self.parity_features.dim();
        let mut out = Vec::with_capacity(HEADER_BYTES + 8 * c * (d + 1));
        for field in [c, d, self.device_id] {
            out.extend_from_slice(&(field as u64).to_le_bytes());
        }
        for v in self.parity_features.iter().chain(self.parity_labels.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncodeError> {
        if bytes.len() < HEADER_BYTES {
            return Err(EncodeError::Malformed(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let word = |i: usize| {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[8 * i..8 * i + 8]);
            u64::from_le_bytes(buf)
        };
        let (c, d, device_id) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let values = c
            .checked_mul(d + 1)
            .ok_or_else(|| EncodeError::Malformed("dimensions overflow".into()))?;
        if bytes.len() != HEADER_BYTES + 8 * values {
            return Err(EncodeError::Malformed(format!(
                "{} bytes for a {c}x{d} shard, expected {}",
                bytes.len(),
                HEADER_BYTES + 8 * values
            )));
        }
        let data: Vec<f64> = bytes[HEADER_BYTES..]
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("chunk of 8")))
            .collect();
        let labels = Array1::from(data[c * d..].to_vec());
        let features = Array2::from_shape_vec((c, d), data[..c * d].to_vec())
            .map_err(|e| EncodeError::Malformed(e.to_string()))?;
        Ok(Self {
            device_id,
            parity_features: features,
            parity_labels: labels,
        })
    }
}

/// What a device keeps to itself. Deliberately not serializable.
#[derive(Debug, Clone)]
pub struct EncoderPrivateState {
    pub generator: Array2<f64>,
    pub weights: PointWeights,
    pub systematic_set: Vec<usize>,
}

/// Encodes with a caller-supplied generator. `G` must be `c x l_i`.
pub fn encode_with_generator(
    data: &LocalDataset,
    weights: &PointWeights,
    generator: &Array2<f64>,
) -> Result<EncodedShard, EncodeError> {
    let points = data.len();
    if weights.0.len() != points {
        return Err(EncodeError::WeightCount {
            device_id: data.device_id,
            weights: weights.0.len(),
            points,
        });
    }
    if generator.ncols() != points {
        return Err(EncodeError::GeneratorShape {
            device_id: data.device_id,
            rows: generator.nrows(),
            cols: generator.ncols(),
            c: generator.nrows(),
            points,
        });
    }
    // G W X == (G W) X; scaling the generator columns is c*l work instead of l*d.
    let scaled = generator * &weights.0.view().insert_axis(Axis(0));
    Ok(EncodedShard {
        device_id: data.device_id,
        parity_features: scaled.dot(&data.features),
        parity_labels: scaled.dot(&data.labels),
    })
}

/// Draws `G_i` from `family` and encodes. `c = 0` gives an empty shard.
pub fn encode_local<R: Rng + ?Sized>(
    data: &LocalDataset,
    weights: PointWeights,
    systematic_set: Vec<usize>,
    c: usize,
    family: GeneratorFamily,
    rng: &mut R,
) -> Result<(EncodedShard, EncoderPrivateState), EncodeError> {
    let generator = family.sample(c, data.len(), rng);
    let shard = encode_with_generator(data, &weights, &generator)?;
    Ok((
        shard,
        EncoderPrivateState {
            generator,
            weights,
            systematic_set,
        },
    ))
}

/// The server's summed parity set.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeParity {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
    pub contributor_count: usize,
}

impl CompositeParity {
    pub fn empty(d: usize) -> Self {
        Self {
            features: Array2::zeros((0, d)),
            labels: Array1::zeros(0),
            contributor_count: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Entrywise sum of the shards, folded in the given order.
pub fn accumulate_parity(shards: &[EncodedShard]) -> Result<CompositeParity, EncodeError> {
    let first = shards.first().ok_or(EncodeError::NoShards)?;
    let (c, d) = first.parity_features.dim();
    let mut features = Array2::zeros((c, d));
    let mut labels = Array1::zeros(c);
    for shard in shards {
        let (rows, cols) = shard.parity_features.dim();
        if rows != c || cols != d || shard.parity_labels.len() != c {
            return Err(EncodeError::ShardShape {
                device_id: shard.device_id,
                rows,
                cols,
                c,
                d,
            });
        }
        features += &shard.parity_features;
        labels += &shard.parity_labels;
    }
    Ok(CompositeParity {
        features,
        labels,
        contributor_count: shards.len(),
    })
}
