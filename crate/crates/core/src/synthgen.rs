//! Synthetic datasets with known latent structure.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{category_probabilities, LatentFeatureState, ObservationMatrix, WeightStack};

/// Category index (0-based) of a black pixel.
pub const BLACK: u32 = 0;
/// Category index (0-based) of a white pixel.
pub const WHITE: u32 = 1;

/// Black-and-white image; `true` is white.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl BinaryImage {
    pub fn from_white(height: usize, width: usize, white: &[(usize, usize)]) -> Self {
        let mut pixels = vec![false; height * width];
        for &(i, j) in white {
            pixels[i * width + j] = true;
        }
        Self { height, width, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Four disjoint 6×6 masks, one shape per quadrant: a ring, a plus,
/// an L and an X.
pub fn default_base_images() -> Vec<BinaryImage> {
    vec![
        BinaryImage::from_white(
            6,
            6,
            &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)],
        ),
        BinaryImage::from_white(6, 6, &[(0, 4), (1, 3), (1, 4), (1, 5), (2, 4)]),
        BinaryImage::from_white(6, 6, &[(3, 0), (4, 0), (5, 0), (5, 1), (5, 2)]),
        BinaryImage::from_white(6, 6, &[(3, 3), (3, 5), (4, 4), (5, 3), (5, 5)]),
    ]
}

fn default_presence() -> f64 {
    0.3
}

fn default_noise() -> f64 {
    0.5
}

/// Settings of the composite-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGenConfig {
    #[serde(default = "default_base_images")]
    pub base_images: Vec<BinaryImage>,
    /// Probability that each base image is present in a sample.
    #[serde(default = "default_presence")]
    pub presence_prob: f64,
    /// Probability that a white composite pixel is turned black.
    #[serde(default = "default_noise")]
    pub noise_flip_prob: f64,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ImageGenConfig {
    pub fn defaults(n_samples: usize, seed: u64) -> Self {
        Self {
            base_images: default_base_images(),
            presence_prob: default_presence(),
            noise_flip_prob: default_noise(),
            n_samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .base_images
            .first()
            .ok_or_else(|| Error::Config("at least one base image is required".into()))?;
        if first.pixels.len() != first.height * first.width {
            return Err(Error::Config("base image pixel count differs from height*width".into()));
        }
        if self
            .base_images
            .iter()
            .any(|b| b.height != first.height || b.width != first.width || b.pixels.len() != first.pixels.len())
        {
            return Err(Error::Config("base images differ in size".into()));
        }
        for (name, p) in [("presence_prob", self.presence_prob), ("noise_flip_prob", self.noise_flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Pixelwise OR of the active base images.
pub fn composite(base_images: &[BinaryImage], active: &[bool]) -> Vec<bool> {
    let mut out = vec![false; base_images.first().map_or(0, |b| b.len())];
    for (img, _) in base_images.iter().zip(active).filter(|(_, &a)| a) {
        for (o, &p) in out.iter_mut().zip(&img.pixels) {
            *o |= p;
        }
    }
    out
}

/// Noisy composites of randomly chosen base images. Each observation is a
/// row of pixels with categories 1 = black, 2 = white; the returned Z marks
/// which base images were used (one column per base image, never pruned).
pub fn generate_images<R: Rng + ?Sized>(
    config: &ImageGenConfig,
    rng: &mut R,
) -> Result<(ObservationMatrix, LatentFeatureState)> {
    config.validate()?;
    let k = config.base_images.len();
    let n_pixels = config.base_images[0].len();
    let mut z_rows = Vec::with_capacity(config.n_samples * k);
    let mut data = Vec::with_capacity(config.n_samples * n_pixels);
    for _ in 0..config.n_samples {
        let active: Vec<bool> = (0..k).map(|_| rng.random::<f64>() < config.presence_prob).collect();
        z_rows.extend(active.iter().map(|&a| a as u8));
        for white in composite(&config.base_images, &active) {
            let stays_white = white && rng.random::<f64>() >= config.noise_flip_prob;
            data.push(if stays_white { WHITE } else { BLACK });
        }
    }
    let x = ObservationMatrix::new(config.n_samples, vec![2; n_pixels], data)?;
    let z = LatentFeatureState::from_rows(config.n_samples, k, &z_rows)?;
    Ok((x, z))
}

fn default_sigma() -> f64 {
    1.0
}

/// Settings of the planted-feature categorical generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalGenConfig {
    pub n_rows: usize,
    /// One cardinality per dimension.
    pub cardinalities: Vec<usize>,
    /// Activation probability p_k of each planted feature; its length is K_true.
    pub feature_probs: Vec<f64>,
    /// Variance of the planted weights.
    #[serde(default = "default_sigma")]
    pub sigma_b_sq: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CategoricalGenConfig {
    /// N×D data with K_true features of equal probability `p`.
    pub fn uniform(n_rows: usize, n_cols: usize, cardinality: usize, k_true: usize, p: f64, sigma_b_sq: f64) -> Self {
        Self {
            n_rows,
            cardinalities: vec![cardinality; n_cols],
            feature_probs: vec![p; k_true],
            sigma_b_sq,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.iter().any(|&r| r < 2) {
            return Err(Error::Config("cardinalities must be >= 2".into()));
        }
        if self.feature_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("feature_probs must lie in [0, 1]".into()));
        }
        if !(self.sigma_b_sq >= 0.0 && self.sigma_b_sq.is_finite()) {
            return Err(Error::Config("sigma_b_sq must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Draws Z with independent Bernoulli(p_k) columns, weights B ~ N(0, σ²),
/// and X from the multinomial-logit model.
pub fn generate_categorical<R: Rng + ?Sized>(
    config: &CategoricalGenConfig,
    rng: &mut R,
) -> Result<(ObservationMatrix, LatentFeatureState, WeightStack)> {
    config.validate()?;
    let k = config.feature_probs.len();
    let n = config.n_rows;
    let columns: Vec<Vec<bool>> = config
        .feature_probs
        .iter()
        .map(|&p| (0..n).map(|_| rng.random::<f64>() < p).collect())
        .collect();
    let z = LatentFeatureState::from_columns(n, columns)?;
    let normal = Normal::new(0.0, config.sigma_b_sq.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mats: Vec<DMatrix<f64>> = config
        .cardinalities
        .iter()
        .map(|&r| DMatrix::from_fn(k + 1, r, |_, _| normal.sample(rng)))
        .collect();
    let weights = WeightStack::from_matrices(mats)?;
    let mut data = Vec::with_capacity(n * config.cardinalities.len());
    for row in 0..n {
        let ext = z.extended_row(row);
        for d in 0..config.cardinalities.len() {
            let probs = category_probabilities(&ext, weights.matrix(d))?;
            data.push(sample_category(&probs, rng) as u32);
        }
    }
    let x = ObservationMatrix::new(n, config.cardinalities.clone(), data)?;
    Ok((x, z, weights))
}

fn sample_category<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (r, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return r;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn default_bases_are_disjoint() {
        let bases = default_base_images();
        for i in 0..bases.len() {
            for j in i + 1..bases.len() {
                assert!(bases[i]
                    .pixels
                    .iter()
                    .zip(&bases[j].pixels)
                    .all(|(a, b)| !(a & b)));
            }
        }
    }

    #[test]
    fn noiseless_single_feature_reproduces_base() {
        let mut cfg = ImageGenConfig::defaults(200, 1);
        cfg.noise_flip_prob = 0.0;
        let (x, z) = generate_images(&cfg, &mut stream(1, Purpose::Generator, 0, 0)).unwrap();
        let mut checked = 0;
        for n in 0..x.n_rows() {
            let row = z.row(n);
            if row.iter().filter(|&&b| b).count() == 1 {
                let k = row.iter().position(|&b| b).unwrap();
                let expected: Vec<u32> = cfg.base_images[k].pixels.iter().map(|&w| w as u32).collect();
                assert_eq!(x.row(n), expected.as_slice());
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_presence_gives_black_images() {
        let mut cfg = ImageGenConfig::defaults(30, 2);
        cfg.presence_prob = 0.0;
        let (x, z) = generate_images(&cfg, &mut stream(2, Purpose::Generator, 0, 0)).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == BLACK));
        assert!(z.column_counts().iter().all(|&m| m == 0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ImageGenConfig::defaults(3, 0);
        cfg.presence_prob = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ImageGenConfig::defaults(3, 0);
        cfg.base_images.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ImageGenConfig::defaults(3, 0);
        cfg.base_images[1] = BinaryImage::from_white(5, 5, &[]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn categorical_generator_is_deterministic() {
        let cfg = CategoricalGenConfig::uniform(50, 4, 3, 2, 0.4, 1.0);
        let a = generate_categorical(&cfg, &mut stream(9, Purpose::Generator, 0, 0)).unwrap();
        let b = generate_categorical(&cfg, &mut stream(9, Purpose::Generator, 0, 0)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
