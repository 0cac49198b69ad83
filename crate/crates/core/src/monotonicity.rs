//! Near-monotonicity protocol: perturb inputs along an orthant order, measure
//! the output alignment fraction and extract the lambda-monotonicity level.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frustration_engine::SpinAssignment;
use crate::inference::forward;
use crate::model_ir::Model;
use crate::seeding::split_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSource {
    GroundState,
    RandomNull,
}

/// Input and output signatures of an orthant order pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialOrderPair {
    pub s_x: Vec<i8>,
    pub s_y: Vec<i8>,
    pub source: OrderSource,
}

fn random_signs(rng: &mut impl Rng, n: usize) -> Vec<i8> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
        .collect()
}

impl PartialOrderPair {
    /// Restricts node spins to the input and logit nodes of `model`.
    pub fn from_spins(model: &Model, spins: &SpinAssignment) -> Result<Self> {
        let layout = model.manifest.layout();
        if spins.len() != layout.node_count() {
            return Err(Error::InvalidArgument(format!(
                "spin vector has length {}, model has {} nodes",
                spins.len(),
                layout.node_count()
            )));
        }
        let s = spins.as_slice();
        let pick = |layer: usize| layout.elements(layer).nodes().map(|v| s[v]).collect();
        Ok(Self {
            s_x: pick(model.manifest.input_layer()),
            s_y: pick(model.manifest.logits_layer()),
            source: OrderSource::GroundState,
        })
    }

    pub fn random(model: &Model, rng: &mut impl Rng) -> Self {
        Self {
            s_x: random_signs(rng, model.manifest.input_shape().len()),
            s_y: random_signs(rng, model.manifest.output_size()),
            source: OrderSource::RandomNull,
        }
    }
}

/// How each sample obtains its order pair.
#[derive(Clone, Debug, PartialEq)]
pub enum OrderMode {
    Fixed(PartialOrderPair),
    /// A fresh random pair for every perturbation.
    RandomNull,
}

/// `x1 + S_x delta` with `delta > 0` drawn uniformly and rescaled so that
/// `|delta| = magnitude`.
pub fn perturb(x1: &[f64], s_x: &[i8], magnitude: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "perturbation magnitude must be positive, got {magnitude}"
        )));
    }
    if s_x.len() != x1.len() {
        return Err(Error::InvalidArgument(format!(
            "input order has length {}, input has {}",
            s_x.len(),
            x1.len()
        )));
    }
    let delta: Vec<f64> = (0..x1.len()).map(|_| 1.0 - rng.random::<f64>()).collect();
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let scale = magnitude / norm;
    Ok(x1
        .iter()
        .zip(s_x)
        .zip(&delta)
        .map(|((&x, &s), &d)| x + f64::from(s) * d * scale)
        .collect())
}

/// Fraction of outputs with `s_y,i (y2_i - y1_i) >= 0`.
pub fn omega(y1: &[f64], y2: &[f64], s_y: &[i8]) -> Result<f64> {
    if y1.len() != y2.len() || y1.len() != s_y.len() || y1.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "omega needs equal nonzero lengths, got {}, {} and {}",
            y1.len(),
            y2.len(),
            s_y.len()
        )));
    }
    let aligned = y1
        .iter()
        .zip(y2)
        .zip(s_y)
        .filter(|((a, b), &s)| f64::from(s) * (*b - *a) >= 0.0)
        .count();
    Ok(aligned as f64 / y1.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaRecord {
    pub image_id: usize,
    pub perturbation_id: usize,
    pub magnitude: f64,
    pub delta_norm: f64,
    pub omega: f64,
    pub class_before: usize,
    pub class_after: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OmegaSampleSet {
    pub records: Vec<OmegaRecord>,
}

impl OmegaSampleSet {
    pub fn omegas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.omega).collect()
    }

    pub fn mean_omega(&self) -> f64 {
        self.records.iter().map(|r| r.omega).sum::<f64>() / self.records.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub per_image: usize,
    pub magnitudes: Vec<f64>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            per_image: 20,
            magnitudes: vec![0.5, 1.0, 2.0, 4.0],
            seed: 0,
        }
    }
}

/// Perturbs every image `per_image` times, cycling through the magnitudes,
/// and records the output alignment fraction of each perturbation.
pub fn run_protocol(
    model: &Model,
    order: &OrderMode,
    images: &[Vec<f64>],
    config: &ProtocolConfig,
) -> Result<OmegaSampleSet> {
    if config.magnitudes.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one magnitude is required".into(),
        ));
    }
    if let OrderMode::Fixed(pair) = order {
        let (n_in, n_out) = (
            model.manifest.input_shape().len(),
            model.manifest.output_size(),
        );
        if pair.s_x.len() != n_in || pair.s_y.len() != n_out {
            return Err(Error::InvalidArgument(format!(
                "order has lengths ({}, {}), model needs ({n_in}, {n_out})",
                pair.s_x.len(),
                pair.s_y.len()
            )));
        }
    }
    let per_image: Vec<Vec<OmegaRecord>> = images
        .par_iter()
        .enumerate()
        .map(|(image_id, x1)| {
            let base = forward(model, x1).map_err(|e| Error::Stage {
                stage: format!("image {image_id}"),
                source: Box::new(e),
            })?;
            (0..config.per_image)
                .map(|p| {
                    let index = (image_id as u64) << 32 | p as u64;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(split_seed(config.seed, "perturb", index));
                    let drawn;
                    let pair = match order {
                        OrderMode::Fixed(pair) => pair,
                        OrderMode::RandomNull => {
                            drawn = PartialOrderPair::random(model, &mut rng);
                            &drawn
                        }
                    };
                    let magnitude = config.magnitudes[p % config.magnitudes.len()];
                    let x2 = perturb(x1, &pair.s_x, magnitude, &mut rng)?;
                    let after = forward(model, &x2).map_err(|e| Error::Stage {
                        stage: format!("image {image_id}"),
                        source: Box::new(e),
                    })?;
                    let delta_norm = x1
                        .iter()
                        .zip(&x2)
                        .map(|(a, b)| (b - a) * (b - a))
                        .sum::<f64>()
                        .sqrt();
                    Ok(OmegaRecord {
                        image_id,
                        perturbation_id: p,
                        magnitude,
                        delta_norm,
                        omega: omega(&base.logits, &after.logits, &pair.s_y)?,
                        class_before: base.predicted_class,
                        class_after: after.predicted_class,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(OmegaSampleSet {
        records: per_image.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaResult {
    pub lambda: f64,
    /// Points `[d, G(d)]` of the empirical CCDF of `|omega - 0.5|`, one per
    /// distinct deviation in decreasing order.
    pub ccdf: Vec<[f64; 2]>,
}

/// Largest `lambda` in `[0, 0.5]` with `P(|omega - 0.5| >= lambda) >= 2 lambda`.
pub fn lambda_from_samples(omegas: &[f64]) -> Result<LambdaResult> {
    if omegas.is_empty() {
        return Err(Error::InvalidArgument(
            "lambda needs at least one sample".into(),
        ));
    }
    let n = omegas.len() as f64;
    let mut dev: Vec<f64> = omegas.iter().map(|o| (o - 0.5).abs()).collect();
    dev.sort_by(|a, b| b.total_cmp(a));
    let mut lambda = 0.0f64;
    let mut ccdf: Vec<[f64; 2]> = Vec::new();
    for (k, &d) in dev.iter().enumerate() {
        let count = (k + 1) as f64;
        lambda = lambda.max(d.min(count / (2.0 * n)));
        match ccdf.last_mut() {
            Some(last) if last[0] == d => last[1] = count / n,
            _ => ccdf.push([d, count / n]),
        }
    }
    Ok(LambdaResult {
        lambda: lambda.clamp(0.0, 0.5),
        ccdf,
    })
}

/// Per image, the fraction of its perturbations with `omega > 0.5`.
pub fn direction_consistency(samples: &OmegaSampleSet) -> Vec<(usize, f64)> {
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in &samples.records {
        let g = groups.entry(r.image_id).or_default();
        g.0 += usize::from(r.omega > 0.5);
        g.1 += 1;
    }
    groups
        .into_iter()
        .map(|(id, (hits, total))| (id, hits as f64 / total as f64))
        .collect()
}

/// Per magnitude, the fraction of perturbations that keep the predicted class.
pub fn class_stability(samples: &OmegaSampleSet) -> Vec<(f64, f64)> {
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for r in &samples.records {
        let kept = usize::from(r.class_before == r.class_after);
        match groups.iter_mut().find(|g| g.0 == r.magnitude) {
            Some(g) => {
                g.1 += kept;
                g.2 += 1;
            }
            None => groups.push((r.magnitude, kept, 1)),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    groups
        .into_iter()
        .map(|(m, kept, total)| (m, kept as f64 / total as f64))
        .collect()
}

/// Uniform random inputs in `[-1, 1)`, reproducible from `seed`.
pub fn synthetic_images(len: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, "image", i as u64));
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::synthetic::{generate_synthetic, Template};

    #[test]
    fn omega_examples() {
        assert_eq!(omega(&[1.0, 2.0], &[1.0, 2.0], &[1, -1]).unwrap(), 1.0);
        assert_eq!(omega(&[0.0, 0.0], &[1.0, -1.0], &[1, 1]).unwrap(), 0.5);
        assert_eq!(omega(&[0.0, 0.0], &[-2.0, -3.0], &[-1, -1]).unwrap(), 1.0);
        assert!(omega(&[0.0], &[0.0, 1.0], &[1]).is_err());
    }

    #[test]
    fn omega_of_swapped_pair_sums_to_at_least_one() {
        let y1 = [0.1, -0.4, 2.0, 0.0];
        let y2 = [0.3, -0.5, 2.0, 1.0];
        let s = [1, 1, -1, -1];
        let total = omega(&y1, &y2, &s).unwrap() + omega(&y2, &y1, &s).unwrap();
        assert_eq!(total, 1.25);
    }

    #[test]
    fn perturbation_follows_the_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = vec![0.5; 30];
        let s_x: Vec<i8> = (0..30).map(|i| if i % 3 == 0 { -1 } else { 1 }).collect();
        let x2 = perturb(&x1, &s_x, 4.0, &mut rng).unwrap();
        let norm: f64 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        assert!((3.9..=4.1).contains(&norm));
        for i in 0..30 {
            assert!(f64::from(s_x[i]) * (x2[i] - x1[i]) > 0.0);
        }
        assert!(perturb(&x1, &s_x, 0.0, &mut rng).is_err());
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_from_samples(&[1.0; 8]).unwrap().lambda, 0.5);
        assert_eq!(lambda_from_samples(&[0.5; 8]).unwrap().lambda, 0.0);
        let mixed: Vec<f64> = (0..10)
            .map(|i| if i % 2 == 0 { 0.9 } else { 0.1 })
            .collect();
        assert!((lambda_from_samples(&mixed).unwrap().lambda - 0.4).abs() < 1e-15);
        assert!(lambda_from_samples(&[]).is_err());
    }

    #[test]
    fn lambda_is_symmetric_under_reflection() {
        let a = [0.2, 0.7, 0.95, 0.5, 0.61, 0.33];
        let b: Vec<f64> = a.iter().map(|o| 1.0 - o).collect();
        assert_eq!(
            lambda_from_samples(&a).unwrap().lambda,
            lambda_from_samples(&b).unwrap().lambda
        );
    }

    #[test]
    fn single_perturbation_gives_binary_consistency() {
        let model = generate_synthetic(1, Template::TinyMlp).unwrap();
        let images = synthetic_images(4, 5, 2);
        let config = ProtocolConfig {
            per_image: 1,
            ..ProtocolConfig::default()
        };
        let samples = run_protocol(&model, &OrderMode::RandomNull, &images, &config).unwrap();
        for (_, f) in direction_consistency(&samples) {
            assert!(f == 0.0 || f == 1.0);
        }
        assert_eq!(
            samples,
            run_protocol(&model, &OrderMode::RandomNull, &images, &config).unwrap()
        );
    }

    #[test]
    fn tiny_magnitude_keeps_every_class() {
        let model = generate_synthetic(3, Template::TinyMlp).unwrap();
        let images = synthetic_images(4, 6, 9);
        let config = ProtocolConfig {
            per_image: 4,
            magnitudes: vec![1e-12],
            seed: 5,
        };
        let samples = run_protocol(&model, &OrderMode::RandomNull, &images, &config).unwrap();
        assert_eq!(class_stability(&samples), vec![(1e-12, 1.0)]);
    }
}
