//! Synthetic datasets with known ground truth, and an IDX image loader.

mod idx;

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub use idx::{load_idx_images, parse_idx_images, write_idx_images, IDX_IMAGE_MAGIC};

/// Generative parameters of a dataset, enough to compute exact mode
/// membership and conditionals where that makes sense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetMeta {
    /// Equal-weight isotropic Gaussian mixture.
    Mixture { centers: Vec<Vec<f64>>, sigma: f64 },
    SwissRoll { t_min: f64, t_max: f64, scale: f64, noise: f64 },
    TwoMoons { noise: f64 },
    Images { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, dim_x]`
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub n_classes: Option<usize>,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows as CSV with header `x0,x1,...[,y]`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        if self.y.is_some() {
            header.push("y".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(y) = &self.y {
                fields.push(y[i].to_string());
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn mixture(&self) -> Option<(&[Vec<f64>], f64)> {
        match &self.meta {
            Some(DatasetMeta::Mixture { centers, sigma }) => Some((centers, *sigma)),
            _ => None,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Centers of `k` modes equally spaced on a circle of the given radius.
pub fn ring_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Equal-weight isotropic mixture with arbitrary centers. Labels are the
/// mode index.
pub fn mixture_from_centers(
    centers: Vec<Vec<f64>>,
    sigma: f64,
    n: usize,
    seed: u64,
    labeled: bool,
) -> Result<Dataset> {
    let k = centers.len();
    if k == 0 {
        return Err(Error::Config("mixture needs at least one mode".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("mixture sigma must be positive, got {sigma}")));
    }
    if n < k {
        return Err(Error::Config(format!("need at least one sample per mode: n={n} < K={k}")));
    }
    let dim = centers[0].len();
    if centers.iter().any(|c| c.len() != dim) || dim == 0 {
        return Err(Error::Config("mixture centers must share a positive dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let j = rng.random_range(0..k);
        labels.push(j);
        for c in &centers[j] {
            data.push(c + sigma * normal(&mut rng));
        }
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, dim], data)?,
        y: labeled.then_some(labels),
        n_classes: labeled.then_some(k),
        meta: Some(DatasetMeta::Mixture { centers, sigma }),
    })
}

/// `k` Gaussian modes on a circle.
pub fn gaussian_mixture(k: usize, n: usize, radius: f64, sigma: f64, seed: u64, labeled: bool) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Config("mixture needs at least one mode".into()));
    }
    mixture_from_centers(ring_centers(k, radius), sigma, n, seed, labeled)
}

pub const SWISS_T_MIN: f64 = 1.5 * PI;
pub const SWISS_T_MAX: f64 = 4.5 * PI;
pub const SWISS_SCALE: f64 = 5.0;

/// 2-D swiss roll: `t ~ U[1.5π, 4.5π]`, point `t·(cos t, sin t) / 5` plus
/// isotropic noise.
pub fn swiss_roll_2d(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("swiss roll needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = rng.random_range(SWISS_T_MIN..SWISS_T_MAX);
        data.push(t * t.cos() / SWISS_SCALE + noise * normal(&mut rng));
        data.push(t * t.sin() / SWISS_SCALE + noise * normal(&mut rng));
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, 2], data)?,
        y: None,
        n_classes: None,
        meta: Some(DatasetMeta::SwissRoll {
            t_min: SWISS_T_MIN,
            t_max: SWISS_T_MAX,
            scale: SWISS_SCALE,
            noise,
        }),
    })
}

/// Two interleaved unit half circles. The first `⌈n/2⌉` rows (label 0)
/// lie on the upper arc centered at the origin, the rest (label 1) on the
/// lower arc centered at `(1, 0.5)`.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("two moons needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = n.div_ceil(2);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.random_range(0.0..=PI);
        let (px, py) = if i < outer {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let (ex, ey) = if noise > 0.0 {
            (noise * normal(&mut rng), noise * normal(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(px + ex);
        data.push(py + ey);
        labels.push(usize::from(i >= outer));
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, 2], data)?,
        y: Some(labels),
        n_classes: Some(2),
        meta: Some(DatasetMeta::TwoMoons { noise }),
    })
}

/// Posterior over mixture modes given observed coordinates, with the
/// per-mode Gaussian conditional of the free coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMixture {
    pub weights: Vec<f64>,
    /// Mean of the free coordinates under each mode.
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub free_dims: Vec<usize>,
}

impl ConditionalMixture {
    /// Mode whose conditional mean is within `threshold·σ` of the free
    /// coordinates of `x` (a full-width row), if any.
    pub fn assign(&self, x: &[f64], threshold: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, m) in self.means.iter().enumerate() {
            let d2: f64 = self
                .free_dims
                .iter()
                .zip(m)
                .map(|(&j, mu)| (x[j] - mu).powi(2))
                .sum();
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((k, d2));
            }
        }
        best.filter(|(_, d2)| d2.sqrt() <= threshold * self.sigma).map(|(k, _)| k)
    }
}

/// Exact conditional of the free coordinates (`mask[j] == false`) given the
/// observed ones, for an equal-weight isotropic mixture.
pub fn exact_conditional(meta: &DatasetMeta, observed: &[f64], mask: &[bool]) -> Result<ConditionalMixture> {
    let DatasetMeta::Mixture { centers, sigma } = meta else {
        return Err(Error::Unsupported("exact conditionals need a Gaussian mixture".into()));
    };
    let dim = centers[0].len();
    if observed.len() != dim || mask.len() != dim {
        return Err(Error::dim("exact_conditional", &[dim], &[observed.len(), mask.len()]));
    }
    let log_w: Vec<f64> = centers
        .iter()
        .map(|c| {
            let d2: f64 = (0..dim)
                .filter(|&j| mask[j])
                .map(|j| (observed[j] - c[j]).powi(2))
                .sum();
            -d2 / (2.0 * sigma * sigma)
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let free_dims: Vec<usize> = (0..dim).filter(|&j| !mask[j]).collect();
    Ok(ConditionalMixture {
        weights: unnorm.iter().map(|u| u / total).collect(),
        means: centers
            .iter()
            .map(|c| free_dims.iter().map(|&j| c[j]).collect())
            .collect(),
        sigma: *sigma,
        free_dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mode_mean_near_origin() {
        let d = gaussian_mixture(1, 4000, 0.0, 0.5, 3, false).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..d.len()).map(|i| d.x.row(i)[j]).sum::<f64>() / d.len() as f64;
            assert!(mean.abs() < 4.0 * 0.5 / (d.len() as f64).sqrt());
        }
        assert!(d.y.is_none());
    }

    #[test]
    fn ring_samples_stay_near_their_centers() {
        let sigma = 0.05;
        let d = gaussian_mixture(8, 10_000, 2.0, sigma, 11, true).unwrap();
        let (centers, _) = d.mixture().unwrap();
        let y = d.y.as_ref().unwrap();
        for i in 0..d.len() {
            let c = &centers[y[i]];
            let r = d.x.row(i);
            let dist = ((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).sqrt();
            assert!(dist < 5.0 * sigma, "row {i} at {dist}");
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gaussian_mixture(3, 50, 1.0, 0.1, 4, true).unwrap(), gaussian_mixture(3, 50, 1.0, 0.1, 4, true).unwrap());
        assert_eq!(swiss_roll_2d(50, 0.1, 4).unwrap(), swiss_roll_2d(50, 0.1, 4).unwrap());
        assert_eq!(two_moons(51, 0.1, 4).unwrap(), two_moons(51, 0.1, 4).unwrap());
        assert_ne!(two_moons(51, 0.1, 4).unwrap(), two_moons(51, 0.1, 5).unwrap());
    }

    #[test]
    fn mixture_config_errors() {
        assert!(matches!(gaussian_mixture(0, 10, 1.0, 0.1, 0, false), Err(Error::Config(_))));
        assert!(matches!(gaussian_mixture(3, 10, 1.0, 0.0, 0, false), Err(Error::Config(_))));
        assert!(matches!(gaussian_mixture(8, 7, 1.0, 0.1, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let n = 101;
        let d = two_moons(n, 0.0, 2).unwrap();
        let y = d.y.as_ref().unwrap();
        for i in 0..n {
            let r = d.x.row(i);
            let dist = if y[i] == 0 {
                assert!(r[1] >= 0.0);
                (r[0].hypot(r[1]) - 1.0).abs()
            } else {
                assert!(r[1] <= 0.5);
                ((r[0] - 1.0).hypot(r[1] - 0.5) - 1.0).abs()
            };
            assert!(dist < 1e-12, "row {i}: {dist}");
        }
        let ones = y.iter().filter(|&&v| v == 1).count();
        assert_eq!(ones, n / 2);
        assert_eq!(n - ones, n.div_ceil(2));
    }

    #[test]
    fn swiss_roll_within_analytic_extent() {
        let d = swiss_roll_2d(2000, 0.0, 8).unwrap();
        let rmax = SWISS_T_MAX / SWISS_SCALE;
        let rmin = SWISS_T_MIN / SWISS_SCALE;
        for i in 0..d.len() {
            let r = d.x.row(i);
            let radius = r[0].hypot(r[1]);
            assert!(radius <= rmax + 1e-12 && radius >= rmin - 1e-12);
        }
    }

    #[test]
    fn isotropic_conditional_ignores_observation() {
        let meta = DatasetMeta::Mixture {
            centers: vec![vec![0.3, -0.7]],
            sigma: 0.2,
        };
        let c = exact_conditional(&meta, &[5.0, 0.0], &[true, false]).unwrap();
        assert_eq!(c.weights, vec![1.0]);
        assert_eq!(c.means, vec![vec![-0.7]]);
    }

    #[test]
    fn separated_modes_posterior() {
        let meta = DatasetMeta::Mixture {
            centers: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
            sigma: 0.2,
        };
        let c = exact_conditional(&meta, &[-1.0, 0.0], &[true, false]).unwrap();
        // Likelihood ratio exp(-(2²)/(2·0.04)) = exp(-50).
        assert!(c.weights[0] > 0.999);
        assert!((c.weights[1] - (-50f64).exp() / (1.0 + (-50f64).exp())).abs() < 1e-30);
        assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c.assign(&[-1.0, -1.1], 3.0), Some(0));
        assert_eq!(c.assign(&[-1.0, 0.0], 3.0), None);
    }

    #[test]
    fn conditional_needs_mixture() {
        let meta = DatasetMeta::TwoMoons { noise: 0.0 };
        assert!(matches!(exact_conditional(&meta, &[0.0, 0.0], &[true, false]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn csv_export() {
        let d = gaussian_mixture(2, 3, 1.0, 0.1, 1, true).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,y");
        assert_eq!(lines.len(), 4);
    }
}
