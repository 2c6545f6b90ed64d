//! Finite-state version of the encoder/decoder chain.
//!
//! With tabulated conditionals the transition operators over joint states
//! are explicit stochastic matrices, so stationarity can be checked exactly
//! instead of by sampling. Joint state `(x, z)` has index `x * |Z| + z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 1_000_000;

/// Tabulated `p(x|z)`, `q(z|x)` and data distribution over `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    /// `[|Z|][|X|]`
    pub p_x_given_z: Vec<Vec<f64>>,
    /// `[|X|][|Z|]`
    pub q_z_given_x: Vec<Vec<f64>>,
    /// `[|X|]`
    pub data_dist: Vec<f64>,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Invariant(format!(
            "{what} has a non-positive entry {v}; every transition must be possible"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::Invariant(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

impl TabularModel {
    /// Validates shapes, strict positivity and row sums.
    pub fn new(p_x_given_z: Vec<Vec<f64>>, q_z_given_x: Vec<Vec<f64>>, data_dist: Vec<f64>) -> Result<Self> {
        let nx = data_dist.len();
        let nz = p_x_given_z.len();
        if nx == 0 || nz == 0 {
            return Err(Error::Config("tabular model needs at least one state per variable".into()));
        }
        if q_z_given_x.len() != nx {
            return Err(Error::dim("q(z|x) rows", &[nx], &[q_z_given_x.len()]));
        }
        for (z, row) in p_x_given_z.iter().enumerate() {
            if row.len() != nx {
                return Err(Error::dim("p(x|z) row", &[nx], &[row.len()]));
            }
            check_distribution(row, &format!("p(x|z={z})"))?;
        }
        for (x, row) in q_z_given_x.iter().enumerate() {
            if row.len() != nz {
                return Err(Error::dim("q(z|x) row", &[nz], &[row.len()]));
            }
            check_distribution(row, &format!("q(z|x={x})"))?;
        }
        check_distribution(&data_dist, "data distribution")?;
        Ok(Self {
            p_x_given_z,
            q_z_given_x,
            data_dist,
        })
    }

    /// The model at the adversarial fixed point: `p(x|z)` is the exact
    /// conditional of the data-driven joint `data(x)·q(z|x)`.
    pub fn consistent(data_dist: Vec<f64>, q_z_given_x: Vec<Vec<f64>>) -> Result<Self> {
        let nz = q_z_given_x.first().map_or(0, Vec::len);
        let p = derived_decoder(&data_dist, &q_z_given_x, nz);
        Self::new(p, q_z_given_x, data_dist)
    }

    /// Random strictly positive data distribution and encoder, with the
    /// matching decoder.
    pub fn random_consistent(nx: usize, nz: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            normalize(&mut v);
            v
        };
        let data = draw(nx);
        let q = (0..nx).map(|_| draw(nz)).collect();
        Self::consistent(data, q)
    }

    /// Mixes the decoder with the uniform distribution: `(1-α)·p + α/|X|`.
    pub fn with_mixed_decoder(&self, alpha: f64) -> Result<Self> {
        let nx = self.nx() as f64;
        let p = self
            .p_x_given_z
            .iter()
            .map(|row| {
                let mut r: Vec<f64> = row.iter().map(|v| (1.0 - alpha) * v + alpha / nx).collect();
                normalize(&mut r);
                r
            })
            .collect();
        Self::new(p, self.q_z_given_x.clone(), self.data_dist.clone())
    }

    pub fn nx(&self) -> usize {
        self.data_dist.len()
    }

    pub fn nz(&self) -> usize {
        self.p_x_given_z.len()
    }

    pub fn state(&self, x: usize, z: usize) -> usize {
        x * self.nz() + z
    }

    /// Data-driven joint `π_D(x, z) = data(x)·q(z|x)`, flattened.
    pub fn data_joint(&self) -> Vec<f64> {
        let mut j = Vec::with_capacity(self.nx() * self.nz());
        for (x, row) in self.q_z_given_x.iter().enumerate() {
            j.extend(row.iter().map(|q| self.data_dist[x] * q));
        }
        j
    }
}

fn derived_decoder(data: &[f64], q: &[Vec<f64>], nz: usize) -> Vec<Vec<f64>> {
    let nx = data.len();
    (0..nz)
        .map(|z| {
            let mut col: Vec<f64> = (0..nx).map(|x| data[x] * q[x][z]).collect();
            normalize(&mut col);
            col
        })
        .collect()
}

/// Which conditional is applied first in one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionOrder {
    /// `(x, z) -> z' ~ q(z|x) -> x' ~ p(x|z')`: the chain's own operator.
    EncodeThenDecode,
    /// `(x, z) -> x' ~ p(x|z) -> z' ~ q(z|x')`: the operator on odd pairs
    /// `(z_{t+1}, x_t)`.
    DecodeThenEncode,
}

/// Row-stochastic square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::dim("transition row", &[n], &[r.len()]));
            }
            if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Invariant(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Invariant(format!("row {i} sums to {s}")));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `π · T`
    pub fn apply(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &p) in pi.iter().enumerate() {
            for (o, t) in out.iter_mut().zip(self.row(i)) {
                *o += p * t;
            }
        }
        out
    }
}

/// Exact transition matrix over joint states.
pub fn tabular_transition(m: &TabularModel, order: TransitionOrder) -> Result<TransitionMatrix> {
    let (nx, nz) = (m.nx(), m.nz());
    let n = nx * nz;
    let mut rows = vec![vec![0.0; n]; n];
    for x in 0..nx {
        for z in 0..nz {
            let row = &mut rows[m.state(x, z)];
            for x2 in 0..nx {
                for z2 in 0..nz {
                    row[m.state(x2, z2)] = match order {
                        TransitionOrder::EncodeThenDecode => m.q_z_given_x[x][z2] * m.p_x_given_z[z2][x2],
                        TransitionOrder::DecodeThenEncode => m.p_x_given_z[z][x2] * m.q_z_given_x[x2][z2],
                    };
                }
            }
        }
    }
    TransitionMatrix::from_rows(&rows)
}

/// The unique `π` with `π·T = π`, by power iteration from uniform until the
/// L1 change drops below `1e-12`.
pub fn tabular_stationary(t: &TransitionMatrix) -> Result<Vec<f64>> {
    let n = t.size();
    if n == 0 {
        return Err(Error::Config("empty transition matrix".into()));
    }
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..POWER_MAX_ITERS {
        let mut next = t.apply(&pi);
        normalize(&mut next);
        let residual: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if residual < POWER_TOL {
            return Ok(pi);
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge in {POWER_MAX_ITERS} iterations"
    )))
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Empirical state histogram of a simulated chain of `steps` transitions.
pub fn simulate_histogram(t: &TransitionMatrix, steps: usize, start: usize, seed: u64) -> Vec<f64> {
    let n = t.size();
    let cdf: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            t.row(i)
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; n];
    let mut s = start;
    for _ in 0..steps {
        let u: f64 = rng.random::<f64>() * cdf[s][n - 1];
        s = cdf[s].partition_point(|&c| c <= u).min(n - 1);
        counts[s] += 1;
    }
    counts.iter().map(|&c| c as f64 / steps as f64).collect()
}

/// Exact check of the stationarity claims for one tabular model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub x_states: usize,
    pub z_states: usize,
    /// TV between the x-marginal of `T`'s stationary joint and the data.
    pub marginal_tv: f64,
    /// TV between the stationary joints of `T` and of the odd-pair operator.
    pub odd_pair_tv: f64,
    /// Max of `|p(x|z) - π_D(x|z)|` and `|q(z|x) - π_T(z|x)|`.
    pub conditional_deviation: f64,
    pub decoder_deviation: f64,
    pub encoder_deviation: f64,
}

impl StationarityReport {
    pub fn max_value(&self) -> f64 {
        self.marginal_tv
            .max(self.odd_pair_tv)
            .max(self.conditional_deviation)
    }
}

/// Stationary distributions of both transition orders, compared against the
/// data joint and the model's own conditionals. Always produces a report;
/// errors only if power iteration fails.
pub fn check_stationarity(m: &TabularModel) -> Result<StationarityReport> {
    let (nx, nz) = (m.nx(), m.nz());
    let t = tabular_transition(m, TransitionOrder::EncodeThenDecode)?;
    let t_odd = tabular_transition(m, TransitionOrder::DecodeThenEncode)?;
    let pi = tabular_stationary(&t)?;
    let pi_odd = tabular_stationary(&t_odd)?;

    let x_marginal: Vec<f64> = (0..nx).map(|x| (0..nz).map(|z| pi[m.state(x, z)]).sum()).collect();
    let marginal_tv = total_variation(&x_marginal, &m.data_dist);
    let odd_pair_tv = total_variation(&pi, &pi_odd);

    let p_data = derived_decoder(&m.data_dist, &m.q_z_given_x, nz);
    let decoder_deviation = (0..nz)
        .flat_map(|z| (0..nx).map(move |x| (z, x)))
        .map(|(z, x)| (m.p_x_given_z[z][x] - p_data[z][x]).abs())
        .fold(0.0, f64::max);
    let mut encoder_deviation: f64 = 0.0;
    for x in 0..nx {
        let px = x_marginal[x];
        for z in 0..nz {
            let cond = pi[m.state(x, z)] / px;
            encoder_deviation = encoder_deviation.max((m.q_z_given_x[x][z] - cond).abs());
        }
    }

    Ok(StationarityReport {
        x_states: nx,
        z_states: nz,
        marginal_tv,
        odd_pair_tv,
        conditional_deviation: decoder_deviation.max(encoder_deviation),
        decoder_deviation,
        encoder_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_model() {
        let m = TabularModel::new(vec![vec![1.0]], vec![vec![1.0]], vec![1.0]).unwrap();
        let t = tabular_transition(&m, TransitionOrder::EncodeThenDecode).unwrap();
        assert_eq!(t.row(0), &[1.0]);
        let r = check_stationarity(&m).unwrap();
        assert_eq!(r.max_value(), 0.0);
    }

    #[test]
    fn composed_rows_are_stochastic() {
        let m = TabularModel::random_consistent(5, 3, 2).unwrap();
        for order in [TransitionOrder::EncodeThenDecode, TransitionOrder::DecodeThenEncode] {
            let t = tabular_transition(&m, order).unwrap();
            for i in 0..t.size() {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_state_balance() {
        let t = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let pi = tabular_stationary(&t).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-11);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn doubly_stochastic_is_uniform() {
        let t = TransitionMatrix::from_rows(&[
            vec![0.5, 0.3, 0.2],
            vec![0.2, 0.5, 0.3],
            vec![0.3, 0.2, 0.5],
        ])
        .unwrap();
        let pi = tabular_stationary(&t).unwrap();
        assert!(pi.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn periodic_chain_does_not_converge() {
        // Bipartite: the uniform start oscillates forever.
        let t = TransitionMatrix::from_rows(&[
            vec![0.0, 0.5, 0.5],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert!(matches!(tabular_stationary(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        assert!(matches!(
            TransitionMatrix::from_rows(&[vec![0.5, 0.6], vec![0.5, 0.5]]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(
            TabularModel::new(vec![vec![1.0, 0.0]], vec![vec![1.0], vec![1.0]], vec![0.5, 0.5]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn consistent_model_is_a_fixed_point() {
        let m = TabularModel::random_consistent(12, 1, 5).unwrap();
        let r = check_stationarity(&m).unwrap();
        assert!(r.max_value() < 1e-10, "{r:?}");
        let m = TabularModel::random_consistent(4, 3, 6).unwrap();
        let r = check_stationarity(&m).unwrap();
        assert!(r.max_value() < 1e-10, "{r:?}");
    }

    #[test]
    fn mixing_the_decoder_breaks_the_fixed_point() {
        let m = TabularModel::random_consistent(6, 2, 9).unwrap().with_mixed_decoder(0.1).unwrap();
        let r = check_stationarity(&m).unwrap();
        assert!(r.marginal_tv > 0.0);
        assert!(r.decoder_deviation > 1e-3);
    }
}
