//! Univariate Gaussian mixture fitted by expectation-maximisation, and its
//! combination with atlas posteriors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::ProbabilisticAtlas;
use crate::bayes::{combine_row, PosteriorField};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{ClassMap, Grid, LabelVolume, Volume};

const ROWS_PER_TASK: usize = 4096;

pub fn gaussian_pdf<T: Real>(x: T, mean: T, variance: T) -> Result<T> {
    if !(variance > T::zero()) {
        return Err(Error::InvalidInput(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let d = x - mean;
    Ok((-d * d / (T::lit(2.0) * variance)).exp()
        / (T::lit(2.0 * std::f64::consts::PI) * variance).sqrt())
}

#[inline]
fn log_pdf<T: Real>(x: T, mean: T, variance: T) -> T {
    let d = x - mean;
    -d * d / (T::lit(2.0) * variance)
        - T::lit(0.5) * (T::lit(2.0 * std::f64::consts::PI) * variance).ln()
}

/// Mixture parameters, one entry per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct GmmParams<T> {
    pub weights: Vec<T>,
    pub means: Vec<T>,
    pub variances: Vec<T>,
}

impl<T: Real> GmmParams<T> {
    pub fn new(weights: Vec<T>, means: Vec<T>, variances: Vec<T>) -> Result<Self> {
        let p = GmmParams {
            weights,
            means,
            variances,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::InvalidInput(
                "mixture needs equally many weights, means and variances".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w >= T::zero())) {
            return Err(Error::InvalidInput(
                "mixture weights must be non-negative".into(),
            ));
        }
        let s: f64 = self.weights.iter().map(|w| w.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {s}")));
        }
        if self
            .variances
            .iter()
            .any(|&v| !(v > T::zero() && v.is_finite()))
            || self.means.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidInput(
                "mixture means must be finite and variances positive".into(),
            ));
        }
        Ok(())
    }
}

/// Memberships `W` (row-major, one row per sample) and the log-likelihood.
pub fn e_step<T: Real>(data: &[T], params: &GmmParams<T>) -> Result<(Vec<T>, f64)> {
    let k = params.n_components();
    let log_w: Vec<T> = params.weights.iter().map(|&w| w.ln()).collect();
    let mut w = vec![T::zero(); data.len() * k];
    let per_row: Vec<Result<f64>> = w
        .par_chunks_mut(k * ROWS_PER_TASK)
        .zip(data.par_chunks(ROWS_PER_TASK))
        .map(|(rows, xs)| {
            let mut ll = 0.0;
            for (row, &x) in rows.chunks_exact_mut(k).zip(xs) {
                let mut top = T::neg_infinity();
                for c in 0..k {
                    row[c] = log_w[c] + log_pdf(x, params.means[c], params.variances[c]);
                    top = top.max(row[c]);
                }
                if !top.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "no component has positive density at {x}"
                    )));
                }
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - top).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
                ll += (top + s.ln()).as_f64();
            }
            Ok(ll)
        })
        .collect();
    let mut ll = 0.0;
    for r in per_row {
        ll += r?;
    }
    Ok((w, ll))
}

/// Parameter update from memberships. Components with no mass keep their
/// mean and variance; their indices are returned.
pub fn m_step<T: Real>(
    data: &[T],
    w: &[T],
    prev: &GmmParams<T>,
    variance_floor: T,
) -> Result<(GmmParams<T>, Vec<usize>)> {
    let k = prev.n_components();
    if w.len() != data.len() * k {
        return Err(Error::InvalidInput(
            "membership matrix does not match the data".into(),
        ));
    }
    let m = T::from_usize_lossy(data.len());
    let mut mass = vec![T::zero(); k];
    let mut first = vec![T::zero(); k];
    for (row, &x) in w.chunks_exact(k).zip(data) {
        for c in 0..k {
            mass[c] += row[c];
            first[c] += row[c] * x;
        }
    }
    let mut p = prev.clone();
    let mut frozen = Vec::new();
    for c in 0..k {
        p.weights[c] = mass[c] / m;
        if mass[c] > T::zero() {
            p.means[c] = first[c] / mass[c];
        } else {
            frozen.push(c);
        }
    }
    let mut second = vec![T::zero(); k];
    for (row, &x) in w.chunks_exact(k).zip(data) {
        for c in 0..k {
            let d = x - p.means[c];
            second[c] += row[c] * d * d;
        }
    }
    for c in 0..k {
        if mass[c] > T::zero() {
            p.variances[c] = (second[c] / mass[c]).max(variance_floor);
        }
    }
    Ok((p, frozen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Stop once the relative log-likelihood gain falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Variance floor as a fraction of the data variance.
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-6,
            max_iter: 500,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmState<T> {
    pub params: GmmParams<T>,
    /// Row-major `M x K` responsibilities under `params`.
    pub memberships: Vec<T>,
    /// Log-likelihood after each E-step; the last entry belongs to `params`.
    pub log_likelihood: Vec<f64>,
    /// Components that lost all mass at some iteration.
    pub frozen: Vec<usize>,
    pub converged: bool,
}

#[derive(Serialize)]
struct Trace<'a, T: Real> {
    params: &'a GmmParams<T>,
    log_likelihood: &'a [f64],
    iterations: usize,
    converged: bool,
    frozen: &'a [usize],
}

impl<T: Real> GmmState<T> {
    pub fn n_components(&self) -> usize {
        self.params.n_components()
    }

    pub fn iterations(&self) -> usize {
        self.log_likelihood.len().saturating_sub(1)
    }

    pub fn membership(&self, i: usize) -> &[T] {
        let k = self.n_components();
        &self.memberships[i * k..(i + 1) * k]
    }

    /// Most probable component per sample (lowest index on ties).
    pub fn hard_assignments(&self) -> Vec<u16> {
        self.memberships
            .chunks_exact(self.n_components())
            .map(|r| crate::atlas::argmax(r) as u16)
            .collect()
    }

    pub fn labels(&self, grid: Grid, class_map: ClassMap) -> Result<LabelVolume> {
        if class_map.len() != self.n_components() {
            return Err(Error::InvalidInput(
                "class map does not match the mixture".into(),
            ));
        }
        LabelVolume::new(grid, self.hard_assignments(), class_map)
    }

    pub fn memberships_field(&self, grid: Grid, class_map: ClassMap) -> Result<PosteriorField<T>> {
        PosteriorField::new(grid, class_map, self.memberships.clone())
    }

    /// Parameters, log-likelihood trace and convergence flags as JSON.
    pub fn trace_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Trace {
            params: &self.params,
            log_likelihood: &self.log_likelihood,
            iterations: self.iterations(),
            converged: self.converged,
            frozen: &self.frozen,
        })?)
    }
}

fn data_variance<T: Real>(data: &[T]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    data.iter()
        .map(|x| (x.as_f64() - mean).powi(2))
        .sum::<f64>()
        / n
}

pub fn fit_em<T: Real>(data: &[T], init: GmmParams<T>, cfg: &EmConfig) -> Result<GmmState<T>> {
    init.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no data to fit".into()));
    }
    let var = data_variance(data);
    if !(var > 0.0) {
        return Err(Error::Degenerate(
            "EM needs at least two distinct intensities".into(),
        ));
    }
    let floor = T::lit(cfg.variance_floor * var);
    let mut params = init;
    params.variances.iter_mut().for_each(|v| *v = v.max(floor));
    let (mut w, ll) = e_step(data, &params)?;
    let mut trace = vec![ll];
    let mut frozen: Vec<usize> = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let (next, gone) = m_step(data, &w, &params, floor)?;
        for c in gone {
            if !frozen.contains(&c) {
                log::warn!("mixture component {c} has no mass; keeping its parameters");
                frozen.push(c);
            }
        }
        let (next_w, next_ll) = e_step(data, &next)?;
        let prev = *trace.last().expect("trace is non-empty");
        params = next;
        w = next_w;
        trace.push(next_ll);
        if (next_ll - prev).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    frozen.sort_unstable();
    Ok(GmmState {
        params,
        memberships: w,
        log_likelihood: trace,
        frozen,
        converged,
    })
}

/// Mixture weights from mean priors; means and variances prior-weighted.
pub fn init_from_atlas<T: Real>(
    target: &Volume<T>,
    atlas: &ProbabilisticAtlas<T>,
) -> Result<GmmParams<T>> {
    atlas
        .grid()
        .ensure_matches(target.grid(), "atlas vs target")?;
    let k = atlas.n_channels();
    let n = target.grid().len();
    let y = target.data();
    let global_mean = y.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
    let global_var = data_variance(y);
    if !(global_var > 0.0) {
        return Err(Error::Degenerate("target intensities are constant".into()));
    }
    let mut mass = vec![0.0; k];
    let mut first = vec![0.0; k];
    for v in 0..n {
        for (c, &a) in atlas.prior(v).iter().enumerate() {
            mass[c] += a.as_f64();
            first[c] += a.as_f64() * y[v].as_f64();
        }
    }
    let means: Vec<f64> = (0..k)
        .map(|c| {
            if mass[c] > 0.0 {
                first[c] / mass[c]
            } else {
                global_mean
            }
        })
        .collect();
    let mut second = vec![0.0; k];
    for v in 0..n {
        for (c, &a) in atlas.prior(v).iter().enumerate() {
            second[c] += a.as_f64() * (y[v].as_f64() - means[c]).powi(2);
        }
    }
    let total: f64 = mass.iter().sum();
    GmmParams::new(
        mass.iter().map(|&m| T::lit(m / total)).collect(),
        means.iter().map(|&m| T::lit(m)).collect(),
        (0..k)
            .map(|c| {
                let v = if mass[c] > 0.0 {
                    second[c] / mass[c]
                } else {
                    global_var
                };
                T::lit(v.max(1e-6 * global_var))
            })
            .collect(),
    )
}

/// EM over a whole target volume, initialised from an atlas.
pub fn fit_em_volume<T: Real>(
    target: &Volume<T>,
    atlas: &ProbabilisticAtlas<T>,
    cfg: &EmConfig,
) -> Result<GmmState<T>> {
    fit_em(target.data(), init_from_atlas(target, atlas)?, cfg)
}

/// Labels from `W * posterior`, renormalised per voxel; voxels where the
/// product vanishes take the posterior alone.
pub fn pas_em_combine<T: Real>(
    memberships: &[T],
    posterior: &PosteriorField<T>,
) -> Result<(LabelVolume, PosteriorField<T>)> {
    let kc = posterior.n_channels();
    if memberships.len() != posterior.data().len() {
        return Err(Error::InvalidInput(format!(
            "memberships have {} entries, posteriors {} x {kc}",
            memberships.len(),
            posterior.grid().len()
        )));
    }
    let mut out = vec![T::zero(); memberships.len()];
    let labels: Vec<u16> = out
        .par_chunks_mut(kc)
        .enumerate()
        .map(|(v, row)| {
            let p = posterior.row(v);
            combine_row(&memberships[v * kc..(v + 1) * kc], p, p, row)
        })
        .collect();
    let grid = *posterior.grid();
    Ok((
        LabelVolume::new(grid, labels, posterior.class_map().clone())?,
        PosteriorField::new(grid, posterior.class_map().clone(), out)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_basics() {
        let peak = gaussian_pdf(0.0f64, 0.0, 1.0).unwrap();
        assert!((peak - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert_eq!(
            gaussian_pdf(1.3, 0.5, 2.0).unwrap(),
            gaussian_pdf(-0.3, 0.5, 2.0).unwrap()
        );
        assert!(gaussian_pdf(0.0, 0.0, 0.0).is_err());
        let h = 1e-3;
        let area: f64 = (-20_000..=20_000)
            .map(|i| gaussian_pdf::<f64>(i as f64 * h, 1.0, 2.0).unwrap() * h)
            .sum();
        assert!((area - 1.0).abs() < 1e-4);
    }

    #[test]
    fn symmetric_midpoint_membership() {
        let p = GmmParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let (w, _) = e_step(&[0.0], &p).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn one_component_memberships_and_likelihood() {
        let data = [0.3f64, -1.2, 2.5, 0.0];
        let p = GmmParams::new(vec![1.0], vec![0.5], vec![2.0]).unwrap();
        let (w, ll) = e_step(&data, &p).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
        let direct: f64 = data
            .iter()
            .map(|&x| gaussian_pdf(x, 0.5, 2.0).unwrap().ln())
            .sum();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn hard_memberships_give_cluster_moments() {
        let data = [1.0f64, 2.0, 3.0, 10.0, 14.0];
        let w = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let prev = GmmParams::new(vec![0.5, 0.5], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let (p, frozen) = m_step(&data, &w, &prev, 0.0).unwrap();
        assert!(frozen.is_empty());
        assert_eq!(p.weights, vec![0.6, 0.4]);
        assert_eq!(p.means, vec![2.0, 12.0]);
        assert!((p.variances[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.variances[1], 4.0);
    }

    #[test]
    fn empty_component_is_frozen() {
        let data = [1.0, 2.0];
        let w = [1.0, 0.0, 1.0, 0.0];
        let prev = GmmParams::new(vec![0.5, 0.5], vec![0.0, 7.0], vec![1.0, 3.0]).unwrap();
        let (p, frozen) = m_step(&data, &w, &prev, 0.0).unwrap();
        assert_eq!(frozen, vec![1]);
        assert_eq!((p.weights[1], p.means[1], p.variances[1]), (0.0, 7.0, 3.0));
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let p = GmmParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(
            fit_em(&[2.0; 10], p, &EmConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn uniform_memberships_keep_pas_labels() {
        let grid = Grid::unit([2, 1, 1]);
        let post = PosteriorField::new(
            grid,
            ClassMap::identity(3),
            vec![0.2f64, 0.5, 0.3, 0.6, 0.1, 0.3],
        )
        .unwrap();
        let w = vec![1.0 / 3.0; 6];
        let (labels, field) = pas_em_combine(&w, &post).unwrap();
        assert_eq!(labels.data(), &[1, 0]);
        for (a, b) in field.data().iter().zip(post.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(pas_em_combine(&w[..3], &post).is_err());
    }
}
