//! Parzen-window mutual information with its analytic parameter gradient.
//!
//! Each sampled fixed voxel `x` contributes `w_f(i - xi_f(x)) * w_m(j - xi_m(T(x)))`
//! to joint bin `(i, j)`, where `xi` are continuous bin coordinates and the
//! windows are B-spline kernels. With `p_m` the moving marginal,
//!
//! `dMI/dtheta = sum_ij dp(i,j)/dtheta * ln(p(i,j) / p_m(j))`,
//!
//! and `dp/dtheta` follows from the moving window derivative, the moving image
//! gradient and the transform Jacobian. Empty joint bins contribute nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transform::{AffineTransform, FfdTransform, TransformChain};
use crate::volume::{Interpolant, Interpolator, Volume};

const CHUNK: usize = 256;

/// B-spline order of a Parzen window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParzenOrder {
    /// Hard binning.
    Box,
    Linear,
    Cubic,
}

impl ParzenOrder {
    fn pad(self) -> usize {
        match self {
            ParzenOrder::Box => 0,
            ParzenOrder::Linear => 1,
            ParzenOrder::Cubic => 2,
        }
    }

    /// Calls `f(bin, weight, d weight / d xi)` for every bin the window touches.
    #[inline]
    fn for_each<T: Real>(self, xi: T, bins: usize, mut f: impl FnMut(usize, T, T)) {
        match self {
            ParzenOrder::Box => {
                let b = xi.round().to_usize().unwrap_or(0).min(bins - 1);
                f(b, T::one(), T::zero());
            }
            ParzenOrder::Linear | ParzenOrder::Cubic => {
                let r = if self == ParzenOrder::Linear { 1 } else { 2 };
                let lo = xi.floor().to_isize().unwrap_or(0) - r + 1;
                for b in lo..=lo + 2 * r - 1 {
                    if b < 0 || b as usize >= bins {
                        continue;
                    }
                    let u = T::from_isize(b).expect("bin index") - xi;
                    let (w, dw) = if self == ParzenOrder::Linear {
                        (bspline::linear(u), -bspline::linear_deriv(u))
                    } else {
                        (bspline::cubic(u), -bspline::cubic_deriv(u))
                    };
                    if w != T::zero() || dw != T::zero() {
                        f(b as usize, w, dw);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub bins: usize,
    pub samples_per_iter: usize,
    pub fixed_parzen: ParzenOrder,
    pub moving_parzen: ParzenOrder,
    /// Moving-image interpolator used while optimising.
    pub interpolator: Interpolator,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            bins: 32,
            samples_per_iter: 2048,
            fixed_parzen: ParzenOrder::Linear,
            moving_parzen: ParzenOrder::Cubic,
            interpolator: Interpolator::Linear,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 8 {
            return Err(Error::InvalidInput(format!(
                "MI needs >= 8 bins, got {}",
                self.bins
            )));
        }
        if self.samples_per_iter < 256 {
            return Err(Error::InvalidInput(format!(
                "MI needs >= 256 samples per iteration, got {}",
                self.samples_per_iter
            )));
        }
        if self.interpolator == Interpolator::Nearest {
            return Err(Error::InvalidInput(
                "MI optimisation needs a differentiable interpolator".into(),
            ));
        }
        Ok(())
    }
}

/// Which transform parameters the gradient is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Affine,
    Ffd,
}

/// Mapping between an optimiser parameter vector and a transform.
pub trait Warp<T: Real>: Sync {
    fn n_params(&self) -> usize;
    fn params(&self) -> Vec<T>;
    fn transform(&self, params: &[T]) -> TransformChain<T>;
    /// `grad += v^T dT(p)/dtheta` for a world-space covector `v`.
    fn accumulate(&self, p: [T; 3], v: [T; 3], grad: &mut [T]);
}

/// Affine parameters relative to `center`, with the matrix scaled by `radius`
/// so a unit step in any parameter moves points by at most about 1 mm:
/// `T(p) = M (p - c) / R + c + t`.
#[derive(Clone, Debug)]
pub struct AffineWarp<T> {
    pub center: [T; 3],
    pub radius: T,
    pub init: AffineTransform<T>,
    /// Kept fixed; normally absent during the affine stage.
    pub ffd: Option<FfdTransform<T>>,
}

impl<T: Real> Warp<T> for AffineWarp<T> {
    fn n_params(&self) -> usize {
        12
    }

    fn params(&self) -> Vec<T> {
        let a = &self.init;
        let mut out = Vec::with_capacity(12);
        for row in &a.matrix {
            out.extend(row.iter().map(|&m| m * self.radius));
        }
        let ac = crate::transform::mat_vec(&a.matrix, self.center);
        out.extend((0..3).map(|i| a.translation[i] - self.center[i] + ac[i]));
        out
    }

    fn transform(&self, params: &[T]) -> TransformChain<T> {
        let matrix: [[T; 3]; 3] =
            std::array::from_fn(|i| std::array::from_fn(|j| params[3 * i + j] / self.radius));
        let t = [params[9], params[10], params[11]];
        TransformChain {
            affine: AffineTransform::about_center(matrix, self.center, t),
            ffd: self.ffd.clone(),
        }
    }

    #[inline]
    fn accumulate(&self, p: [T; 3], v: [T; 3], grad: &mut [T]) {
        let q: [T; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.radius);
        for i in 0..3 {
            for j in 0..3 {
                grad[3 * i + j] += v[i] * q[j];
            }
            grad[9 + i] += v[i];
        }
    }
}

/// B-spline coefficients on top of a fixed affine; parameters are the
/// coefficients flattened knot-major, three components per knot.
#[derive(Clone, Debug)]
pub struct FfdWarp<T> {
    pub affine: AffineTransform<T>,
    pub lattice: FfdTransform<T>,
}

impl<T: Real> Warp<T> for FfdWarp<T> {
    fn n_params(&self) -> usize {
        3 * self.lattice.n_control()
    }

    fn params(&self) -> Vec<T> {
        self.lattice
            .coefficients()
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    fn transform(&self, params: &[T]) -> TransformChain<T> {
        let mut ffd = self.lattice.clone();
        for (c, p) in ffd
            .coefficients_mut()
            .iter_mut()
            .zip(params.chunks_exact(3))
        {
            *c = [p[0], p[1], p[2]];
        }
        TransformChain {
            affine: self.affine.clone(),
            ffd: Some(ffd),
        }
    }

    #[inline]
    fn accumulate(&self, p: [T; 3], v: [T; 3], grad: &mut [T]) {
        self.lattice.for_each_weight(p, |idx, w| {
            grad[3 * idx] += v[0] * w;
            grad[3 * idx + 1] += v[1] * w;
            grad[3 * idx + 2] += v[2] * w;
        });
    }
}

impl<T: Real> AffineWarp<T> {
    /// Parameterises `chain.affine` about the centre of `fixed`'s grid.
    pub fn about_grid(grid: &crate::volume::Grid, chain: &TransformChain<T>) -> Self {
        let e = grid.extent();
        let radius = (0.5 * e[0].max(e[1]).max(e[2])).max(grid.mean_spacing());
        AffineWarp {
            center: grid.center().map(T::lit),
            radius: T::lit(radius),
            init: chain.affine.clone(),
            ffd: chain.ffd.clone(),
        }
    }
}

/// One MI evaluation.
#[derive(Clone, Debug)]
pub struct MiValue<T> {
    /// Mutual information (nats). The registration cost is its negation.
    pub value: T,
    /// `dMI/dtheta` over the warp parameters.
    pub gradient: Vec<T>,
    pub fixed_entropy: T,
    pub moving_entropy: T,
    pub joint_entropy: T,
    /// Samples that landed inside the moving image.
    pub n_valid: usize,
}

#[derive(Clone, Copy)]
struct Sample<T> {
    p: [T; 3],
    xf: T,
    xm: T,
    /// World-space gradient of the moving bin coordinate.
    gm: [T; 3],
}

struct Binning<T> {
    lo: T,
    scale: T,
    pad: T,
}

impl<T: Real> Binning<T> {
    fn new(lo: T, hi: T, bins: usize, order: ParzenOrder) -> Self {
        let span = T::from_usize_lossy(bins - 1 - 2 * order.pad());
        Binning {
            lo,
            scale: span / (hi - lo),
            pad: T::from_usize_lossy(order.pad()),
        }
    }

    #[inline]
    fn coord(&self, v: T) -> T {
        self.pad + (v - self.lo) * self.scale
    }
}

/// Reusable MI evaluator for one fixed/moving pair.
pub struct MiEvaluator<'a, T> {
    fixed: &'a Volume<T>,
    moving: Interpolant<'a, T>,
    cfg: MiConfig,
    fixed_bins: Binning<T>,
    moving_bins: Binning<T>,
}

impl<'a, T: Real> MiEvaluator<'a, T> {
    pub fn new(fixed: &'a Volume<T>, moving: &'a Volume<T>, cfg: &MiConfig) -> Result<Self> {
        cfg.validate()?;
        let (flo, fhi) = fixed.min_max();
        if !(fhi > flo) {
            return Err(Error::Degenerate("fixed image is constant".into()));
        }
        let moving = Interpolant::new(moving, cfg.interpolator);
        let (mlo, mhi) = moving.value_range();
        if !(mhi > mlo) {
            return Err(Error::Degenerate("moving image is constant".into()));
        }
        Ok(MiEvaluator {
            fixed,
            moving,
            cfg: cfg.clone(),
            fixed_bins: Binning::new(flo, fhi, cfg.bins, cfg.fixed_parzen),
            moving_bins: Binning::new(mlo, mhi, cfg.bins, cfg.moving_parzen),
        })
    }

    /// Fixed voxel indices drawn uniformly with replacement.
    pub fn sample_indices(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.fixed.grid().len();
        (0..self.cfg.samples_per_iter)
            .map(|_| rng.gen_range(0..m))
            .collect()
    }

    pub fn evaluate(&self, warp: &dyn Warp<T>, params: &[T], seed: u64) -> Result<MiValue<T>> {
        let indices = self.sample_indices(seed);
        self.evaluate_at(warp, params, &indices, true)
    }

    pub fn evaluate_at(
        &self,
        warp: &dyn Warp<T>,
        params: &[T],
        indices: &[usize],
        with_gradient: bool,
    ) -> Result<MiValue<T>> {
        let bins = self.cfg.bins;
        let chain = warp.transform(params);
        let fgrid = *self.fixed.grid();
        let mgrid = *self.moving.volume().grid();
        let inv_spacing = mgrid.spacing.map(|s| T::lit(1.0 / s));
        let fixed_data = self.fixed.data();

        let samples: Vec<Sample<T>> = indices
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut out = Vec::with_capacity(chunk.len());
                for &n in chunk {
                    let p: [T; 3] = fgrid.voxel_world(n);
                    let q = chain.apply(p);
                    let idx = mgrid.world_to_index(q);
                    if let Some((m, g)) = self.moving.value_and_gradient(idx) {
                        let s = self.moving_bins.scale;
                        out.push(Sample {
                            p,
                            xf: self.fixed_bins.coord(fixed_data[n]),
                            xm: self.moving_bins.coord(m),
                            gm: std::array::from_fn(|a| g[a] * inv_spacing[a] * s),
                        });
                    }
                }
                out
            })
            .flatten()
            .collect();

        let n_valid = samples.len();
        if n_valid == 0 || n_valid < (indices.len() / 20).max(16) {
            return Err(Error::NoOverlap(format!(
                "only {n_valid} of {} samples map inside the moving image",
                indices.len()
            )));
        }
        let spread = |f: fn(&Sample<T>) -> T| {
            let first = f(&samples[0]);
            samples.iter().any(|s| f(s) != first)
        };
        if !spread(|s| s.xf) {
            return Err(Error::Degenerate(
                "sampled fixed intensities are constant".into(),
            ));
        }
        if !spread(|s| s.xm) {
            return Err(Error::Degenerate(
                "sampled moving intensities are constant".into(),
            ));
        }

        let (fo, mo) = (self.cfg.fixed_parzen, self.cfg.moving_parzen);
        let joint = samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut h = vec![T::zero(); bins * bins];
                for s in chunk {
                    fo.for_each(s.xf, bins, |i, wf, _| {
                        mo.for_each(s.xm, bins, |j, wm, _| h[i * bins + j] += wf * wm);
                    });
                }
                h
            })
            .collect::<Vec<_>>()
            .into_iter()
            .reduce(|mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            })
            .expect("at least one chunk");

        let norm = T::one() / T::from_usize_lossy(n_valid);
        let p: Vec<T> = joint.into_iter().map(|v| v * norm).collect();
        let mut pf = vec![T::zero(); bins];
        let mut pm = vec![T::zero(); bins];
        for i in 0..bins {
            for j in 0..bins {
                pf[i] += p[i * bins + j];
                pm[j] += p[i * bins + j];
            }
        }
        let entropy = |v: &[T]| -> T {
            v.iter()
                .filter(|&&x| x > T::zero())
                .map(|&x| -x * x.ln())
                .sum()
        };
        let fixed_entropy = entropy(&pf);
        let moving_entropy = entropy(&pm);
        let joint_entropy = entropy(&p);
        let mut value = T::zero();
        // ln(p / p_m) where p > 0, else 0
        let mut log_ratio = vec![T::zero(); bins * bins];
        for i in 0..bins {
            for j in 0..bins {
                let pij = p[i * bins + j];
                if pij > T::zero() {
                    value += pij * (pij / (pf[i] * pm[j])).ln();
                    log_ratio[i * bins + j] = (pij / pm[j]).ln();
                }
            }
        }

        let mut gradient = vec![T::zero(); warp.n_params()];
        if with_gradient {
            let np = warp.n_params();
            let partials: Vec<Vec<T>> = samples
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = vec![T::zero(); np];
                    for s in chunk {
                        let mut gs = T::zero();
                        fo.for_each(s.xf, bins, |i, wf, _| {
                            mo.for_each(s.xm, bins, |j, _, dwm| {
                                gs += wf * dwm * log_ratio[i * bins + j];
                            });
                        });
                        if gs != T::zero() {
                            let c = gs * norm;
                            warp.accumulate(s.p, s.gm.map(|x| x * c), &mut g);
                        }
                    }
                    g
                })
                .collect();
            for part in partials {
                gradient.iter_mut().zip(part).for_each(|(x, y)| *x += y);
            }
        }

        Ok(MiValue {
            value,
            gradient,
            fixed_entropy,
            moving_entropy,
            joint_entropy,
            n_valid,
        })
    }
}

/// MI between `fixed` and `moving` pulled back through `t`, with the gradient
/// over the parameters of `stage`.
///
/// Affine parameters use the centred, radius-scaled form of [`AffineWarp`]
/// about the fixed grid. FFD parameters are the coefficients of `t.ffd`, which
/// must be present.
pub fn mutual_information<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    t: &TransformChain<T>,
    cfg: &MiConfig,
    seed: u64,
    stage: Stage,
) -> Result<MiValue<T>> {
    let eval = MiEvaluator::new(fixed, moving, cfg)?;
    match stage {
        Stage::Affine => {
            let warp = AffineWarp::about_grid(fixed.grid(), t);
            eval.evaluate(&warp, &warp.params(), seed)
        }
        Stage::Ffd => {
            let lattice = t.ffd.clone().ok_or_else(|| {
                Error::InvalidInput("FFD stage requires an FFD in the transform".into())
            })?;
            let warp = FfdWarp {
                affine: t.affine.clone(),
                lattice,
            };
            eval.evaluate(&warp, &warp.params(), seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use rand_distr::{Distribution, Uniform};

    fn noise(dims: [usize; 3], seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(0.0, 1.0);
        Volume::from_fn(Grid::unit(dims), |_, _, _| u.sample(&mut rng))
    }

    fn hard() -> MiConfig {
        MiConfig {
            fixed_parzen: ParzenOrder::Box,
            moving_parzen: ParzenOrder::Box,
            samples_per_iter: 4096,
            ..MiConfig::default()
        }
    }

    #[test]
    fn self_mi_equals_entropy_under_shared_binning() {
        let v = noise([12, 12, 12], 1);
        let r = mutual_information(
            &v,
            &v,
            &TransformChain::identity(),
            &hard(),
            3,
            Stage::Affine,
        )
        .unwrap();
        assert!((r.value - r.fixed_entropy).abs() < 1e-10);
        assert!((r.fixed_entropy - r.moving_entropy).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_has_small_mi() {
        let a = noise([22, 22, 22], 10);
        let b = noise([22, 22, 22], 11);
        let cfg = MiConfig {
            samples_per_iter: 10_000,
            ..MiConfig::default()
        };
        let r = mutual_information(&a, &b, &TransformChain::identity(), &cfg, 5, Stage::Affine)
            .unwrap();
        assert!(r.value < 0.05, "MI {}", r.value);
    }

    #[test]
    fn symmetric_under_swap_with_shared_order() {
        let a = noise([10, 10, 10], 2);
        let b = a.map(|x| (x * 3.0).sin() + 0.3 * x);
        for order in [ParzenOrder::Box, ParzenOrder::Linear, ParzenOrder::Cubic] {
            let cfg = MiConfig {
                fixed_parzen: order,
                moving_parzen: order,
                ..MiConfig::default()
            };
            let id = TransformChain::identity();
            let ab = mutual_information(&a, &b, &id, &cfg, 8, Stage::Affine).unwrap();
            let ba = mutual_information(&b, &a, &id, &cfg, 8, Stage::Affine).unwrap();
            assert!((ab.value - ba.value).abs() < 1e-6, "{order:?}");
        }
    }

    #[test]
    fn invariant_under_positive_affine_intensity_map() {
        let a = noise([10, 10, 10], 4);
        let b = noise([10, 10, 10], 5).map(|x| x + 0.5 * a.data()[0]);
        let b2 = b.map(|x| 7.0 * x - 3.0);
        let cfg = MiConfig::default();
        let id = TransformChain::identity();
        let m1 = mutual_information(&a, &b, &id, &cfg, 1, Stage::Affine).unwrap();
        let m2 = mutual_information(&a, &b2, &id, &cfg, 1, Stage::Affine).unwrap();
        assert!((m1.value - m2.value).abs() < 1e-10);
    }

    #[test]
    fn constant_images_are_degenerate() {
        let a = noise([8, 8, 8], 1);
        let c = Volume::filled(Grid::unit([8, 8, 8]), 2.0);
        let id = TransformChain::identity();
        let cfg = MiConfig::default();
        assert!(matches!(
            mutual_information(&a, &c, &id, &cfg, 0, Stage::Affine),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            mutual_information(&c, &a, &id, &cfg, 0, Stage::Affine),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn disjoint_volumes_do_not_overlap() {
        let a = noise([8, 8, 8], 1);
        let t = TransformChain::from_affine(AffineTransform::from_translation([100.0, 0.0, 0.0]));
        assert!(matches!(
            mutual_information(&a, &a, &t, &MiConfig::default(), 0, Stage::Affine),
            Err(Error::NoOverlap(_))
        ));
    }

    #[test]
    fn affine_warp_round_trips_parameters() {
        let g = Grid::new([9, 7, 5], [1.0, 2.0, 0.5], [3.0, 1.0, -2.0]).unwrap();
        let chain = TransformChain::<f64>::from_affine(AffineTransform::rotation(
            [0.2, 0.5, 1.0],
            0.3,
            [1.0, 2.0, 3.0],
        ));
        let warp = AffineWarp::about_grid(&g, &chain);
        let back = warp.transform(&warp.params());
        let p = [2.0, -1.0, 4.0];
        let (a, b) = (chain.apply(p), back.apply(p));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
}
