//! Intensity-based registration: multi-resolution MI maximisation over an
//! affine stage and a B-spline FFD stage.

mod asgd;
mod mi;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use asgd::{asgd_minimize, AsgdConfig, AsgdOutcome};
pub use mi::{
    mutual_information, AffineWarp, FfdWarp, MiConfig, MiEvaluator, MiValue, ParzenOrder, Stage,
    Warp,
};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use crate::transform::{FfdTransform, TransformChain};
use crate::volume::{pyramid, Grid, LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub stages: Vec<Stage>,
    pub mi: MiConfig,
    pub asgd: AsgdConfig,
    /// FFD knot spacing in voxels of the level being optimised.
    pub knot_spacing: f64,
    /// Start from the translation aligning the centres of intensity mass.
    pub prealign: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 4,
            stages: vec![Stage::Affine, Stage::Ffd],
            mi: MiConfig::default(),
            asgd: AsgdConfig::default(),
            knot_spacing: 8.0,
            prealign: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidInput(
                "at least one pyramid level is required".into(),
            ));
        }
        if !(self.knot_spacing.is_finite() && self.knot_spacing >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "knot spacing must be >= 1 voxel, got {}",
                self.knot_spacing
            )));
        }
        self.mi.validate()?;
        self.asgd.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelReport {
    pub stage: Stage,
    /// 0 is the coarsest level.
    pub level: usize,
    pub dims: [usize; 3],
    pub n_params: usize,
    pub gain: f64,
    /// Cost (negated MI) at the start of each iteration.
    pub costs: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub prealign_translation: [f64; 3],
    pub levels: Vec<LevelReport>,
    pub seconds: f64,
}

/// Finds `T` such that `moving(T(x))` matches `fixed(x)`.
pub fn register_pair<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    cfg: &RegistrationConfig,
) -> Result<(TransformChain<T>, RegistrationReport)> {
    register_from(fixed, moving, TransformChain::identity(), cfg)
}

/// As [`register_pair`], composing pre-alignment with `init`'s affine.
pub fn register_from<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    init: TransformChain<T>,
    cfg: &RegistrationConfig,
) -> Result<(TransformChain<T>, RegistrationReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let fixed_levels = pyramid(fixed, cfg.levels)?;
    let moving_levels = pyramid(moving, cfg.levels)?;

    let mut chain = init;
    let mut shift = [0.0; 3];
    if cfg.prealign {
        let (cf, cm) = (fixed.center_of_mass(), moving.center_of_mass());
        shift = std::array::from_fn(|a| cm[a] - cf[a]);
        chain.affine.translation =
            std::array::from_fn(|a| chain.affine.translation[a] + T::lit(shift[a]));
    }
    {
        let eval = MiEvaluator::new(fixed, moving, &cfg.mi)?;
        let warp = AffineWarp::about_grid(fixed.grid(), &chain);
        eval.evaluate(
            &warp,
            &warp.params(),
            seed::derive(cfg.asgd.seed, &[u64::MAX]),
        )
        .map_err(|e| match e {
            Error::NoOverlap(m) => Error::NoOverlap(format!("after pre-alignment: {m}")),
            e => e,
        })?;
    }

    let mut reports = Vec::new();
    for (si, &stage) in cfg.stages.iter().enumerate() {
        for level in 0..cfg.levels {
            let t0 = Instant::now();
            let (f, m) = (&fixed_levels[level], &moving_levels[level]);
            let eval = MiEvaluator::new(f, m, &cfg.mi)?;
            // Steps are bounded by one full-resolution voxel at every level; a
            // coarse voxel is too large a move on the top levels of small images.
            let asgd_cfg = AsgdConfig {
                seed: seed::derive(cfg.asgd.seed, &[si as u64, level as u64]),
                max_step: cfg.asgd.max_step * fixed.grid().mean_spacing(),
                ..cfg.asgd.clone()
            };
            let (out, n_params) = match stage {
                Stage::Affine => {
                    let warp = AffineWarp::about_grid(fixed.grid(), &chain);
                    let out = optimise(&eval, &warp, &asgd_cfg)?;
                    chain = warp.transform(&out.params);
                    (out, warp.n_params())
                }
                Stage::Ffd => {
                    let knot = f.grid().spacing.map(|s| s * cfg.knot_spacing);
                    let target = FfdTransform::<T>::covering(fixed.grid(), knot)?;
                    let lattice = match chain.ffd.take() {
                        Some(prev) if prev.spacing()[0].as_f64() > knot[0] * 1.5 => {
                            prev.refined().cropped(target.dims())?
                        }
                        Some(prev) => prev,
                        None => target,
                    };
                    let warp = FfdWarp {
                        affine: chain.affine.clone(),
                        lattice,
                    };
                    let out = optimise(&eval, &warp, &asgd_cfg)?;
                    chain = warp.transform(&out.params);
                    (out, warp.n_params())
                }
            };
            log::debug!(
                "{stage:?} level {level}: cost {:.5} -> {:.5}",
                out.costs.first().copied().unwrap_or(f64::NAN),
                out.costs.last().copied().unwrap_or(f64::NAN)
            );
            reports.push(LevelReport {
                stage,
                level,
                dims: f.dims(),
                n_params,
                gain: out.a,
                costs: out.costs,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }

    Ok((
        chain,
        RegistrationReport {
            prealign_translation: shift,
            levels: reports,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn optimise<T: Real>(
    eval: &MiEvaluator<'_, T>,
    warp: &dyn Warp<T>,
    cfg: &AsgdConfig,
) -> Result<AsgdOutcome<T>> {
    asgd_minimize(
        |p: &[T], s| {
            let r = eval.evaluate(warp, p, s)?;
            Ok((-r.value, r.gradient.into_iter().map(|g| -g).collect()))
        },
        warp.params(),
        cfg,
    )
}

/// Mean distance in voxels between `a(p)` and `b(p)` over the voxel centres of
/// `grid`, restricted to voxels where `mask` is non-background if given.
pub fn mean_displacement_error<T: Real>(
    a: &TransformChain<T>,
    b: &TransformChain<T>,
    grid: &Grid,
    mask: Option<&LabelVolume>,
) -> Result<f64> {
    if let Some(m) = mask {
        m.grid().ensure_matches(grid, "mask")?;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in 0..grid.len() {
        if mask.is_some_and(|m| m.data()[v] == 0) {
            continue;
        }
        let p: [T; 3] = grid.voxel_world(v);
        let (qa, qb) = (a.apply(p), b.apply(p));
        let d: f64 = (0..3).map(|k| (qa[k] - qb[k]).as_f64().powi(2)).sum();
        sum += d.sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty evaluation mask".into()));
    }
    Ok(sum / n as f64 / grid.mean_spacing())
}
