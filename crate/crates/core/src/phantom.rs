//! Synthetic multi-class phantoms with known deformations.
//!
//! Shapes live in normalised coordinates: each axis maps the voxel range
//! `[0, n-1]` onto `[-1, 1]`. Later shapes overwrite earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasMember;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use crate::transform::{rotation_matrix, AffineTransform, FfdTransform, TransformChain};
use crate::volume::{self, ClassMap, Grid, Interpolator, LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    /// Class id painted inside.
    pub class: u16,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, u: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((u[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub class_map: ClassMap,
    /// Painted in order.
    pub shapes: Vec<Ellipsoid>,
    /// Mean intensity per class id, background first.
    pub class_means: Vec<f64>,
    /// Noise standard deviation per class id.
    pub class_sigmas: Vec<f64>,
    /// Multiplies every class sigma; 0 gives a noiseless image.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let shape = |class, center, radii| Ellipsoid {
            class,
            center,
            radii,
        };
        PhantomSpec {
            dims: [32; 3],
            spacing: [1.0; 3],
            seed: 0,
            class_map: ClassMap::whole_heart(),
            shapes: vec![
                shape(1, [0.15, -0.05, 0.0], [0.5, 0.45, 0.55]),
                shape(3, [0.18, -0.05, 0.0], [0.32, 0.28, 0.38]),
                shape(5, [-0.42, -0.1, 0.0], [0.3, 0.4, 0.45]),
                shape(2, [0.2, 0.5, 0.05], [0.3, 0.22, 0.3]),
                shape(4, [-0.38, 0.45, 0.0], [0.25, 0.25, 0.32]),
                shape(6, [0.05, 0.2, 0.3], [0.14, 0.14, 0.45]),
                shape(7, [-0.2, 0.15, 0.3], [0.13, 0.13, 0.45]),
            ],
            class_means: vec![20.0, 120.0, 160.0, 200.0, 240.0, 280.0, 320.0, 360.0],
            class_sigmas: vec![10.0; 8],
            noise: 1.0,
        }
    }
}

const MARGIN: f64 = 2.0;

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    fn half(&self, a: usize) -> f64 {
        (self.dims[a] as f64 - 1.0) / 2.0
    }

    fn normalised(&self, idx: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| {
            let h = self.half(a);
            if h == 0.0 {
                0.0
            } else {
                (idx[a] as f64 - h) / h
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let kc = self.class_map.len();
        if self.class_means.len() != kc || self.class_sigmas.len() != kc {
            return Err(Error::InvalidInput(format!(
                "need {kc} class means and sigmas, got {} and {}",
                self.class_means.len(),
                self.class_sigmas.len()
            )));
        }
        if self.class_sigmas.iter().any(|&s| !(s >= 0.0)) || !(self.noise >= 0.0) {
            return Err(Error::InvalidInput(
                "noise levels must be non-negative".into(),
            ));
        }
        for a in 0..kc {
            for b in a + 1..kc {
                let gap = (self.class_means[a] - self.class_means[b]).abs();
                let sigma = self.noise * self.class_sigmas[a].max(self.class_sigmas[b]);
                if gap < 2.0 * sigma {
                    return Err(Error::InvalidInput(format!(
                        "class means {a} and {b} are closer than two noise sigmas"
                    )));
                }
            }
        }
        for (n, s) in self.shapes.iter().enumerate() {
            if s.class == 0 || s.class as usize >= kc {
                return Err(Error::InvalidInput(format!(
                    "shape {n} paints invalid class {}",
                    s.class
                )));
            }
            for a in 0..3 {
                let h = self.half(a);
                if !(s.radii[a] > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "shape {n} has a non-positive radius"
                    )));
                }
                let lo = h + (s.center[a] - s.radii[a]) * h;
                let hi = h + (s.center[a] + s.radii[a]) * h;
                if lo < MARGIN || hi > self.dims[a] as f64 - 1.0 - MARGIN {
                    return Err(Error::InvalidInput(format!(
                        "shape {n} leaves the {MARGIN}-voxel margin on axis {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Voxel interior of one shape, ignoring overpainting.
    pub fn shape_mask(&self, n: usize) -> Vec<bool> {
        let g = Grid::unit(self.dims);
        (0..g.len())
            .map(|v| self.shapes[n].contains(self.normalised(g.coords(v))))
            .collect()
    }

    /// Continuous volume of one shape in voxels.
    pub fn shape_volume(&self, n: usize) -> f64 {
        let r = &self.shapes[n].radii;
        4.0 / 3.0 * std::f64::consts::PI * (0..3).map(|a| r[a] * self.half(a)).product::<f64>()
    }
}

/// Noisy piecewise-constant phantom whose labels are the painted ellipsoids.
pub fn generate<T: Real>(spec: &PhantomSpec, id: impl Into<String>) -> Result<AtlasMember<T>> {
    spec.validate()?;
    let grid = spec.grid()?;
    let mut labels = vec![0u16; grid.len()];
    for (v, l) in labels.iter_mut().enumerate() {
        let u = spec.normalised(grid.coords(v));
        for s in &spec.shapes {
            if s.contains(u) {
                *l = s.class;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0x50_48]));
    let intensity: Vec<T> = labels
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(spec.class_means[l as usize] + spec.noise * spec.class_sigmas[l as usize] * z)
        })
        .collect();
    AtlasMember::new(
        id,
        Volume::new(grid, intensity)?,
        LabelVolume::new(grid, labels, spec.class_map.clone())?,
    )
}

/// Random deformation parameters. Translations and displacements are in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub scale_range: [f64; 2],
    /// Largest FFD displacement over the grid.
    pub amplitude: f64,
    /// FFD knot spacing as a fraction of the grid size.
    pub knot_fraction: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            max_rotation_deg: 10.0,
            max_translation: 4.0,
            scale_range: [0.9, 1.1],
            amplitude: 2.0,
            knot_fraction: 0.25,
        }
    }
}

impl PerturbSpec {
    pub fn none() -> Self {
        PerturbSpec {
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            scale_range: [1.0, 1.0],
            amplitude: 0.0,
            knot_fraction: 0.25,
        }
    }

    /// Milder population-level variation: rotation 5 deg, translation 2 voxels,
    /// scale 0.95-1.05, FFD peak 2 voxels.
    pub fn moderate() -> Self {
        PerturbSpec {
            max_rotation_deg: 5.0,
            max_translation: 2.0,
            scale_range: [0.95, 1.05],
            amplitude: 2.0,
            knot_fraction: 0.25,
        }
    }

    /// Only the affine part.
    pub fn affine_only() -> Self {
        PerturbSpec {
            amplitude: 0.0,
            ..PerturbSpec::default()
        }
    }

    /// Only the FFD part.
    pub fn ffd_only(amplitude: f64) -> Self {
        PerturbSpec {
            amplitude,
            ..PerturbSpec::none()
        }
    }
}

/// Draws a ground-truth transform for `grid` (fixed world -> original world).
pub fn random_transform<T: Real>(
    grid: &Grid,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<TransformChain<T>> {
    let max_amp = grid.dims.iter().copied().max().unwrap_or(0) as f64 / 8.0;
    if !(spec.amplitude >= 0.0) || spec.amplitude > max_amp {
        return Err(Error::InvalidInput(format!(
            "deformation amplitude {} outside [0, {max_amp}]",
            spec.amplitude
        )));
    }
    if !(spec.scale_range[0] > 0.0 && spec.scale_range[0] <= spec.scale_range[1]) {
        return Err(Error::InvalidInput("invalid scale range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let angle = rng.gen_range(-1.0..=1.0) * spec.max_rotation_deg.to_radians();
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let shift = rng.gen_range(0.0..=1.0) * spec.max_translation * grid.mean_spacing();
    let scale = if spec.scale_range[0] < spec.scale_range[1] {
        rng.gen_range(spec.scale_range[0]..=spec.scale_range[1])
    } else {
        spec.scale_range[0]
    };
    let r = rotation_matrix(axis, angle);
    let m: [[T; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| T::lit(scale * r[i][j])));
    let affine =
        AffineTransform::about_center(m, grid.center().map(T::lit), dir.map(|d| T::lit(d * shift)));

    let ffd = if spec.amplitude > 0.0 {
        let knot: [f64; 3] = std::array::from_fn(|a| {
            (grid.dims[a] as f64 * spec.knot_fraction).max(2.0) * grid.spacing[a]
        });
        let mut lattice = FfdTransform::<T>::covering(grid, knot)?;
        for c in lattice.coefficients_mut() {
            *c = std::array::from_fn(|_| T::lit(rng.gen_range(-1.0..=1.0)));
        }
        let peak = (0..grid.len())
            .map(|v| {
                let d = lattice.displacement(grid.voxel_world::<T>(v));
                d.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        if peak > 0.0 {
            let s = T::lit(spec.amplitude * grid.mean_spacing() / peak);
            for c in lattice.coefficients_mut() {
                *c = c.map(|x| x * s);
            }
        }
        Some(lattice)
    } else {
        None
    };
    Ok(TransformChain { affine, ffd })
}

/// Deforms `member` by a random transform; returns the new member and the
/// transform `t` with `new(x) = member(t(x))`.
pub fn perturb<T: Real>(
    member: &AtlasMember<T>,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<(AtlasMember<T>, TransformChain<T>)> {
    let grid = *member.intensity.grid();
    let t = random_transform(&grid, spec, seed)?;
    let intensity = volume::resample(
        &member.intensity,
        &t,
        &grid,
        Interpolator::Cubic,
        member.background_level(),
    );
    let labels = volume::resample_labels(&member.labels, &t, &grid, Interpolator::Nearest)?;
    Ok((AtlasMember::new(member.id.clone(), intensity, labels)?, t))
}

/// `n` members, each an independently noised phantom under its own random deformation.
pub fn population<T: Real>(
    spec: &PhantomSpec,
    deform: &PerturbSpec,
    n: usize,
) -> Result<Vec<(AtlasMember<T>, TransformChain<T>)>> {
    (0..n)
        .map(|i| {
            let member_spec = PhantomSpec {
                seed: seed::derive(spec.seed, &[i as u64, 1]),
                ..spec.clone()
            };
            let base = generate::<T>(&member_spec, format!("p{i:02}"))?;
            perturb(&base, deform, seed::derive(spec.seed, &[i as u64, 2]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_shows_every_class() {
        let spec = PhantomSpec::default();
        spec.validate().unwrap();
        let m = generate::<f64>(&spec, "x").unwrap();
        assert_eq!(m.labels.present_ids(), (0..8).collect::<Vec<u16>>());
        let g = *m.labels.grid();
        let mid: Vec<u16> = (0..g.dims[0] * g.dims[1])
            .map(|v| m.labels.data()[v + 16 * g.dims[0] * g.dims[1]])
            .collect();
        let mut seen: Vec<u16> = mid.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8, "mid slice classes {seen:?}");
    }

    #[test]
    fn noiseless_image_is_class_means() {
        let spec = PhantomSpec {
            noise: 0.0,
            ..PhantomSpec::default()
        };
        let m = generate::<f64>(&spec, "x").unwrap();
        for (&v, &l) in m.intensity.data().iter().zip(m.labels.data()) {
            assert_eq!(v, spec.class_means[l as usize]);
        }
    }

    #[test]
    fn deterministic() {
        let spec = PhantomSpec {
            seed: 42,
            ..PhantomSpec::default()
        };
        let a = generate::<f64>(&spec, "x").unwrap();
        let b = generate::<f64>(&spec, "x").unwrap();
        assert_eq!(a, b);
        let (pa, ta) = perturb(&a, &PerturbSpec::default(), 3).unwrap();
        let (pb, tb) = perturb(&b, &PerturbSpec::default(), 3).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ta, tb);
    }

    #[test]
    fn shape_volumes_match_analytic_estimates() {
        let spec = PhantomSpec::default();
        for n in 0..spec.shapes.len() {
            let count = spec.shape_mask(n).iter().filter(|&&b| b).count() as f64;
            let expected = spec.shape_volume(n);
            assert!(
                (count - expected).abs() / expected < 0.1,
                "shape {n}: {count} vs {expected}"
            );
        }
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let mut spec = PhantomSpec::default();
        spec.shapes[0].radii[0] = 0.95;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.class_means[2] = spec.class_means[1] + 5.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn null_perturbation_is_identity() {
        let m = generate::<f64>(&PhantomSpec::default(), "x").unwrap();
        let (p, t) = perturb(&m, &PerturbSpec::none(), 9).unwrap();
        assert!(t.ffd.is_none());
        assert!(t.affine.is_identity());
        assert_eq!(p.labels, m.labels);
        for (a, b) in p.intensity.data().iter().zip(m.intensity.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbation_respects_bounds_and_class_set() {
        let m = generate::<f64>(&PhantomSpec::default(), "x").unwrap();
        let grid = *m.intensity.grid();
        for s in 0..5 {
            let (p, t) = perturb(&m, &PerturbSpec::default(), s).unwrap();
            assert_eq!(p.labels.present_ids(), m.labels.present_ids());
            let ffd = t.ffd.as_ref().unwrap();
            let peak = (0..grid.len())
                .map(|v| {
                    let d = ffd.displacement(grid.voxel_world::<f64>(v));
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(0.0, f64::max);
            assert!((peak - 2.0).abs() < 1e-9);
            let c = grid.center();
            let shift = t.affine.apply(c);
            let moved = ((0..3).map(|a| (shift[a] - c[a]).powi(2)).sum::<f64>()).sqrt();
            assert!(moved <= 4.0 + 1e-9);
            let back = TransformChain::<f64>::from_json(&t.to_json().unwrap()).unwrap();
            assert_eq!(back, t);
        }
        assert!(perturb(&m, &PerturbSpec::ffd_only(4.5), 0).is_err());
    }
}
