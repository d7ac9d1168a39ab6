//! Atlas members, their deformation into target space, and the probabilistic atlas.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transform::TransformChain;
use crate::volume::{self, nifti, ClassMap, Grid, Interpolator, LabelVolume, Volume};

pub const MEAN_INTENSITY_FILE: &str = "mean_intensity.nii.gz";
pub const PRIORS_FILE: &str = "priors.nii.gz";
pub const SIDECAR_FILE: &str = "atlas.json";

/// An intensity image with its segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AtlasMember<T> {
    pub id: String,
    pub intensity: Volume<T>,
    pub labels: LabelVolume,
}

impl<T: Real> AtlasMember<T> {
    pub fn new(id: impl Into<String>, intensity: Volume<T>, labels: LabelVolume) -> Result<Self> {
        let id = id.into();
        intensity
            .grid()
            .ensure_matches(labels.grid(), &format!("labels of member '{id}'"))?;
        Ok(AtlasMember {
            id,
            intensity,
            labels,
        })
    }

    /// Mean intensity over background voxels, or the image minimum if there are none.
    pub fn background_level(&self) -> T {
        let (mut sum, mut n) = (0.0, 0usize);
        for (&v, &l) in self.intensity.data().iter().zip(self.labels.data()) {
            if l == 0 {
                sum += v.as_f64();
                n += 1;
            }
        }
        if n == 0 {
            self.intensity.min_max().0
        } else {
            T::lit(sum / n as f64)
        }
    }
}

/// A member resampled onto a reference grid.
#[derive(Clone, Debug)]
pub struct DeformedMember<T> {
    pub id: String,
    pub intensity: Volume<T>,
    /// Linearly resampled one-hot labels, voxel-major with `K+1` entries per voxel.
    pub soft_labels: Vec<T>,
    /// Nearest-neighbour labels for fusion.
    pub labels: LabelVolume,
}

impl<T: Real> DeformedMember<T> {
    pub fn grid(&self) -> &Grid {
        self.intensity.grid()
    }

    pub fn n_channels(&self) -> usize {
        self.labels.n_classes()
    }
}

/// Pulls `member` into `reference` through `t` (reference world -> member world).
///
/// Points mapping outside the member take its background level and the
/// background label.
pub fn warp_member<T: Real>(
    member: &AtlasMember<T>,
    t: &TransformChain<T>,
    reference: &Grid,
) -> Result<DeformedMember<T>> {
    member.intensity.grid().ensure_matches(
        member.labels.grid(),
        &format!("labels of member '{}'", member.id),
    )?;
    let identity =
        t.ffd.is_none() && t.affine.is_identity() && member.intensity.grid() == reference;
    let intensity = if identity {
        member.intensity.clone()
    } else {
        volume::resample(
            &member.intensity,
            t,
            reference,
            Interpolator::Cubic,
            member.background_level(),
        )
    };
    let labels = volume::resample_labels(&member.labels, t, reference, Interpolator::Nearest)?;
    let soft_labels = soft_resample(&member.labels, t, reference);
    Ok(DeformedMember {
        id: member.id.clone(),
        intensity,
        soft_labels,
        labels,
    })
}

/// Trilinear resampling of every indicator channel at once. The weights are
/// shared across channels, so each voxel's vector stays a partition of unity.
fn soft_resample<T: Real>(labels: &LabelVolume, t: &TransformChain<T>, reference: &Grid) -> Vec<T> {
    let mut outside = vec![T::zero(); labels.n_classes()];
    outside[0] = T::one();
    trilinear_rows(
        labels.grid(),
        labels.n_classes(),
        t,
        reference,
        &outside,
        |n, w, row| {
            row[labels.data()[n] as usize] += w;
        },
    )
}

/// Pulls `kc`-vectors stored on `src` back onto `reference` with trilinear
/// weights; `corner(n, w, row)` adds source voxel `n` with weight `w`.
fn trilinear_rows<T: Real>(
    src: &Grid,
    kc: usize,
    t: &TransformChain<T>,
    reference: &Grid,
    outside: &[T],
    corner: impl Fn(usize, T, &mut [T]) + Sync,
) -> Vec<T> {
    let d = src.dims;
    let mut out = vec![T::zero(); reference.len() * kc];
    out.par_chunks_mut(kc).enumerate().for_each(|(v, row)| {
        let p: [T; 3] = reference.voxel_world(v);
        let idx = src.world_to_index(t.apply(p));
        let half = T::lit(0.5);
        let inside = (0..3).all(|a| idx[a] >= -half && idx[a] <= T::from_usize_lossy(d[a]) - half);
        if !inside {
            row.copy_from_slice(outside);
            return;
        }
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut step = [0usize; 3];
        for a in 0..3 {
            if d[a] == 1 {
                continue;
            }
            let u = idx[a].max(T::zero()).min(T::from_usize_lossy(d[a] - 1));
            base[a] = u.floor().to_usize().unwrap_or(0).min(d[a] - 2);
            frac[a] = u - T::from_usize_lossy(base[a]);
            step[a] = 1;
        }
        let w = |a: usize, s: usize| if s == 0 { T::one() - frac[a] } else { frac[a] };
        for sz in 0..=step[2] {
            for sy in 0..=step[1] {
                for sx in 0..=step[0] {
                    let weight = w(0, sx) * w(1, sy) * w(2, sz);
                    corner(
                        src.linear(base[0] + sx, base[1] + sy, base[2] + sz),
                        weight,
                        row,
                    );
                }
            }
        }
    });
    out
}

/// Per-voxel class priors and a mean intensity image on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticAtlas<T> {
    mean_intensity: Volume<T>,
    priors: Vec<T>,
    class_map: ClassMap,
    member_ids: Vec<String>,
    lambda: f64,
}

fn sum_tolerance<T: Real>() -> f64 {
    (64.0 * T::epsilon().as_f64()).max(1e-9)
}

impl<T: Real> ProbabilisticAtlas<T> {
    /// `priors` is voxel-major with `class_map.len()` entries per voxel.
    pub fn new(
        mean_intensity: Volume<T>,
        priors: Vec<T>,
        class_map: ClassMap,
        member_ids: Vec<String>,
        lambda: f64,
    ) -> Result<Self> {
        let kc = class_map.len();
        if priors.len() != mean_intensity.grid().len() * kc {
            return Err(Error::InvalidInput(format!(
                "expected {} prior entries, got {}",
                mean_intensity.grid().len() * kc,
                priors.len()
            )));
        }
        let tol = sum_tolerance::<T>();
        for (v, row) in priors.chunks_exact(kc).enumerate() {
            if row.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "negative or non-finite prior at voxel {v}"
                )));
            }
            let s: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "priors at voxel {v} sum to {s}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(ProbabilisticAtlas {
            mean_intensity,
            priors,
            class_map,
            member_ids,
            lambda,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.mean_intensity.grid()
    }

    pub fn mean_intensity(&self) -> &Volume<T> {
        &self.mean_intensity
    }

    pub fn priors(&self) -> &[T] {
        &self.priors
    }

    pub fn prior(&self, voxel: usize) -> &[T] {
        let kc = self.class_map.len();
        &self.priors[voxel * kc..(voxel + 1) * kc]
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    pub fn n_channels(&self) -> usize {
        self.class_map.len()
    }

    pub fn member_ids(&self) -> &[String] {
        &self.member_ids
    }

    /// Accumulated regularisation weight (`1 - prod(1 - lambda_i)` over applications).
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn prior_channel(&self, k: usize) -> Volume<T> {
        let kc = self.n_channels();
        Volume {
            grid: *self.grid(),
            data: self.priors.iter().skip(k).step_by(kc).copied().collect(),
        }
    }

    /// Label of the largest prior per voxel, lowest id on ties.
    pub fn argmax_labels(&self) -> LabelVolume {
        let data = self
            .priors
            .chunks_exact(self.n_channels())
            .map(|row| argmax(row) as u16)
            .collect();
        LabelVolume::new(*self.grid(), data, self.class_map.clone())
            .expect("argmax ids are in range")
    }

    /// Mixes the priors with the uniform distribution: `(1 - lambda) p + lambda / (K+1)`.
    pub fn regularize_prior(&self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        let keep = T::lit(1.0 - lambda);
        let add = T::lit(lambda / self.n_channels() as f64);
        Ok(ProbabilisticAtlas {
            mean_intensity: self.mean_intensity.clone(),
            priors: self.priors.iter().map(|&p| keep * p + add).collect(),
            class_map: self.class_map.clone(),
            member_ids: self.member_ids.clone(),
            lambda: 1.0 - (1.0 - self.lambda) * (1.0 - lambda),
        })
    }

    /// Pulls the atlas onto `reference` through `t` (reference world -> atlas world).
    ///
    /// Priors are interpolated trilinearly, which keeps every row normalised;
    /// points outside the atlas take the regularised background row.
    pub fn warped(&self, t: &TransformChain<T>, reference: &Grid) -> Result<Self> {
        let kc = self.n_channels();
        let lam = T::lit(self.lambda / kc as f64);
        let mut outside = vec![lam; kc];
        outside[0] += T::lit(1.0 - self.lambda);
        let priors = trilinear_rows(self.grid(), kc, t, reference, &outside, |n, w, row| {
            for (o, &p) in row.iter_mut().zip(self.prior(n)) {
                *o += w * p;
            }
        });
        let background = self.background_intensity();
        let mean_intensity = volume::resample(
            &self.mean_intensity,
            t,
            reference,
            Interpolator::Cubic,
            background,
        );
        Self::new(
            mean_intensity,
            priors,
            self.class_map.clone(),
            self.member_ids.clone(),
            self.lambda,
        )
    }

    /// Mean intensity weighted by the background prior.
    fn background_intensity(&self) -> T {
        let (mut num, mut den) = (0.0, 0.0);
        for (v, &y) in self.mean_intensity.data().iter().enumerate() {
            let w = self.prior(v)[0].as_f64();
            num += w * y.as_f64();
            den += w;
        }
        T::lit(if den > 0.0 {
            num / den
        } else {
            self.mean_intensity.mean().as_f64()
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        nifti::save_scalar(&self.mean_intensity, dir.join(MEAN_INTENSITY_FILE))?;
        let channels: Vec<Vec<T>> = (0..self.n_channels())
            .map(|k| self.prior_channel(k).into_data())
            .collect();
        nifti::save_channels(self.grid(), &channels, dir.join(PRIORS_FILE))?;
        let sidecar = Sidecar {
            class_map: self.class_map.clone(),
            member_ids: self.member_ids.clone(),
            lambda: self.lambda,
        };
        let path = dir.join(SIDECAR_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let mean: Volume<T> = nifti::load_scalar(dir.join(MEAN_INTENSITY_FILE))?;
        let (grid, channels) = nifti::load_channels::<T>(dir.join(PRIORS_FILE))?;
        mean.grid().ensure_matches(&grid, "prior channels")?;
        let kc = sidecar.class_map.len();
        if channels.len() != kc {
            return Err(Error::Nifti(format!(
                "{} prior channels for a {kc}-class map",
                channels.len()
            )));
        }
        let mut priors = vec![T::zero(); grid.len() * kc];
        for (k, ch) in channels.iter().enumerate() {
            for (v, &p) in ch.iter().enumerate() {
                priors[v * kc + k] = p;
            }
        }
        Self::new(
            mean,
            priors,
            sidecar.class_map,
            sidecar.member_ids,
            sidecar.lambda,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    class_map: ClassMap,
    member_ids: Vec<String>,
    lambda: f64,
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Averages deformed members into intensity and prior atlases.
///
/// Members are summed in a canonical order (by id, then by content), so the
/// result does not depend on the order they are passed in.
pub fn build_atlas<T: Real>(members: &[DeformedMember<T>]) -> Result<ProbabilisticAtlas<T>> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot build an atlas from zero members".into()))?;
    let grid = *first.grid();
    let class_map = first.labels.class_map().clone();
    for m in members {
        m.grid()
            .ensure_matches(&grid, &format!("deformed member '{}'", m.id))?;
        if m.labels.class_map() != &class_map {
            return Err(Error::InvalidInput(format!(
                "member '{}' uses a different class map",
                m.id
            )));
        }
    }
    let mut order: Vec<&DeformedMember<T>> = members.iter().collect();
    order.sort_by(|a, b| {
        a.id.cmp(&b.id).then_with(|| {
            let lex = |x: &[T], y: &[T]| {
                x.iter()
                    .zip(y)
                    .map(|(p, q)| p.partial_cmp(q).unwrap_or(Ordering::Equal))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            };
            lex(a.intensity.data(), b.intensity.data())
                .then_with(|| lex(&a.soft_labels, &b.soft_labels))
        })
    });

    let inv = T::one() / T::from_usize_lossy(members.len());
    let n = grid.len();
    let kc = class_map.len();
    let mut mean = vec![T::zero(); n];
    let mut priors = vec![T::zero(); n * kc];
    for m in &order {
        mean.iter_mut()
            .zip(m.intensity.data())
            .for_each(|(a, &b)| *a += b);
        priors
            .iter_mut()
            .zip(&m.soft_labels)
            .for_each(|(a, &b)| *a += b);
    }
    mean.iter_mut().for_each(|x| *x *= inv);
    // Normalise each row by its own sum so rounding cannot break the partition.
    for row in priors.chunks_exact_mut(kc) {
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    ProbabilisticAtlas::new(
        Volume::new(grid, mean)?,
        priors,
        class_map,
        order.iter().map(|m| m.id.clone()).collect(),
        0.0,
    )
}
