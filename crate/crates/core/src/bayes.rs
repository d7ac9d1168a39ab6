//! Per-class intensity likelihoods from training segmentations and MAP
//! classification against an atlas prior.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{argmax, ProbabilisticAtlas};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{nifti, ClassMap, Grid, LabelVolume, Volume};

pub const DEFAULT_BINS: usize = 4096;

/// Bin of `y` after rescaling `[lo, hi]` onto `[0, n_bins - 1]`, clamped.
#[inline]
pub fn bin_index(y: f64, range: [f64; 2], n_bins: usize) -> usize {
    let t = (y - range[0]) / (range[1] - range[0]) * (n_bins - 1) as f64;
    if t <= 0.0 || t.is_nan() {
        0
    } else {
        (t.floor() as usize).min(n_bins - 1)
    }
}

/// Raw per-class bin counts (`counts[b * (K+1) + k]`) and class totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHistograms {
    pub n_bins: usize,
    pub range: [f64; 2],
    pub class_map: ClassMap,
    pub counts: Vec<u64>,
    pub totals: Vec<u64>,
}

impl ClassHistograms {
    pub fn accumulate<T: Real>(
        pairs: &[(&Volume<T>, &LabelVolume)],
        n_bins: usize,
    ) -> Result<Self> {
        let (_, first_lab) = pairs.first().ok_or_else(|| {
            Error::InvalidInput("tissue model needs at least one training pair".into())
        })?;
        if n_bins < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 bins, got {n_bins}"
            )));
        }
        let class_map = first_lab.class_map().clone();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, (img, lab)) in pairs.iter().enumerate() {
            img.grid()
                .ensure_matches(lab.grid(), &format!("training pair {i}"))?;
            if lab.class_map() != &class_map {
                return Err(Error::InvalidInput(format!(
                    "training pair {i} uses a different class map"
                )));
            }
            let (a, b) = img.min_max();
            lo = lo.min(a.as_f64());
            hi = hi.max(b.as_f64());
        }
        if !(hi > lo) {
            return Err(Error::Degenerate(
                "training intensities are constant".into(),
            ));
        }
        let range = [lo, hi];
        let kc = class_map.len();
        let mut counts = vec![0u64; n_bins * kc];
        let mut totals = vec![0u64; kc];
        for (img, lab) in pairs {
            for (&y, &l) in img.data().iter().zip(lab.data()) {
                counts[bin_index(y.as_f64(), range, n_bins) * kc + l as usize] += 1;
                totals[l as usize] += 1;
            }
        }
        if let Some(k) = totals.iter().position(|&t| t == 0) {
            return Err(Error::InvalidInput(format!(
                "class {k} (code {}) has no training voxels",
                class_map.code_of(k as u16)
            )));
        }
        Ok(ClassHistograms {
            n_bins,
            range,
            class_map,
            counts,
            totals,
        })
    }

    /// `H_b^k = C_b^k / N^k`; each class column sums to one over bins.
    pub fn normalized(&self) -> Vec<f64> {
        let kc = self.class_map.len();
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 / self.totals[i % kc] as f64)
            .collect()
    }
}

/// Likelihood table `P(y | class)` indexed by intensity bin, rows normalised across classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueModel<T> {
    n_bins: usize,
    range: [f64; 2],
    class_map: ClassMap,
    table: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TissueModelDocument<T> {
    n_bins: usize,
    range: [f64; 2],
    class_map: ClassMap,
    table: Vec<Vec<T>>,
}

impl<T: Real> TissueModel<T> {
    pub fn from_histograms(h: &ClassHistograms) -> Self {
        let kc = h.class_map.len();
        let per_class = h.normalized();
        let mut table = Vec::with_capacity(per_class.len());
        for row in per_class.chunks_exact(kc) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                table.extend(row.iter().map(|&x| T::lit(x / s)));
            } else {
                table.extend(std::iter::repeat(T::lit(1.0 / kc as f64)).take(kc));
            }
        }
        TissueModel {
            n_bins: h.n_bins,
            range: h.range,
            class_map: h.class_map.clone(),
            table,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn range(&self) -> [f64; 2] {
        self.range
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    pub fn n_channels(&self) -> usize {
        self.class_map.len()
    }

    pub fn table(&self) -> &[T] {
        &self.table
    }

    pub fn row(&self, bin: usize) -> &[T] {
        let kc = self.n_channels();
        &self.table[bin * kc..(bin + 1) * kc]
    }

    pub fn bin_of(&self, y: T) -> usize {
        bin_index(y.as_f64(), self.range, self.n_bins)
    }

    pub fn likelihood_row(&self, y: T) -> &[T] {
        self.row(self.bin_of(y))
    }

    pub fn to_json(&self) -> Result<String> {
        let kc = self.n_channels();
        let doc = TissueModelDocument {
            n_bins: self.n_bins,
            range: self.range,
            class_map: self.class_map.clone(),
            table: self.table.chunks_exact(kc).map(<[T]>::to_vec).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TissueModelDocument<T> = serde_json::from_str(s)?;
        let kc = doc.class_map.len();
        if doc.n_bins < 2
            || doc.table.len() != doc.n_bins
            || doc.table.iter().any(|r| r.len() != kc)
        {
            return Err(Error::Document(format!(
                "tissue model table must be {} x {kc}",
                doc.n_bins
            )));
        }
        if !(doc.range[1] > doc.range[0]) {
            return Err(Error::Document("tissue model range is empty".into()));
        }
        for (b, row) in doc.table.iter().enumerate() {
            let s: f64 = row.iter().map(|x| x.as_f64()).sum();
            if row.iter().any(|&x| !(x >= T::zero())) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Document(format!(
                    "tissue model row {b} is not a distribution"
                )));
            }
        }
        Ok(TissueModel {
            n_bins: doc.n_bins,
            range: doc.range,
            class_map: doc.class_map,
            table: doc.table.into_iter().flatten().collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn estimate_tissue_model<T: Real>(
    pairs: &[(&Volume<T>, &LabelVolume)],
    n_bins: usize,
) -> Result<TissueModel<T>> {
    Ok(TissueModel::from_histograms(&ClassHistograms::accumulate(
        pairs, n_bins,
    )?))
}

/// Per-voxel class probabilities, voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorField<T> {
    grid: Grid,
    class_map: ClassMap,
    data: Vec<T>,
}

impl<T: Real> PosteriorField<T> {
    pub fn new(grid: Grid, class_map: ClassMap, data: Vec<T>) -> Result<Self> {
        let kc = class_map.len();
        if data.len() != grid.len() * kc {
            return Err(Error::InvalidInput(format!(
                "expected {} posterior entries, got {}",
                grid.len() * kc,
                data.len()
            )));
        }
        Ok(PosteriorField {
            grid,
            class_map,
            data,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    pub fn n_channels(&self) -> usize {
        self.class_map.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, voxel: usize) -> &[T] {
        let kc = self.n_channels();
        &self.data[voxel * kc..(voxel + 1) * kc]
    }

    pub fn argmax_labels(&self) -> LabelVolume {
        let data = self
            .data
            .chunks_exact(self.n_channels())
            .map(|r| argmax(r) as u16)
            .collect();
        LabelVolume::new(self.grid, data, self.class_map.clone()).expect("argmax ids are in range")
    }

    /// Writes the channels as a 4D image.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let kc = self.n_channels();
        let channels: Vec<Vec<T>> = (0..kc)
            .map(|k| self.data.iter().skip(k).step_by(kc).copied().collect())
            .collect();
        nifti::save_channels(&self.grid, &channels, path)
    }
}

/// Normalises `a_k * l_k` per voxel. Returns the winning id and whether the
/// product was all zero, in which case `fallback` decides the label and the
/// row is copied from it.
pub(crate) fn combine_row<T: Real>(a: &[T], l: &[T], fallback: &[T], out: &mut [T]) -> u16 {
    let mut sum = T::zero();
    for k in 0..out.len() {
        out[k] = a[k] * l[k];
        sum += out[k];
    }
    if sum > T::zero() {
        let best = argmax(out);
        out.iter_mut().for_each(|x| *x /= sum);
        best as u16
    } else {
        let s: T = fallback.iter().copied().sum();
        for k in 0..out.len() {
            out[k] = if s > T::zero() {
                fallback[k] / s
            } else {
                T::lit(1.0 / out.len() as f64)
            };
        }
        argmax(fallback) as u16
    }
}

/// One voxel of [`map_classify`]: writes the normalised posterior of
/// `prior_k * likelihood_k` into `posterior` and returns the winning id. The
/// prior need not be normalised.
pub fn map_voxel<T: Real>(prior: &[T], likelihood: &[T], posterior: &mut [T]) -> u16 {
    assert!(prior.len() == likelihood.len() && prior.len() == posterior.len());
    combine_row(prior, likelihood, prior, posterior)
}

/// MAP labels `argmax_k prior_k * P(y | k)` and the normalised posteriors.
pub fn map_classify<T: Real>(
    prior: &ProbabilisticAtlas<T>,
    model: &TissueModel<T>,
    target: &Volume<T>,
) -> Result<(LabelVolume, PosteriorField<T>)> {
    prior
        .grid()
        .ensure_matches(target.grid(), "atlas prior vs target")?;
    if prior.class_map() != model.class_map() {
        return Err(Error::InvalidInput(
            "atlas and tissue model use different class maps".into(),
        ));
    }
    let kc = prior.n_channels();
    let mut post = vec![T::zero(); target.grid().len() * kc];
    let labels: Vec<u16> = post
        .par_chunks_mut(kc)
        .enumerate()
        .map(|(v, out)| {
            let a = prior.prior(v);
            combine_row(a, model.likelihood_row(target.data()[v]), a, out)
        })
        .collect();
    let grid = *target.grid();
    Ok((
        LabelVolume::new(grid, labels, prior.class_map().clone())?,
        PosteriorField::new(grid, prior.class_map().clone(), post)?,
    ))
}
