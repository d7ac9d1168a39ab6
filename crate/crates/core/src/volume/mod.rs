//! Volumetric data model: voxel grids, scalar and label volumes, interpolation,
//! resampling, Gaussian pyramids and NIfTI-1 I/O.

mod interp;
pub mod nifti;
mod pyramid;
mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use interp::{Interpolant, Interpolator};
pub use pyramid::{gaussian_smooth, pyramid};
pub use resample::{resample, resample_labels};

/// Voxel lattice geometry: counts, spacing (mm) and origin (mm) of voxel (0,0,0).
///
/// World position of index `(i, j, k)` is `origin + spacing * (i, j, k)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "grid dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grid origin must be finite, got {origin:?}"
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spaced grid at the origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Grid::new(dims, [1.0; 3], [0.0; 3]).expect("unit grid")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, n: usize) -> [usize; 3] {
        let i = n % self.dims[0];
        let r = n / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// Continuous voxel index to world position (mm).
    #[inline]
    pub fn index_to_world<T: Real>(&self, idx: [T; 3]) -> [T; 3] {
        std::array::from_fn(|a| T::lit(self.origin[a]) + T::lit(self.spacing[a]) * idx[a])
    }

    /// World position (mm) to continuous voxel index.
    #[inline]
    pub fn world_to_index<T: Real>(&self, p: [T; 3]) -> [T; 3] {
        std::array::from_fn(|a| (p[a] - T::lit(self.origin[a])) / T::lit(self.spacing[a]))
    }

    #[inline]
    pub fn voxel_world<T: Real>(&self, n: usize) -> [T; 3] {
        let c = self.coords(n);
        self.index_to_world([
            T::from_usize_lossy(c[0]),
            T::from_usize_lossy(c[1]),
            T::from_usize_lossy(c[2]),
        ])
    }

    /// Physical distance from the first to the last voxel centre along each axis.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn center(&self) -> [f64; 3] {
        let e = self.extent();
        std::array::from_fn(|a| self.origin[a] + 0.5 * e[a])
    }

    pub fn mean_spacing(&self) -> f64 {
        (self.spacing[0] + self.spacing[1] + self.spacing[2]) / 3.0
    }

    /// Geometry equality up to header float precision (NIfTI stores spacing as f32).
    pub fn matches(&self, other: &Grid) -> bool {
        const TOL: f64 = 1e-4;
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= TOL * self.spacing[a].abs().max(1.0)
                    && (self.origin[a] - other.origin[a]).abs()
                        <= TOL * self.origin[a].abs().max(1.0)
            })
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )))
        }
    }
}

/// 3D grid of real intensities stored x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Volume<T> {
    pub(crate) grid: Grid,
    pub(crate) data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "volume data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(n) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("intensity at voxel {n}")));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        Volume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.linear(i, j, k)]
    }

    /// Same volume on a relabelled geometry with identical dims.
    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.dims != self.grid.dims {
            return Err(Error::GridMismatch(format!(
                "cannot re-grid {:?} as {:?}",
                self.grid.dims, grid.dims
            )));
        }
        self.grid = grid;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize_lossy(self.data.len())
    }

    /// Interpolated value at a continuous voxel index; `background` outside the grid.
    ///
    /// Cubic sampling builds the B-spline coefficients on every call; use
    /// [`Interpolant`] when sampling repeatedly.
    pub fn sample(&self, idx: [T; 3], interp: Interpolator, background: T) -> T {
        Interpolant::new(self, interp).sample(idx, background)
    }

    /// Centre of intensity mass (mm), with intensities offset to be non-negative.
    pub fn center_of_mass(&self) -> [f64; 3] {
        let (lo, _) = self.min_max();
        let lo = lo.as_f64();
        let mut acc = [0.0f64; 3];
        let mut total = 0.0f64;
        for (n, v) in self.data.iter().enumerate() {
            let w = v.as_f64() - lo;
            if w > 0.0 {
                let p: [f64; 3] = self.grid.voxel_world(n);
                for a in 0..3 {
                    acc[a] += w * p[a];
                }
                total += w;
            }
        }
        if total > 0.0 {
            acc.map(|x| x / total)
        } else {
            self.grid.center()
        }
    }
}

/// Ordered raw label codes; compact class id `k` stands for `codes[k]`, id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct ClassMap(Vec<i64>);

impl ClassMap {
    pub fn new(codes: Vec<i64>) -> Result<Self> {
        if codes.first() != Some(&0) {
            return Err(Error::InvalidInput(
                "class map must start with background code 0".into(),
            ));
        }
        if codes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "class map must be strictly increasing: {codes:?}"
            )));
        }
        if codes.len() > u16::MAX as usize {
            return Err(Error::InvalidInput("too many classes".into()));
        }
        Ok(ClassMap(codes))
    }

    /// Background plus the seven cardiac substructure codes used by MM-WHS.
    pub fn whole_heart() -> Self {
        ClassMap(vec![0, 205, 420, 500, 550, 600, 820, 850])
    }

    /// Compact codes `0..n_classes`.
    pub fn identity(n_classes: usize) -> Self {
        ClassMap((0..n_classes as i64).collect())
    }

    /// Number of classes including background (K + 1).
    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codes(&self) -> &[i64] {
        &self.0
    }

    pub fn id_of(&self, code: i64) -> Option<u16> {
        self.0.binary_search(&code).ok().map(|i| i as u16)
    }

    #[inline]
    pub fn code_of(&self, id: u16) -> i64 {
        self.0[id as usize]
    }
}

impl TryFrom<Vec<i64>> for ClassMap {
    type Error = Error;
    fn try_from(v: Vec<i64>) -> Result<Self> {
        ClassMap::new(v)
    }
}

impl From<ClassMap> for Vec<i64> {
    fn from(m: ClassMap) -> Self {
        m.0
    }
}

impl Default for ClassMap {
    fn default() -> Self {
        ClassMap::whole_heart()
    }
}

/// 3D grid of compact class ids with the raw-code mapping used for file I/O.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u16>,
    class_map: ClassMap,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u16>, class_map: ClassMap) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "label data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        let k = class_map.len();
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= k) {
            return Err(Error::InvalidInput(format!(
                "class id {bad} outside [0, {}]",
                k - 1
            )));
        }
        Ok(LabelVolume {
            grid,
            data,
            class_map,
        })
    }

    /// Builds from raw codes, mapping each through the class map.
    pub fn from_codes(grid: Grid, codes: &[i64], class_map: ClassMap) -> Result<Self> {
        let data = codes
            .iter()
            .map(|&c| class_map.id_of(c).ok_or(Error::UnknownLabel(c)))
            .collect::<Result<Vec<_>>>()?;
        LabelVolume::new(grid, data, class_map)
    }

    pub fn background(grid: Grid, class_map: ClassMap) -> Self {
        LabelVolume {
            grid,
            data: vec![0; grid.len()],
            class_map,
        }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.data[self.grid.linear(i, j, k)]
    }

    pub fn codes(&self) -> Vec<i64> {
        self.data
            .iter()
            .map(|&id| self.class_map.code_of(id))
            .collect()
    }

    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.dims != self.grid.dims {
            return Err(Error::GridMismatch(format!(
                "cannot re-grid {:?} as {:?}",
                self.grid.dims, grid.dims
            )));
        }
        self.grid = grid;
        Ok(self)
    }

    /// Sorted set of class ids present.
    pub fn present_ids(&self) -> Vec<u16> {
        let mut seen = vec![false; self.class_map.len()];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..seen.len() as u16)
            .filter(|&i| seen[i as usize])
            .collect()
    }

    /// Indicator of `id` as a real volume.
    pub fn indicator<T: Real>(&self, id: u16) -> Volume<T> {
        Volume {
            grid: self.grid,
            data: self
                .data
                .iter()
                .map(|&v| if v == id { T::one() } else { T::zero() })
                .collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.class_map.len()];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}
