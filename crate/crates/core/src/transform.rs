//! Spatial transforms mapping fixed-image world coordinates (mm) to moving-image
//! world coordinates: a global affine plus an optional cubic B-spline free-form
//! deformation, combined additively.

use serde::{Deserialize, Serialize};

use crate::bspline;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Grid;

pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AffineTransform<T> {
    pub matrix: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Real> AffineTransform<T> {
    pub fn new(matrix: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        if matrix
            .iter()
            .flatten()
            .chain(translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("affine parameters".into()));
        }
        Ok(AffineTransform {
            matrix,
            translation,
        })
    }

    pub fn identity() -> Self {
        let mut matrix = [[T::zero(); 3]; 3];
        for (a, row) in matrix.iter_mut().enumerate() {
            row[a] = T::one();
        }
        AffineTransform {
            matrix,
            translation: [T::zero(); 3],
        }
    }

    pub fn from_translation(t: [T; 3]) -> Self {
        AffineTransform {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians about a unit `axis`, fixing `center`.
    pub fn rotation(axis: [T; 3], angle: T, center: [T; 3]) -> Self {
        let m = rotation_matrix(axis, angle);
        Self::about_center(m, center, [T::zero(); 3])
    }

    /// `p -> M (p - c) + c + t`.
    pub fn about_center(matrix: [[T; 3]; 3], center: [T; 3], t: [T; 3]) -> Self {
        let mc = mat_vec(&matrix, center);
        AffineTransform {
            matrix,
            translation: std::array::from_fn(|a| center[a] - mc[a] + t[a]),
        }
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let mp = mat_vec(&self.matrix, p);
        std::array::from_fn(|a| mp[a] + self.translation[a])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

pub fn rotation_matrix<T: Real>(axis: [T; 3], angle: T) -> [[T; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / norm);
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[inline]
pub(crate) fn mat_vec<T: Real>(m: &[[T; 3]; 3], p: [T; 3]) -> [T; 3] {
    std::array::from_fn(|a| m[a][0] * p[0] + m[a][1] * p[1] + m[a][2] * p[2])
}

/// Cubic B-spline control lattice carrying a 3-vector displacement (mm) per knot.
#[derive(Clone, Debug, PartialEq)]
pub struct FfdTransform<T> {
    dims: [usize; 3],
    spacing: [T; 3],
    origin: [T; 3],
    coefficients: Vec<[T; 3]>,
}

/// Tensor-product weights of the 4x4x4 knots influencing one point.
#[derive(Clone, Copy, Debug)]
pub struct FfdSupport<T> {
    /// Lattice index of the first of the four knots per axis (may be negative).
    pub base: [isize; 3],
    pub weights: [[T; 4]; 3],
}

impl<T: Real> FfdTransform<T> {
    pub fn new(
        dims: [usize; 3],
        spacing: [T; 3],
        origin: [T; 3],
        coefficients: Vec<[T; 3]>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 4) {
            return Err(Error::InvalidInput(format!(
                "control grid needs at least 4 knots per axis, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > T::zero())) {
            return Err(Error::InvalidInput(
                "control spacing must be positive".into(),
            ));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("control origin".into()));
        }
        if coefficients.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidInput(format!(
                "expected {} control coefficients, got {}",
                dims[0] * dims[1] * dims[2],
                coefficients.len()
            )));
        }
        if coefficients.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control coefficients".into()));
        }
        Ok(FfdTransform {
            dims,
            spacing,
            origin,
            coefficients,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [T; 3], origin: [T; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, origin, vec![[T::zero(); 3]; n])
    }

    /// Zero lattice with knot spacing `knot` (mm) whose interior support covers `grid`.
    ///
    /// One knot of padding precedes the first voxel; enough follow the last voxel
    /// for every voxel to see a full 4x4x4 neighbourhood.
    pub fn covering(grid: &Grid, knot: [f64; 3]) -> Result<Self> {
        let extent = grid.extent();
        let dims: [usize; 3] =
            std::array::from_fn(|a| ((extent[a] / knot[a]).ceil() as usize + 3).max(4));
        let origin = std::array::from_fn(|a| T::lit(grid.origin[a] - knot[a]));
        Self::zeros(dims, knot.map(T::lit), origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [T; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [T; 3] {
        self.origin
    }

    pub fn n_control(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficients(&self) -> &[[T; 3]] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.coefficients
    }

    #[inline]
    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// World position of knot `(i, j, k)`.
    pub fn control_point(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        let c = [i, j, k];
        std::array::from_fn(|a| self.origin[a] + self.spacing[a] * T::from_usize_lossy(c[a]))
    }

    #[inline]
    pub fn support(&self, p: [T; 3]) -> FfdSupport<T> {
        let mut base = [0isize; 3];
        let mut weights = [[T::zero(); 4]; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.spacing[a];
            let fl = u.floor();
            base[a] = fl.to_isize().unwrap_or(isize::MIN / 2) - 1;
            weights[a] = bspline::cubic_weights(u - fl);
        }
        FfdSupport { base, weights }
    }

    /// Calls `f(control_index, weight)` for each in-lattice knot influencing `p`.
    #[inline]
    pub fn for_each_weight(&self, p: [T; 3], mut f: impl FnMut(usize, T)) {
        let s = self.support(p);
        let d = self.dims.map(|v| v as isize);
        for lz in 0..4 {
            let k = s.base[2] + lz as isize;
            if k < 0 || k >= d[2] {
                continue;
            }
            for ly in 0..4 {
                let j = s.base[1] + ly as isize;
                if j < 0 || j >= d[1] {
                    continue;
                }
                let wyz = s.weights[1][ly] * s.weights[2][lz];
                for lx in 0..4 {
                    let i = s.base[0] + lx as isize;
                    if i < 0 || i >= d[0] {
                        continue;
                    }
                    let idx = self.control_index(i as usize, j as usize, k as usize);
                    f(idx, s.weights[0][lx] * wyz);
                }
            }
        }
    }

    #[inline]
    pub fn displacement(&self, p: [T; 3]) -> [T; 3] {
        let mut u = [T::zero(); 3];
        self.for_each_weight(p, |idx, w| {
            let c = self.coefficients[idx];
            u[0] += w * c[0];
            u[1] += w * c[1];
            u[2] += w * c[2];
        });
        u
    }

    /// True when `p` sees a complete 4x4x4 knot neighbourhood.
    pub fn in_interior(&self, p: [T; 3]) -> bool {
        let s = self.support(p);
        (0..3).all(|a| s.base[a] >= 0 && s.base[a] + 3 < self.dims[a] as isize)
    }

    /// Keeps the first `dims` knots per axis; the origin and spacing are unchanged.
    pub fn cropped(&self, dims: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| dims[a] > self.dims[a]) {
            return Err(Error::InvalidInput(format!(
                "cannot crop a {:?} lattice to {dims:?}",
                self.dims
            )));
        }
        let mut coefficients = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    coefficients.push(self.coefficients[self.control_index(i, j, k)]);
                }
            }
        }
        Self::new(dims, self.spacing, self.origin, coefficients)
    }

    /// Exact dyadic refinement: the same deformation on a lattice of half the spacing.
    ///
    /// The fine lattice starts half a coarse knot after the coarse one, so fine
    /// knot `j` sits at coarse parameter `(j + 1) / 2`. Agreement is exact wherever
    /// the fine lattice has full support.
    pub fn refined(&self) -> Self {
        let dims = self.dims.map(|n| 2 * n - 3);
        let half = T::lit(0.5);
        let spacing = self.spacing.map(|s| s * half);
        let origin = std::array::from_fn(|a| self.origin[a] + spacing[a]);

        // Separable subdivision, one axis at a time.
        let mut cur = self.coefficients.clone();
        let mut cur_dims = self.dims;
        for axis in 0..3 {
            let mut next_dims = cur_dims;
            next_dims[axis] = dims[axis];
            let mut next = vec![[T::zero(); 3]; next_dims[0] * next_dims[1] * next_dims[2]];
            let src = |c: &Vec<[T; 3]>, idx: [usize; 3], i: isize| -> [T; 3] {
                if i < 0 || i >= cur_dims[axis] as isize {
                    return [T::zero(); 3];
                }
                let mut at = idx;
                at[axis] = i as usize;
                c[at[0] + cur_dims[0] * (at[1] + cur_dims[1] * at[2])]
            };
            for k in 0..next_dims[2] {
                for j in 0..next_dims[1] {
                    for i in 0..next_dims[0] {
                        let idx = [i, j, k];
                        let m = idx[axis] as isize + 1;
                        let ci = m.div_euclid(2);
                        let v = if m % 2 == 0 {
                            let a = src(&cur, idx, ci - 1);
                            let b = src(&cur, idx, ci);
                            let c = src(&cur, idx, ci + 1);
                            std::array::from_fn(|d| {
                                (a[d] + T::lit(6.0) * b[d] + c[d]) / T::lit(8.0)
                            })
                        } else {
                            let a = src(&cur, idx, ci);
                            let b = src(&cur, idx, ci + 1);
                            std::array::from_fn(|d| (a[d] + b[d]) * half)
                        };
                        next[i + next_dims[0] * (j + next_dims[1] * k)] = v;
                    }
                }
            }
            cur = next;
            cur_dims = next_dims;
        }
        FfdTransform {
            dims,
            spacing,
            origin,
            coefficients: cur,
        }
    }
}

/// `T_NR(p) = affine(p) + ffd_displacement(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformChain<T> {
    pub affine: AffineTransform<T>,
    pub ffd: Option<FfdTransform<T>>,
}

impl<T: Real> Default for TransformChain<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> TransformChain<T> {
    pub fn identity() -> Self {
        TransformChain {
            affine: AffineTransform::identity(),
            ffd: None,
        }
    }

    pub fn from_affine(affine: AffineTransform<T>) -> Self {
        TransformChain { affine, ffd: None }
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let mut q = self.affine.apply(p);
        if let Some(ffd) = &self.ffd {
            let u = ffd.displacement(p);
            for a in 0..3 {
                q[a] += u[a];
            }
        }
        q
    }

    pub fn to_document(&self) -> TransformDocument<T> {
        TransformDocument {
            version: DOCUMENT_VERSION,
            affine: self.affine.clone(),
            ffd: self.ffd.as_ref().map(|f| FfdDocument {
                dims: f.dims,
                spacing: f.spacing,
                origin: f.origin,
                coefficients: f.coefficients.iter().flatten().copied().collect(),
            }),
        }
    }

    pub fn from_document(doc: TransformDocument<T>) -> Result<Self> {
        if doc.version != DOCUMENT_VERSION {
            return Err(Error::Document(format!(
                "unsupported transform document version {} (expected {DOCUMENT_VERSION})",
                doc.version
            )));
        }
        let affine = AffineTransform::new(doc.affine.matrix, doc.affine.translation)?;
        let ffd = match doc.ffd {
            None => None,
            Some(f) => {
                if f.coefficients.len() % 3 != 0 {
                    return Err(Error::Document(
                        "coefficient array length not a multiple of 3".into(),
                    ));
                }
                let coeffs = f
                    .coefficients
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                Some(FfdTransform::new(f.dims, f.spacing, f.origin, coeffs)?)
            }
        };
        Ok(TransformChain { affine, ffd })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TransformDocument<T> = serde_json::from_str(s)?;
        Self::from_document(doc)
    }
}

/// Persisted transform parameters; coefficients are flattened knot-major
/// (x fastest), three displacement components per knot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct TransformDocument<T> {
    pub version: u32,
    pub affine: AffineTransform<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffd: Option<FfdDocument<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct FfdDocument<T> {
    pub dims: [usize; 3],
    pub spacing: [T; 3],
    pub origin: [T; 3],
    pub coefficients: Vec<T>,
}
