use serde::{Deserialize, Serialize};

use super::Volume;
use crate::bspline;
use crate::scalar::Real;

/// Image interpolation scheme (B-spline order 0, 1 or 3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolator {
    Nearest,
    #[default]
    Linear,
    Cubic,
}

impl std::str::FromStr for Interpolator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nearest" => Ok(Interpolator::Nearest),
            "linear" => Ok(Interpolator::Linear),
            "cubic" => Ok(Interpolator::Cubic),
            other => Err(format!("unknown interpolator '{other}'")),
        }
    }
}

/// A volume prepared for repeated interpolation.
///
/// A point is inside the domain when every continuous index lies in
/// `[-0.5, n - 0.5]`. Linear interpolation clamps to the edge there and cubic
/// interpolation mirrors, so values stay defined over the whole voxel footprint.
pub struct Interpolant<'a, T> {
    vol: &'a Volume<T>,
    kind: Interpolator,
    coeffs: Option<Vec<T>>,
}

impl<'a, T: Real> Interpolant<'a, T> {
    pub fn new(vol: &'a Volume<T>, kind: Interpolator) -> Self {
        let coeffs = (kind == Interpolator::Cubic).then(|| cubic_coefficients(vol));
        Interpolant { vol, kind, coeffs }
    }

    pub fn kind(&self) -> Interpolator {
        self.kind
    }

    pub fn volume(&self) -> &Volume<T> {
        self.vol
    }

    /// Range of values this interpolant can produce.
    ///
    /// For cubic B-splines this is the coefficient range: the basis is a convex
    /// combination, so interpolated values never leave it.
    pub fn value_range(&self) -> (T, T) {
        match &self.coeffs {
            Some(c) => c
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
            None => self.vol.min_max(),
        }
    }

    #[inline]
    pub fn inside(&self, idx: [T; 3]) -> bool {
        let half = T::lit(0.5);
        (0..3).all(|a| {
            let n = T::from_usize_lossy(self.vol.grid.dims[a]);
            idx[a] >= -half && idx[a] <= n - half
        })
    }

    #[inline]
    pub fn sample(&self, idx: [T; 3], background: T) -> T {
        self.value(idx).unwrap_or(background)
    }

    pub fn value(&self, idx: [T; 3]) -> Option<T> {
        if !self.inside(idx) {
            return None;
        }
        Some(match self.kind {
            Interpolator::Nearest => self.nearest(idx),
            Interpolator::Linear => self.linear(idx, false).0,
            Interpolator::Cubic => self.cubic(idx, false).0,
        })
    }

    /// Value and spatial gradient with respect to the continuous voxel index.
    pub fn value_and_gradient(&self, idx: [T; 3]) -> Option<(T, [T; 3])> {
        if !self.inside(idx) {
            return None;
        }
        Some(match self.kind {
            Interpolator::Nearest => (self.nearest(idx), [T::zero(); 3]),
            Interpolator::Linear => self.linear(idx, true),
            Interpolator::Cubic => self.cubic(idx, true),
        })
    }

    fn nearest(&self, idx: [T; 3]) -> T {
        let d = self.vol.grid.dims;
        let c: [usize; 3] = std::array::from_fn(|a| {
            let r = idx[a].round().to_isize().unwrap_or(0);
            r.clamp(0, d[a] as isize - 1) as usize
        });
        self.vol.get(c[0], c[1], c[2])
    }

    fn linear(&self, idx: [T; 3], grad: bool) -> (T, [T; 3]) {
        let d = self.vol.grid.dims;
        let mut base = [0usize; 3];
        let mut step = [0usize; 3];
        let mut frac = [T::zero(); 3];
        // Clamped axes (edge extrapolation or singleton) contribute no gradient.
        let mut live = [false; 3];
        for a in 0..3 {
            if d[a] == 1 {
                continue;
            }
            let hi = T::from_usize_lossy(d[a] - 1);
            live[a] = idx[a] > T::zero() && idx[a] < hi;
            let u = idx[a].max(T::zero()).min(hi);
            let i = u.floor().to_usize().unwrap_or(0).min(d[a] - 2);
            base[a] = i;
            step[a] = 1;
            frac[a] = u - T::from_usize_lossy(i);
        }
        let w = |a: usize, s: usize| if s == 0 { T::one() - frac[a] } else { frac[a] };
        let dw = |s: usize| if s == 0 { -T::one() } else { T::one() };
        let mut value = T::zero();
        let mut g = [T::zero(); 3];
        for sz in 0..=step[2] {
            for sy in 0..=step[1] {
                for sx in 0..=step[0] {
                    let v = self.vol.get(base[0] + sx, base[1] + sy, base[2] + sz);
                    let (wx, wy, wz) = (w(0, sx), w(1, sy), w(2, sz));
                    value += v * wx * wy * wz;
                    if grad {
                        g[0] += v * dw(sx) * wy * wz;
                        g[1] += v * wx * dw(sy) * wz;
                        g[2] += v * wx * wy * dw(sz);
                    }
                }
            }
        }
        for a in 0..3 {
            if !live[a] {
                g[a] = T::zero();
            }
        }
        (value, g)
    }

    fn cubic(&self, idx: [T; 3], grad: bool) -> (T, [T; 3]) {
        let c = self.coeffs.as_ref().expect("cubic coefficients");
        let d = self.vol.grid.dims;
        let mut ind = [[0usize; 4]; 3];
        let mut w = [[T::zero(); 4]; 3];
        let mut dw = [[T::zero(); 4]; 3];
        for a in 0..3 {
            let fl = idx[a].floor();
            let t = idx[a] - fl;
            let i = fl.to_isize().unwrap_or(0);
            w[a] = bspline::cubic_weights(t);
            dw[a] = bspline::cubic_weight_derivs(t);
            for l in 0..4 {
                ind[a][l] = bspline::mirror(i - 1 + l as isize, d[a]);
            }
        }
        let mut value = T::zero();
        let mut g = [T::zero(); 3];
        for lz in 0..4 {
            for ly in 0..4 {
                let row = d[0] * (ind[1][ly] + d[1] * ind[2][lz]);
                let mut sx = T::zero();
                let mut sdx = T::zero();
                for lx in 0..4 {
                    let v = c[row + ind[0][lx]];
                    sx += v * w[0][lx];
                    if grad {
                        sdx += v * dw[0][lx];
                    }
                }
                let wyz = w[1][ly] * w[2][lz];
                value += sx * wyz;
                if grad {
                    g[0] += sdx * wyz;
                    g[1] += sx * dw[1][ly] * w[2][lz];
                    g[2] += sx * w[1][ly] * dw[2][lz];
                }
            }
        }
        (value, g)
    }
}

fn cubic_coefficients<T: Real>(vol: &Volume<T>) -> Vec<T> {
    let [nx, ny, nz] = vol.grid.dims;
    let mut c = vol.data.clone();
    let mut line = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            let start = nx * (j + ny * k);
            bspline::prefilter_cubic(&mut c[start..start + nx]);
        }
    }
    for k in 0..nz {
        for i in 0..nx {
            line.clear();
            line.extend((0..ny).map(|j| c[i + nx * (j + ny * k)]));
            bspline::prefilter_cubic(&mut line);
            for (j, &v) in line.iter().enumerate() {
                c[i + nx * (j + ny * k)] = v;
            }
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            line.clear();
            line.extend((0..nz).map(|k| c[i + nx * (j + ny * k)]));
            bspline::prefilter_cubic(&mut line);
            for (k, &v) in line.iter().enumerate() {
                c[i + nx * (j + ny * k)] = v;
            }
        }
    }
    c
}
