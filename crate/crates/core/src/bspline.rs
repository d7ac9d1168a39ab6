//! Uniform B-spline kernels shared by interpolation, free-form deformation and
//! Parzen-window histogram estimation.

use crate::scalar::Real;

/// Centred cubic B-spline, support (-2, 2).
#[inline]
pub fn cubic<T: Real>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() {
        T::lit(2.0 / 3.0) - ax * ax + T::lit(0.5) * ax * ax * ax
    } else if ax < T::lit(2.0) {
        let u = T::lit(2.0) - ax;
        u * u * u / T::lit(6.0)
    } else {
        T::zero()
    }
}

#[inline]
pub fn cubic_deriv<T: Real>(x: T) -> T {
    let ax = x.abs();
    let d = if ax < T::one() {
        -T::lit(2.0) * ax + T::lit(1.5) * ax * ax
    } else if ax < T::lit(2.0) {
        let u = T::lit(2.0) - ax;
        -T::lit(0.5) * u * u
    } else {
        return T::zero();
    };
    if x < T::zero() {
        -d
    } else {
        d
    }
}

/// Centred linear B-spline (hat), support (-1, 1).
#[inline]
pub fn linear<T: Real>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() {
        T::one() - ax
    } else {
        T::zero()
    }
}

#[inline]
pub fn linear_deriv<T: Real>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() && x != T::zero() {
        if x < T::zero() {
            T::one()
        } else {
            -T::one()
        }
    } else {
        T::zero()
    }
}

/// Cubic weights of the four knots `i-1..=i+2` for fractional offset `t ∈ [0,1)`.
#[inline]
pub fn cubic_weights<T: Real>(t: T) -> [T; 4] {
    let s = T::one() - t;
    let t2 = t * t;
    let t3 = t2 * t;
    let six = T::lit(6.0);
    [
        s * s * s / six,
        (T::lit(3.0) * t3 - T::lit(6.0) * t2 + T::lit(4.0)) / six,
        (-T::lit(3.0) * t3 + T::lit(3.0) * t2 + T::lit(3.0) * t + T::one()) / six,
        t3 / six,
    ]
}

/// Derivatives of [`cubic_weights`] with respect to `t`.
#[inline]
pub fn cubic_weight_derivs<T: Real>(t: T) -> [T; 4] {
    let s = T::one() - t;
    let t2 = t * t;
    [
        -T::lit(0.5) * s * s,
        T::lit(1.5) * t2 - T::lit(2.0) * t,
        -T::lit(1.5) * t2 + t + T::lit(0.5),
        T::lit(0.5) * t2,
    ]
}

/// In-place conversion of samples into cubic B-spline interpolation coefficients
/// with mirror (whole-sample symmetric) boundaries.
pub fn prefilter_cubic<T: Real>(c: &mut [T]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = T::lit(3f64.sqrt() - 2.0);
    let gain = (T::one() - z) * (T::one() - T::one() / z);
    for v in c.iter_mut() {
        *v *= gain;
    }

    // Exact causal initialisation for the mirrored, (2n-2)-periodic signal.
    let zn = z.powi(n as i32 - 1);
    let z2n = zn * zn;
    let mut sum = c[0] + zn * c[n - 1];
    let mut zk = z;
    let mut zrev = zn * zn / z;
    for ck in c.iter().take(n - 1).skip(1) {
        sum += (zk + zrev) * *ck;
        zk *= z;
        zrev /= z;
    }
    c[0] = sum / (T::one() - z2n);
    for k in 1..n {
        let prev = c[k - 1];
        c[k] += z * prev;
    }
    c[n - 1] = (z / (z * z - T::one())) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

/// Mirror an integer index into `0..n` (whole-sample symmetric extension).
#[inline]
pub fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}
