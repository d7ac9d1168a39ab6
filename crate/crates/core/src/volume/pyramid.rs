use super::{Grid, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smallest per-axis size allowed at the coarsest pyramid level.
pub const MIN_LEVEL_DIM: usize = 4;

/// Multi-resolution pyramid, coarsest level first, original last.
///
/// Level `l` of `L` uses factor `f = 2^(L-1-l)`: Gaussian smoothing with
/// sigma `0.5 f` voxels, then every `f`-th voxel. Origin is kept and spacing
/// multiplied by `f`, so world coordinates agree across levels.
pub fn pyramid<T: Real>(vol: &Volume<T>, levels: usize) -> Result<Vec<Volume<T>>> {
    if levels == 0 {
        return Err(Error::InvalidInput(
            "pyramid needs at least one level".into(),
        ));
    }
    let coarsest = 1usize << (levels - 1);
    let d = vol.dims();
    if d.iter().any(|&n| n / coarsest < MIN_LEVEL_DIM) && levels > 1 {
        return Err(Error::InvalidInput(format!(
            "volume {d:?} too small for {levels} pyramid levels (coarsest needs >= {MIN_LEVEL_DIM} voxels per axis)"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let f = 1usize << (levels - 1 - l);
        if f == 1 {
            out.push(vol.clone());
            continue;
        }
        let smooth = gaussian_smooth(vol, 0.5 * f as f64);
        let g = vol.grid();
        let grid = Grid::new(d.map(|n| n / f), g.spacing.map(|s| s * f as f64), g.origin)?;
        out.push(Volume::from_fn(grid, |i, j, k| {
            smooth.get(i * f, j * f, k * f)
        }));
    }
    Ok(out)
}

/// Separable Gaussian smoothing with edge replication; `sigma` in voxels.
///
/// Each output is formed as `centre + sum w (v - centre)`, which leaves any
/// constant region bit-identical.
pub fn gaussian_smooth<T: Real>(vol: &Volume<T>, sigma: f64) -> Volume<T> {
    if sigma <= 0.0 {
        return vol.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    let kernel: Vec<T> = kernel.into_iter().map(T::lit).collect();

    let [nx, ny, nz] = vol.dims();
    let mut cur = vol.data().to_vec();
    let mut line = Vec::new();
    let mut smoothed = Vec::new();
    for axis in 0..3 {
        let (len, stride) = match axis {
            0 => (nx, 1),
            1 => (ny, nx),
            _ => (nz, nx * ny),
        };
        if len == 1 {
            continue;
        }
        let starts: Vec<usize> = (0..nx * ny * nz)
            .filter(|&n| {
                let c = [n % nx, (n / nx) % ny, n / (nx * ny)];
                c[axis] == 0
            })
            .collect();
        for s in starts {
            line.clear();
            line.extend((0..len).map(|i| cur[s + i * stride]));
            smoothed.clear();
            for i in 0..len as isize {
                let centre = line[i as usize];
                let mut acc = T::zero();
                for (o, &w) in kernel.iter().enumerate() {
                    let j = (i + o as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += w * (line[j] - centre);
                }
                smoothed.push(centre + acc);
            }
            for (i, &v) in smoothed.iter().enumerate() {
                cur[s + i * stride] = v;
            }
        }
    }
    Volume::new(*vol.grid(), cur).expect("smoothing keeps values finite")
}
