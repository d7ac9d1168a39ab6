use rayon::prelude::*;

use super::{Grid, Interpolant, Interpolator, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transform::TransformChain;

/// Pulls `vol` back onto `grid`: output voxel `n` takes the value at `t(world(n))`.
/// The identity onto the volume's own grid returns the stored values unchanged.
pub fn resample<T: Real>(
    vol: &Volume<T>,
    t: &TransformChain<T>,
    grid: &Grid,
    interp: Interpolator,
    background: T,
) -> Volume<T> {
    if t.ffd.is_none() && t.affine.is_identity() && vol.grid() == grid {
        return vol.clone();
    }
    let src = Interpolant::new(vol, interp);
    let plane = grid.dims[0] * grid.dims[1];
    let mut data = vec![T::zero(); grid.len()];
    data.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(k, slab)| {
            for (o, v) in slab.iter_mut().enumerate() {
                let p: [T; 3] = grid.voxel_world(k * plane + o);
                let idx = vol.grid().world_to_index(t.apply(p));
                *v = src.sample(idx, background);
            }
        });
    Volume { grid: *grid, data }
}

/// Nearest-neighbour pull-back of a label volume; points outside map to background.
pub fn resample_labels<T: Real>(
    labels: &LabelVolume,
    t: &TransformChain<T>,
    grid: &Grid,
    interp: Interpolator,
) -> Result<LabelVolume> {
    if interp != Interpolator::Nearest {
        return Err(Error::InvalidInput(format!(
            "label volumes must be resampled with nearest interpolation, not {interp:?}"
        )));
    }
    let src = labels.grid();
    let d = src.dims;
    let half = T::lit(0.5);
    let plane = grid.dims[0] * grid.dims[1];
    let mut data = vec![0u16; grid.len()];
    data.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(k, slab)| {
            for (o, v) in slab.iter_mut().enumerate() {
                let p: [T; 3] = grid.voxel_world(k * plane + o);
                let idx = src.world_to_index(t.apply(p));
                let inside =
                    (0..3).all(|a| idx[a] >= -half && idx[a] <= T::from_usize_lossy(d[a]) - half);
                *v = if inside {
                    let c: [usize; 3] = std::array::from_fn(|a| {
                        let r = idx[a].round().to_isize().unwrap_or(0);
                        r.clamp(0, d[a] as isize - 1) as usize
                    });
                    labels.get(c[0], c[1], c[2])
                } else {
                    0
                };
            }
        });
    LabelVolume::new(*grid, data, labels.class_map().clone())
}
