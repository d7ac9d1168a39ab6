//! PNG export of one axial slice with label contours drawn over the intensities.

use std::io::Cursor;
use std::path::Path;

use atlaseg::{Error, LabelVolume, Result, ScalarVolume};
use image::{ImageFormat, Rgb, RgbImage};

/// Contour colour per class id (id 0, background, is never drawn). Ids past
/// the end of the table wrap around.
pub const CLASS_COLORS: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn class_color(id: u16) -> [u8; 3] {
    let n = CLASS_COLORS.len() - 1;
    CLASS_COLORS[1 + (id as usize - 1) % n]
}

/// Grayscale rendering of slice `z` (x along columns, y along rows), windowed
/// to the volume's intensity range. A labelled pixel is a contour pixel when a
/// 4-neighbour has a different label or lies outside the slice.
pub fn render(image: &ScalarVolume, labels: Option<&LabelVolume>, z: usize) -> Result<RgbImage> {
    let [nx, ny, nz] = image.dims();
    if z >= nz {
        return Err(Error::InvalidInput(format!(
            "slice {z} out of range (0..{nz})"
        )));
    }
    if let Some(l) = labels {
        image.grid().ensure_matches(l.grid(), "overlay labels")?;
    }
    let (lo, hi) = image.min_max();
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let g = ((image.get(x, y, z) - lo) * scale)
                .round()
                .clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
        }
    }
    if let Some(l) = labels {
        for y in 0..ny {
            for x in 0..nx {
                let id = l.get(x, y, z);
                if id == 0 {
                    continue;
                }
                let differs = |dx: isize, dy: isize| {
                    let (u, v) = (x as isize + dx, y as isize + dy);
                    u < 0
                        || v < 0
                        || u >= nx as isize
                        || v >= ny as isize
                        || l.get(u as usize, v as usize, z) != id
                };
                if differs(-1, 0) || differs(1, 0) || differs(0, -1) || differs(0, 1) {
                    img.put_pixel(x as u32, y as u32, Rgb(class_color(id)));
                }
            }
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn export_overlay(
    image: &ScalarVolume,
    labels: Option<&LabelVolume>,
    z: usize,
    out: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_png(&render(image, labels, z)?)?;
    let out = out.as_ref();
    std::fs::write(out, bytes).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use atlaseg::{ClassMap, Grid};

    #[test]
    fn colours_are_distinct_and_never_gray() {
        let fg = &CLASS_COLORS[1..];
        for (i, a) in fg.iter().enumerate() {
            assert!(!(a[0] == a[1] && a[1] == a[2]));
            for b in &fg[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(class_color(12), class_color(1));
    }

    #[test]
    fn single_voxel_label_is_its_own_contour() {
        let g = Grid::unit([3, 3, 1]);
        let img = ScalarVolume::from_fn(g, |i, j, _| (i + j) as f64);
        let mut codes = vec![0i64; 9];
        codes[4] = 205;
        let l = LabelVolume::from_codes(g, &codes, ClassMap::whole_heart()).unwrap();
        let out = render(&img, Some(&l), 0).unwrap();
        assert_eq!(out.get_pixel(1, 1).0, class_color(1));
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(2, 2).0, [255, 255, 255]);
        assert!(render(&img, Some(&l), 1).is_err());
    }
}
