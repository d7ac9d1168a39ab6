//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Geometry is reduced to per-axis spacing and origin: the sform is used when
//! its code is set (spacing from column norms, origin from the offset column),
//! else the qform (pixdim and qoffset), else pixdim alone. Direction cosines are
//! not modelled; files written here carry a diagonal sform and a matching qform.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{ClassMap, Grid, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
    U16,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
            Datatype::U16 => 512,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            512 => Datatype::U16,
            other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 | Datatype::U16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Datatype::F32 | Datatype::F64)
    }

    fn range(self) -> (f64, f64) {
        match self {
            Datatype::U8 => (0.0, u8::MAX as f64),
            Datatype::I16 => (i16::MIN as f64, i16::MAX as f64),
            Datatype::U16 => (0.0, u16::MAX as f64),
            Datatype::I32 => (i32::MIN as f64, i32::MAX as f64),
            Datatype::F32 => (f32::MIN as f64, f32::MAX as f64),
            Datatype::F64 => (f64::MIN, f64::MAX),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Endian {
    #[default]
    Little,
    Big,
}

/// Decoded image: up to 7 dims, voxel values widened to `f64` with scaling applied.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub dims: Vec<usize>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub datatype: Datatype,
    pub data: Vec<f64>,
}

impl NiftiImage {
    /// Spatial grid from the first three dims (missing dims are 1).
    pub fn grid(&self) -> Result<Grid> {
        let d = |a: usize| self.dims.get(a).copied().unwrap_or(1);
        Grid::new([d(0), d(1), d(2)], self.spacing, self.origin)
    }

    fn spatial_only(&self) -> Result<()> {
        if self.dims.iter().skip(3).any(|&d| d != 1) {
            return Err(Error::Nifti(format!(
                "expected a 3D volume, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Nifti(m) => Error::Nifti(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode(b: &[u8]) -> Result<NiftiImage> {
    if b.len() < HEADER_SIZE {
        return Err(Error::Nifti("file shorter than a NIfTI-1 header".into()));
    }
    if LittleEndian::read_i32(&b[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(b)
    } else if BigEndian::read_i32(&b[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(b)
    } else {
        Err(Error::Nifti(
            "not a NIfTI-1 header (sizeof_hdr != 348)".into(),
        ))
    }
}

fn decode_with<E: ByteOrder>(b: &[u8]) -> Result<NiftiImage> {
    let magic = &b[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Nifti(if magic == b"ni1\0" {
            "two-file (.hdr/.img) NIfTI is not supported".into()
        } else {
            "bad NIfTI-1 magic".into()
        }));
    }
    let i16_at = |o: usize| E::read_i16(&b[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&b[o..o + 4]) as f64;

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("invalid dim[0] = {ndim}")));
    }
    let dims = (1..=ndim as usize)
        .map(|a| {
            let d = i16_at(40 + 2 * a);
            if d < 1 {
                Err(Error::Nifti(format!("invalid dim[{a}] = {d}")))
            } else {
                Ok(d as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let datatype = Datatype::from_code(i16_at(70))?;
    let pixdim: [f64; 3] = std::array::from_fn(|a| f32_at(76 + 4 * (a + 1)));
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);
    let qform_code = i16_at(252);
    let sform_code = i16_at(254);

    let fallback = |s: f64| {
        if s.is_finite() && s.abs() > 0.0 {
            s.abs()
        } else {
            1.0
        }
    };
    let (spacing, origin) = if sform_code > 0 {
        let rows: [[f64; 4]; 3] =
            std::array::from_fn(|r| std::array::from_fn(|c| f32_at(280 + 16 * r + 4 * c)));
        let spacing = std::array::from_fn(|c| {
            fallback((rows[0][c].powi(2) + rows[1][c].powi(2) + rows[2][c].powi(2)).sqrt())
        });
        (spacing, [rows[0][3], rows[1][3], rows[2][3]])
    } else if qform_code > 0 {
        (
            pixdim.map(fallback),
            [f32_at(268), f32_at(272), f32_at(276)],
        )
    } else {
        (pixdim.map(fallback), [0.0; 3])
    };

    let count: usize = dims.iter().product();
    let nbytes = count * datatype.bytes();
    let start = vox_offset.max(HEADER_SIZE);
    if b.len() < start + nbytes {
        return Err(Error::Nifti(format!(
            "truncated voxel data: need {nbytes} bytes at offset {start}, file has {}",
            b.len()
        )));
    }
    let raw = &b[start..start + nbytes];
    let mut data: Vec<f64> = match datatype {
        Datatype::U8 => raw.iter().map(|&v| v as f64).collect(),
        Datatype::I16 => raw.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        Datatype::U16 => raw.chunks_exact(2).map(|c| E::read_u16(c) as f64).collect(),
        Datatype::I32 => raw.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        Datatype::F32 => raw.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        Datatype::F64 => raw.chunks_exact(8).map(E::read_f64).collect(),
    };
    if slope.is_finite() && slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "NIfTI voxel data contains NaN or Inf".into(),
        ));
    }
    Ok(NiftiImage {
        dims,
        spacing,
        origin,
        datatype,
        data,
    })
}

pub fn write_image(path: impl AsRef<Path>, img: &NiftiImage) -> Result<()> {
    write_image_endian(path, img, Endian::Little)
}

pub fn write_image_endian(path: impl AsRef<Path>, img: &NiftiImage, endian: Endian) -> Result<()> {
    let path = path.as_ref();
    let bytes = match endian {
        Endian::Little => encode::<LittleEndian>(img)?,
        Endian::Big => encode::<BigEndian>(img)?,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish()
            .and_then(|mut inner| inner.flush())
            .map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn encode<E: ByteOrder>(img: &NiftiImage) -> Result<Vec<u8>> {
    if img.dims.is_empty() || img.dims.len() > 7 {
        return Err(Error::Nifti(format!(
            "cannot write {}-dimensional image",
            img.dims.len()
        )));
    }
    if img.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::Nifti(format!(
            "dims {:?} not representable",
            img.dims
        )));
    }
    let count: usize = img.dims.iter().product();
    if count != img.data.len() {
        return Err(Error::Nifti(format!(
            "data length {} does not match dims {:?}",
            img.data.len(),
            img.dims
        )));
    }
    let dt = img.datatype;
    if dt.is_integer() {
        let (lo, hi) = dt.range();
        if let Some(v) = img
            .data
            .iter()
            .find(|v| v.fract() != 0.0 || **v < lo || **v > hi)
        {
            return Err(Error::Nifti(format!(
                "value {v} not representable as {dt:?}"
            )));
        }
    }

    let mut b = vec![0u8; VOX_OFFSET + count * dt.bytes()];
    E::write_i32(&mut b[0..4], HEADER_SIZE as i32);
    b[38] = b'r'; // regular
    E::write_i16(&mut b[40..42], img.dims.len() as i16);
    for a in 0..7 {
        let d = img.dims.get(a).copied().unwrap_or(1) as i16;
        E::write_i16(&mut b[42 + 2 * a..44 + 2 * a], d);
    }
    E::write_i16(&mut b[70..72], dt.code());
    E::write_i16(&mut b[72..74], (dt.bytes() * 8) as i16);
    E::write_f32(&mut b[76..80], 1.0); // qfac
    for a in 0..7 {
        let v = if a < 3 { img.spacing[a] as f32 } else { 1.0 };
        E::write_f32(&mut b[80 + 4 * a..84 + 4 * a], v);
    }
    E::write_f32(&mut b[108..112], VOX_OFFSET as f32);
    E::write_f32(&mut b[112..116], 1.0);
    b[123] = 2; // xyzt_units: mm
    let descrip = b"atlaseg";
    b[148..148 + descrip.len()].copy_from_slice(descrip);
    E::write_i16(&mut b[252..254], 1);
    E::write_i16(&mut b[254..256], 1);
    for a in 0..3 {
        E::write_f32(&mut b[268 + 4 * a..272 + 4 * a], img.origin[a] as f32);
        for c in 0..4 {
            let v = if c == 3 {
                img.origin[a]
            } else if c == a {
                img.spacing[a]
            } else {
                0.0
            };
            let o = 280 + 16 * a + 4 * c;
            E::write_f32(&mut b[o..o + 4], v as f32);
        }
    }
    b[344..348].copy_from_slice(b"n+1\0");

    let out = &mut b[VOX_OFFSET..];
    let step = dt.bytes();
    for (chunk, &v) in out.chunks_exact_mut(step).zip(&img.data) {
        match dt {
            Datatype::U8 => chunk[0] = v as u8,
            Datatype::I16 => E::write_i16(chunk, v as i16),
            Datatype::U16 => E::write_u16(chunk, v as u16),
            Datatype::I32 => E::write_i32(chunk, v as i32),
            Datatype::F32 => E::write_f32(chunk, v as f32),
            Datatype::F64 => E::write_f64(chunk, v),
        }
    }
    Ok(b)
}

/// Natural on-disk type for a scalar type: float32 for `f32`, float64 for `f64`.
pub fn native_datatype<T: Real>() -> Datatype {
    if std::mem::size_of::<T>() == 4 {
        Datatype::F32
    } else {
        Datatype::F64
    }
}

pub fn load_scalar<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let img = read_image(path)?;
    img.spatial_only()?;
    let grid = img.grid()?;
    Volume::new(grid, img.data.into_iter().map(T::lit).collect())
}

/// Loads raw label codes and maps them to compact ids through `class_map`.
pub fn load_labels(path: impl AsRef<Path>, class_map: &ClassMap) -> Result<LabelVolume> {
    let img = read_image(path)?;
    img.spatial_only()?;
    let grid = img.grid()?;
    let codes = img
        .data
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 {
                Err(Error::Nifti(format!("non-integer label value {v}")))
            } else {
                Ok(v as i64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::from_codes(grid, &codes, class_map.clone())
}

pub fn save_scalar<T: Real>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    save_scalar_as(vol, path, native_datatype::<T>())
}

pub fn save_scalar_as<T: Real>(
    vol: &Volume<T>,
    path: impl AsRef<Path>,
    datatype: Datatype,
) -> Result<()> {
    let g = vol.grid();
    write_image(
        path,
        &NiftiImage {
            dims: g.dims.to_vec(),
            spacing: g.spacing,
            origin: g.origin,
            datatype,
            data: vol.data().iter().map(|v| v.as_f64()).collect(),
        },
    )
}

/// Writes raw class-map codes in the narrowest integer type that holds them.
pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let codes = labels.class_map().codes();
    let lo = *codes.first().unwrap_or(&0);
    let hi = *codes.last().unwrap_or(&0);
    let datatype = if lo >= 0 && hi <= u8::MAX as i64 {
        Datatype::U8
    } else if lo >= i16::MIN as i64 && hi <= i16::MAX as i64 {
        Datatype::I16
    } else {
        Datatype::I32
    };
    let g = labels.grid();
    write_image(
        path,
        &NiftiImage {
            dims: g.dims.to_vec(),
            spacing: g.spacing,
            origin: g.origin,
            datatype,
            data: labels.codes().into_iter().map(|c| c as f64).collect(),
        },
    )
}

/// Writes equally sized channels as one 4D image (channel is the 4th axis).
pub fn save_channels<T: Real>(
    grid: &Grid,
    channels: &[Vec<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    if channels.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::InvalidInput(
            "channel length does not match grid".into(),
        ));
    }
    let mut dims = grid.dims.to_vec();
    dims.push(channels.len());
    write_image(
        path,
        &NiftiImage {
            dims,
            spacing: grid.spacing,
            origin: grid.origin,
            datatype: native_datatype::<T>(),
            data: channels.iter().flatten().map(|v| v.as_f64()).collect(),
        },
    )
}

pub fn load_channels<T: Real>(path: impl AsRef<Path>) -> Result<(Grid, Vec<Vec<T>>)> {
    let img = read_image(path)?;
    if img.dims.iter().skip(4).any(|&d| d != 1) {
        return Err(Error::Nifti(format!(
            "expected a 4D image, got dims {:?}",
            img.dims
        )));
    }
    let grid = img.grid()?;
    let channels = img
        .data
        .chunks_exact(grid.len())
        .map(|c| c.iter().map(|&v| T::lit(v)).collect())
        .collect();
    Ok((grid, channels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn int16_zeros_load_as_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii");
        let img = NiftiImage {
            dims: vec![2, 2, 2],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            datatype: Datatype::I16,
            data: vec![0.0; 8],
        };
        write_image(&p, &img).unwrap();
        let v: Volume<f64> = load_scalar(&p).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_volume_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid::new([8, 8, 8], [0.44, 0.44, 0.6], [-10.5, 3.25, 7.0]).unwrap();
        let v = Volume::from_fn(g, |_, _, _| rng.gen_range(-1000.0..1000.0f64));
        for name in ["r.nii", "r.nii.gz"] {
            let p = dir.path().join(name);
            save_scalar(&v, &p).unwrap();
            let back: Volume<f64> = load_scalar(&p).unwrap();
            assert_eq!(back.data(), v.data());
            assert!(back.grid().matches(v.grid()));
            assert_eq!(back.grid().spacing[0], 0.44f32 as f64);
        }
    }

    #[test]
    fn labels_written_as_raw_codes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.nii.gz");
        let g = Grid::unit([2, 1, 1]);
        let l = LabelVolume::new(g, vec![0, 1], ClassMap::whole_heart()).unwrap();
        save_labels(&l, &p).unwrap();
        let raw = read_image(&p).unwrap();
        assert_eq!(raw.data, vec![0.0, 205.0]);
        assert_eq!(raw.datatype, Datatype::I16);
        assert_eq!(load_labels(&p, &ClassMap::whole_heart()).unwrap(), l);
    }

    #[test]
    fn raw_codes_map_through_class_map() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codes.nii");
        let img = NiftiImage {
            dims: vec![3, 1, 1],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            datatype: Datatype::F32,
            data: vec![0.0, 205.0, 500.0],
        };
        write_image(&p, &img).unwrap();
        let l = load_labels(&p, &ClassMap::whole_heart()).unwrap();
        assert_eq!(l.data(), &[0, 1, 3]);
        let unknown = NiftiImage {
            data: vec![0.0, 7.0, 500.0],
            ..img
        };
        write_image(&p, &unknown).unwrap();
        assert!(matches!(
            load_labels(&p, &ClassMap::whole_heart()),
            Err(Error::UnknownLabel(7))
        ));
    }

    #[test]
    fn big_endian_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.nii");
        let img = NiftiImage {
            dims: vec![3, 2, 1],
            spacing: [2.0, 3.0, 4.0],
            origin: [1.0, 2.0, 3.0],
            datatype: Datatype::I32,
            data: vec![1.0, -2.0, 3.0, 40000.0, 5.0, 6.0],
        };
        write_image_endian(&p, &img, Endian::Big).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn rejects_4d_scalar_and_unknown_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("4d.nii");
        let img = NiftiImage {
            dims: vec![2, 2, 2, 2],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            datatype: Datatype::U8,
            data: vec![1.0; 16],
        };
        write_image(&p, &img).unwrap();
        assert!(load_scalar::<f64>(&p).is_err());

        let mut bytes = encode::<LittleEndian>(&NiftiImage {
            dims: vec![2, 2, 2],
            data: vec![1.0; 8],
            ..img
        })
        .unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 1536);
        let q = dir.path().join("bad.nii");
        std::fs::write(&q, bytes).unwrap();
        assert!(matches!(read_image(&q), Err(Error::Nifti(_))));
    }

    #[test]
    fn singleton_extra_dims_are_spatial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let img = NiftiImage {
            dims: vec![2, 2, 2, 1],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            datatype: Datatype::U8,
            data: vec![3.0; 8],
        };
        write_image(&p, &img).unwrap();
        assert_eq!(load_scalar::<f32>(&p).unwrap().dims(), [2, 2, 2]);
    }

    #[test]
    fn qform_used_without_sform() {
        let mut bytes = encode::<LittleEndian>(&NiftiImage {
            dims: vec![2, 2, 2],
            spacing: [1.5, 2.0, 2.5],
            origin: [4.0, 5.0, 6.0],
            datatype: Datatype::U8,
            data: vec![1.0; 8],
        })
        .unwrap();
        LittleEndian::write_i16(&mut bytes[254..256], 0);
        LittleEndian::write_f32(&mut bytes[292..296], 99.0); // bogus sform offset
        let img = decode(&bytes).unwrap();
        assert_eq!(img.origin, [4.0, 5.0, 6.0]);
        assert_eq!(img.spacing, [1.5, 2.0, 2.5]);
        LittleEndian::write_i16(&mut bytes[252..254], 0);
        assert_eq!(decode(&bytes).unwrap().origin, [0.0; 3]);
    }

    #[test]
    fn integer_types_refuse_lossy_writes() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Grid::unit([2, 1, 1]), vec![0.5f64, 1.0]).unwrap();
        assert!(save_scalar_as(&v, dir.path().join("x.nii"), Datatype::I16).is_err());
    }

    #[test]
    fn channels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.nii.gz");
        let g = Grid::unit([2, 3, 1]);
        let ch = vec![vec![0.25f64; 6], vec![0.75; 6]];
        save_channels(&g, &ch, &p).unwrap();
        let (g2, back) = load_channels::<f64>(&p).unwrap();
        assert_eq!(g2.dims, g.dims);
        assert_eq!(back, ch);
    }
}
