use atlaseg::volume::nifti::{self, Datatype, Endian, NiftiImage};
use atlaseg::volume::{pyramid, resample, resample_labels};
use atlaseg::{
    AffineTransform, ClassMap, Grid, Interpolator, LabelVolume, ScalarVolume, TransformChain,
};
use proptest::prelude::*;

// Headers store spacing and origin as float32, so grids are drawn from values it represents.
fn grid_strategy() -> impl Strategy<Value = Grid> {
    (
        prop::array::uniform3(1usize..7),
        prop::array::uniform3(0.25f32..3.0),
        prop::array::uniform3(-50.0f32..50.0),
    )
        .prop_map(|(d, s, o)| Grid::new(d, s.map(f64::from), o.map(f64::from)).unwrap())
}

fn volume_strategy() -> impl Strategy<Value = ScalarVolume> {
    grid_strategy().prop_flat_map(|g| {
        prop::collection::vec(-1e6f64..1e6, g.len())
            .prop_map(move |d| ScalarVolume::new(g, d).unwrap())
    })
}

fn labels_strategy() -> impl Strategy<Value = LabelVolume> {
    (grid_strategy(), 2usize..6).prop_flat_map(|(g, kc)| {
        prop::collection::vec(0..kc as u16, g.len())
            .prop_map(move |d| LabelVolume::new(g, d, ClassMap::identity(kc)).unwrap())
    })
}

fn small_affine() -> impl Strategy<Value = TransformChain> {
    (
        prop::array::uniform3(prop::array::uniform3(-0.2f64..0.2)),
        prop::array::uniform3(-2.0f64..2.0),
    )
        .prop_map(|(d, t)| {
            let mut m = d;
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += 1.0;
            }
            TransformChain::from_affine(AffineTransform::new(m, t).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn float64_volumes_round_trip_bit_exactly(v in volume_strategy(), big in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let img = NiftiImage {
            dims: v.dims().to_vec(),
            spacing: v.grid().spacing,
            origin: v.grid().origin,
            datatype: Datatype::F64,
            data: v.data().to_vec(),
        };
        let endian = if big { Endian::Big } else { Endian::Little };
        nifti::write_image_endian(&path, &img, endian).unwrap();
        let back: ScalarVolume = nifti::load_scalar(&path).unwrap();
        prop_assert_eq!(back.grid(), v.grid());
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn label_volumes_round_trip(l in labels_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.nii");
        nifti::save_labels(&l, &path).unwrap();
        let back = nifti::load_labels(&path, l.class_map()).unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn linear_sampling_at_nodes_returns_stored_values(v in volume_strategy()) {
        let g = *v.grid();
        for n in 0..g.len() {
            let [i, j, k] = g.coords(n);
            let s = v.sample([i as f64, j as f64, k as f64], Interpolator::Linear, f64::NAN);
            prop_assert_eq!(s, v.data()[n]);
        }
    }

    #[test]
    fn identity_resampling_preserves_values(v in volume_strategy()) {
        let id = TransformChain::identity();
        for interp in [Interpolator::Nearest, Interpolator::Linear] {
            let r = resample(&v, &id, v.grid(), interp, 0.0);
            prop_assert_eq!(r.data(), v.data());
        }
        let l = LabelVolume::new(*v.grid(), vec![1; v.grid().len()], ClassMap::identity(3)).unwrap();
        prop_assert_eq!(resample_labels(&l, &id, v.grid(), Interpolator::Nearest).unwrap(), l);
    }

    #[test]
    fn nearest_resampling_never_invents_classes(l in labels_strategy(), t in small_affine()) {
        let r = resample_labels(&l, &t, l.grid(), Interpolator::Nearest).unwrap();
        let mut allowed = l.present_ids();
        allowed.push(0);
        prop_assert!(r.data().iter().all(|id| allowed.contains(id)));
    }

    #[test]
    fn pyramid_keeps_constant_volumes_constant(
        d in prop::array::uniform3(16usize..24),
        c in -100.0f64..100.0,
        levels in 1usize..4,
    ) {
        let v = ScalarVolume::filled(Grid::unit(d), c);
        let p = pyramid(&v, levels).unwrap();
        prop_assert_eq!(p.len(), levels);
        for lvl in &p {
            prop_assert!(lvl.data().iter().all(|&x| x == c));
        }
    }
}
