use atlaseg::phantom::{random_transform, PerturbSpec};
use atlaseg::{AffineTransform, FfdTransform, Grid, TransformChain};
use proptest::prelude::*;

fn beta(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// Brute-force sum over every knot of the tensor-product basis.
fn direct_displacement(ffd: &FfdTransform, p: [f64; 3]) -> [f64; 3] {
    let [nx, ny, nz] = ffd.dims();
    let (o, s) = (ffd.origin(), ffd.spacing());
    let u: [f64; 3] = std::array::from_fn(|a| (p[a] - o[a]) / s[a]);
    let mut d = [0.0; 3];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let w = beta(u[0] - i as f64) * beta(u[1] - j as f64) * beta(u[2] - k as f64);
                let c = ffd.coefficients()[ffd.control_index(i, j, k)];
                for a in 0..3 {
                    d[a] += w * c[a];
                }
            }
        }
    }
    d
}

fn affine_strategy() -> impl Strategy<Value = AffineTransform> {
    (
        prop::array::uniform3(prop::array::uniform3(-0.3f64..0.3)),
        prop::array::uniform3(-10.0f64..10.0),
    )
        .prop_map(|(mut m, t)| {
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += 1.0;
            }
            AffineTransform::new(m, t).unwrap()
        })
}

fn ffd_strategy() -> impl Strategy<Value = FfdTransform> {
    (
        prop::array::uniform3(4usize..8),
        prop::array::uniform3(1.0f64..6.0),
        prop::array::uniform3(-20.0f64..20.0),
    )
        .prop_flat_map(|(d, s, o)| {
            prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), d[0] * d[1] * d[2])
                .prop_map(move |c| FfdTransform::new(d, s, o, c).unwrap())
        })
}

/// A point whose 4x4x4 support lies inside the lattice, from unit fractions.
fn interior_point(ffd: &FfdTransform, f: [f64; 3]) -> [f64; 3] {
    let (d, o, s) = (ffd.dims(), ffd.origin(), ffd.spacing());
    std::array::from_fn(|a| {
        let lo = 1.0;
        let hi = d[a] as f64 - 2.0 - 1e-9;
        o[a] + s[a] * (lo + f[a] * (hi - lo))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_weights_partition_unity_inside(ffd in ffd_strategy(), f in prop::array::uniform3(0.0f64..1.0)) {
        let p = interior_point(&ffd, f);
        prop_assert!(ffd.in_interior(p));
        let mut w = Vec::new();
        ffd.for_each_weight(p, |_, x| w.push(x));
        prop_assert_eq!(w.len(), 64);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {}", sum);
    }

    #[test]
    fn chain_matches_direct_evaluation(
        affine in affine_strategy(),
        ffd in ffd_strategy(),
        f in prop::array::uniform3(-0.5f64..1.5),
    ) {
        let p = interior_point(&ffd, f);
        let m = &affine.matrix;
        let t = &affine.translation;
        let d = direct_displacement(&ffd, p);
        let chain = TransformChain { affine: affine.clone(), ffd: Some(ffd) };
        let q = chain.apply(p);
        for a in 0..3 {
            let want = m[a][0] * p[0] + m[a][1] * p[1] + m[a][2] * p[2] + t[a] + d[a];
            prop_assert!((q[a] - want).abs() < 1e-9 * (1.0 + want.abs()), "{} vs {}", q[a], want);
        }
    }

    #[test]
    fn zero_coefficients_reduce_to_the_affine(affine in affine_strategy(), p in prop::array::uniform3(-30.0f64..30.0)) {
        let ffd = FfdTransform::zeros([5, 5, 5], [4.0; 3], [-10.0; 3]).unwrap();
        let chain = TransformChain { affine: affine.clone(), ffd: Some(ffd) };
        prop_assert_eq!(chain.apply(p), affine.apply(p));
    }

    #[test]
    fn json_round_trip_is_lossless(
        affine in affine_strategy(),
        ffd in prop::option::of(ffd_strategy()),
        pts in prop::collection::vec(prop::array::uniform3(-30.0f64..30.0), 16),
    ) {
        let chain = TransformChain { affine, ffd };
        let back = TransformChain::from_json(&chain.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &chain);
        for p in pts {
            let (a, b) = (chain.apply(p), back.apply(p));
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn phantom_ground_truth_survives_serialisation(seed in any::<u64>(), amplitude in 0.0f64..4.0) {
        let spec = PerturbSpec { amplitude, ..PerturbSpec::moderate() };
        let t: TransformChain = random_transform(&Grid::unit([32; 3]), &spec, seed).unwrap();
        prop_assert_eq!(TransformChain::from_json(&t.to_json().unwrap()).unwrap(), t);
    }
}
