use atlaseg::atlas::{build_atlas, warp_member, AtlasMember, DeformedMember};
use atlaseg::fusion::{majority_vote, median_fuse, LabelStack};
use atlaseg::metrics::{self, confusion, evaluate, Counts};
use atlaseg::{ClassMap, Grid, LabelVolume, ScalarVolume, TransformChain};
use proptest::prelude::*;

/// `n` label volumes on one grid of at most 8 voxels per axis with up to 8 foreground classes.
fn stack_strategy(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<LabelVolume>> {
    (prop::array::uniform3(1usize..9), 2usize..10, n).prop_flat_map(|(d, kc, n)| {
        let g = Grid::unit(d);
        prop::collection::vec(prop::collection::vec(0..kc as u16, g.len()), n).prop_map(move |vs| {
            vs.into_iter()
                .map(|v| LabelVolume::new(g, v, ClassMap::identity(kc)).unwrap())
                .collect()
        })
    })
}

fn pair_strategy() -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
    stack_strategy(2..3).prop_map(|mut v| {
        let b = v.pop().unwrap();
        (v.pop().unwrap(), b)
    })
}

fn deformed(labels: &[LabelVolume]) -> Vec<DeformedMember<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let img = ScalarVolume::from_fn(*l.grid(), |x, y, z| (x + 2 * y + 3 * z + i) as f64);
            let m = AtlasMember::new(format!("m{i}"), img, l.clone()).unwrap();
            warp_member(&m, &TransformChain::identity(), l.grid()).unwrap()
        })
        .collect()
}

fn rotate<T: Clone>(v: &[T], by: usize) -> Vec<T> {
    let mut r = v.to_vec();
    let n = r.len();
    r.rotate_left(by % n);
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn identical_members_reproduce_the_member(members in stack_strategy(1..2), n in 1usize..5) {
        let one = deformed(&members).remove(0);
        let copies: Vec<_> = (0..n)
            .map(|i| DeformedMember { id: format!("c{i}"), ..one.clone() })
            .collect();
        let a = build_atlas(&copies).unwrap();
        prop_assert_eq!(a.mean_intensity(), &one.intensity);
        prop_assert_eq!(a.argmax_labels(), one.labels.clone());
        for (v, &l) in one.labels.data().iter().enumerate() {
            for (k, &p) in a.prior(v).iter().enumerate() {
                prop_assert_eq!(p, if k == l as usize { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn fusion_ignores_member_order(members in stack_strategy(1..8), by in 0usize..8, excl in any::<bool>()) {
        let a = LabelStack::new(members.clone()).unwrap();
        let b = LabelStack::new(rotate(&members, by)).unwrap();
        let mut rev = members.clone();
        rev.reverse();
        let c = LabelStack::new(rev).unwrap();
        prop_assert_eq!(majority_vote(&a, excl), majority_vote(&b, excl));
        prop_assert_eq!(majority_vote(&a, excl), majority_vote(&c, excl));
        prop_assert_eq!(median_fuse(&a), median_fuse(&b));
        prop_assert_eq!(median_fuse(&a), median_fuse(&c));
    }

    #[test]
    fn unanimous_stacks_are_fixed_points(members in stack_strategy(1..2), n in 1usize..7, excl in any::<bool>()) {
        let l = &members[0];
        let s = LabelStack::new(vec![l.clone(); n]).unwrap();
        prop_assert_eq!(&majority_vote(&s, excl), l);
        prop_assert_eq!(&median_fuse(&s), l);
    }

    #[test]
    fn majority_output_has_a_maximal_vote_count(members in stack_strategy(1..8)) {
        let s = LabelStack::new(members.clone()).unwrap();
        let fused = majority_vote(&s, false);
        for v in 0..fused.grid().len() {
            let count = |k: u16| members.iter().filter(|m| m.data()[v] == k).count();
            let best = (0..fused.n_classes() as u16).map(count).max().unwrap();
            prop_assert_eq!(count(fused.data()[v]), best);
        }
    }

    #[test]
    fn odd_median_is_one_of_the_votes(members in stack_strategy(1..8)) {
        let mut members = members;
        if members.len() % 2 == 0 {
            members.pop();
        }
        let s = LabelStack::new(members.clone()).unwrap();
        let fused = median_fuse(&s);
        for v in 0..fused.grid().len() {
            let out = fused.data()[v];
            prop_assert!(members.iter().any(|m| m.data()[v] == out));
            let below = members.iter().filter(|m| m.data()[v] < out).count();
            let above = members.iter().filter(|m| m.data()[v] > out).count();
            prop_assert!(below <= members.len() / 2 && above <= members.len() / 2);
        }
    }

    #[test]
    fn overlap_identities_hold((pred, gt) in pair_strategy()) {
        let rep = evaluate(&pred, &gt, true, "p", "g").unwrap();
        for c in &rep.classes {
            let Counts { tp, fp, fn_ } = c.counts;
            let u = tp + fp + fn_;
            if u == 0 {
                prop_assert!(c.both_empty);
                prop_assert_eq!(c.volume.dsc, 1.0);
                continue;
            }
            prop_assert_eq!(c.volume.dsc, 2.0 * tp as f64 / (u + tp) as f64);
            prop_assert_eq!(c.volume.iou, tp as f64 / u as f64);
            prop_assert!((c.volume.voe - (1.0 - c.volume.iou)).abs() <= 1e-15);
            let from_iou = 2.0 * c.volume.iou / (1.0 + c.volume.iou);
            prop_assert!((c.volume.dsc - from_iou).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn counts_match_a_voxel_loop((pred, gt) in pair_strategy()) {
        let [nx, ny, nz] = gt.dims();
        for k in 0..gt.n_classes() as u16 {
            let c = confusion(&pred, &gt, k).unwrap();
            prop_assert_eq!(c.slices.len(), nz);
            let mut total = Counts::default();
            for z in 0..nz {
                let mut s = Counts::default();
                for y in 0..ny {
                    for x in 0..nx {
                        let (p, g) = (pred.get(x, y, z) == k, gt.get(x, y, z) == k);
                        s.tp += u64::from(p && g);
                        s.fp += u64::from(p && !g);
                        s.fn_ += u64::from(!p && g);
                    }
                }
                prop_assert_eq!(c.slices[z], s);
                total.tp += s.tp;
                total.fp += s.fp;
                total.fn_ += s.fn_;
            }
            prop_assert_eq!(c.total, total);
            prop_assert_eq!(metrics::dsc(&c.total), metrics::dsc(&total));
        }
    }

    #[test]
    fn atlas_priors_are_distributions_and_order_free(members in stack_strategy(1..6), by in 0usize..6, lambda in 0.0f64..1.0) {
        let d = deformed(&members);
        let a = build_atlas(&d).unwrap();
        let b = build_atlas(&rotate(&d, by)).unwrap();
        prop_assert_eq!(a.priors(), b.priors());
        prop_assert_eq!(a.mean_intensity(), b.mean_intensity());
        let r = a.regularize_prior(lambda).unwrap();
        let kc = a.n_channels();
        for (v, row) in r.priors().chunks_exact(kc).enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= lambda / kc as f64 - 1e-15));
            for k in 0..kc {
                let frac = members.iter().filter(|m| m.data()[v] == k as u16).count() as f64
                    / members.len() as f64;
                prop_assert!((a.prior(v)[k] - frac).abs() < 1e-12);
            }
        }
    }
}
