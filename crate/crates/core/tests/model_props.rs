use atlaseg::atlas::{build_atlas, warp_member, AtlasMember};
use atlaseg::bayes::{estimate_tissue_model, map_classify, map_voxel, ClassHistograms};
use atlaseg::em::{e_step, fit_em, m_step, EmConfig, GmmParams};
use atlaseg::{ClassMap, Grid, LabelVolume, ScalarVolume, TransformChain};
use proptest::prelude::*;

/// Image/label pairs on one grid in which every class occurs at least once.
fn training_strategy() -> impl Strategy<Value = Vec<(ScalarVolume, LabelVolume)>> {
    (prop::array::uniform3(2usize..6), 2usize..6, 1usize..4).prop_flat_map(|(d, kc, n)| {
        let g = Grid::unit(d);
        let pair = (
            prop::collection::vec(-100.0f64..100.0, g.len()),
            prop::collection::vec(0..kc as u16, g.len()),
        );
        prop::collection::vec(pair, n).prop_map(move |ps| {
            ps.into_iter()
                .enumerate()
                .map(|(i, (img, mut lab))| {
                    if i == 0 {
                        for (k, l) in lab.iter_mut().take(kc).enumerate() {
                            *l = k as u16;
                        }
                    }
                    (
                        ScalarVolume::new(g, img).unwrap(),
                        LabelVolume::new(g, lab, ClassMap::identity(kc)).unwrap(),
                    )
                })
                .collect()
        })
    })
}

fn mixture_strategy() -> impl Strategy<Value = (Vec<f64>, GmmParams<f64>)> {
    (1usize..5, 20usize..200).prop_flat_map(|(k, m)| {
        (
            prop::collection::vec(-5.0f64..5.0, m),
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(-5.0f64..5.0, k),
            prop::collection::vec(0.5f64..4.0, k),
        )
            .prop_map(|(x, w, mu, var)| {
                let s: f64 = w.iter().sum();
                let w = w.into_iter().map(|v| v / s).collect();
                (x, GmmParams::new(w, mu, var).unwrap())
            })
    })
}

fn normal(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tissue_model_rows_and_columns_are_distributions(train in training_strategy(), n_bins in 2usize..64) {
        let pairs: Vec<_> = train.iter().map(|(i, l)| (i, l)).collect();
        let h = ClassHistograms::accumulate(&pairs, n_bins).unwrap();
        let kc = h.class_map.len();
        let cols = h.normalized();
        for k in 0..kc {
            let s: f64 = (0..n_bins).map(|b| cols[b * kc + k]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let model = estimate_tissue_model(&pairs, n_bins).unwrap();
        for b in 0..n_bins {
            let s: f64 = model.row(b).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(model.likelihood_row(-1e9), model.row(0));
        prop_assert_eq!(model.likelihood_row(1e9), model.row(n_bins - 1));
    }

    #[test]
    fn posteriors_are_normalised_and_argmax_is_the_label(train in training_strategy(), lambda in 0.0f64..0.5) {
        let pairs: Vec<_> = train.iter().map(|(i, l)| (i, l)).collect();
        let model = estimate_tissue_model(&pairs, 16).unwrap();
        let grid = *train[0].0.grid();
        let deformed: Vec<_> = train
            .iter()
            .enumerate()
            .map(|(i, (img, lab))| {
                let m = AtlasMember::new(format!("s{i}"), img.clone(), lab.clone()).unwrap();
                warp_member(&m, &TransformChain::identity(), &grid).unwrap()
            })
            .collect();
        let atlas = build_atlas(&deformed).unwrap().regularize_prior(lambda).unwrap();
        let (labels, post) = map_classify(&atlas, &model, &train[0].0).unwrap();
        for v in 0..grid.len() {
            let row = post.row(v);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0 + 1e-15).contains(&p)));
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(row[labels.data()[v] as usize], top);
        }
    }

    #[test]
    fn map_label_ignores_positive_prior_rescaling(
        rows in (2usize..9).prop_flat_map(|kc| (
            prop::collection::vec(0.0f64..1.0, kc),
            prop::collection::vec(0.0f64..1.0, kc),
        )),
        scale in 1e-6f64..1e6,
    ) {
        let (prior, lik) = rows;
        let scaled: Vec<f64> = prior.iter().map(|p| p * scale).collect();
        let (mut a, mut b) = (vec![0.0; prior.len()], vec![0.0; prior.len()]);
        prop_assert_eq!(map_voxel(&prior, &lik, &mut a), map_voxel(&scaled, &lik, &mut b));
    }

    #[test]
    fn e_step_matches_direct_evaluation((x, p) in mixture_strategy()) {
        let k = p.n_components();
        let (w, ll) = e_step(&x, &p).unwrap();
        let mut want_ll = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let dens: Vec<f64> = (0..k).map(|c| p.weights[c] * normal(xi, p.means[c], p.variances[c])).collect();
            let s: f64 = dens.iter().sum();
            want_ll += s.ln();
            let row = &w[i * k..(i + 1) * k];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..k {
                prop_assert!((row[c] - dens[c] / s).abs() < 1e-12);
            }
        }
        prop_assert!((ll - want_ll).abs() <= 1e-12 * want_ll.abs().max(1.0), "{} vs {}", ll, want_ll);
    }

    #[test]
    fn em_keeps_weights_normalised_and_never_loses_likelihood((x, p) in mixture_strategy()) {
        let cfg = EmConfig { tol: 1e-10, max_iter: 200, ..EmConfig::default() };
        let st = fit_em(&x, p, &cfg).unwrap();
        prop_assert!((st.params.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = st.n_components();
        for row in st.memberships.chunks_exact(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for pair in st.log_likelihood.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0), "{:?}", pair);
        }
    }

    #[test]
    fn one_more_update_after_convergence_stays_within_tolerance((x, p) in mixture_strategy()) {
        let cfg = EmConfig { tol: 1e-8, max_iter: 5000, ..EmConfig::default() };
        let st = fit_em(&x, p, &cfg).unwrap();
        prop_assume!(st.converged);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let (next, _) = m_step(&x, &st.memberships, &st.params, cfg.variance_floor * var).unwrap();
        let (_, ll) = e_step(&x, &next).unwrap();
        let last = *st.log_likelihood.last().unwrap();
        prop_assert!((ll - last).abs() <= cfg.tol * last.abs(), "{} -> {}", last, ll);
    }
}
