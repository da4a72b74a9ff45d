use attnsteer::ars::{aggregate, ars_score, rank_heads, ArsMatrix};
use attnsteer::harness::{generate_planted, PlantedParams};
use attnsteer::io::RunConfig;
use attnsteer::metrics::{number_ratios, row_ratios};
use attnsteer::model::TokenLayout;
use attnsteer::rve::{build_masks, compose_target, enhance_scores, selection_count};
use proptest::prelude::*;

fn positive_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter("non-zero", |v| v.iter().any(|&x| x > 1e-6))
}

fn pair_of_vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| (positive_vec(n..n + 1), positive_vec(n..n + 1)))
}

proptest! {
    #[test]
    fn ars_bounded_and_symmetric((a, b) in pair_of_vecs()) {
        let ab = ars_score(&a, &b).unwrap();
        let ba = ars_score(&b, &a).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() <= 1e-15 * ab.max(1.0));
    }

    #[test]
    fn ars_scale_invariant((a, b) in pair_of_vecs(), c in 0.01f64..100.0) {
        let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
        let base = ars_score(&a, &b).unwrap();
        prop_assert!((ars_score(&sa, &sb).unwrap() - base).abs() <= 1e-9 * base.max(1e-3));
    }

    #[test]
    fn ars_zero_only_for_equal((a, b) in pair_of_vecs()) {
        prop_assert_eq!(ars_score(&a, &a).unwrap(), 0.0);
        if a != b {
            prop_assert!(ars_score(&a, &b).unwrap() > 0.0);
        }
    }

    #[test]
    fn aggregation_ignores_pair_order(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 6), 1..8),
        seed in any::<u64>(),
    ) {
        let per_pair: Vec<_> = rows.iter().enumerate().map(|(i, r)| (format!("p{i:03}"), Ok(r.clone()))).collect();
        let mut shuffled: Vec<_> = rows.iter().enumerate().map(|(i, r)| (format!("p{i:03}"), Ok(r.clone()))).collect();
        let n = shuffled.len();
        shuffled.rotate_left((seed % n as u64) as usize);
        shuffled.reverse();
        let a = aggregate(2, 3, per_pair).unwrap();
        let b = aggregate(2, 3, shuffled).unwrap();
        prop_assert_eq!(a.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn head_sets_disjoint(scores in prop::collection::vec(0u8..4, 8), k in 1usize..5) {
        let m = ArsMatrix::from_scores(1, 8, scores.iter().map(|&s| f64::from(s)).collect()).unwrap();
        let sel = rank_heads(&m, 0, k).unwrap();
        prop_assert_eq!(sel.sensitive.len(), k);
        prop_assert_eq!(sel.non_sensitive.len(), k);
        prop_assert!(sel.sensitive.iter().all(|h| !sel.non_sensitive.contains(h)));
        let min_sens = sel.sensitive.iter().map(|&h| scores[h]).min().unwrap();
        let max_non = sel.non_sensitive.iter().map(|&h| scores[h]).max().unwrap();
        prop_assert!(min_sens >= max_non);
    }

    #[test]
    fn mask_algebra(
        (sens, non) in (1usize..80).prop_flat_map(|n| (
            prop::collection::vec((-3i8..3).prop_map(f64::from), n),
            prop::collection::vec((-3i8..3).prop_map(f64::from), n),
        )),
        alpha in 0.001f64..=1.0,
    ) {
        let ms = build_masks(&sens, &non, alpha).unwrap();
        let m = selection_count(alpha, sens.len());
        prop_assert_eq!(ms.enh.iter().filter(|&&b| b == 1).count(), m);
        prop_assert_eq!(ms.den.iter().filter(|&&b| b == 1).count(), m);
        prop_assert_eq!(&ms.target, &compose_target(&ms.enh, &ms.den).unwrap());
        // Every selected value is >= every unselected one.
        for (i, &e) in ms.enh.iter().enumerate() {
            for (j, &f) in ms.enh.iter().enumerate() {
                if e == 1 && f == 0 {
                    prop_assert!(sens[i] >= sens[j]);
                    if sens[i] == sens[j] { prop_assert!(i < j); }
                }
            }
        }
    }

    #[test]
    fn enhancement_is_monotone(
        s in prop::collection::vec(-5.0f64..5.0, 1..40),
        beta in 0.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let mask: Vec<u8> = (0..s.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let out = enhance_scores(&s, &mask, beta).unwrap();
        for ((o, v), m) in out.iter().zip(&s).zip(&mask) {
            if *m == 0 { prop_assert_eq!(o.to_bits(), v.to_bits()); } else { prop_assert!(o >= v); }
        }
        let zero = enhance_scores(&s, &mask, 0.0).unwrap();
        prop_assert_eq!(zero, s);
    }

    #[test]
    fn ratios_invariant_under_position_permutation(
        row in prop::collection::vec(0.0f64..1.0, 2..40),
        split in any::<prop::sample::Index>(),
        rot in any::<prop::sample::Index>(),
    ) {
        let n = row.len();
        let n_img = 1 + split.index(n - 1);
        let layout = TokenLayout::contiguous(0, n_img, n - n_img).unwrap();
        let (t, v) = row_ratios(&row, &layout).unwrap();
        // Rotate positions and carry the modality labels along.
        let r = rot.index(n);
        let perm: Vec<usize> = (0..n).map(|i| (i + r) % n).collect();
        let mut row2 = vec![0.0; n];
        let mut image = Vec::new();
        let mut text = Vec::new();
        for (i, &p) in perm.iter().enumerate() {
            row2[p] = row[i];
            if i < n_img { image.push(p) } else { text.push(p) }
        }
        text.sort_unstable();
        image.sort_unstable();
        let layout2 = TokenLayout::new(text, image).unwrap();
        let (t2, v2) = row_ratios(&row2, &layout2).unwrap();
        prop_assert!((t - t2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        if row.iter().sum::<f64>() > 0.0 {
            prop_assert!((t + v - 1.0).abs() < 1e-12);
        }
        let (nt, nv) = number_ratios(&layout2);
        prop_assert!((nt + nv - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_round_trips(alpha in 0.001f64..1.0, beta in 0.0f64..8.0, k in 1usize..5, seeds in prop::collection::vec(any::<u32>(), 1..5)) {
        let mut cfg = RunConfig::default();
        cfg.rve.alpha = alpha;
        cfg.rve.beta = beta;
        cfg.rve.k = k;
        cfg.seeds = seeds.into_iter().map(u64::from).collect();
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn planted_rows_are_partial_distributions(seed in any::<u64>(), noise in 0.0f64..0.05) {
        let params = PlantedParams { num_pairs: 2, num_layers: 3, num_heads: 8, num_sensitive_heads: 4, noise, seed, ..Default::default() };
        let data = generate_planted(&params).unwrap();
        prop_assert!(!data.planted_sensitive.is_empty());
        for inst in &data.instances {
            prop_assert!(!inst.planted_relevant.is_empty());
            for l in 0..3 {
                for h in 0..8 {
                    let (a, b) = inst.image_attention(l, h).unwrap();
                    for r in [a, b] {
                        prop_assert!(r.iter().all(|&x| x >= 0.0));
                        prop_assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }
}
