use proptest::prelude::*;

use ppvae_core::corpus::{build_vocabulary, encode_text, LengthLabel, TokenSequence, PAD, SPECIALS};
use ppvae_core::evaluation::{accuracy_log_variance, distinct_n, length_accuracy, LogVariance};
use ppvae_core::latent::{kl_to_standard_normal, GaussianPosterior};
use ppvae_core::plugin::{beta_at, PluginConfig, PluginVae};
use ppvae_core::rng;
use ppvae_core::tensor::Mat;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..10)
}

fn texts() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(words().prop_map(|w| w.join(" ")), 1..15)
}

proptest! {
    #[test]
    fn kl_is_non_negative(rows in prop::collection::vec((-5.0f64..5.0, -6.0f64..3.0), 1..20)) {
        let mean = Mat::from_vec(rows.len(), 1, rows.iter().map(|r| r.0).collect()).unwrap();
        let lv = Mat::from_vec(rows.len(), 1, rows.iter().map(|r| r.1).collect()).unwrap();
        let post = GaussianPosterior::new(mean, lv).unwrap();
        prop_assert!(kl_to_standard_normal(&post).iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn capacity_term_is_non_negative_and_matches_kl_at_zero_beta(
        bias in prop::collection::vec(-3.0f64..3.0, 3),
        beta in 0.0f64..10.0,
    ) {
        let mut p = PluginVae::<f64>::new(PluginConfig { d_c: 3, ..Default::default() }, 6).unwrap();
        p.store.zero_all();
        let id = p.store.find("enc.mean.bias").unwrap();
        p.store.get_mut(id).data_mut().copy_from_slice(&bias);
        let v = Mat::<f64>::zeros(2, 6);
        let noise = Mat::<f64>::zeros(2, 3);
        let kl = 0.5 * bias.iter().map(|b| b * b).sum::<f64>();
        let at_zero = p.loss_single(&v, 0.0, &noise).unwrap();
        let at_beta = p.loss_single(&v, beta, &noise).unwrap();
        prop_assert!((at_zero - kl).abs() < 1e-12);
        prop_assert!(at_beta >= 0.0);
        prop_assert!((at_beta - (kl - beta).abs()).abs() < 1e-12);
    }

    #[test]
    fn beta_schedule_is_monotone_and_clamped(a in 0usize..40_000, b in 0usize..40_000, warm in 1usize..20_000) {
        let c = PluginConfig { beta_warmup_iters: warm, ..Default::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(beta_at(lo, &c) <= beta_at(hi, &c));
        prop_assert!((0.0..=c.beta_max).contains(&beta_at(a, &c)));
    }

    #[test]
    fn distinct_is_a_fraction(t in texts(), n in 1usize..4) {
        if let Ok(d) = distinct_n(&t, n) {
            prop_assert!(d > 0.0 && d <= 1.0);
        }
    }

    #[test]
    fn duplicating_a_text_never_raises_distinct(t in texts(), pick in any::<prop::sample::Index>(), n in 1usize..4) {
        let Ok(before) = distinct_n(&t, n) else { return Ok(()) };
        let mut more = t.clone();
        more.push(t[pick.index(t.len())].clone());
        prop_assert!(distinct_n(&more, n).unwrap() <= before + 1e-12);
    }

    #[test]
    fn length_bins_partition_the_texts(t in prop::collection::vec(words().prop_filter("non-empty", |w| !w.is_empty()), 1..30)) {
        let joined: Vec<String> = t.iter().map(|w| w.join(" ")).collect();
        let total: f64 = LengthLabel::ALL
            .into_iter()
            .map(|l| length_accuracy(&joined, l).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_variance_ignores_order(accs in prop::collection::vec(0.0f64..1.0, 2..10), seed in any::<u64>()) {
        let mut shuffled = accs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng::stream(seed, "shuffle"));
        match (accuracy_log_variance(&accs).unwrap(), accuracy_log_variance(&shuffled).unwrap()) {
            (LogVariance::Value(a), LogVariance::Value(b)) => prop_assert!((a - b).abs() < 1e-9),
            (LogVariance::AllEqual, LogVariance::AllEqual) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn specials_keep_their_ids(
        corpus in prop::collection::vec(words(), 1..20).prop_filter("has tokens", |c| c.iter().any(|w| !w.is_empty())),
        cap in 5usize..12,
    ) {
        let vocab = build_vocabulary(&corpus, cap).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            prop_assert_eq!(vocab.id(s), Some(i));
        }
        for w in &corpus {
            let seq: TokenSequence = encode_text(w, &vocab, 15);
            prop_assert!(seq.ids().iter().all(|&id| id != PAD && id < vocab.len()));
        }
    }
}
