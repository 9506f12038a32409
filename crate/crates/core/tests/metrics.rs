use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use cetp::hkg::{NodeKind, NodeRegistry};
use cetp::metrics::*;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn token_seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..12)
}

proptest! {
    #[test]
    fn bleu_and_rouge_stay_in_range(pairs in prop::collection::vec((token_seq(), token_seq()), 1..6)) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        for n in 1..=4 {
            let b = bleu(&c, &r, n).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        }
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            let x = rouge(&c, &r, v).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        }
    }

    #[test]
    fn identical_text_scores_perfectly(seqs in prop::collection::vec(prop::collection::vec(0u8..6, 1..12), 1..5)) {
        prop_assert!((bleu(&seqs, &seqs, 4).unwrap() - 100.0).abs() < 1e-9);
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            prop_assert!((rouge(&seqs, &seqs, v).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ecr_is_a_percentage_and_self_match_is_full(
        review in prop::collection::vec(prop::collection::vec(0u8..8, 0..5), 1..5),
        other in prop::collection::vec(prop::collection::vec(0u8..8, 0..5), 1..5),
    ) {
        if let Some(e) = ecr(&[review.clone()], &[other]).unwrap() {
            prop_assert!((0.0..=100.0).contains(&e));
        }
        match ecr(&[review.clone()], &[review.clone()]).unwrap() {
            Some(e) => prop_assert_eq!(e, 100.0),
            None => prop_assert!(entity_pairs(&review).is_empty()),
        }
    }

    #[test]
    fn mae_never_exceeds_rmse(
        gen in prop::collection::vec(prop::collection::vec(0u8..10, 0..5), 1..20),
        gold in prop::collection::vec(prop::collection::vec(0u8..10, 1..5), 1..20),
        k in 1usize..12,
    ) {
        let (mae, rmse) = match schema_distribution_error(&gen, &gold, k) {
            Ok(x) => x,
            Err(_) => return Ok(()),
        };
        prop_assert!(mae <= rmse + 1e-15);
        prop_assert!(mae >= 0.0);
        let (mae, rmse) = schema_distribution_error(&gold, &gold, k).unwrap();
        prop_assert_eq!((mae, rmse), (0.0, 0.0));
    }

    #[test]
    fn frequencies_are_distributions(
        gen in prop::collection::vec(prop::collection::vec(0u8..10, 1..5), 1..20),
        gold in prop::collection::vec(prop::collection::vec(0u8..10, 1..5), 1..20),
        k in 1usize..12,
    ) {
        let (labels, g, o) = schema_frequencies(&gen, &gold, k).unwrap();
        prop_assert_eq!(labels.len(), g.len());
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(labels.iter().filter(|l| l.is_some()).count() <= k);
    }

    #[test]
    fn total_variation_is_a_bounded_symmetric_distance(
        a in prop::collection::vec(prop::collection::vec("[abc]", 0..4), 1..10),
        b in prop::collection::vec(prop::collection::vec("[abc]", 0..4), 1..10),
    ) {
        let p = bigram_distribution(&a, "START", "STOP");
        let q = bigram_distribution(&b, "START", "STOP");
        let d = total_variation(&p, &q);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!((d - total_variation(&q, &p)).abs() < 1e-15);
        prop_assert!(total_variation(&p, &p) == 0.0);
        prop_assert!((p.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn corpus_bleu_pools_counts_before_dividing() {
    // pooled 2/4; averaging per sentence would give (1 + 1/3) / 2
    let c = vec![words("a"), words("b c d")];
    let r = vec![words("a"), words("b x y")];
    let pooled = 100.0 * 2.0 / 4.0;
    assert!((bleu(&c, &r, 1).unwrap() - pooled).abs() < 1e-12);
}

#[test]
fn mismatched_or_empty_corpora_are_errors() {
    let one = vec![words("a b")];
    assert!(bleu(&one, &[], 4).is_err());
    assert!(bleu::<String>(&[], &[], 4).is_err());
    assert!(rouge(&one, &[one[0].clone(), one[0].clone()], RougeVariant::L).is_err());
    assert!(ecr::<u8>(&[], &[]).is_err());
    assert_eq!(bleu(&[Vec::<String>::new()], &one, 4).unwrap(), 0.0);
}

#[test]
fn ecr_is_undefined_without_candidate_pairs() {
    let cand = vec![vec![vec![1u8], vec![2]]];
    let refs = vec![vec![vec![1u8, 2]]];
    assert_eq!(ecr(&cand, &refs).unwrap(), None);
}

#[test]
fn ecr_counts_pairs_once_per_review() {
    // the (1, 2) pair appears in two candidate sentences but is one pair
    let cand = vec![vec![vec![1u8, 2], vec![2, 1], vec![1, 3]]];
    let refs = vec![vec![vec![1u8, 2, 4]]];
    assert_eq!(ecr(&cand, &refs).unwrap(), Some(50.0));
}

#[test]
fn surface_matching_prefers_the_longest_name() {
    let mut reg = NodeRegistry::new();
    let york = reg.register("new_york", NodeKind::Entity).unwrap();
    let city = reg.register("new_york_city", NodeKind::Entity).unwrap();
    let item = reg.register("heat", NodeKind::Item).unwrap();
    reg.register("great", NodeKind::Keyword).unwrap();
    let m = SurfaceMatcher::new(&reg);
    let got = m.annotate(&words("heat was great in new york city and new york"));
    assert_eq!(got, vec![item, city, york]);
}

#[test]
fn sen_sim_averages_pairwise_cosines() {
    let table: HashMap<String, Vec<f64>> = [
        ("x".to_string(), vec![1.0, 0.0]),
        ("y".to_string(), vec![0.0, 1.0]),
    ]
    .into_iter()
    .collect();
    let embed = |s: &[String]| mean_word_embedding(&table, 2, s);
    let review = vec![words("x"), words("y"), words("x y")];
    // cos(x,y)=0, cos(x,xy)=cos(y,xy)=1/sqrt(2)
    let want = (0.0 + 2.0 / 2f64.sqrt()) / 3.0;
    assert!((sen_sim(&review, &embed).unwrap() - want).abs() < 1e-12);
    assert_eq!(sen_sim(&[words("x")], &embed), None);
    assert_eq!(sen_sim(&[words("q"), words("x")], &embed), None);
    let corpus = vec![review, vec![words("x")], vec![words("x"), words("x")]];
    assert!((sen_sim_corpus(&corpus, &embed).unwrap() - (want + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn other_bucket_appears_only_with_mass_outside_top_k() {
    let gold = vec![vec![1u8, 2], vec![1]];
    let (labels, _, _) = schema_frequencies(&gold, &gold, 2).unwrap();
    assert_eq!(labels, vec![Some(1), Some(2)]);
    let gen = vec![vec![1u8, 3]];
    let (labels, g, o) = schema_frequencies(&gen, &gold, 2).unwrap();
    assert_eq!(labels, vec![Some(1), Some(2), None]);
    assert_eq!(g, vec![0.5, 0.0, 0.5]);
    assert_eq!(o, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
}

#[test]
fn bigram_distribution_wraps_each_plan() {
    let plans = vec![vec!["a".to_string()], vec![]];
    let d = bigram_distribution(&plans, "S", "T");
    let want: BTreeMap<(String, String), f64> = [
        (("S".to_string(), "a".to_string()), 1.0 / 3.0),
        (("a".to_string(), "T".to_string()), 1.0 / 3.0),
        (("S".to_string(), "T".to_string()), 1.0 / 3.0),
    ]
    .into_iter()
    .collect();
    assert_eq!(d, want);
}

#[test]
fn bootstrap_detects_a_consistent_gap() {
    let a: Vec<f64> = (0..40).map(|i| 1.0 + (i % 5) as f64 * 0.1).collect();
    let b: Vec<f64> = a.iter().map(|x| x - 0.3).collect();
    let r = paired_bootstrap(&a, &b, 500, 1).unwrap();
    assert!((r.mean_diff - 0.3).abs() < 1e-12);
    assert_eq!(r.p_value, 0.0);
    assert!(r.ci_low <= r.mean_diff && r.mean_diff <= r.ci_high);
    assert_eq!(r, paired_bootstrap(&a, &b, 500, 1).unwrap());
    assert!(paired_bootstrap(&a, &b[1..], 10, 1).is_err());
}

#[test]
fn report_writes_missing_values_as_na() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_report(&path, &[("bleu4".into(), Some(12.5)), ("ecr".into(), None)]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "metric,value");
    assert!(lines[1].starts_with("bleu4,12.5"));
    assert_eq!(lines[2], "ecr,n/a");
}

#[test]
fn histogram_has_one_bar_per_label_and_series() {
    let svg = schema_histogram_svg(&["a<b".into(), "c".into()], &[0.5, 0.5], &[0.25, 0.75]);
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("a&lt;b"));
    assert!(svg.matches("<rect").count() >= 4);
}
