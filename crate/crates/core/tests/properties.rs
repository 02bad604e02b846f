mod common;

use std::collections::{BTreeMap, HashMap};

use common::skewed_set;
use inflect_core::eval::{copy_baseline, exact_match, gold_forms, score_language, Comparison};
use inflect_core::sampler::{sampling_weights, upsample_plan, EpochPlan, SamplerConfig};
use inflect_core::{
    audit_split, extract_triples, group_by_lemma, materialize_split, parse_conllu_str, read_canonical, sample_split,
    write_canonical, ExtractOptions, SplitConfig, TripleSet, Vocab,
};
use proptest::prelude::*;

const LEMMAS: [&str; 5] = ["run", "dog", "be", "köln", "_"];
const FORMS: [&str; 5] = ["ran", "dogs", "was", "Köln", "_"];
const UPOS: [&str; 3] = ["VERB", "NOUN", "PUNCT"];
const FEATS: [&str; 4] = ["_", "Number=Plur", "Case=Gen|Number=Sing", "Tense=Past"];

fn conllu_text(sentences: &[Vec<(usize, usize, usize, usize)>]) -> String {
    let mut out = String::new();
    for (s, tokens) in sentences.iter().enumerate() {
        out.push_str(&format!("# sent_id = {s}\n"));
        if tokens.len() >= 2 {
            out.push_str(&format!("1-2\t{}{}\t_\t_\t_\t_\t_\t_\t_\t_\n", FORMS[tokens[0].1], FORMS[tokens[1].1]));
        }
        for (i, &(l, f, u, x)) in tokens.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}\t_\t{}\t0\tdep\t_\t_\n", i + 1, FORMS[f], LEMMAS[l], UPOS[u], FEATS[x]));
        }
        out.push('\n');
    }
    out
}

fn independent_counts(sentences: &[Vec<(usize, usize, usize, usize)>]) -> HashMap<(String, String, String), u64> {
    let mut counts = HashMap::new();
    for &(l, f, u, x) in sentences.iter().flatten() {
        if LEMMAS[l] == "_" || FORMS[f] == "_" {
            continue;
        }
        let mut tags = format!("UPOS={}", UPOS[u]);
        if FEATS[x] != "_" {
            tags.push(';');
            tags.push_str(&FEATS[x].replace('|', ";"));
        }
        *counts.entry((LEMMAS[l].to_owned(), tags, FORMS[f].to_owned())).or_insert(0) += 1;
    }
    counts
}

fn sentences() -> impl Strategy<Value = Vec<Vec<(usize, usize, usize, usize)>>> {
    proptest::collection::vec(proptest::collection::vec((0..5usize, 0..5usize, 0..3usize, 0..4usize), 1..8), 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn extraction_conserves_token_mass(sents in sentences()) {
        let parsed = parse_conllu_str(&conllu_text(&sents)).unwrap();
        let set = extract_triples(&parsed, "xx", &ExtractOptions::default());
        let expected = independent_counts(&sents);
        prop_assert_eq!(set.total_token_mass(), expected.values().sum::<u64>());
        prop_assert_eq!(set.len(), expected.len());
        for t in set.iter() {
            let key = (t.lemma.to_owned(), t.tag_string.to_owned(), t.form.to_owned());
            prop_assert_eq!(Some(&t.count), expected.get(&key));
        }
    }

    #[test]
    fn canonical_tsv_round_trips(seed in any::<u64>(), n in 1usize..60) {
        let set = skewed_set(seed, n);
        let mut bytes = Vec::new();
        write_canonical(&set, &mut bytes).unwrap();
        let back = read_canonical(bytes.as_slice(), "xx").unwrap();
        prop_assert_eq!(&back, &set);
        let mut again = Vec::new();
        write_canonical(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn vocab_text_round_trips(seed in any::<u64>(), n in 1usize..40) {
        let set = skewed_set(seed, n);
        let vocab = Vocab::build(&[&set]).unwrap();
        let back = Vocab::from_text(&vocab.to_text()).unwrap();
        prop_assert_eq!(back.digest(), vocab.digest());
        prop_assert_eq!(back, vocab);
    }

    #[test]
    fn group_masses_partition_total(seed in any::<u64>(), n in 1usize..80) {
        let set = skewed_set(seed, n);
        let groups = group_by_lemma(&set).unwrap();
        let mut by_lemma: BTreeMap<String, (u64, usize)> = BTreeMap::new();
        for t in set.iter() {
            let e = by_lemma.entry(t.lemma.to_owned()).or_default();
            e.0 += t.count;
            e.1 += 1;
        }
        prop_assert_eq!(groups.len(), by_lemma.len());
        for g in &groups {
            prop_assert_eq!(by_lemma[&g.lemma], (g.mass, g.types));
        }
        prop_assert_eq!(groups.iter().map(|g| g.mass).sum::<u64>(), set.total_token_mass());
    }

    #[test]
    fn splits_are_disjoint_and_conserving(seed in any::<u64>(), n in 3usize..120, split_seed in any::<u64>(), a in 1u32..10, b in 1u32..10, c in 1u32..10) {
        let set = skewed_set(seed, n);
        let total = f64::from(a + b + c);
        let config = SplitConfig {
            mass_ratios: [f64::from(a) / total, f64::from(b) / total, 1.0 - f64::from(a + b) / total],
            seed: split_seed,
            min_lemmas_per_split: 1,
        };
        let groups = group_by_lemma(&set).unwrap();
        let assignment = sample_split(&groups, "xx", &config).unwrap();
        let report = audit_split(&assignment, &set).unwrap();
        prop_assert!(report.passed(), "{}", report);
        let parts = materialize_split(&assignment, &set);
        let mut union = TripleSet::new("xx");
        for p in &parts {
            prop_assert!(!p.is_empty());
            for t in p.iter() {
                union.insert(&t.to_triple("xx")).unwrap();
            }
        }
        prop_assert_eq!(union, set);
        let again = sample_split(&groups, "xx", &config).unwrap();
        prop_assert_eq!(again, assignment);
    }

    #[test]
    fn exact_match_ignores_item_order(pairs in proptest::collection::vec(("[ab]{0,3}", "[ab]{0,3}"), 1..40), rot in 0usize..40) {
        let (p, g): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        p2.rotate_left(k);
        g2.rotate_left(k);
        p2.reverse();
        g2.reverse();
        prop_assert_eq!(exact_match(&p, &g).unwrap(), exact_match(&p2, &g2).unwrap());
    }

    #[test]
    fn copy_accuracy_matches_direct_count(seed in any::<u64>(), n in 1usize..80) {
        let set = skewed_set(seed, n);
        let copies = set.iter().filter(|t| t.lemma == t.form).count();
        let expected = 100.0 * copies as f64 / set.len() as f64;
        let score = score_language(&set, &gold_forms(&set), Comparison::Bytes).unwrap();
        prop_assert_eq!(score.copy_accuracy, expected);
        prop_assert_eq!(score.accuracy, 100.0);
        prop_assert_eq!(exact_match(&copy_baseline(&set), &gold_forms(&set)).unwrap(), expected);
    }

    #[test]
    fn sampling_weights_normalize(sizes in proptest::collection::vec(1usize..100_000, 1..6), m in 0.0f64..=1.0) {
        let corpora: BTreeMap<String, usize> = sizes.iter().enumerate().map(|(i, &n)| (format!("l{i}"), n)).collect();
        let q = sampling_weights(&corpora, m).unwrap();
        prop_assert!((q.values().sum::<f64>() - 1.0).abs() < 1e-12);
        let plan = upsample_plan(&corpora, m).unwrap();
        prop_assert!(plan.values().all(|&r| r >= 1));
    }

    #[test]
    fn epochs_cover_the_pool_once(seed in any::<u64>(), n in 1usize..40, batch in 1usize..16, epoch in 0u64..5) {
        let set = skewed_set(seed, n);
        let vocab = Vocab::build(&[&set]).unwrap();
        let plan = EpochPlan::new(&[&set], &vocab, SamplerConfig { temperature: 0.5, batch_size: batch, seed }).unwrap();
        let batches = plan.batches(epoch);
        prop_assert_eq!(batches.len(), plan.batches_per_epoch());
        prop_assert_eq!(batches.iter().map(|b| b.size).sum::<usize>(), plan.pool_len());
        let mut order = plan.epoch_order(epoch);
        order.sort_unstable();
        prop_assert_eq!(order, (0..plan.pool_len()).collect::<Vec<_>>());
        prop_assert_eq!(plan.batches(epoch), batches);
    }
}
