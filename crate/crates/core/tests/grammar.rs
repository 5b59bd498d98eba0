mod common;

use proptest::prelude::*;

use spatialvqa::lang::{parse, realize, CaptionType, Vocabulary, MAX_TOKENS};
use spatialvqa::seed;

#[test]
fn round_trip_ten_thousand_captions() {
    let vocab = Vocabulary::standard();
    let mut rng = seed::rng(31);
    let mut longest = 0;
    for i in 0..10_000 {
        let ty = CaptionType::ALL[i % 3];
        let caption = common::random_caption(&mut rng, ty, None);
        let words = realize(&caption);
        assert!(words.iter().all(|w| vocab.contains(w)), "{words:?}");
        assert_eq!(parse(&words).unwrap(), caption, "{}", words.join(" "));
        let encoded = vocab.encode(&words, MAX_TOKENS).unwrap();
        assert_eq!(vocab.decode(&encoded.ids[..encoded.len]).unwrap(), words);
        longest = longest.max(words.len());
    }
    assert!(longest <= MAX_TOKENS);
}

#[test]
fn every_vocabulary_word_is_reachable() {
    let vocab = Vocabulary::standard();
    let mut rng = seed::rng(8);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..20_000 {
        let caption = common::random_caption(&mut rng, CaptionType::ALL[i % 3], None);
        seen.extend(realize(&caption));
    }
    let missing: Vec<_> = vocab
        .words()
        .iter()
        .filter(|w| !seen.contains(w.as_str()) && vocab.id(w) != Some(0))
        .collect();
    assert!(missing.is_empty(), "never realized: {missing:?}");
}

#[test]
fn truncated_and_corrupted_captions_are_rejected() {
    let mut rng = seed::rng(4);
    for i in 0..500 {
        let caption = common::random_caption(&mut rng, CaptionType::ALL[i % 3], None);
        let words = realize(&caption);
        let cut = &words[..words.len() - 1];
        let err = parse(cut).unwrap_err();
        assert_eq!(err.position, cut.len() + 1);
        let mut extra = words.clone();
        extra.push("shape");
        assert!(parse(&extra).is_err());
    }
    assert_eq!(parse(&["a", "red", "dog"]).unwrap_err().position, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip_any_seed(s in any::<u64>(), t in 0usize..3) {
        let mut rng = seed::rng(s);
        let caption = common::random_caption(&mut rng, CaptionType::ALL[t], None);
        prop_assert_eq!(parse(&realize(&caption)).unwrap(), caption);
    }
}
