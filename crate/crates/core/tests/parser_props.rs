use forge_core::parser::{format_answer, parse, ParseOptions, ParsedAnswer};
use forge_core::task::TaskType;
use proptest::prelude::*;

fn strict() -> ParseOptions {
    ParseOptions {
        strict: true,
        ..ParseOptions::default()
    }
}

fn task() -> impl Strategy<Value = TaskType> {
    prop::sample::select(TaskType::ALL.to_vec())
}

fn answer() -> impl Strategy<Value = ParsedAnswer> {
    let unique_ids = |max: usize| {
        prop::collection::btree_set(0usize..40, 1..max)
            .prop_shuffle_ids()
    };
    prop_oneof![
        (0usize..100).prop_map(|index| ParsedAnswer::Choice { index }),
        unique_ids(8).prop_map(|ids| ParsedAnswer::RankedList { ids }),
        unique_ids(4).prop_map(|ids| ParsedAnswer::RetrievedSet { ids }),
        prop::collection::vec("[A-Za-z0-9][A-Za-z0-9 &-]{0,10}[A-Za-z0-9]", 0..4)
            .prop_map(|spans| ParsedAnswer::EntitySet { spans }),
        "[A-Za-z][A-Za-z0-9 ,.]{0,30}[A-Za-z]".prop_map(|text| ParsedAnswer::FreeText { text }),
    ]
}

trait ShuffleIds {
    fn prop_shuffle_ids(self) -> BoxedStrategy<Vec<usize>>;
}

impl<S: Strategy<Value = std::collections::BTreeSet<usize>> + 'static> ShuffleIds for S {
    fn prop_shuffle_ids(self) -> BoxedStrategy<Vec<usize>> {
        self.prop_map(|s| s.into_iter().collect::<Vec<_>>()).prop_shuffle().boxed()
    }
}

fn task_of(a: &ParsedAnswer) -> TaskType {
    match a {
        ParsedAnswer::Choice { .. } => TaskType::MultipleChoice,
        ParsedAnswer::RankedList { .. } => TaskType::Ranking,
        ParsedAnswer::RetrievedSet { .. } => TaskType::Retrieval,
        ParsedAnswer::EntitySet { .. } => TaskType::NamedEntityRecognition,
        ParsedAnswer::FreeText { .. } => TaskType::Generation,
    }
}

/// Text shaped like model output: digits, separators, wrappers and prefixes.
fn noisy() -> impl Strategy<Value = String> {
    "(Answer: |The answer is |answer=)?[\\[(\"]?[0-9A-Da-d ,;.]{0,16}[\\])\"]?[.!?]?"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn arbitrary_text_never_panics(t in task(), s in any::<String>(), n in prop::option::of(0usize..10), strict_mode in any::<bool>()) {
        let opts = ParseOptions { strict: strict_mode, ..ParseOptions::default() };
        let _ = parse(t, &s, n, &opts);
    }

    #[test]
    fn canonical_form_round_trips_in_strict_mode(a in answer()) {
        let out = parse(task_of(&a), &format_answer(&a), None, &strict());
        prop_assert_eq!(out.result, Ok(a));
        prop_assert!(out.recoveries.is_empty());
    }

    #[test]
    fn canonical_form_round_trips_in_permissive_mode(a in answer()) {
        let out = parse(task_of(&a), &format_answer(&a), None, &ParseOptions::default());
        prop_assert_eq!(out.result, Ok(a));
    }

    #[test]
    fn permissive_parse_is_idempotent(t in task(), s in noisy()) {
        let opts = ParseOptions::default();
        if let Ok(first) = parse(t, &s, None, &opts).result {
            let again = parse(t, &format_answer(&first), None, &opts);
            prop_assert_eq!(again.result, Ok(first));
        }
    }

    #[test]
    fn parsed_ids_respect_candidate_bound(t in prop::sample::select(vec![TaskType::MultipleChoice, TaskType::Ranking, TaskType::Retrieval]), s in noisy(), n in 1usize..6) {
        if let Ok(a) = parse(t, &s, Some(n), &ParseOptions::default()).result {
            let ids = match a {
                ParsedAnswer::Choice { index } => vec![index],
                ParsedAnswer::RankedList { ids } | ParsedAnswer::RetrievedSet { ids } => ids,
                _ => unreachable!(),
            };
            prop_assert!(ids.iter().all(|i| *i < n));
        }
    }

    #[test]
    fn ranked_ids_are_unique(s in noisy()) {
        if let Ok(ParsedAnswer::RankedList { ids }) = parse(TaskType::Ranking, &s, None, &ParseOptions::default()).result {
            let set: std::collections::BTreeSet<_> = ids.iter().collect();
            prop_assert_eq!(set.len(), ids.len());
        }
    }
}

#[test]
fn strict_mode_rejects_what_permissive_mode_recovers() {
    for (t, text) in [
        (TaskType::MultipleChoice, "Answer: 2."),
        (TaskType::MultipleChoice, "B"),
        (TaskType::Ranking, "[3, 1, 2]"),
        (TaskType::Retrieval, "The answer is 4, 0"),
    ] {
        assert!(parse(t, text, None, &strict()).is_failure(), "{text}");
        assert!(!parse(t, text, None, &ParseOptions::default()).is_failure(), "{text}");
    }
}

#[test]
fn retrieval_longer_than_three_fails() {
    assert!(parse(TaskType::Retrieval, "1, 2, 3, 4", None, &ParseOptions::default()).is_failure());
}
