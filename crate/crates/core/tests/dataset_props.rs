mod common;

use std::collections::BTreeMap;
use std::sync::LazyLock;

use common::{esci_groups, seed_data};
use forge_core::dataset::builders::{build_esci_mc, build_esci_ranking};
use forge_core::dataset::registry::{recipe, RecipeStatus, RECIPES};
use forge_core::dataset::{build_dataset, emit_jsonl, BuildConfig, DatasetError, EsciLabel, Prompts, SeedData, TrainingSample};
use forge_core::parser::{parse, ParseOptions, ParsedAnswer};
use forge_core::router::Router;
use forge_core::task::TaskType;
use proptest::prelude::*;
use regex::Regex;

static FULL: LazyLock<Vec<TrainingSample>> =
    LazyLock::new(|| build_dataset(&seed_data(), &BuildConfig::default(), &Prompts::bundled()).unwrap().0);

static OPTION_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^[0-9]+\. ").unwrap());

fn listed_options(prompt: &str) -> usize {
    OPTION_LINE.find_iter(prompt).count()
}

#[test]
fn every_recipe_produces_samples_from_fixtures() {
    let per_recipe: BTreeMap<u32, usize> = FULL.iter().fold(BTreeMap::new(), |mut m, s| {
        *m.entry(s.recipe_id).or_default() += 1;
        m
    });
    for info in RECIPES.iter().filter(|r| r.status == RecipeStatus::Implemented) {
        assert!(per_recipe.get(&info.id).copied().unwrap_or(0) > 0, "recipe {} built nothing", info.id);
    }
}

#[test]
fn samples_carry_registry_task_type() {
    for s in FULL.iter() {
        assert_eq!(s.task_type, recipe(s.recipe_id).unwrap().task_type, "recipe {}", s.recipe_id);
    }
}

#[test]
fn answers_parse_within_listed_options() {
    let strict = ParseOptions {
        strict: true,
        ..ParseOptions::default()
    };
    for s in FULL.iter() {
        let n = listed_options(&s.prompt);
        let bound = (n > 0).then_some(n);
        let out = parse(s.task_type, &s.answer, bound, &strict);
        assert!(!out.is_failure(), "recipe {}: {:?} with {n} options", s.recipe_id, s.answer);
    }
}

#[test]
fn ranking_answers_are_permutations_of_the_options() {
    for s in FULL.iter().filter(|s| s.task_type == TaskType::Ranking) {
        let Some(ParsedAnswer::RankedList { ids }) = parse(s.task_type, &s.answer, None, &ParseOptions::default()).result.ok() else {
            panic!("unparsed ranking answer {:?}", s.answer);
        };
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..listed_options(&s.prompt)).collect::<Vec<_>>(), "recipe {}", s.recipe_id);
    }
}

#[test]
fn prompts_route_to_their_own_task_type() {
    let router = Router::default();
    for s in FULL.iter() {
        assert_eq!(router.classify(&s.prompt, ""), s.task_type, "recipe {}: {}", s.recipe_id, s.prompt);
    }
}

#[test]
fn rating_answers_follow_fixture_ratings() {
    let data = seed_data();
    let mut expected = [0usize; 5];
    for r in data.reviews.as_ref().unwrap() {
        expected[r.rating as usize - 1] += 1;
    }
    let mut got = [0usize; 5];
    for s in FULL.iter().filter(|s| s.recipe_id == 7) {
        got[s.answer.parse::<usize>().unwrap()] += 1;
    }
    assert_eq!(got, expected);
}

#[test]
fn jsonl_lines_have_exactly_four_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    emit_jsonl(&FULL, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), FULL.len());
    for line in text.lines() {
        let v: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.keys().map(String::as_str).collect();
        assert_eq!(keys, ["answer", "prompt", "recipe_id", "task_type"]);
    }
}

#[test]
fn seed_changes_output_but_not_counts() {
    let a = build_dataset(&seed_data(), &BuildConfig::default(), &Prompts::bundled()).unwrap();
    let b = build_dataset(&seed_data(), &BuildConfig { seed: 7, ..BuildConfig::default() }, &Prompts::bundled()).unwrap();
    assert_eq!(a.1, b.1);
    assert_ne!(a.0, b.0);
}

#[test]
fn stub_recipes_report_their_reason() {
    let data = seed_data();
    let run = |id| build_dataset(&data, &BuildConfig { recipes: vec![id], ..BuildConfig::default() }, &Prompts::bundled());
    assert!(matches!(run(26), Err(DatasetError::RequiresGenerator(26))));
    assert!(matches!(run(1), Err(DatasetError::RequiresGenerator(1))));
    assert!(matches!(run(16), Err(DatasetError::SourceUnavailable(16))));
    assert!(matches!(run(39), Err(DatasetError::UnknownRecipe(39))));
    assert_eq!(run(26).unwrap_err().to_string(), "recipe 26 requires external generator");
}

#[test]
fn missing_seed_data_is_reported() {
    let err = build_dataset(&SeedData::default(), &BuildConfig { recipes: vec![29], ..BuildConfig::default() }, &Prompts::bundled())
        .unwrap_err();
    assert!(matches!(err, DatasetError::MissingSeedData { recipe: 29, .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn esci_mc_has_one_exact_option(seed in any::<u64>(), group in 0usize..40, k in 2usize..5) {
        let groups = esci_groups();
        let g = &groups[group % groups.len()];
        if let Ok(mc) = build_esci_mc(g, seed, k, &Prompts::bundled()) {
            let answer: usize = mc.sample.answer.parse().unwrap();
            prop_assert_eq!(mc.option_labels.len(), k);
            prop_assert_eq!(mc.option_labels[answer], EsciLabel::E);
            prop_assert_eq!(mc.option_labels.iter().filter(|l| **l == EsciLabel::E).count(), 1);
            prop_assert_eq!(listed_options(&mc.sample.prompt), k);
        }
    }

    #[test]
    fn esci_ranking_orders_labels_by_priority(seed in any::<u64>(), group in 0usize..40) {
        let groups = esci_groups();
        let g = &groups[group % groups.len()];
        let s = build_esci_ranking(g, seed, &Prompts::bundled()).unwrap();
        let ids: Vec<usize> = s.answer.split(", ").map(|x| x.parse().unwrap()).collect();
        prop_assert_eq!(ids.len(), g.len());
        let titles: Vec<&str> = OPTION_LINE.split(&s.prompt).skip(1).map(|t| t.lines().next().unwrap()).collect();
        let label_of = |i: usize| g.iter().find(|r| r.title == titles[i]).unwrap().esci_label.priority();
        for w in ids.windows(2) {
            prop_assert!(label_of(w[0]) <= label_of(w[1]));
        }
    }
}
