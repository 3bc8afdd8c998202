mod common;

use std::collections::HashMap;
use std::sync::Arc;

use poi_icl::dataset::{PoiId, PreparedDataset, SplitPolicy, TrajectoryId, DEFAULT_GAP};
use poi_icl::prompting::{
    audit_prompt, build_prompt, DemoOrder, PromptTemplate, RenderOptions, FEWSHOT_V1, LLM_MOB_V1,
};
use poi_icl::selection::{RankedDemos, ScoreDirection, Selector, StrategyKind, StrategySpec};
use poi_icl::synthetic::{generate, SyntheticConfig};

use common::{reference_fixture, NYC_OFFSET_MINUTES};

fn options(order: DemoOrder) -> RenderOptions {
    RenderOptions {
        offset_minutes: NYC_OFFSET_MINUTES,
        order,
    }
}

#[test]
fn golden_prompt_is_byte_identical() {
    let f = reference_fixture();
    let bundle = build_prompt(&f.task, &f.demos, &f.lookup, &FEWSHOT_V1, &options(DemoOrder::Ranked)).unwrap();
    let golden = include_str!("fixtures/reference_prompt.txt");
    assert_eq!(bundle.full_text, golden);
    assert_eq!(bundle.demo_count, 2);
    assert_eq!(bundle.target_poi_in_demos, 1);
    assert_eq!(bundle.template_version, "fewshot@1");
    assert_eq!(bundle.token_estimate, golden.chars().count().div_ceil(4));
    assert!(bundle.full_text.contains("(01:22 PM, Wednesday, 2436, Train Station)"));
    assert!(bundle.full_text.contains("<target>: (00:13 PM, Thursday, 3824, Department Store)"));
    assert!(bundle.full_text.contains("(00:39 PM, Wednesday, 480, Department Store)"));
}

#[test]
fn demo_order_options() {
    let f = reference_fixture();
    let first_target = |order| {
        let b = build_prompt(&f.task, &f.demos, &f.lookup, &FEWSHOT_V1, &options(order)).unwrap();
        audit_prompt(&b.full_text).demo_targets[0].poi
    };
    assert_eq!(first_target(DemoOrder::Ranked), Some(PoiId(3824)));
    assert_eq!(first_target(DemoOrder::ReverseRanked), Some(PoiId(55)));
    // Demo 2 (April 9) precedes demo 1 (April 11).
    assert_eq!(first_target(DemoOrder::Chronological), Some(PoiId(55)));
}

#[test]
fn zero_demos_and_missing_trajectory() {
    let f = reference_fixture();
    let none = RankedDemos::empty(ScoreDirection::HigherIsBetter);
    let b = build_prompt(&f.task, &none, &f.lookup, &FEWSHOT_V1, &options(DemoOrder::Ranked)).unwrap();
    assert_eq!(b.demo_count, 0);
    assert!(!b.full_text.contains("<context>:"));
    assert!(!b.full_text.contains("{{"));
    assert!(b.full_text.ends_with("<next_place_category>)\n"));

    let empty: HashMap<TrajectoryId, Arc<poi_icl::dataset::Trajectory>> = HashMap::new();
    assert!(build_prompt(&f.task, &f.demos, &empty, &FEWSHOT_V1, &options(DemoOrder::Ranked)).is_err());
}

#[test]
fn flat_history_layout() {
    let f = reference_fixture();
    let b = build_prompt(&f.task, &f.demos, &f.lookup, &LLM_MOB_V1, &options(DemoOrder::Ranked)).unwrap();
    assert!(!b.full_text.contains("<context>:"));
    let audit = audit_prompt(&b.full_text);
    assert_eq!(audit.history.len(), 6);
    // Flat history is chronological regardless of rank.
    assert_eq!(audit.history[0].poi, Some(PoiId(17)));
    assert_eq!(audit.target_current_blocks, 1);
    assert_eq!(b.target_poi_in_demos, 1);
}

/// Every prompt built over a synthetic corpus parses back to the selected
/// demonstrations, and the inclusion count matches a recount over the ranking.
#[test]
fn audit_round_trip_on_synthetic_prompts() {
    let cfg = SyntheticConfig {
        users: 40,
        ..Default::default()
    };
    let data = PreparedDataset::prepare("syn", generate(&cfg), DEFAULT_GAP, SplitPolicy::default(), 0).unwrap();
    let pool = data.all_pool();
    let selector = Selector::new(&pool);
    let template = PromptTemplate::by_id("fewshot@1").unwrap();
    for kind in [StrategyKind::Jaccard, StrategyKind::Lcs, StrategyKind::Random { seed: 3 }] {
        for k in [1, 5, 15] {
            let spec = StrategySpec::new(kind, false, k).unwrap();
            for task in &data.split.test_tasks {
                let ranked = selector.select(task, &spec).unwrap();
                let b = build_prompt(task, &ranked, &pool, &template, &RenderOptions::default()).unwrap();
                let audit = audit_prompt(&b.full_text);
                assert_eq!(audit.demo_count(), b.demo_count);
                assert_eq!(audit.context_current_blocks, 1);
                assert_eq!(audit.target_current_blocks, 1);

                let mut expected = Vec::new();
                let mut recount = 0;
                for id in ranked.ids() {
                    let t = pool.get(id).unwrap();
                    expected.extend(t.poi_ids());
                    recount += usize::from(t.last().poi == task.target_poi);
                }
                expected.extend(task.context.iter().map(|c| c.poi));
                assert_eq!(audit.poi_ids(), expected);
                assert_eq!(b.target_poi_in_demos, recount);
            }
        }
    }
}
