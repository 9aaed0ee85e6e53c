use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmtrack::geometry::{LabelMap, Lineage};
use mmtrack::metrics::{evaluate, Annotated, EvalConfig, EvalReport};
use mmtrack::simulator::{simulate, SimConfig};
use mmtrack::tracker::{run_pipeline, PipelineConfig};
use mmtrack::truth_maps::{corrupt_maps, truth_maps};

struct Case {
    gt: (Vec<LabelMap>, Lineage),
    pred: (Vec<LabelMap>, Lineage),
}

/// Ground truth and a prediction from heavily corrupted maps.
fn noisy_case(seed: u64, sigma: f64) -> Case {
    let cfg = SimConfig { frames: 40, seed, swim_probability: 0.1, render_noise: None, ..SimConfig::default() };
    let seq = simulate(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let (mut e, mut d, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for m in truth_maps(&seq.labels, &seq.lineage).unwrap() {
        let (em, dm) = corrupt_maps(&m.edm, &m.displacement, sigma, &mut rng).unwrap();
        e.push(em);
        d.push(dm);
        c.push(m.categories);
    }
    let out = run_pipeline(&e, &d, Some(&c), &PipelineConfig::default()).unwrap();
    Case { gt: (seq.labels, seq.lineage), pred: (out.labels, out.lineage) }
}

fn eval(gt: &(Vec<LabelMap>, Lineage), pred: &(Vec<LabelMap>, Lineage), cfg: &EvalConfig) -> EvalReport {
    evaluate(
        Annotated { labels: &gt.0, lineage: &gt.1 },
        Annotated { labels: &pred.0, lineage: &pred.1 },
        cfg,
    )
    .unwrap()
}

/// Same segmentation and links under a random per-frame renaming of ids.
fn relabel(x: &(Vec<LabelMap>, Lineage), seed: u64) -> (Vec<LabelMap>, Lineage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps: Vec<HashMap<u32, u32>> = x
        .1
        .frames
        .iter()
        .map(|cells| {
            let mut fresh: Vec<u32> = (1..=cells.len() as u32 + 5).collect();
            fresh.shuffle(&mut rng);
            cells.iter().zip(fresh).map(|(c, n)| (c.id, n)).collect()
        })
        .collect();
    let labels: Vec<LabelMap> = x.0.iter().zip(&maps).map(|(l, m)| l.map(|&v| if v == 0 { 0 } else { m[&v] })).collect();
    let inverse: Vec<HashMap<u32, u32>> = maps.iter().map(|m| m.iter().map(|(&a, &b)| (b, a)).collect()).collect();
    let lineage = Lineage::from_label_stack(&labels, |f, id| {
        let old = inverse[f][&id];
        x.1.parent(f, old).map(|p| maps[f - 1][&p])
    })
    .unwrap();
    (labels, lineage)
}

fn counts(r: &EvalReport) -> [usize; 5] {
    [r.counts.link, r.counts.division, r.counts.false_negative, r.counts.false_positive, r.counts.total]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn error_counts_ignore_label_ids(seed in 0u64..1000, sigma in 0.5f64..1.5) {
        let case = noisy_case(seed, sigma);
        let cfg = EvalConfig::default();
        let base = eval(&case.gt, &case.pred, &cfg);
        let renamed = eval(&relabel(&case.gt, seed + 7), &relabel(&case.pred, seed + 8), &cfg);
        prop_assert_eq!(counts(&base), counts(&renamed));
        prop_assert_eq!(base.gt_observations, renamed.gt_observations);
    }

    #[test]
    fn observation_bookkeeping(seed in 0u64..1000, sigma in 0.5f64..1.5) {
        let case = noisy_case(seed, sigma);
        let r = eval(&case.gt, &case.pred, &EvalConfig::default());
        prop_assert_eq!(r.counts.false_negative + r.matched + r.division_offset_gt, r.gt_observations);
        prop_assert_eq!(r.counts.false_positive + r.matched + r.division_offset_pred, r.pred_observations);
        let sum = r.percent.link + r.percent.division + r.percent.false_negative + r.percent.false_positive;
        prop_assert!((r.percent.total - sum).abs() < 1e-9);
    }

    #[test]
    fn shorter_exit_threshold_keeps_more_cells(seed in 0u64..1000, a in 0usize..80, b in 0usize..80) {
        let case = noisy_case(seed, 1.0);
        let (lo, hi) = (a.min(b), a.max(b));
        let at = |min_exit_length| eval(&case.gt, &case.pred, &EvalConfig { min_exit_length, ..EvalConfig::default() }).gt_observations;
        prop_assert!(at(lo) >= at(hi));
    }

    #[test]
    fn pipeline_lineages_have_single_parents(seed in 0u64..1000, sigma in 0.0f64..2.5) {
        let case = noisy_case(seed, sigma);
        prop_assert!(case.pred.1.validate().is_ok());
        for (f, child, parent) in case.pred.1.links() {
            prop_assert!(f >= 1);
            prop_assert!(case.pred.1.cell(f - 1, parent).is_some());
            prop_assert!(case.pred.1.cell(f, child).is_some());
        }
    }
}
