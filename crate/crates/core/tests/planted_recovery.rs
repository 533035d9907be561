//! Planted-layer recovery: a single-block offset injected into the
//! with-history states must be located exactly, across seeds.

use factsteer::backend::toy::ToyBackend;
use factsteer::locator::{scan_layers, PlantedOffset, ScanOptions};
use factsteer::synth::planted_contrast_corpus;

#[test]
fn planted_offset_recovered_across_seeds() {
    for seed in 0..20u64 {
        let backend = ToyBackend::with_seed(seed).unwrap();
        let examples = planted_contrast_corpus(&backend, seed.wrapping_add(1000), 3);
        let opts = ScanOptions {
            plant: Some(PlantedOffset::seeded(3, 16, 4.0, seed)),
            ..ScanOptions::default()
        };
        let report = scan_layers(&examples, &backend, &opts).unwrap();
        assert_eq!(
            report.selected_layer, 3,
            "seed {seed} selected layer {}",
            report.selected_layer
        );
        // With identical prompts, the planted block is the only deviating
        // layer; every other delta is exactly zero.
        for scan in [&report.factual_degraded, &report.personalized_beneficial] {
            for row in &scan.per_layer {
                if row.layer == 3 {
                    assert!(row.delta > 0.0);
                } else {
                    assert!(row.delta.abs() < 1e-12, "layer {} delta {}", row.layer, row.delta);
                }
            }
        }
    }
}

#[test]
fn unplanted_scan_still_selects_some_layer() {
    let backend = ToyBackend::with_seed(7).unwrap();
    let mut examples = planted_contrast_corpus(&backend, 42, 3);
    // Give the with-prompts real history so natural deviation exists.
    for (i, example) in examples.iter_mut().enumerate() {
        example.prompt_with = format!("history block number {i} {}", example.prompt_without);
    }
    let report = scan_layers(&examples, &backend, &ScanOptions::default()).unwrap();
    assert!((1..=4).contains(&report.selected_layer));
    assert_eq!(report.fused_ranking.len(), 4);
    let csv = report.csv();
    assert!(csv.starts_with("layer,ppl_with,ppl_without,delta,group\n"));
    // 4 layers x 2 groups + header.
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn missing_group_is_named_in_error() {
    let backend = ToyBackend::with_seed(7).unwrap();
    let examples = planted_contrast_corpus(&backend, 1, 2);
    let only_pb: Vec<_> = examples
        .into_iter()
        .filter(|e| e.label == factsteer::contrast::Label::PersonalizedBeneficial)
        .collect();
    let err = scan_layers(&only_pb, &backend, &ScanOptions::default()).unwrap_err();
    assert!(err.to_string().contains("factual_degraded"));
}
