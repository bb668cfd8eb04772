use anyseg::data::{downsample_labels, generate_dataset, SceneConfig};
use anyseg::harness::{compute_miou, evaluate_anymodal, evaluate_with};
use anyseg::modality::Modality;
use anyseg::segmentor::{ModelShape, SegmentorParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// IoU of two independent random subsets of `n` items with inclusion
/// probability `p`, estimated by direct set sampling.
fn monte_carlo_set_iou(rng: &mut ChaCha8Rng, n: usize, p: f64, trials: usize) -> f64 {
    let mut total = 0.0;
    for _ in 0..trials {
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        total += inter as f64 / union.max(1) as f64;
    }
    total / trials as f64
}

#[test]
fn random_predictions_score_one_seventh() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let oracle = monte_carlo_set_iou(&mut rng, 4096, 0.25, 50);
    assert!((oracle - 1.0 / 7.0).abs() < 0.01, "{oracle}");
    let mut scores = Vec::new();
    for _ in 0..20 {
        let truth: Vec<u8> = (0..4096).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<u8> = (0..4096).map(|_| rng.random_range(0..4)).collect();
        scores.push(compute_miou(&pred, &truth, 4).unwrap().miou);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - oracle).abs() < 0.05, "{mean} vs {oracle}");
    assert!((mean - 1.0 / 7.0).abs() < 0.05);
}

#[test]
fn perfect_oracle_scores_one_everywhere() {
    let ds = generate_dataset(&SceneConfig::default(), 6, 3).unwrap();
    let k = ds.manifest.num_classes;
    let table = evaluate_with(&ds, |_, s| Ok(downsample_labels(&s.labels, s.height, s.width, 2, k))).unwrap();
    assert_eq!(table.rows.len(), 15);
    assert!(table.rows.iter().all(|r| r.result.miou == 1.0));
    assert_eq!(table.mean, 1.0);
}

#[test]
fn three_modalities_give_seven_rows_in_order() {
    let cfg = SceneConfig {
        modalities: vec![Modality::Frame, Modality::Event, Modality::Lidar],
        ..SceneConfig::default()
    };
    let ds = generate_dataset(&cfg, 2, 0).unwrap();
    let table = evaluate_with(&ds, |_, s| Ok(vec![0; s.labels.len() / 4])).unwrap();
    let labels: Vec<String> = table.rows.iter().map(|r| r.subset.label()).collect();
    assert_eq!(labels, ["F", "E", "L", "FE", "FL", "EL", "FEL"]);
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 1 + 7 + 1);
}

#[test]
fn bad_predictions_and_shapes_rejected() {
    let ds = generate_dataset(&SceneConfig::default(), 2, 0).unwrap();
    assert!(evaluate_with(&ds, |_, _| Ok(Vec::new())).is_err());
    assert!(evaluate_with(&ds, |_, s| Ok(vec![9; s.labels.len() / 4])).is_err());
    let shape = ModelShape {
        num_classes: 5,
        ..ModelShape::default()
    };
    let params = SegmentorParams::<f32>::init(&shape, 0).unwrap();
    assert!(evaluate_anymodal(&params, &ds).is_err());
}

#[test]
fn untrained_model_evaluates_every_subset() {
    let ds = generate_dataset(&SceneConfig::default(), 4, 0).unwrap();
    let params = SegmentorParams::<f32>::init(&ModelShape::default(), 1).unwrap();
    let table = evaluate_anymodal(&params, &ds).unwrap();
    assert_eq!(table.rows.len(), 15);
    assert!(table.rows.iter().all(|r| (0.0..=1.0).contains(&r.result.miou)));
    assert_eq!(table, evaluate_anymodal(&params, &ds).unwrap());
}
