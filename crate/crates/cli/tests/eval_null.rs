use orca_cli::parse_config;
use orca_core::datasets::apply_open_world_split;
use orca_core::eval::{matched_accuracy, EvalConfig};
use orca_core::trainer::evaluate;
use orca_core::{Matrix, Model, Rng, SplitConfig};

/// An untrained model on classes that share one distribution should score
/// like a random relabeling of its own predictions.
#[test]
fn untrained_model_matches_the_permutation_null() {
    let cfg = parse_config("").unwrap();
    let mut rng = Rng::new(17);
    let (k, per_class) = (6, 100);
    let features = Matrix::from_vec(k * per_class, 2, (0..k * per_class * 2).map(|_| rng.normal()).collect()).unwrap();
    let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
    let ds = apply_open_world_split(features, labels, &SplitConfig::default()).unwrap();
    let model_cfg = cfg.model_config(ds.num_features(), ds.seen_classes.len(), ds.novel_classes.len());
    let model = Model::init(model_cfg, &mut Rng::new(11)).unwrap();
    let report = evaluate(&model, &ds, &EvalConfig::default()).unwrap();

    let idx = ds.unlabeled_indices();
    let x = ds.features.select_rows(&idx);
    let mut preds = model.predict(&x).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let observed = matched_accuracy(&preds, &labels).unwrap().accuracy;
    assert_eq!(observed, report.all_accuracy);

    let mut rng = Rng::new(5);
    let null: Vec<f64> = (0..300)
        .map(|_| {
            rng.shuffle(&mut preds);
            matched_accuracy(&preds, &labels).unwrap().accuracy
        })
        .collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    assert!((observed - mean).abs() <= 3.0 * sd, "observed {observed}, null {mean} ± {sd}");
}
