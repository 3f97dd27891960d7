use std::io::Write;

use orca_core::datasets::{
    apply_open_world_split, generate_gaussian_mixture, load_dataset, load_tabular_csv, save_dataset,
    LabelColumn,
};
use orca_core::{Error, Model, ModelConfig, Rng, SplitConfig};

#[test]
fn dataset_container_round_trips_through_a_file() {
    let (x, y) = generate_gaussian_mixture(4, 3, 25, 5.0, 1.0, &mut Rng::new(1)).unwrap();
    let ds = apply_open_world_split(x, y, &SplitConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.owds");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"OWDS");

    let truncated = dir.path().join("t.owds");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_dataset(&truncated).is_err());
}

#[test]
fn checkpoint_round_trips_through_a_file() {
    let cfg = ModelConfig {
        input_dim: 3,
        hidden_dims: vec![5, 4],
        embed_dim: 3,
        num_seen_heads: 2,
        extra_head_capacity: 2,
        dropout_rate: 0.1,
        frozen_layers: vec![0],
    };
    let m = Model::init(cfg, &mut Rng::new(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save_checkpoint(&path).unwrap();
    let back = Model::load_checkpoint(&path).unwrap();
    assert_eq!(back.checkpoint_bytes().unwrap(), m.checkpoint_bytes().unwrap());
    assert_eq!(std::fs::read(&path).unwrap(), m.checkpoint_bytes().unwrap());
}

#[test]
fn csv_file_loads_and_reports_bad_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cells.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "g1,g2,cell_type").unwrap();
    writeln!(f, "0.5,1.0,B").unwrap();
    writeln!(f, "1.5,2.0,T").unwrap();
    writeln!(f, "2.5,3.0,B").unwrap();
    drop(f);
    let t = load_tabular_csv(&path, &LabelColumn::Name("cell_type".into()), true).unwrap();
    assert_eq!(t.labels, vec![0, 1, 0]);
    assert_eq!(t.class_names, vec!["B", "T"]);
    assert_eq!(t.feature_names, vec!["g1", "g2"]);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "g1,g2,y\n0.5,1.0,a\n1.5,x,b\n").unwrap();
    match load_tabular_csv(&bad, &LabelColumn::Index(2), true).unwrap_err() {
        Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
        other => panic!("unexpected {other}"),
    }
    assert!(matches!(
        load_tabular_csv(dir.path().join("missing.csv"), &LabelColumn::Index(0), true),
        Err(Error::Io(_))
    ));
}
