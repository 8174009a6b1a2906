mod common;

use slp_harness::checkpoint::Checkpoint;
use slp_harness::evaluate::evaluate;
use slp_harness::sweep::{sweep, Axis};
use slp_harness::train::build_model;

#[test]
fn axis_parsing() {
    let a = Axis::parse("model.iterations=3,5,10").unwrap();
    assert_eq!(a.key, "model.iterations");
    assert_eq!(a.values, ["3", "5", "10"]);
    assert!(Axis::parse("iterations=3").is_err());
    assert!(Axis::parse("model.iterations").is_err());
    assert!(Axis::parse("model.iterations=3,,5").is_err());
}

#[test]
fn one_by_one_grid_has_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_config(dir.path(), &["training.steps=1"]);
    let rows = Axis::parse("slp.t_spat=1").unwrap();
    let table = sweep(
        &config,
        &rows,
        None,
        1,
        "fg_ari",
        &common::dataset(12, 1),
        &common::dataset(6, 2),
    )
    .unwrap();
    assert_eq!(table.cells.len(), 1);
    assert_eq!(table.cells[0].len(), 1);
    assert_eq!(table.cells[0][0].per_seed.len(), 1);
    assert_eq!(table.to_text().lines().count(), 1);
}

#[test]
fn cells_match_their_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_config(dir.path(), &["training.steps=2", "slp.t_spat=1"]);
    let rows = Axis::parse("model.iterations=1,2").unwrap();
    let cols = Axis::parse("slp.enabled=false,true").unwrap();
    let eval = common::dataset(6, 2);
    let table = sweep(&config, &rows, Some(&cols), 2, "fg_ari", &common::dataset(12, 1), &eval).unwrap();
    assert_eq!(table.cells.len(), 2);
    assert!(table.cells.iter().all(|r| r.len() == 2));
    assert_eq!(table.to_text().lines().count(), 4);
    assert_eq!(table.to_grid().lines().count(), 3);
    for (r, row) in table.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            for (s, &value) in cell.per_seed.iter().enumerate() {
                let run = config.output.dir.join(format!("r{r}_c{c}_s{s}"));
                let ckpt = Checkpoint::load(&run.join("checkpoint.slpc")).unwrap();
                let (model, mut params) = build_model(&ckpt.config, &eval).unwrap();
                params.load_from(&ckpt.params).unwrap();
                let cfg = &ckpt.config;
                let report = evaluate(
                    &model,
                    &params,
                    &eval,
                    cfg.eval.max_images,
                    cfg.eval.batch_size,
                    cfg.training.seed,
                )
                .unwrap();
                assert_eq!(report.mean("fg_ari").unwrap(), value);
                assert_eq!(cfg.training.seed, config.training.seed + s as u64);
            }
            let mean = cell.per_seed.iter().sum::<f64>() / cell.per_seed.len() as f64;
            assert!((cell.mean - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_seeds_or_unknown_metric_fail() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_config(dir.path(), &["training.steps=0"]);
    let rows = Axis::parse("slp.t_spat=1").unwrap();
    let (train, eval) = (common::dataset(12, 1), common::dataset(6, 2));
    assert!(sweep(&config, &rows, None, 0, "fg_ari", &train, &eval).is_err());
    assert!(sweep(&config, &rows, None, 1, "no_such_metric", &train, &eval).is_err());
}
