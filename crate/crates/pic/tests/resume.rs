mod common;

use pic::checkpoint;
use pic::dataset;
use pic::trainer::Trainer;

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, data) = (tmp.path().join("src"), tmp.path().join("data"));
    common::corpus(&src);
    let cfg = common::small_config(5);
    dataset::build_dataset(&src, &data, &cfg).unwrap();

    let mut straight = Trainer::from_dataset(cfg.clone(), &data).unwrap();
    let want: Vec<String> = (0..4).map(|_| straight.step().unwrap()).collect();

    let mut first = Trainer::from_dataset(cfg.clone(), &data).unwrap();
    let mut got: Vec<String> = (0..2).map(|_| first.step().unwrap()).collect();
    let ckpt = tmp.path().join("mid.ckpt");
    checkpoint::save(&ckpt, &first.state, Some(cfg.to_json())).unwrap();
    drop(first);

    let mut second = Trainer::from_dataset(cfg, &data).unwrap().resume(&ckpt).unwrap();
    assert_eq!(second.state.step, 2);
    got.extend((0..2).map(|_| second.step().unwrap()));
    assert_eq!(got, want);
    assert_eq!(second.state.model.params(), straight.state.model.params());
}

#[test]
fn run_writes_log_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, data) = (tmp.path().join("src"), tmp.path().join("data"));
    common::corpus(&src);
    let cfg = common::small_config(6);
    dataset::build_dataset(&src, &data, &cfg).unwrap();
    let mut t = Trainer::from_dataset(cfg, &data).unwrap();
    let out = tmp.path().join("model.ckpt");
    t.run(&out).unwrap();
    assert_eq!(t.state.step, t.total_steps);
    let log = std::fs::read_to_string(tmp.path().join("model.ckpt.log")).unwrap();
    assert_eq!(log.lines().count() as u64, t.total_steps);
    assert!(log.lines().all(|l| l.split(", ").count() == 5));
    // two epochs with a checkpoint every epoch: one intermediate, one final
    assert!(tmp.path().join("model.epoch1.ckpt").exists());
    let model = checkpoint::load_model(&out).unwrap();
    assert_eq!(model.params(), t.state.model.params());
}
