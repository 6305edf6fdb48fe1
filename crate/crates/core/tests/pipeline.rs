use bitrl::backbone::{build_backbone, BackboneConfig};
use bitrl::checkpoint::{
    get_backbone, get_head, put_backbone, put_dense_backbone, Checkpoint, StoredBackbone,
};
use bitrl::envs::{self, EnvId};
use bitrl::ppo::rollout::state_tokens;
use bitrl::ppo::{evaluate, train, RunStatus, TrainConfig};
use bitrl::report::{read_run, run_checkpoint, summarize, write_run};
use bitrl::rng::RngStream;

fn tiny(total: usize) -> TrainConfig {
    let text = format!(
        "total_steps = {total}\nrollout_length = 128\nminibatch = 32\neval_every = {total}\neval_episodes = 2\n"
    );
    TrainConfig::parse(&text).unwrap().0
}

#[test]
fn reloaded_backbone_is_stable_and_close_to_the_original() {
    let (model, shadow) =
        build_backbone(&BackboneConfig::small(), &mut RngStream::new(3, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (tp, dp) = (dir.path().join("t.btrl"), dir.path().join("d.btrl"));
    let mut ck = Checkpoint::default();
    put_backbone(&mut ck, &model);
    ck.save(&tp).unwrap();
    let mut ck = Checkpoint::default();
    put_dense_backbone(&mut ck, &shadow);
    ck.save(&dp).unwrap();

    let StoredBackbone::Ternary(loaded) = get_backbone(&Checkpoint::load(&tp).unwrap()).unwrap()
    else {
        panic!("expected a ternary backbone");
    };
    let StoredBackbone::Dense(dense) = get_backbone(&Checkpoint::load(&dp).unwrap()).unwrap()
    else {
        panic!("expected a dense backbone");
    };
    let mut ck = Checkpoint::default();
    put_backbone(&mut ck, &loaded);
    let StoredBackbone::Ternary(again) =
        get_backbone(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap()
    else {
        panic!("expected a ternary backbone");
    };
    let mut rng = RngStream::new(3, 2);
    for id in EnvId::ALL {
        let s = envs::reset(id, &mut rng);
        let toks = state_tokens(&model, &s).unwrap();
        let (a, b) = (loaded.encode(&toks).unwrap(), model.encode(&toks).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-2, "{id}: {x} vs {y}");
        }
        assert_eq!(again.encode(&toks).unwrap(), a);
        let (a, b) = (dense.encode(&toks).unwrap(), shadow.encode(&toks).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-4, "{id}: {x} vs {y}");
        }
    }
}

#[test]
fn every_environment_trains_end_to_end() {
    for id in EnvId::ALL {
        let run = train(id, &tiny(256)).unwrap();
        assert_eq!(run.status, RunStatus::Completed, "{id}");
        assert_eq!(run.metrics.len(), 2, "{id}");
        assert_eq!(run.evals.len(), 1, "{id}");
        assert_eq!(run.non_finite_updates, 0, "{id}");
    }
}

#[test]
fn written_run_reloads_into_the_same_policy() {
    let run = train(EnvId::CartPole, &tiny(384)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &run).unwrap();
    let rec = read_run(dir.path()).unwrap();
    assert_eq!(rec.metrics.len(), run.metrics.len());
    assert_eq!(rec.evals, run.evals);

    let ck = Checkpoint::load(&dir.path().join("checkpoint.btrl")).unwrap();
    assert_eq!(ck, run_checkpoint(&run));
    let policy = get_head(&ck, "policy").unwrap();
    let StoredBackbone::Ternary(model) = get_backbone(&ck).unwrap() else {
        panic!("expected a ternary backbone");
    };
    let a = evaluate(
        &model,
        &policy,
        EnvId::CartPole,
        3,
        &mut RngStream::new(5, 0),
    )
    .unwrap();
    let b = evaluate(
        &run.model,
        &run.policy,
        EnvId::CartPole,
        3,
        &mut RngStream::new(5, 0),
    )
    .unwrap();
    assert_eq!(a, b);

    let summary = summarize(&[rec]).unwrap();
    assert_eq!(summary.runs, 1);
}
