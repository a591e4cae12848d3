use avforensics::clip::{ClipTriplet, Label};
use avforensics::docsrepro::checks::micro_model;
use avforensics::pipeline::{evaluate, finetune, predict, pretrain, ModelParams, TrainConfig};
use avforensics::synthcorpus::{generate_in_memory, GenConfig};

fn corpus(prefix: &str, n_real: usize, n_fake: usize) -> Vec<ClipTriplet> {
    let g = GenConfig {
        n_real,
        n_fake,
        id_prefix: prefix.into(),
        seed: 3,
        ..GenConfig::default()
    };
    generate_in_memory(&g).unwrap().1
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch: 4,
        probe_clips: 4,
        ..TrainConfig::default()
    }
}

fn learnable_bytes(p: &ModelParams) -> Vec<(String, Vec<u64>)> {
    p.store
        .learnable_ids()
        .map(|id| (p.store.name(id).to_string(), p.store.get(id).iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let pre = corpus("pre", 8, 0);
    let ft = corpus("ft", 4, 4);
    let mut p = ModelParams::init(micro_model()).unwrap();
    let before = learnable_bytes(&p);
    let cfg = TrainConfig {
        lr_new: 0.0,
        lr_shared: 0.0,
        lr_pretrain: 0.0,
        ..quick()
    };
    pretrain(&mut p, &pre, &cfg).unwrap();
    finetune(&mut p, &ft, &cfg).unwrap();
    assert_eq!(before, learnable_bytes(&p));
}

#[test]
fn identical_seeds_give_identical_histories_and_metrics() {
    let pre = corpus("pre", 8, 0);
    let ft = corpus("ft", 4, 4);
    let test = corpus("test", 3, 3);
    let run = || {
        let mut p = ModelParams::init(micro_model()).unwrap();
        let a = pretrain(&mut p, &pre, &quick()).unwrap();
        let b = finetune(&mut p, &ft, &quick()).unwrap();
        (a, b, evaluate(&p, &test).unwrap(), p.to_bytes())
    };
    let (a1, b1, m1, p1) = run();
    let (a2, b2, m2, p2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(m1.digest(), m2.digest());
    assert!(p1 == p2);

    let other = TrainConfig { seed: 8, ..quick() };
    let mut p = ModelParams::init(micro_model()).unwrap();
    assert_ne!(pretrain(&mut p, &pre, &other).unwrap(), a1);
}

#[test]
fn fresh_classifier_predicts_one_half() {
    let p = ModelParams::init(micro_model()).unwrap();
    for c in corpus("c", 2, 2) {
        assert_eq!(predict(&p, &c).unwrap().probability, 0.5);
    }
}

#[test]
fn zero_ce_weight_leaves_classifier_untouched() {
    let ft = corpus("ft", 4, 4);
    let mut p = ModelParams::init(micro_model()).unwrap();
    let cfg = TrainConfig { ce_weight: 0.0, ..quick() };
    let h = finetune(&mut p, &ft, &cfg).unwrap();
    assert!(h.epochs[0].ce > 0.0, "CE is still reported");
    for id in p.store.learnable_ids() {
        if p.store.name(id).starts_with("classifier.") {
            assert!(p.store.get(id).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn pretraining_rejects_fakes_and_finetuning_needs_both_labels() {
    let mut p = ModelParams::init(micro_model()).unwrap();
    let mixed = corpus("m", 3, 3);
    assert!(pretrain(&mut p, &mixed, &quick()).unwrap_err().is_validation());
    let reals: Vec<_> = mixed.into_iter().filter(|c| c.label == Label::Real).collect();
    assert!(finetune(&mut p, &reals, &quick()).unwrap_err().is_validation());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let p = ModelParams::init(micro_model()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.avfp");
    p.save(&path).unwrap();
    let q = ModelParams::load(&path).unwrap();
    assert!(q.to_bytes() == p.to_bytes());
    let mut bytes = p.to_bytes();
    let n = bytes.len();
    bytes.truncate(n - 3);
    assert!(ModelParams::from_bytes(&bytes).is_err());
}
