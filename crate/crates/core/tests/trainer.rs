mod common;

use std::fs;

use fsr_core::trainer::{batch_objective, ItemInput, StepSettings};
use fsr_core::{load_checkpoint, save_checkpoint, FsrError, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn checkpoint_round_trip_is_bit_exact_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&dir.path().join("data"));
    let ds = common::tiny_dataset(&cfg);
    let mut a = Trainer::new(cfg).unwrap();
    for _ in 0..3 {
        let batch = a.next_batch(&ds).unwrap();
        a.step(&batch).unwrap();
    }
    let ckpt_dir = dir.path().join("ckpt");
    save_checkpoint(&a.checkpoint(), &ckpt_dir).unwrap();
    for f in ["manifest.json", "params.bin", "rng.json", "trainer.json"] {
        assert!(ckpt_dir.join(f).is_file(), "{f} missing");
    }
    let mut b = Trainer::from_checkpoint(load_checkpoint(&ckpt_dir).unwrap()).unwrap();
    assert_eq!(b.state.student, a.state.student);
    assert_eq!(b.state.teacher.params, a.state.teacher.params);
    assert_eq!(b.state.teacher.center, a.state.teacher.center);
    assert_eq!(b.state.teacher.proj_momentum, a.state.teacher.proj_momentum);
    assert_eq!(
        b.state.teacher.encoder_momentum,
        a.state.teacher.encoder_momentum
    );
    assert_eq!(
        b.state.teacher.center_momentum,
        a.state.teacher.center_momentum
    );
    assert_eq!(b.state.optimizer, a.state.optimizer);

    let img = &ds.images[0].pixels;
    let pa = a.model.predict(&a.state.student, img).unwrap();
    let pb = b.model.predict(&b.state.student, img).unwrap();
    assert_eq!(pa.z, pb.z);
    assert_eq!(pa.seg_logits, pb.seg_logits);
    assert_eq!(pa.cam, pb.cam);

    for _ in 0..3 {
        let ba = a.next_batch(&ds).unwrap();
        let bb = b.next_batch(&ds).unwrap();
        assert_eq!(a.step(&ba).unwrap(), b.step(&bb).unwrap());
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&dir.path().join("data"));
    let ds = common::tiny_dataset(&cfg);
    let run = |cfg| {
        let mut t = Trainer::new(cfg).unwrap();
        (0..8)
            .map(|_| {
                let b = t.next_batch(&ds).unwrap();
                t.step(&b).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let first = run(cfg.clone());
    assert_eq!(first, run(cfg.clone()));
    let mut other = cfg;
    other.train.seed = 1;
    assert_ne!(first, run(other));
}

#[test]
fn baseline_never_touches_the_distillation_head() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(&dir.path().join("data"));
    cfg.train.lambda4 = 0.0;
    cfg.train.lambda5 = 0.0;
    let ds = common::tiny_dataset(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let init = t.state.student.clone();
    let teacher_init = t.state.teacher.params.clone();
    for _ in 0..4 {
        let b = t.next_batch(&ds).unwrap();
        let r = t.step(&b).unwrap();
        assert_eq!((r.u, r.c), (0.0, 0.0));
    }
    for (name, v) in t.state.student.iter() {
        let head =
            name.starts_with("agg.") || name.starts_with("proj.") || name == "enc.mask_token";
        assert_eq!(head, v == init.get(name).unwrap(), "{name}");
    }
    for (name, v) in t.state.teacher.params.iter() {
        if !name.starts_with("enc.") {
            // EMA of identical values may move by an ulp.
            let diff = v.max_abs_diff(teacher_init.get(name).unwrap());
            assert!(diff < 1e-12, "{name} moved by {diff}");
        }
    }

    let b = t.next_batch(&ds).unwrap();
    let inputs: Vec<ItemInput> = b
        .iter()
        .map(|p| ItemInput {
            labels: p.labels.clone(),
            patches1: t.model.patches(&p.view1).unwrap(),
            patches2: t.model.patches(&p.view2).unwrap(),
            teacher1: None,
            teacher2: None,
        })
        .collect();
    let s = StepSettings::at(&t.config.train, 0);
    let mut plans = vec![None; inputs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, grads) = batch_objective(
        &t.model,
        &t.state.student,
        &inputs,
        &mut plans,
        &s,
        &mut rng,
        true,
    )
    .unwrap();
    let grads = grads.unwrap();
    assert!(grads
        .keys()
        .all(|k| !k.starts_with("agg.") && !k.starts_with("proj.")));
    assert!(grads.contains_key("cls.w") && grads.contains_key("dec.out.w"));
}

#[test]
fn non_finite_loss_names_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&dir.path().join("data"));
    let ds = common::tiny_dataset(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    t.state.student.get_mut("cls.w").unwrap()[(0, 0)] = f64::NAN;
    let b = t.next_batch(&ds).unwrap();
    match t.step(&b) {
        Err(FsrError::NonFinite(what)) => assert!(what.contains("cls"), "{what}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&dir.path().join("data"));
    let t = Trainer::new(cfg).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&t.checkpoint(), &ckpt).unwrap();

    let err = load_checkpoint(&dir.path().join("missing")).unwrap_err();
    assert!(err.is_validation());

    let bin = ckpt.join("params.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 8);
    fs::write(&bin, &bytes).unwrap();
    let err = load_checkpoint(&ckpt).unwrap_err();
    assert!(err.to_string().contains("bytes"), "{err}");
    assert!(err.is_validation());
}

#[test]
fn checkpoints_from_another_model_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&dir.path().join("data"));
    let mut ckpt = Trainer::new(cfg).unwrap().checkpoint();
    ckpt.config.model.ff_dim += 4;
    let err = Trainer::from_checkpoint(ckpt)
        .err()
        .expect("shape mismatch detected");
    assert!(err.is_validation());
    assert!(err.to_string().contains("ff"), "{err}");
}
