use costodet::checkpoint::{checkpoint_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_VERSION};
use costodet::dataset::{ingest_dataset, Dataset};
use costodet::model::CoModel;
use costodet::optim::AdamW;
use costodet::synth::{emit_dataset, ProcedureGrammar};
use costodet::task::TaskKind;
use costodet::train::{build_clip_graph, train_step, ClipBatch, ClipNoise, TrainConfig, TrainData, Trainer};
use costodet::{graph::Tape, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let splits = vec![("train".to_string(), 0.5), ("val".to_string(), 0.25), ("test".to_string(), 0.25)];
    emit_dataset(&ProcedureGrammar::dominant_long_tail(), n, &splits, 11, dir.path()).unwrap();
    let ds = ingest_dataset(dir.path()).unwrap();
    (dir, ds)
}

fn tiny(task: TaskKind) -> TrainConfig {
    let base = match task {
        TaskKind::Anticipation => TrainConfig::default(),
        TaskKind::Recognition => TrainConfig::recognition(),
    };
    TrainConfig {
        epochs: 2,
        iterations_per_epoch: 3,
        lr: 1e-2,
        clip_len: 16,
        window: 8,
        diffusion_steps: 20,
        anchor_stride: 4,
        feature_dim: 6,
        spatial_width: 8,
        unet_widths: vec![4, 6],
        time_embed_dim: 8,
        horizon: 2.0,
        ..base
    }
}

fn first_batch(trainer: &Trainer, ds: &Dataset) -> ClipBatch {
    let video = ds.split("train").unwrap()[0];
    let labels = trainer.model.labels(&video.timeline).unwrap();
    let zeros = trainer.model.start_session().state;
    ClipBatch::from_video(&trainer.model, video, &labels, 40, 16, 4, zeros).unwrap()
}

#[test]
fn branch_toggles_and_additivity() {
    let (_d, ds) = dataset(8);
    for (task, ddpm) in [(true, true), (true, false), (false, true)] {
        let cfg = TrainConfig { with_task: task, with_ddpm: ddpm, ..tiny(TaskKind::Anticipation) };
        let mut t = Trainer::new(cfg.clone(), &ds.meta).unwrap();
        let batch = first_batch(&t, &ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, _) = train_step(&mut t.model, &mut t.optimizer, &batch, &cfg, 1e-3, &mut rng).unwrap();
        assert_eq!(l.task.is_some(), task);
        assert_eq!(l.ddpm.is_some(), ddpm);
        let sum = l.task.unwrap_or(0.0) + l.ddpm.unwrap_or(0.0);
        assert!((l.total - sum).abs() <= 1e-12);
    }
    let both_off = TrainConfig { with_task: false, with_ddpm: false, ..tiny(TaskKind::Anticipation) };
    assert!(matches!(Trainer::new(both_off, &ds.meta), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_leaves_parameters_untouched() {
    let (_d, ds) = dataset(8);
    let cfg = tiny(TaskKind::Anticipation);
    let mut t = Trainer::new(cfg.clone(), &ds.meta).unwrap();
    let batch = first_batch(&t, &ds);
    let id = t.model.store.find("task.bias").unwrap();
    t.model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let before: Vec<u64> = t.model.store.iter().flat_map(|(_, v)| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
    let opt_before = t.optimizer.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = train_step(&mut t.model, &mut t.optimizer, &batch, &cfg, 1e-3, &mut rng);
    assert!(matches!(r, Err(Error::NonFinite(_))));
    let after: Vec<u64> = t.model.store.iter().flat_map(|(_, v)| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
    assert_eq!(before, after);
    assert_eq!(opt_before.step, t.optimizer.step);
}

#[test]
fn repeated_clip_is_overfit() {
    let (_d, ds) = dataset(8);
    let cfg = tiny(TaskKind::Anticipation);
    let mut t = Trainer::new(cfg.clone(), &ds.meta).unwrap();
    let batch = first_batch(&t, &ds);
    let probe = ClipNoise::draw(&t.model, batch.anchors.len(), &mut ChaCha8Rng::seed_from_u64(5));
    let eval = |m: &CoModel| {
        let mut tape = Tape::new();
        let g = build_clip_graph(m, &mut tape, &batch, Some(&probe), (1.0, 1.0), true).unwrap();
        tape.value(g.total).item()
    };
    let start = eval(&t.model);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut opt = AdamW::new(&t.model.store, 0.0);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let (l, _) = train_step(&mut t.model, &mut opt, &batch, &cfg, 3e-3, &mut rng).unwrap();
        first.get_or_insert(l.total);
        last = l.total;
    }
    assert!(eval(&t.model) < start);
    assert!(last < first.unwrap());
}

#[test]
fn fit_is_deterministic_and_zero_epochs_is_initialization() {
    let (_d, ds) = dataset(8);
    let cfg = tiny(TaskKind::Anticipation);
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &ds.meta).unwrap();
        t.fit(&ds, |_| Ok(())).unwrap();
        (t.log_jsonl(), checkpoint_bytes(&t).unwrap())
    };
    let (log_a, ck_a) = run();
    let (log_b, ck_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(ck_a, ck_b);
    assert!(log_a.contains("\"kind\":\"epoch\"") && log_a.contains("val_task"));

    let zero = TrainConfig { epochs: 0, ..cfg.clone() };
    let mut t = Trainer::new(zero.clone(), &ds.meta).unwrap();
    t.fit(&ds, |_| Ok(())).unwrap();
    let init = CoModel::new(zero.model_config(&ds.meta).unwrap(), zero.seed).unwrap();
    assert_eq!(t.model.store, init.store);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (dir, ds) = dataset(8);
    for task in [TaskKind::Anticipation, TaskKind::Recognition] {
        let cfg = TrainConfig { epochs: 4, ..tiny(task) };
        let path = dir.path().join("half.ckpt");
        let mut full = Trainer::new(cfg.clone(), &ds.meta).unwrap();
        let mut logged_at_save = 0;
        full.fit(&ds, |t| {
            if t.epoch == 2 {
                logged_at_save = t.log.len();
                save_checkpoint(t, &path)?;
            }
            Ok(())
        })
        .unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.epoch, 2);
        resumed.fit(&ds, |_| Ok(())).unwrap();

        assert_eq!(resumed.model.store, full.model.store);
        assert_eq!(resumed.optimizer, full.optimizer);
        let tail = full.log_jsonl().lines().skip(logged_at_save).map(|l| format!("{l}\n")).collect::<String>();
        assert_eq!(resumed.log_jsonl(), tail);
        assert_eq!(checkpoint_bytes(&resumed).unwrap(), checkpoint_bytes(&full).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let (dir, ds) = dataset(8);
    let cfg = tiny(TaskKind::Anticipation);
    let mut t = Trainer::new(cfg.clone(), &ds.meta).unwrap();
    t.fit(&ds, |_| Ok(())).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&t, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model.store, t.model.store);
    assert_eq!(back.optimizer, t.optimizer);
    assert_eq!(back.config, t.config);
    assert_eq!(back.rng, t.rng);
    assert_eq!((back.epoch, back.step), (t.epoch, t.step));

    let wider = TrainConfig { feature_dim: 7, ..cfg.clone() }.model_config(&ds.meta).unwrap();
    assert!(matches!(load_checkpoint_for(&path, &wider), Err(Error::CheckpointMismatch(_))));
    assert!(load_checkpoint_for(&path, &t.model.config).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointCorrupt(_))));
    bytes[mid] ^= 1;
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { .. })));
    std::fs::write(&path, b"nonsense").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointCorrupt(_))));
}

#[test]
fn recognition_protocol_threads_state() {
    let (_d, ds) = dataset(8);
    let cfg = tiny(TaskKind::Recognition);
    let mut t = Trainer::new(cfg.clone(), &ds.meta).unwrap();
    let data = TrainData::new(&t.model, ds.split("train").unwrap()).unwrap();
    let clips: usize = data.videos.iter().map(|v| v.num_frames().div_ceil(16)).sum();
    assert_eq!(t.steps_per_epoch(&data), clips);
    t.run_epoch(&data).unwrap();
    assert_eq!(t.step, clips);
    let mut reset = Trainer::new(TrainConfig { carry_state: false, ..cfg }, &ds.meta).unwrap();
    reset.run_epoch(&data).unwrap();
    assert_ne!(reset.model.store, t.model.store);
}
