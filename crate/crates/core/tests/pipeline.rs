use monovit::batch::Batch;
use monovit::checkpoint::Checkpoint;
use monovit::encoder::EncoderConfig;
use monovit::io::save_dataset;
use monovit::losses::total_loss;
use monovit::model::{ModelConfig, MonoVit};
use monovit::synth::{make_dataset, DatasetConfig, Triplet};
use monovit::train::{fit, TrainConfig, Trainer, FINAL_CHECKPOINT, LOG_HEADER};
use monovit::Tape;

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stage_channels: [4, 8, 8, 8, 8],
            input_size: (32, 32),
            ..EncoderConfig::default()
        },
        decoder_attention: true,
    }
}

fn small_data(count: usize, seed: u64) -> (DatasetConfig, Vec<Triplet>) {
    let cfg = DatasetConfig {
        seed,
        count,
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    };
    let ts = make_dataset(&cfg).unwrap();
    (cfg, ts)
}

fn loss_and_grads(model: &mut MonoVit, batch: &Batch, cfg: &TrainConfig) -> f64 {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let target = tape.constant(batch.target.clone());
    let disps = model.depth(&p, target).unwrap();
    let fwd = model
        .pose(&p, target, tape.constant(batch.src_fwd.clone()))
        .unwrap();
    let bwd = model
        .pose(&p, target, tape.constant(batch.src_bwd.clone()))
        .unwrap();
    let views = batch.views(&tape, [fwd, bwd]);
    let (loss, report) = total_loss(&disps, &views, &cfg.loss).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    model.params.store_grads(&p, &mut grads).unwrap();
    report.total
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let (_, ts) = small_data(1, 3);
    let batch = Batch::new(&ts, &[0]).unwrap();
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(&small_model(), cfg.clone()).unwrap();
    loss_and_grads(&mut trainer.model, &batch, &cfg);

    let params = &trainer.model.params;
    let pick = |prefix: &str| {
        params
            .ids()
            .filter(|&id| params.name(id).starts_with(prefix))
            .max_by(|&a, &b| {
                let ga = params.get(a).grad().unwrap()[0].abs();
                let gb = params.get(b).grad().unwrap()[0].abs();
                ga.total_cmp(&gb)
            })
            .unwrap()
    };
    let h = 1e-5;
    for id in [pick("encoder."), pick("pose.")] {
        let analytic = trainer.model.params.get(id).grad().unwrap()[0];
        let x0 = trainer.model.params.get(id).data()[0];
        let mut at = |x: f64| {
            trainer.model.params.get_mut(id).data_mut()[0] = x;
            trainer.evaluate_loss(&batch).unwrap().total
        };
        let numeric = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
        at(x0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        let name = trainer.model.params.name(id).to_string();
        assert!(
            rel < 1e-3,
            "{name}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"
        );
    }
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (dcfg, ts) = small_data(2, 0);
    save_dataset(&dir.path().join("data"), &dcfg, &ts).unwrap();
    let model = small_model();
    let cfg = TrainConfig {
        epochs: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let s = fit(
        &cfg,
        &model,
        &dir.path().join("data"),
        &dir.path().join("run"),
        None,
    )
    .unwrap();
    assert_eq!(s.steps, 0);
    assert!(s.last.is_none());
    assert_eq!(s.checkpoint, dir.path().join("run").join(FINAL_CHECKPOINT));
    assert_eq!(
        std::fs::read_to_string(&s.log).unwrap(),
        format!("{LOG_HEADER}\n")
    );

    let ck = Checkpoint::load(&s.checkpoint).unwrap();
    let init = MonoVit::new(&model, 5).unwrap();
    assert_eq!(ck.params.len(), init.params.len());
    for ((na, a), (nb, b)) in ck.params.iter().zip(init.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "{na}"
        );
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let (dcfg, ts) = small_data(2, 4);
    let data = dir.path().join("data");
    save_dataset(&data, &dcfg, &ts).unwrap();
    let model = small_model();
    let two = TrainConfig {
        epochs: 2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let one = TrainConfig {
        epochs: 1,
        ..two.clone()
    };

    let straight = fit(&two, &model, &data, &dir.path().join("a"), None).unwrap();
    let first = fit(&one, &model, &data, &dir.path().join("b"), None).unwrap();
    let second = fit(
        &two,
        &model,
        &data,
        &dir.path().join("b"),
        Some(&first.checkpoint),
    )
    .unwrap();
    assert_eq!(first.steps, 2);
    assert_eq!(second.steps, 4);

    let log_a = std::fs::read_to_string(&straight.log).unwrap();
    let log_b = std::fs::read_to_string(&second.log).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(
        std::fs::read(&straight.checkpoint).unwrap(),
        std::fs::read(&second.checkpoint).unwrap()
    );
}

#[test]
fn mismatched_dataset_size_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        count: 1,
        height: 64,
        width: 64,
        ..DatasetConfig::default()
    };
    let ts = make_dataset(&cfg).unwrap();
    save_dataset(&dir.path().join("data"), &cfg, &ts).unwrap();
    let out = dir.path().join("run");
    let e = fit(
        &TrainConfig::default(),
        &small_model(),
        &dir.path().join("data"),
        &out,
        None,
    )
    .unwrap_err();
    assert!(matches!(e, monovit::Error::Config(_)), "{e}");
    assert!(!out.exists());
}
