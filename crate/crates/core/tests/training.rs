use cdr_refine::data::bundle_loops;
use cdr_refine::model::Mode;
use cdr_refine::synthetic::synthetic_dataset;
use cdr_refine::tensor::{ParamStore, Tape, Tensor};
use cdr_refine::training::{
    adam_step, fit, mean_loss, AdamConfig, AdamState, Checkpoint, TrainConfig,
};

/// Bias-corrected Adam written out per step from the update equations.
fn adam_oracle(w0: f64, grads: &[f64], cfg: &AdamConfig) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    w
}

#[test]
fn adam_matches_oracle_over_ten_steps() {
    let grads = [0.3, -1.2, 4.0, 0.0, 2.5, -0.01, 1e-3, -7.0, 0.8, 0.2];
    let cfg = AdamConfig::default();
    let mut p = ParamStore::new();
    let id = p.add("w", Tensor::scalar(0.7));
    let mut state = AdamState::for_params(&p);
    for &g in &grads {
        p.zero_grad();
        p.get_mut(id).accumulate_grad(&[g]);
        adam_step(&mut p, &mut state, &cfg).unwrap();
    }
    let want = adam_oracle(0.7, &grads, &cfg);
    assert!((p.get(id).data()[0] - want).abs() < 1e-15);
    assert_eq!(state.step, 10);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let target = [3.0, -1.5, 0.25];
    let mut p = ParamStore::new();
    let id = p.add("w", Tensor::zeros(&[3]).with_grad());
    let mut state = AdamState::for_params(&p);
    for _ in 0..2000 {
        p.zero_grad();
        let tape = Tape::new();
        let vars = p.bind(&tape);
        let t = tape.constant(Tensor::new(vec![3], target.to_vec()).unwrap());
        let loss = vars[0].sub(t).unwrap().square().sum();
        let grads = tape.backward(loss).unwrap();
        p.accumulate(&grads, &vars);
        adam_step(&mut p, &mut state, &cfg).unwrap();
    }
    for (w, t) in p.get(id).data().iter().zip(target) {
        assert!((w - t).abs() < 1e-3, "{w} vs {t}");
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        hidden: Some(16),
        mpn_layers: Some(1),
        seed: 4,
        ..TrainConfig::desk()
    }
}

#[test]
fn fit_is_reproducible_and_writes_checkpoints() {
    let data: Vec<_> = synthetic_dataset(3, 1)
        .iter()
        .map(|r| bundle_loops(r).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..small_config()
    };
    let mut epochs = Vec::new();
    let a = fit(&data[..2], &data[2..], &cfg, |l| epochs.push(l.epoch)).unwrap();
    assert_eq!(epochs, [1, 2]);
    let b = fit(&data[..2], &data[2..], &cfg, |_| {}).unwrap();
    assert_eq!(a.last.to_json().unwrap(), b.last.to_json().unwrap());

    let best = Checkpoint::load(dir.path().join("best.json")).unwrap();
    let last = Checkpoint::load(dir.path().join("last.json")).unwrap();
    assert_eq!(best, a.best);
    assert_eq!(last, a.last);
    assert_eq!(last.epoch, 2);

    // The recorded metric is the validation loss of the saved weights.
    let model = best.model().unwrap();
    let val = mean_loss(&model, &data[2..], cfg.mode, &cfg.loss_weights()).unwrap();
    assert_eq!(Some(val.total), best.val_metric);

    let other = fit(
        &data[..2],
        &data[2..],
        &TrainConfig {
            seed: 5,
            ..cfg.clone()
        },
        |_| {},
    )
    .unwrap();
    assert_ne!(other.last.tensors, a.last.tensors);
}

#[test]
fn resumed_optimizer_state_matches() {
    let data: Vec<_> = synthetic_dataset(2, 9)
        .iter()
        .map(|r| bundle_loops(r).unwrap())
        .collect();
    let out = fit(&data, &[], &small_config(), |_| {}).unwrap();
    let model = out.last.model().unwrap();
    let state = out.last.adam_state(&model).unwrap();
    assert_eq!(state.step, 4);
    assert_eq!(
        Checkpoint::capture(&model, &state, &out.last.config, 2, out.last.val_metric),
        out.last
    );
}

#[test]
fn patience_stops_early() {
    let data: Vec<_> = synthetic_dataset(2, 3)
        .iter()
        .map(|r| bundle_loops(r).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 40,
        patience: 1,
        adam: AdamConfig {
            lr: 0.5,
            ..AdamConfig::default()
        },
        ..small_config()
    };
    let out = fit(&data, &[], &cfg, |_| {}).unwrap();
    let n = out.history.len();
    assert!(n < 40, "ran all epochs");
    let best = out
        .history
        .iter()
        .map(|l| l.train.total)
        .fold(f64::INFINITY, f64::min);
    assert!(out.history[n - 1].train.total >= best);
    assert!(out.best.epoch < n);
}

#[test]
fn generative_mode_trains_the_sequence_head() {
    let data: Vec<_> = synthetic_dataset(2, 3)
        .iter()
        .map(|r| bundle_loops(r).unwrap())
        .collect();
    let cfg = TrainConfig {
        mode: Mode::Generative,
        ..small_config()
    };
    let out = fit(&data, &[], &cfg, |_| {}).unwrap();
    let log = &out.history[0].train;
    assert!(log.l_seq > 0.0);
    assert!((log.total - (log.l_seq + log.l_struct)).abs() < 1e-9 * log.total);
    let init = cdr_refine::model::Mlsa::new(cfg.model_config(), cfg.seed).unwrap();
    let trained = out.last.model().unwrap();
    let id = init.param_id("head.w_a").unwrap();
    assert_ne!(init.params.get(id).data(), trained.params.get(id).data());
}
