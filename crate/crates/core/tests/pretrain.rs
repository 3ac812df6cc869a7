use popt::data::{generate_synthetic, split_windows, SyntheticConfig, SyntheticDataset};
use popt::engine::{Graph, Mode, Rng, Tensor};
use popt::model::{ForwardOptions, PopT, PopTConfig};
use popt::pretrain::*;
use rand::{Rng as _, SeedableRng};

const LN2: f64 = std::f64::consts::LN_2;

fn dataset(n: usize, d_emb: usize, windows: usize, seed: u64) -> SyntheticDataset {
    let mut cfg = SyntheticConfig::blocks(n, d_emb, 4, 2, seed);
    cfg.num_windows = windows;
    generate_synthetic(&cfg).unwrap()
}

fn example(y_cls: u8, y_tokens: Vec<u8>) -> PretrainExample {
    let n = y_tokens.len();
    PretrainExample {
        set_a: (0..n / 2).collect(),
        set_b: (n / 2..n).collect(),
        t_a_ms: 0,
        t_b_ms: 500,
        replacements: vec![None; n],
        y_cls,
        y_tokens,
        jitter: vec![[0.0; 3]; n],
    }
}

#[test]
fn ensemble_pairs_are_disjoint_and_balanced() {
    let ds = dataset(20, 8, 200, 1);
    let mut rng = Rng::seed_from_u64(3);
    let sizes = SizeRange { min: 1, max: 10 };
    let mut positives = 0;
    let mut seen_sizes = [false; 11];
    for _ in 0..10_000 {
        let ex = sample_ensemble_pair(&ds.store, 20..180, sizes, &mut rng).unwrap();
        assert!(ex.set_a.iter().all(|c| !ex.set_b.contains(c)));
        assert!((1..=10).contains(&ex.set_a.len()) && (1..=10).contains(&ex.set_b.len()));
        seen_sizes[ex.set_a.len()] = true;
        let (a, b) = (ex.t_a_ms as i64, ex.t_b_ms as i64);
        assert!((10_000..90_000).contains(&a) && (10_000..90_000).contains(&b));
        if ex.y_cls == 1 {
            positives += 1;
            assert_eq!(b - a, 500);
        } else {
            assert!((a - b).abs() >= 1000);
        }
        assert!(ex.y_tokens.iter().all(|&y| y == 0));
    }
    assert!(seen_sizes[1..].iter().all(|&s| s));
    let frac = positives as f64 / 10_000.0;
    assert!((0.47..=0.53).contains(&frac), "{frac}");
    assert!(matches!(
        sample_ensemble_pair(&ds.store, 0..200, SizeRange { min: 1, max: 11 }, &mut rng),
        Err(PretrainError::EnsembleTooLarge { .. })
    ));
}

#[test]
fn channel_swaps() {
    let ds = dataset(20, 8, 100, 2);
    let mut rng = Rng::seed_from_u64(4);
    let sizes = SizeRange { min: 10, max: 10 };
    for _ in 0..200 {
        let ex = sample_ensemble_pair(&ds.store, 0..100, sizes, &mut rng).unwrap();
        let none = apply_channel_swaps(&ex, &ds.store, 0..100, 0.0, SwapMode::OtherChannel, &mut rng).unwrap();
        assert_eq!(none, ex);
        let sw = apply_channel_swaps(&ex, &ds.store, 0..100, 0.1, SwapMode::OtherChannel, &mut rng).unwrap();
        assert_eq!(sw.swapped().len(), 2);
        let slots: Vec<_> = sw.slots().collect();
        for (i, r) in sw.replacements.iter().enumerate() {
            assert_eq!(r.is_some(), sw.y_tokens[i] == 1);
            if let Some(r) = r {
                assert_ne!(r.channel, slots[i].0);
                assert_ne!(r.time_ms, slots[i].1);
            }
        }
        let own = apply_channel_swaps(&ex, &ds.store, 0..100, 0.1, SwapMode::SelfRandomize, &mut rng).unwrap();
        for (i, r) in own.replacements.iter().enumerate() {
            if let Some(r) = r {
                assert_eq!(r.channel, slots[i].0);
                assert_ne!(r.time_ms, slots[i].1);
            }
        }
        let specs = sw.token_specs();
        for i in sw.swapped() {
            assert_eq!(specs[i].channel, slots[i].0);
            assert_ne!(specs[i].source_channel, slots[i].0);
        }
    }
}

#[test]
fn loss_closed_forms() {
    let ex = example(1, vec![0, 1, 0, 0]);
    let r = pretrain_losses(0.0, &[0.0; 4], &ex);
    assert!((r.l_n - LN2).abs() < 1e-12 && (r.l_c - LN2).abs() < 1e-12);
    assert!((r.l - 2.0 * LN2).abs() < 1e-12);

    let perfect = pretrain_losses(20.0, &[-20.0, 20.0, -20.0, -20.0], &ex);
    assert!(perfect.l < 1e-8);
    assert_eq!(perfect.acc_cls, 1.0);
    assert_eq!(perfect.acc_tok, 1.0);

    let two = example(1, vec![0, 1]);
    let r = pretrain_losses(0.0, &[0.0, 3f64.ln()], &two);
    let want = (LN2 + (4.0f64 / 3.0).ln()) / 2.0;
    assert!((r.l_c - want).abs() < 1e-12);
    assert!((r.l_n - LN2).abs() < 1e-12);
    assert!((r.l - r.l_n - r.l_c).abs() < 1e-12);
}

#[test]
fn reconstruction_l1() {
    let mut rng = Rng::seed_from_u64(1);
    let a = Tensor::<f64>::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mask = [true, false, true, true, false];
    assert_eq!(reconstruction_loss_l1(&a, &a, &mask), 0.0);
    let shifted = a.map(|x| x - 0.75);
    assert!((reconstruction_loss_l1(&shifted, &a, &mask) - 0.75).abs() < 1e-12);
    let b = Tensor::<f64>::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut brute = 0.0;
    for r in [0, 2, 3] {
        for c in 0..3 {
            brute += (a.at(r, c) - b.at(r, c)).abs();
        }
    }
    assert!((reconstruction_loss_l1(&a, &b, &mask) - brute / 9.0).abs() < 1e-7);
}

fn small_config(d_emb: usize) -> PopTConfig {
    PopTConfig {
        layers: 2,
        heads: 2,
        d: 8,
        dropout: 0.1,
        d_emb,
        position: Default::default(),
    }
}

#[test]
fn graph_objective_matches_per_example_losses() {
    let ds = dataset(8, 4, 60, 5);
    let model = PopT::<f64>::new(small_config(4), 9).unwrap();
    let mut rng = Rng::seed_from_u64(2);
    let sizes = SizeRange { min: 1, max: 4 };
    let batch: Vec<PretrainExample> = (0..6)
        .map(|_| {
            let e = sample_ensemble_pair(&ds.store, 0..60, sizes, &mut rng).unwrap();
            apply_channel_swaps(&e, &ds.store, 0..60, 0.3, SwapMode::OtherChannel, &mut rng).unwrap()
        })
        .collect();
    let run = |flags: LossFlags| {
        let mut g = Graph::inference();
        let out = pretrain_objective(&model, &mut g, &ds.store, &ds.layout, &batch, flags, ForwardOptions::eval(), &mut Rng::seed_from_u64(0)).unwrap();
        (g.value(out.loss).item(), out.report)
    };
    let (full, report) = run(LossFlags::default());
    let mut manual = Vec::new();
    for ex in &batch {
        let tm = model.tokens(&ds.store, &ds.layout, &ex.token_specs()).unwrap();
        let (cls, tok) = model.predict(std::slice::from_ref(&tm), model.cls_head).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let toks: Vec<f64> = tok[0].iter().map(|&p| logit(p)).collect();
        manual.push(pretrain_losses(logit(cls[0]), &toks, ex));
    }
    let manual = PretrainLossReport::mean(&manual);
    assert!((full - manual.l).abs() < 1e-6, "{full} vs {}", manual.l);
    assert!((report.l - report.l_n - report.l_c).abs() < 1e-6);
    let (only_c, _) = run(LossFlags { ensemble: false, ..Default::default() });
    let (only_n, _) = run(LossFlags { channel: false, ..Default::default() });
    assert!((only_c - report.l_c).abs() < 1e-12);
    assert!((only_n - report.l_n).abs() < 1e-12);
    let (recon, r) = run(LossFlags { reconstruction_only: true, ..Default::default() });
    assert!(recon > 0.0 && (r.l - recon).abs() < 1e-12);
}

/// Central differences on the full objective of a two-channel toy model.
pub fn max_gradient_error(seed: u64) -> f64 {
    let ds = dataset(2, 4, 12, seed);
    let mut model = PopT::<f64>::new(small_config(4), seed).unwrap();
    let mut rng = Rng::seed_from_u64(seed);
    for (id, name, _) in model.params.clone().iter() {
        let t = model.params.get_mut(id);
        let centre = if name.ends_with(".g") { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|x| *x = centre + rng.gen_range(-0.5..0.5));
    }
    let sizes = SizeRange { min: 1, max: 1 };
    let ex = sample_ensemble_pair(&ds.store, 0..12, sizes, &mut rng).unwrap();
    let ex = apply_channel_swaps(&ex, &ds.store, 0..12, 0.5, SwapMode::OtherChannel, &mut rng).unwrap();
    let batch = vec![ex];
    let opts = ForwardOptions {
        mode: Mode::Train,
        ..ForwardOptions::eval()
    };
    let loss = |m: &PopT<f64>, g: &mut Graph<f64>| {
        let mut r = Rng::seed_from_u64(seed ^ 77);
        pretrain_objective(m, g, &ds.store, &ds.layout, &batch, LossFlags::default(), opts, &mut r).unwrap().loss
    };
    let mut g = Graph::new();
    let l = loss(&model, &mut g);
    let grads = g.backward(l).unwrap();
    let value = |m: &PopT<f64>| {
        let mut g = Graph::new();
        let l = loss(m, &mut g);
        g.value(l).item()
    };
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (id, _, t) in model.params.clone().iter() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + h;
            let plus = value(&model);
            model.params.get_mut(id).data_mut()[i] = orig - h;
            let minus = value(&model);
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn end_to_end_gradients() {
    for seed in 0..5 {
        let e = max_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

fn tiny_run(ds: &SyntheticDataset, steps: u64, seed: u64) -> PretrainConfig {
    let mut cfg = PretrainConfig::desk(ds.store.d_emb(), ds.store.n_channels());
    cfg.model = small_config(ds.store.d_emb());
    cfg.steps = steps;
    cfg.batch_size = 8;
    cfg.eval_every = 5;
    cfg.val_examples = 16;
    cfg.seed = seed;
    cfg
}

#[test]
fn pretraining_is_reproducible_and_selects_best() {
    let ds = dataset(8, 4, 200, 3);
    let splits = split_windows(200, [0.8, 0.1, 0.1], 0).unwrap();
    let data = PretrainData {
        store: &ds.store,
        layout: &ds.layout,
        splits: &splits,
    };
    let cfg = tiny_run(&ds, 20, 1);
    let a = run_pretraining::<f32>(&cfg, data).unwrap();
    let b = run_pretraining::<f32>(&cfg, data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
    let best = a.log.iter().map(|r| r.val_l).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val.l, best);
    assert_eq!(a.log.iter().find(|r| r.val_l == best).unwrap().step, a.best_step);
    let again = evaluate(&a.checkpoint.model, data, &validation_examples(&cfg, data).unwrap(), cfg.losses, 8).unwrap();
    assert_eq!(again.l, best);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    write_log_csv(&p, &a.log).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("step,l_n,l_c,l,lr,val_l,val_acc_cls,val_acc_tok"));
    assert_eq!(text.lines().count(), 5);

    for abl in [
        Ablation::NoChannelLoss,
        Ablation::NoEnsembleLoss,
        Ablation::NoPosition,
        Ablation::ReconstructionOnly,
        Ablation::GaussianBlur,
        Ablation::SelfRandomize,
    ] {
        let mut c = tiny_run(&ds, 5, 1);
        abl.apply(&mut c);
        let out = run_pretraining::<f32>(&c, data).unwrap();
        assert_ne!(out.log, a.log[..1].to_vec(), "{abl:?} had no effect");
        assert_eq!(out.checkpoint.model.config.position, c.model.position);
    }
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let ds = dataset(8, 4, 200, 3);
    let splits = split_windows(200, [0.8, 0.1, 0.1], 0).unwrap();
    let data = PretrainData {
        store: &ds.store,
        layout: &ds.layout,
        splits: &splits,
    };
    let mut cfg = tiny_run(&ds, 50, 0);
    cfg.eval_every = 1;
    cfg.lr = 1e36;
    match run_pretraining::<f32>(&cfg, data) {
        Err(PretrainError::Diverged { step, last_good, .. }) => {
            assert!(step > 0 && step < 50);
            assert!(last_good.step < step);
            assert!(last_good.model.params.iter().all(|(_, _, t)| t.all_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}
