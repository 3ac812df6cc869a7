use nalgebra::DMatrix;
use popt::data::*;
use popt::engine::Tensor;
use popt::interpret::*;
use popt::model::{ForwardOptions, PopT, PopTConfig};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(sigma: f64, seed: u64) -> SyntheticDataset {
    let mut c = SyntheticConfig::blocks(8, 8, 4, 2, seed);
    c.sigma = sigma;
    c.num_windows = 3000;
    generate_synthetic(&c).unwrap()
}

fn small_model(d_emb: usize) -> PopTConfig {
    PopTConfig {
        layers: 2,
        heads: 2,
        d: 16,
        dropout: 0.1,
        d_emb,
        position: Default::default(),
    }
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, n], data)
}

#[test]
fn identity_attention_gives_zero_influence() {
    let ds = dataset(0.3, 1);
    let model = PopT::<f64>::new(small_model(8), 3).unwrap();
    let opts = ForwardOptions {
        identity_attention: true,
        ..ForwardOptions::eval()
    };
    let channels: Vec<usize> = (0..8).collect();
    let m = channel_influence_with(&model, &ds.store, &ds.layout, &channels, &[0, 10, 20], opts).unwrap();
    assert!(m.matrix.iter().flatten().all(|&v| v == 0.0), "{:?}", m.matrix);

    let live = channel_influence(&model, &ds.store, &ds.layout, &channels, &[0, 10, 20]).unwrap();
    assert!(live.matrix.iter().flatten().any(|&v| v > 0.0));
}

#[test]
fn influence_non_negative_and_order_invariant() {
    let ds = dataset(0.3, 2);
    let model = PopT::<f64>::new(small_model(8), 4).unwrap();
    let windows = [3, 50, 400];
    let order: Vec<usize> = (0..8).collect();
    let shuffled = vec![5, 2, 7, 0, 3, 6, 1, 4];
    let a = channel_influence(&model, &ds.store, &ds.layout, &order, &windows).unwrap();
    let b = channel_influence(&model, &ds.store, &ds.layout, &shuffled, &windows).unwrap();
    for (pi, &ci) in shuffled.iter().enumerate() {
        for (pj, &cj) in shuffled.iter().enumerate() {
            let (x, y) = (b.matrix[pi][pj], a.matrix[ci][cj]);
            assert!(x >= 0.0);
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "({ci},{cj}): {x} vs {y}");
        }
    }
    assert_eq!(channel_influence(&model, &ds.store, &ds.layout, &order, &[]), Err(InterpretError::NoSamples));
}

#[test]
fn rollout_matches_matrix_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [2, 5, 9] {
        let layers: Vec<Tensor<f64>> = (0..3).map(|_| random_stochastic(&mut rng, n)).collect();
        let got = attention_rollout(&layers).unwrap();
        let mut oracle = DMatrix::<f64>::identity(n, n);
        for a in &layers {
            let a = DMatrix::from_row_slice(n, n, a.data());
            let hat = (a + DMatrix::identity(n, n)) * 0.5;
            oracle = hat * oracle;
        }
        for r in 0..n {
            let s: f64 = got.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            for c in 0..n {
                assert!((got.row(r)[c] - oracle[(r, c)]).abs() < 1e-6);
            }
        }
    }
    let single = random_stochastic(&mut rng, 4);
    let got = attention_rollout(std::slice::from_ref(&single)).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let want = 0.5 * (single.row(r)[c] + f64::from(u8::from(r == c)));
            assert_eq!(got.row(r)[c], want);
        }
    }
}

#[test]
fn rollout_rejects_bad_input() {
    let bad = Tensor::new(vec![2, 2], vec![0.9, 0.3, 0.5, 0.5]);
    assert!(matches!(attention_rollout(&[bad]), Err(InterpretError::NotStochastic { .. })));
    assert_eq!(attention_rollout(&[]), Err(InterpretError::Empty));
}

#[test]
fn model_rollout_is_row_stochastic_and_scaled_weights_bounded() {
    let ds = dataset(0.3, 3);
    let model = PopT::<f32>::new(small_model(8), 5).unwrap();
    let specs: Vec<_> = (0..8).map(|c| popt::encoding::TokenSpec::new(c, ds.store.time_ms(7), 0)).collect();
    let tokens = model.tokens(&ds.store, &ds.layout, &specs).unwrap();
    let roll = model_rollout(&model, &tokens).unwrap();
    for r in 0..roll.rows() {
        assert!((roll.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    let regions: Vec<Option<String>> = ds.layout.channels.iter().map(|c| c.region.clone()).collect();
    let c = scaled_attention_weight(&roll, 0, 0.8, Some(&regions)).unwrap();
    assert_eq!(c.raw.len(), 8);
    assert!(c.scaled.iter().all(|&v| (0.0..=0.8).contains(&v)));
    assert_eq!(c.regions.len(), 2);
    let zero = scaled_attention_weight(&roll, 0, 0.0, None).unwrap();
    assert!(zero.scaled.iter().all(|&v| v == 0.0));
}
