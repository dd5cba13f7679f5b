use fauna_core::features::{FeatureConfig, FeatureMatrix};
use fauna_core::hmm::{
    em_train, flat_start, forward_log_likelihood, viterbi, ClassModel, EmOptions, EmTrainer,
    GaussianEmission, HmmError, HmmModel, Recognizer,
};
use fauna_core::preprocess::FormatContract;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NINF: f64 = f64::NEG_INFINITY;

/// Plain-probability description of a toy model, kept separate from the
/// library types so the oracle never touches library arithmetic.
struct Toy {
    trans: Vec<Vec<f64>>,
    exit: Vec<f64>,
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
}

fn random_toy(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Toy {
    let mut trans = vec![vec![0.0; n]; n];
    let mut exit = vec![0.0; n];
    for i in 0..n {
        let stay = rng.random_range(0.05..1.0);
        let go = if i + 1 < n { rng.random_range(0.05..1.0) } else { 0.0 };
        let out = rng.random_range(0.05..1.0);
        let sum = stay + go + out;
        trans[i][i] = stay / sum;
        if i + 1 < n {
            trans[i][i + 1] = go / sum;
        }
        exit[i] = out / sum;
        // rebalance so the row sums to one to the last ulp
        exit[i] = 1.0 - trans[i].iter().sum::<f64>();
    }
    let mean = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let var = (0..n).map(|_| (0..d).map(|_| rng.random_range(0.2..3.0)).collect()).collect();
    Toy { trans, exit, mean, var }
}

fn to_model(toy: &Toy) -> HmmModel {
    let n = toy.exit.len();
    let ln = |p: f64| if p > 0.0 { p.ln() } else { NINF };
    let mut entry = vec![NINF; n];
    entry[0] = 0.0;
    HmmModel::new(
        entry,
        toy.trans.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect(),
        toy.exit.iter().map(|&p| ln(p)).collect(),
        toy.mean
            .iter()
            .zip(&toy.var)
            .map(|(m, v)| GaussianEmission::new(m.clone(), v.clone(), 1e-6).unwrap())
            .collect(),
    )
    .unwrap()
}

fn gauss_log(mean: &[f64], var: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..y.len() {
        s += -0.5 * (2.0 * std::f64::consts::PI * var[k]).ln()
            - (y[k] - mean[k]).powi(2) / (2.0 * var[k]);
    }
    s
}

/// Enumerates every state sequence in `n^T`, returning (log Σ p, log max p).
fn enumerate(toy: &Toy, ys: &[Vec<f64>]) -> (f64, f64) {
    let n = toy.exit.len();
    let t_len = ys.len();
    let mut logs = Vec::new();
    let mut path = vec![0usize; t_len];
    loop {
        if path[0] == 0 {
            let mut lp = 0.0f64;
            for t in 0..t_len {
                lp += gauss_log(&toy.mean[path[t]], &toy.var[path[t]], &ys[t]);
                let p = if t + 1 < t_len { toy.trans[path[t]][path[t + 1]] } else { toy.exit[path[t]] };
                lp += if p > 0.0 { p.ln() } else { NINF };
            }
            logs.push(lp);
        }
        // odometer increment
        let mut k = t_len;
        loop {
            if k == 0 {
                let max = logs.iter().cloned().fold(NINF, f64::max);
                let sum = if max == NINF {
                    NINF
                } else {
                    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
                };
                return (sum, max);
            }
            k -= 1;
            path[k] += 1;
            if path[k] < n {
                break;
            }
            path[k] = 0;
        }
    }
}

fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
    FeatureMatrix::from_rows(rows).unwrap()
}

#[test]
fn forward_and_viterbi_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked_viterbi = 0;
    for _ in 0..150 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let t = rng.random_range(1..=6);
        let toy = random_toy(&mut rng, n, d);
        let model = to_model(&toy);
        let rows = random_rows(&mut rng, t, d);
        let (oracle_sum, oracle_max) = enumerate(&toy, &rows);
        let f = fm(rows);

        let fwd = forward_log_likelihood(&model, &f).unwrap();
        assert!((fwd - oracle_sum).abs() < 1e-9, "forward {fwd} vs {oracle_sum}");

        match viterbi(&model, &f) {
            Ok((_, score)) => {
                assert!((score - oracle_max).abs() < 1e-9, "viterbi {score} vs {oracle_max}");
                assert!(score <= fwd + 1e-12);
                checked_viterbi += 1;
            }
            Err(HmmError::TooShort { .. }) => assert!(t < n),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked_viterbi >= 100);
}

fn row_sums_ok(m: &HmmModel) -> bool {
    (0..m.n_states()).all(|i| {
        let s: f64 = m.log_trans()[i].iter().map(|v| v.exp()).sum::<f64>() + m.log_exit()[i].exp();
        (s - 1.0).abs() < 1e-9
    })
}

#[test]
fn em_is_monotone_and_stays_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..24 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let n_seq = rng.random_range(2..=6);
        let data: Vec<FeatureMatrix> = (0..n_seq)
            .map(|_| {
                let t = rng.random_range(n.max(3)..=20);
                fm(random_rows(&mut rng, t, d))
            })
            .collect();
        let floor = 1e-3;
        let init = flat_start(&data, n, floor).unwrap();
        let mut trainer = EmTrainer::new(init, &data, 0.0).unwrap();
        for _ in 0..15 {
            trainer.step().unwrap();
            let m = trainer.model();
            assert!(row_sums_ok(m), "case {case}");
            assert!(m.emissions().iter().all(|e| e.variance().iter().all(|&v| v >= floor)));
        }
        for w in trainer.history().windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "case {case}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn one_state_em_recovers_ml_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let d = rng.random_range(1..=4);
        let lens: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(1..=30)).collect();
        let data: Vec<FeatureMatrix> = lens.iter().map(|&t| fm(random_rows(&mut rng, t, d))).collect();

        let frames: Vec<&[f64]> = data.iter().flat_map(|f| f.rows()).collect();
        let total = frames.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| frames.iter().map(|y| y[k]).sum::<f64>() / total).collect();
        let var: Vec<f64> = (0..d)
            .map(|k| (frames.iter().map(|y| (y[k] - mean[k]).powi(2)).sum::<f64>() / total).max(1e-3))
            .collect();
        // each sequence leaves exactly once, so P(exit) = sequences / frames
        let exit = lens.len() as f64 / total;

        let init = flat_start(&data, 1, 1e-3).unwrap();
        let (model, history) = em_train(init, &data, EmOptions::default()).unwrap();
        assert!(history.len() <= 3, "took {} iterations", history.len() - 1);
        let e = &model.emissions()[0];
        for k in 0..d {
            assert!((e.mean()[k] - mean[k]).abs() < 1e-9);
            assert!((e.variance()[k] - var[k]).abs() < 1e-9);
        }
        assert!((model.log_exit()[0].exp() - exit).abs() < 1e-9);
    }
}

fn separated(offset: f64) -> HmmModel {
    let half = 0.5f64.ln();
    let third = (1.0f64 / 3.0).ln();
    HmmModel::new(
        vec![0.0, NINF, NINF],
        vec![
            vec![0.8f64.ln(), 0.2f64.ln(), NINF],
            vec![NINF, half, half],
            vec![NINF, NINF, (2.0 / 3.0f64).ln()],
        ],
        vec![NINF, NINF, third],
        (0..3)
            .map(|i| GaussianEmission::new(vec![offset + i as f64, -offset], vec![1.0, 1.0], 1e-3).unwrap())
            .collect(),
    )
    .unwrap()
}

#[test]
fn separable_classes_are_recognized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let truth = [("low", separated(0.0)), ("high", separated(4.0))];
    let mut train = Vec::new();
    for (_, m) in &truth {
        let seqs: Vec<FeatureMatrix> = (0..40)
            .map(|_| loop {
                let s = m.sample(&mut rng);
                if s.len() >= 3 {
                    break fm(s);
                }
            })
            .collect();
        train.push(seqs);
    }
    let classes = truth
        .iter()
        .zip(&train)
        .map(|((label, _), data)| {
            let init = flat_start(data, 3, 1e-3).unwrap();
            let (hmm, _) = em_train(init, data, EmOptions::default()).unwrap();
            ClassModel { label: label.to_string(), hmm, log_prior: 0.5f64.ln() }
        })
        .collect();
    let rec = Recognizer::new(classes, 1.0, FeatureConfig::default(), FormatContract::default()).unwrap();

    let mut correct = 0;
    for i in 0..200 {
        let (label, m) = &truth[i % 2];
        let scores = rec.classify(&fm(m.sample(&mut rng))).unwrap();
        let total: f64 = scores.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
        if scores[0].0 == *label {
            correct += 1;
        }
    }
    assert!(correct >= 198, "{correct}/200");
}

fn toy_recognizer(priors: &[f64], scale: f64) -> Recognizer {
    let classes = priors
        .iter()
        .enumerate()
        .map(|(i, &p)| ClassModel {
            label: format!("c{i}"),
            hmm: separated(i as f64 * 0.7),
            log_prior: p.ln(),
        })
        .collect();
    Recognizer::new(classes, scale, FeatureConfig::default(), FormatContract::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prior_renormalization_keeps_argmax(
        raw in proptest::collection::vec(0.05f64..1.0, 3),
        factor in 0.1f64..10.0,
        scale in 0.0f64..3.0,
        ys in proptest::collection::vec(proptest::collection::vec(-3.0f64..5.0, 2), 3..10),
    ) {
        let total: f64 = raw.iter().sum();
        let priors: Vec<f64> = raw.iter().map(|p| p / total).collect();
        // scaling every prior by a common factor then renormalizing is a no-op on the
        // normalized priors; the argmax must not move
        let scaled: Vec<f64> = raw.iter().map(|p| p * factor).collect();
        let scaled_total: f64 = scaled.iter().sum();
        let renorm: Vec<f64> = scaled.iter().map(|p| p / scaled_total).collect();
        let f = FeatureMatrix::from_rows(ys).unwrap();
        let a = toy_recognizer(&priors, scale).classify(&f).unwrap();
        let b = toy_recognizer(&renorm, scale).classify(&f).unwrap();
        prop_assert_eq!(&a[0].0, &b[0].0);
    }

    #[test]
    fn viterbi_never_exceeds_forward(
        seed in any::<u64>(),
        t in 4usize..30,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = random_toy(&mut rng, 4, 2);
        let model = to_model(&toy);
        let f = fm(random_rows(&mut rng, t, 2));
        let (_, v) = viterbi(&model, &f).unwrap();
        prop_assert!(v <= forward_log_likelihood(&model, &f).unwrap() + 1e-12);
    }
}

#[test]
fn classify_rejects_dimension_mismatch() {
    let rec = toy_recognizer(&[0.5, 0.5], 1.0);
    let f = fm(vec![vec![0.0; 3]; 5]);
    assert!(matches!(rec.classify(&f), Err(HmmError::DimMismatch { expected: 2, found: 3 })));
}
