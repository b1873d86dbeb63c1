use super::*;
use crate::data::PointCloud;
use crate::model::ModelSpec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_spec(classes: usize, points: usize) -> ModelSpec {
    ModelSpec {
        input_dim: 3,
        point_widths: vec![16, 32],
        classifier_widths: vec![24, classes],
        num_classes: classes,
        points,
        binarize: vec![false, true, true, false],
    }
}

/// Two classes of clouds centered at `±0.5` on the x axis.
fn separable(n: usize, points: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clouds = (0..n)
        .map(|i| {
            let label = i % 2;
            let cx = if label == 0 { 0.5 } else { -0.5 };
            let points = (0..points)
                .map(|_| {
                    let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                    [(cx + 0.1 * z[0]) as f32, (0.1 * z[1]) as f32, (0.1 * z[2]) as f32]
                })
                .collect();
            PointCloud { points, label }
        })
        .collect();
    Dataset::new(clouds, 2, points).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        lambda: -1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        tau: f64::NAN,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn defaults_match_documented_values() {
    let c = TrainConfig::default();
    assert_eq!((c.lambda, c.tau, c.base_lr, c.epochs, c.batch_size), (1e-4, 1e-3, 1e-3, 200, 64));
    assert_eq!(c.grad_variant, GradVariant::Analytic);
    assert_eq!(c.em_sign, EmSign::Attract);
}

fn model64(seed: u64) -> (Model<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::<f64>::build(&small_spec(3, 10), &mut rng).unwrap();
    let x = Tensor::normal(&[6, 10, 3], 0.0, 0.5, &mut rng);
    let labels = (0..6).map(|i| i % 3).collect();
    (m, x, labels)
}

#[test]
fn total_loss_without_reconstruction_is_cross_entropy() {
    let (m, x, labels) = model64(1);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let parts = total_loss(&m, &x, &labels, &cfg).unwrap();
    let (logits, _) = m.clone().forward(&x, Mode::Train).unwrap();
    let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert_eq!(parts.total, ce);
}

#[test]
fn total_loss_components_match_independent_evaluation() {
    for seed in 0..5 {
        let (m, x, labels) = model64(10 + seed);
        let cfg = TrainConfig {
            lambda: 0.37,
            ..TrainConfig::default()
        };
        let parts = total_loss(&m, &x, &labels, &cfg).unwrap();
        // Cross-entropy from the logits by direct log-sum-exp.
        let (logits, _) = m.clone().forward(&x, Mode::Train).unwrap();
        let ce: f64 = (0..labels.len())
            .map(|r| {
                let row = logits.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[labels[r]]
            })
            .sum::<f64>()
            / labels.len() as f64;
        // Reconstruction loss from the raw weights.
        let mut rec = 0.0;
        for l in m.binary_layers() {
            let n = l.in_features();
            for (i, w) in l.weights().data().iter().enumerate() {
                let a = l.alpha()[i / n];
                let b = if *w > 0.0 { 1.0 } else { -1.0 };
                rec += 0.5 * (w - a * b) * (w - a * b);
            }
        }
        assert!((parts.task - ce).abs() <= 1e-10);
        assert!((parts.reconstruction - rec).abs() <= 1e-10 * rec.max(1.0));
        assert!((parts.total - (parts.task + 0.37 * parts.reconstruction)).abs() <= 1e-12 * parts.total.abs().max(1.0));
    }
}

#[test]
fn binary_weights_have_no_reconstruction_loss() {
    let (mut m, x, labels) = model64(2);
    for l in m.binary_layers_mut() {
        let w = l.binary_weights();
        l.set_weights(w).unwrap();
        l.set_alpha(vec![1.0; l.out_features()]).unwrap();
    }
    let parts = total_loss(&m, &x, &labels, &TrainConfig::default()).unwrap();
    assert_eq!(parts.reconstruction, 0.0);
}

fn layer(seed: u64) -> BiFCLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = BiFCLayer::<f64>::new(12, 5, &mut rng);
    l.refit_gmm().unwrap();
    l
}

#[test]
fn weight_update_degenerate_cases() {
    let l = layer(3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let g = Tensor::<f64>::normal(&[5, 12], 0.0, 1.0, &mut rng);
    let plain = TrainConfig {
        lambda: 0.0,
        tau: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(assemble_weight_update(&l, &g, &plain).unwrap(), g);

    let rec_only = TrainConfig {
        lambda: 0.3,
        tau: 0.0,
        ..TrainConfig::default()
    };
    let got = assemble_weight_update(&l, &g, &rec_only).unwrap();
    let rec = l.grad_reconstruction_w(GradVariant::Analytic);
    for ((a, b), c) in got.data().iter().zip(g.data()).zip(rec.data()) {
        assert_eq!(*a, b + 0.3 * c);
    }
}

#[test]
fn em_term_vanishes_outside_the_means_and_attracts_inside() {
    let l = layer(4);
    let zero = Tensor::<f64>::zeros(&[5, 12]);
    let em_only = TrainConfig {
        lambda: 0.0,
        tau: 1.0,
        ..TrainConfig::default()
    };
    let d = assemble_weight_update(&l, &zero, &em_only).unwrap();
    let literal = assemble_weight_update(
        &l,
        &zero,
        &TrainConfig {
            em_sign: EmSign::Literal,
            ..em_only.clone()
        },
    )
    .unwrap();
    let mut inside = 0;
    for j in 0..5 {
        let g = &l.gmm()[j];
        for i in 0..12 {
            let w = l.weights().at2(j, i);
            let v = d.at2(j, i);
            assert_eq!(v, -literal.at2(j, i));
            if w <= g.mu[0] || w >= g.mu[1] {
                assert_eq!(v, 0.0);
            } else {
                inside += 1;
                let r = g.responsibility_or_nearest(w);
                assert_eq!(v, -em::em_force(w, g, &r));
                // A descent step `w - lr·d` moves toward the responsibility-weighted mean.
                let target = r[0] * g.mu[0] + r[1] * g.mu[1];
                assert!((target - w) * -v >= 0.0);
            }
        }
    }
    assert!(inside > 0);
}

#[test]
fn stale_mixture_is_an_error() {
    let mut l = layer(5);
    let _ = l.set_gmm(Vec::new());
    let g = Tensor::<f64>::zeros(&[5, 12]);
    assert!(matches!(
        assemble_weight_update(&l, &g, &TrainConfig::default()),
        Err(Error::StaleGmm(_))
    ));
    let l = layer(6);
    assert!(matches!(
        assemble_weight_update(&l, &Tensor::zeros(&[12, 5]), &TrainConfig::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn alpha_update_degenerate_cases() {
    let l = layer(7);
    let task: Vec<f64> = (0..5).map(|i| i as f64 * 0.1 - 0.2).collect();
    let plain = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(assemble_alpha_update(&l, &task, &plain).unwrap(), task);

    let mut b = BiFCLayer::from_weights(l.binary_weights()).unwrap();
    b.set_alpha(vec![1.0; 5]).unwrap();
    assert_eq!(assemble_alpha_update(&b, &task, &TrainConfig::default()).unwrap(), task);
    assert!(assemble_alpha_update(&b, &task[..3], &TrainConfig::default()).is_err());
}

#[test]
fn alpha_update_matches_finite_differences_of_total_loss() {
    use crate::model::LayerCache;
    use crate::nn::testing::{central_diff, rel_err, FD_STEP};
    fn sign_pattern(m: &Model<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let (_, cache) = m.clone().forward(x, Mode::Train).unwrap();
        cache
            .layers
            .iter()
            .filter_map(|c| match c {
                LayerCache::Binary(b) => Some(b.output.data().to_vec()),
                LayerCache::Real(_) => None,
            })
            .flatten()
            .collect()
    }
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..4 {
        let (mut m, x, labels) = model64(20 + seed);
        // Move the scales off the reconstruction optimum so both terms contribute.
        for l in m.binary_layers_mut() {
            l.update_alpha(|a| a.iter_mut().enumerate().for_each(|(j, v)| *v *= 1.5 + 0.1 * j as f64));
        }
        let cfg = TrainConfig {
            lambda: 0.5,
            ..TrainConfig::default()
        };
        let (logits, cache) = m.clone().forward(&x, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let grads = m.backward(&g, &cache).unwrap();
        for (li, layer) in m.layers().iter().enumerate() {
            let Some(b) = layer.as_binary() else { continue };
            let task = grads[li].param(ParamKind::Alpha).unwrap();
            let update = assemble_alpha_update(b, task.data(), &cfg).unwrap();
            for j in 0..b.out_features() {
                let perturbed = |h: f64| {
                    let mut mp = m.clone();
                    mp.layers_mut()[li].update_param(ParamKind::Alpha, |a| a[j] += h);
                    mp
                };
                // Skip channels where the probe flips an output sign: the loss jumps there.
                let signs = |mp: &Model<f64>| sign_pattern(mp, &x);
                if signs(&perturbed(FD_STEP)) != signs(&m) || signs(&perturbed(-FD_STEP)) != signs(&m) {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                let fd = central_diff(|h| total_loss(&perturbed(h), &x, &labels, &cfg).unwrap().total);
                assert!(rel_err(update[j], fd) < 1e-4, "layer {li} channel {j}: {} vs {fd}", update[j]);
            }
        }
    }
    assert!(checked > 10 * skipped, "{checked} checked, {skipped} skipped");
}

#[test]
fn real_control_learns_separable_data() {
    let data = separable(64, 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = Model::<f32>::build(&small_spec(2, 16).real_control(), &mut rng).unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        tau: 0.0,
        epochs: 50,
        batch_size: 16,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let report = train(&mut m, &data, None, &cfg).unwrap();
    assert!(report.last().unwrap().train_acc > 0.95, "{:?}", report.last());
    assert!(accuracy(&m, &data).unwrap() > 0.95);
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let data = separable(40, 12, 3);
    let test = separable(10, 12, 4);
    let run_once = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Model::<f32>::build(&small_spec(2, 12), &mut rng).unwrap();
        let cfg = TrainConfig {
            deterministic: true,
            ..quick_config()
        };
        train(&mut m, &data, Some(&test), &cfg).unwrap().to_csv()
    };
    let a = run_once();
    assert_eq!(a, run_once());
    assert_eq!(a.lines().count(), 4);
    assert!(a.starts_with(TrainReport::CSV_HEADER));
}

#[test]
fn hook_sees_every_epoch() {
    let data = separable(20, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = Model::<f32>::build(&small_spec(2, 8), &mut rng).unwrap();
    let mut seen = Vec::new();
    let report = train_with_hook(&mut m, &data, None, &quick_config(), |r, _| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(report.records.len(), 3);
    assert!(report.records.iter().all(|r| r.test_acc.is_none() && r.bimodality.len() == 2));
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let data = separable(20, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut m = Model::<f32>::build(&small_spec(2, 8), &mut rng).unwrap();
    let last = m.layers().len() - 1;
    m.layers_mut()[last].update_param(ParamKind::Weight, |w| w[0] = f32::INFINITY);
    match train(&mut m, &data, None, &quick_config()) {
        Err(Error::NonFiniteLoss { epoch, step, snapshot }) => {
            assert_eq!((epoch, step), (0, 0));
            assert!(snapshot.params.iter().any(|p| p.layer == last && p.non_finite == 1));
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn empty_or_mismatched_data_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut m = Model::<f32>::build(&small_spec(2, 8), &mut rng).unwrap();
    let empty = Dataset::new(Vec::new(), 2, 8).unwrap();
    assert!(matches!(train(&mut m, &empty, None, &quick_config()), Err(Error::Config(_))));
    let wide = Dataset::new(Vec::new(), 7, 8).unwrap();
    let _ = rng.random::<u8>();
    assert!(train(&mut m, &wide, None, &quick_config()).is_err());
}
