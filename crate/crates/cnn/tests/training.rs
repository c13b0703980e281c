use dvk_cnn::network::init_layer;
use dvk_cnn::train::{
    accuracy, dataset_loss, extract_features_with, parameter_norm_sq, prepare_fine_tune, InMemorySource,
};
use dvk_cnn::{
    build_architecture, build_with, extract_features, fine_tune, init_network, sgd_step, train, ArchName,
    ArchitectureSpec, BuildOptions, Error, Gradients, LayerKind, LossKind, LrSchedule, Mode, SgdHyper, Tensor,
    TensorShape, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(classes: usize) -> ArchitectureSpec {
    build_with(ArchName::CnnF, &BuildOptions::micro(ArchName::CnnF, 64, 8, 64, classes)).unwrap()
}

fn constant_grads(net: &dvk_cnn::NetworkState<f64>, v: f64) -> Gradients<f64> {
    let mut g = Gradients::zeros_like(&net.params);
    for l in &mut g.layers {
        l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|x| *x = v);
    }
    g
}

#[test]
fn sgd_step_examples() {
    let spec = micro(3);
    let base = init_network::<f64>(&spec, 1).unwrap();

    let mut net = base.clone();
    sgd_step(&mut net, &constant_grads(&base, 0.7), &SgdHyper::uniform(0.0, 0.9, 5e-4)).unwrap();
    assert_eq!(net.params, base.params);

    let mut net = base.clone();
    sgd_step(&mut net, &constant_grads(&base, 0.5), &SgdHyper::uniform(0.1, 0.0, 0.0)).unwrap();
    for (a, b) in net.params.iter().zip(&base.params) {
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - (y - 0.05)).abs() < 1e-15);
        }
    }

    // two momentum steps on a constant gradient move by -lr g (1 + 1.9)
    let mut net = base.clone();
    let h = SgdHyper::uniform(0.1, 0.9, 0.0);
    let g = constant_grads(&base, 1.0);
    sgd_step(&mut net, &g, &h).unwrap();
    sgd_step(&mut net, &g, &h).unwrap();
    let moved = net.params[0].weights[0] - base.params[0].weights[0];
    assert!((moved + 0.1 * 2.9).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_leaves_state_unchanged() {
    let spec = micro(3);
    let mut net = init_network::<f64>(&spec, 1).unwrap();
    let before = net.clone();
    let mut g = constant_grads(&net, 0.1);
    g.layers[0].weights[3] = f64::NAN;
    assert!(matches!(sgd_step(&mut net, &g, &SgdHyper::uniform(0.1, 0.9, 0.0)), Err(Error::NonFinite(_))));
    assert_eq!(net, before);
}

#[test]
fn weight_decay_shrinks_norm() {
    let spec = micro(3);
    let mut net = init_network::<f64>(&spec, 2).unwrap();
    let zero = Gradients::zeros_like(&net.params);
    let mut last = parameter_norm_sq(&net.params);
    for _ in 0..20 {
        sgd_step(&mut net, &zero, &SgdHyper::uniform(0.1, 0.9, 5e-4)).unwrap();
        let n = parameter_norm_sq(&net.params);
        assert!(n < last);
        last = n;
    }
}

#[test]
fn init_variance_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = init_layer::<f64>(&LayerKind::FullyConnected { out_dim: 1000 }, TensorShape::flat(1000), &mut rng);
    assert_eq!(p.weights.len(), 1_000_000);
    let n = p.weights.len() as f64;
    let mean = p.weights.iter().sum::<f64>() / n;
    let var = p.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    assert!((var - 1e-2).abs() < 2e-4, "variance {var}");
    assert!(p.biases.iter().all(|&b| b == 0.0));
}

fn random_source(spec: &ArchitectureSpec, n: usize, classes: usize, seed: u64) -> InMemorySource<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = (0..n)
        .map(|_| Tensor::new(spec.input, (0..spec.input.len()).map(|_| rng.random_range(-0.5f32..0.5)).collect()).unwrap())
        .collect();
    let labels = (0..n).map(|i| vec![i % classes]).collect();
    InMemorySource { tensors, labels }
}

/// Each class brightens a different horizontal band of the image.
fn structured_source(spec: &ArchitectureSpec, n: usize, classes: usize, seed: u64) -> InMemorySource<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.input;
    let band = s.height / classes;
    let mut tensors = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % classes;
        let mut data = vec![0.0f32; s.len()];
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let on = y / band == class;
                    data[(c * s.height + y) * s.width + x] = if on { 0.5 } else { -0.5 } + rng.random_range(-0.2f32..0.2);
                }
            }
        }
        tensors.push(Tensor::new(s, data).unwrap());
        labels.push(vec![class]);
    }
    InMemorySource { tensors, labels }
}

#[test]
fn micro_net_overfits_one_batch() {
    let spec = micro(4);
    let mut net = init_network::<f32>(&spec, 0).unwrap();
    let src = random_source(&spec, 8, 4, 1);
    let labels = src.labels.clone();
    let hyper = SgdHyper::uniform(0.02, 0.9, 0.0);
    let mut last = f64::INFINITY;
    for step in 0..500 {
        let (l, mut g) = net
            .loss_and_gradients(&src.tensors, step, |s| dvk_cnn::loss::softmax_ce(s, &labels).map_err(Into::into))
            .unwrap();
        g.scale(1.0 / 8.0);
        last = l / 8.0;
        if last < 0.01 {
            break;
        }
        sgd_step(&mut net, &g, &hyper).unwrap();
    }
    assert!(last < 0.01, "loss {last}");
}

#[test]
fn frozen_hidden_fine_tune_loss_decreases() {
    let spec = micro(5);
    let base = init_network::<f32>(&spec, 3).unwrap();
    let src = structured_source(&spec, 60, 3, 2);
    let mut cfg = TrainConfig::new(LossKind::SoftmaxCe, LrSchedule::new(vec![(0.05, 0.0)], 100).unwrap(), 4);
    cfg.max_epochs = 10;
    cfg.batch_size = 10;
    cfg.weight_decay = 0.0;
    cfg.track_eval_loss = true;
    let (tuned, report) = fine_tune(&base, 3, &src, None, &mut cfg).unwrap();
    assert_eq!(tuned.spec.num_classes, 3);
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.eval_loss.unwrap()).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] < w[0] + 1e-3, "{losses:?}");
    }
    assert!(losses[9] < losses[0]);
    // hidden layers untouched at lr 0
    let idx = tuned.spec.classifier_index().unwrap();
    for i in 0..idx {
        assert_eq!(tuned.params[i], base.params[i]);
    }
}

#[test]
fn fine_tune_replaces_classifier() {
    let spec = micro(10);
    let net = init_network::<f32>(&spec, 0).unwrap();
    let t = prepare_fine_tune(&net, 3, 1).unwrap();
    let idx = t.spec.classifier_index().unwrap();
    assert_eq!(t.params[idx].biases.len(), 3);
    assert_eq!(t.shapes.last().unwrap().len(), 3);
}

#[test]
fn feature_extraction() {
    let spec = micro(3);
    let mut net = init_network::<f32>(&spec, 0).unwrap();
    let x = vec![Tensor::new(spec.input, vec![0.25; spec.input.len()]).unwrap()];
    assert!(matches!(extract_features(&net, &x), Err(Error::NotEvalMode)));
    net.set_mode(Mode::Eval);
    let f = extract_features(&net, &x).unwrap();
    assert_eq!(f[0].dim(), 64);
    assert!(f[0].norm() == 0.0 || (f[0].norm() - 1.0).abs() < 1e-6);
    let raw = extract_features_with(&net, &x, false).unwrap();
    assert!(raw[0].values.iter().all(|&v| v >= 0.0));

    // all-zero image through a zero network gives a zero vector
    for p in &mut net.params {
        p.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let z = vec![Tensor::zeros(spec.input)];
    assert!(extract_features(&net, &z).unwrap()[0].values.iter().all(|&v| v == 0.0));
}

#[test]
fn reduced_full7_variant_dims() {
    for (a, d) in [(ArchName::CnnM2048, 2048), (ArchName::CnnM1024, 1024), (ArchName::CnnM128, 128), (ArchName::CnnS, 4096)] {
        assert_eq!(build_architecture(a).feature_dim().unwrap(), d);
    }
}

#[test]
fn training_is_independent_of_thread_count() {
    let spec = micro(3);
    let src = random_source(&spec, 24, 3, 9);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut net = init_network::<f32>(&spec, 7).unwrap();
            let mut cfg = TrainConfig::new(LossKind::SoftmaxCe, LrSchedule::plateau(0.01, 1, 2), 3);
            cfg.max_epochs = 2;
            cfg.batch_size = 8;
            train(&mut net, &src, None, &mut cfg).unwrap();
            let acc = accuracy(&net, &src, 8).unwrap();
            let l = dataset_loss(&net, &src, LossKind::HingeRank, 8).unwrap();
            (net.params, acc, l)
        })
    };
    assert_eq!(run(1), run(4));
}
