use almauc::alm::{train, validation_metric, AlmConfig, ValMetric};
use almauc::data::{Dataset, Sample};
use almauc::losses::{LossKind, LossSpec};
use almauc::netcore::{Head, Mlp};

/// Two clusters separated along the diagonal with a clear gap.
fn separable(n0: usize, n1: usize) -> Dataset {
    let mut samples = Vec::new();
    for i in 0..n0 + n1 {
        let t = (i as f64 * 0.618_034).fract() - 0.5;
        let s = (i as f64 * 0.414_214).fract() - 0.5;
        let (label, off) = if i < n0 { (0, -1.5) } else { (1, 1.5) };
        samples.push(Sample {
            id: i as u64,
            features: vec![off + t, off + s],
            label,
        });
    }
    Dataset::binary(samples).unwrap()
}

fn cfg() -> AlmConfig {
    AlmConfig {
        mu0: 1e-3,
        delta: 0.1,
        epochs: 50,
        batch_size: 32,
        learning_rate: 1e-2,
        patience: None,
        seed: 9,
        ..AlmConfig::default()
    }
}

#[test]
fn separable_data_drives_q_to_zero() {
    let data = separable(200, 20);
    let spec = LossSpec::new(LossKind::Bce, data.class_counts().to_vec()).unwrap();
    let model = Mlp::new(2, &[8], 1, Head::SigmoidScalar, 1).unwrap();
    let out = train(model, &data, &data, &spec, &cfg()).unwrap();
    let last = out.trace.epochs.last().unwrap();
    assert_eq!(last.mean_q, 0.0, "mean q at the last epoch");
    assert_eq!(validation_metric(&out.model, &data, ValMetric::Auc).unwrap(), 1.0);
}

#[test]
fn training_is_bit_deterministic() {
    let data = separable(120, 12);
    let spec = LossSpec::new(LossKind::SFl { gamma: 1.0 }, data.class_counts().to_vec()).unwrap();
    let run = || {
        let model = Mlp::new(2, &[6, 6], 1, Head::SigmoidScalar, 2).unwrap();
        train(model, &data, &data, &spec, &AlmConfig { epochs: 10, ..cfg() }).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    let bits = |p: Vec<f64>| p.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.model.params()), bits(b.model.params()));
    assert_eq!(a.state, b.state);
}

#[test]
fn mu_and_lambda_traces_are_monotone() {
    let data = separable(150, 15);
    let spec = LossSpec::new(LossKind::Bce, data.class_counts().to_vec()).unwrap();
    let model = Mlp::new(2, &[8], 1, Head::SigmoidScalar, 4).unwrap();
    let c = AlmConfig { epochs: 15, ..cfg() };
    let out = train(model, &data, &data, &spec, &c).unwrap();
    let mut prev = c.mu0;
    for e in &out.trace.epochs {
        assert!(e.mu == prev || e.mu == prev * c.rho);
        prev = e.mu;
    }
    // multipliers only grow: every recorded q is non-negative
    assert!(out.trace.batches.iter().all(|b| b.q.iter().all(|&q| q >= 0.0)));
    assert!(out.state.lambda_map().values().all(|&l| l >= 0.0));
}
