use modfeat::data::{generate_synthetic, load_csv, split, write_csv, SplitPlan, SyntheticParams};
use modfeat::network::read_checkpoint;
use modfeat::trainer::{evaluate, load_artifacts, read_metrics, train, Method, TrainConfig, TrainOutputs};

fn small() -> SyntheticParams {
    SyntheticParams {
        num_classes: 3,
        num_domains: 3,
        signal_dims: 4,
        noise_dims: 4,
        samples_per_class_per_domain: 20,
        seed: 6,
        ..SyntheticParams::default()
    }
}

fn plan() -> SplitPlan {
    SplitPlan {
        target_domain: 2,
        labels_per_class: 4,
        seed: 1,
    }
}

fn config(method: Method) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        per_domain_labeled: 4,
        per_domain_unlabeled: 8,
        seed: 1,
        method,
        ..TrainConfig::default()
    }
}

#[test]
fn csv_round_trip_keeps_every_sample() {
    let data = generate_synthetic(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&data, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.len(), data.len());
    assert_eq!((back.num_classes, back.num_domains, back.input_dim), (3, 3, 8));
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!((a.class_id, a.domain_id), (b.class_id, b.domain_id));
        assert_eq!(a.features, b.features);
    }
    // The split only depends on what the file records.
    assert_eq!(split(&data, &plan()).unwrap().labeled, split(&back, &plan()).unwrap().labeled);
}

#[test]
fn checkpoints_reproduce_reported_accuracy() {
    let data = generate_synthetic(&small()).unwrap();
    let sp = split(&data, &plan()).unwrap();
    for method in [Method::Fm, Method::FixmatchBaseline] {
        let dir = tempfile::tempdir().unwrap();
        let result = train(&data, &plan(), &config(method), &TrainOutputs::with_dir(dir.path())).unwrap();

        let ck = read_checkpoint(dir.path().join("final.ckpt")).unwrap();
        let (model, sar, loaded) = load_artifacts(&ck).unwrap();
        assert_eq!(loaded, method);
        assert_eq!(sar.is_some(), method == Method::Fm);
        for name in ["extractor.hidden0.weight", "classifier.bias", "modulator"] {
            let value = |m: &modfeat::network::Model| m.params.value(m.params.find(name).unwrap()).clone();
            assert_eq!(value(&model), value(&result.model), "{name}");
        }

        let acc = evaluate(&model, sar.as_ref(), &sp.target_test).unwrap();
        let last = result.reports.last().unwrap();
        assert_eq!(acc, last.target_accuracy, "{method}");

        let logged = read_metrics(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(logged.len(), 3);
        assert_eq!(logged[2].target_accuracy, last.target_accuracy);
        assert_eq!(logged[2].keep_rate, last.keep_rate);
        assert!(dir.path().join("best.ckpt").exists());
    }
}

#[test]
fn baseline_ignores_the_modulator() {
    let data = generate_synthetic(&small()).unwrap();
    let result = train(&data, &plan(), &config(Method::FixmatchBaseline), &TrainOutputs::default()).unwrap();
    assert!(result.bank.is_none());
    assert!(result.reports.iter().all(|r| r.losses.l_d == 0.0 && r.losses.l_ud == 0.0));
}

#[test]
fn target_domain_out_of_range_is_rejected() {
    let data = generate_synthetic(&small()).unwrap();
    let bad = SplitPlan {
        target_domain: 3,
        ..plan()
    };
    assert!(train(&data, &bad, &config(Method::Fm), &TrainOutputs::default()).is_err());
}
