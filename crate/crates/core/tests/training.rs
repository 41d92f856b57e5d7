use ic_lab::resnet::{Layout, NetSpec};
use ic_lab::trainer::{load_dataset, train_on, Dataset, RunConfig, NAN_DUMP_FILE};
use ic_lab::Error;

fn small_config(layout: Layout, classes: usize, dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 4;
    cfg.net = NetSpec::new(1, layout, false, classes);
    cfg.epochs = 15;
    cfg.batch_size = 32;
    cfg.data.synthetic.train_size = 300;
    cfg.data.synthetic.test_size = 60;
    cfg.data.synthetic.image_size = 16;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

/// Multinomial logistic regression on raw pixels by full-batch gradient
/// descent; returns training accuracy.
fn logistic_train_accuracy(d: &Dataset) -> f64 {
    let n = d.len();
    let f = d.images.len() / n;
    let k = d.num_classes;
    let x: Vec<f64> = d.images.data().iter().map(|&v| v as f64).collect();
    let mut w = vec![0.0f64; k * (f + 1)];
    let predict = |w: &[f64], i: usize| -> Vec<f64> {
        let xi = &x[i * f..(i + 1) * f];
        (0..k)
            .map(|c| w[c * (f + 1) + f] + xi.iter().zip(&w[c * (f + 1)..c * (f + 1) + f]).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..300 {
        let mut g = vec![0.0f64; w.len()];
        for i in 0..n {
            let z = predict(&w, i);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let r = e[c] / s - if d.labels[i] == c { 1.0 } else { 0.0 };
                let row = &mut g[c * (f + 1)..(c + 1) * (f + 1)];
                for (gj, xj) in row[..f].iter_mut().zip(&x[i * f..(i + 1) * f]) {
                    *gj += r * xj;
                }
                row[f] += r;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= 0.05 * gj / n as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let z = predict(&w, i);
            let arg = (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            arg == d.labels[i]
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn three_class_blobs_are_learned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Layout::V1, 3, dir.path());
    cfg.data.synthetic.noise = 0.3;
    let data = load_dataset(&cfg.data, 3, cfg.seed).unwrap();
    let oracle = logistic_train_accuracy(&data.train);
    assert!(oracle >= 0.95, "linear oracle only reaches {oracle}");
    let out = train_on(&cfg, &data, &mut |_| {}).unwrap();
    let last = out.records.last().unwrap();
    assert!(last.train_acc >= 0.95, "final train accuracy {}", last.train_acc);
}

#[test]
fn first_epoch_loss_falls_for_every_layout() {
    for layout in Layout::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(layout, 10, dir.path());
        cfg.epochs = 1;
        cfg.data.synthetic.train_size = 640;
        let data = load_dataset(&cfg.data, 10, cfg.seed).unwrap();
        let out = train_on(&cfg, &data, &mut |_| {}).unwrap();
        let l = &out.first_epoch_losses;
        let q = l.len() / 4;
        let head: f64 = l[..q].iter().sum::<f64>() / q as f64;
        let tail: f64 = l[l.len() - q..].iter().sum::<f64>() / q as f64;
        assert!(tail < head, "{layout}: first-epoch loss {head} -> {tail}");
    }
}

#[test]
fn equal_seeds_give_equal_records() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Layout::V2, 10, dir.path());
        cfg.epochs = 2;
        cfg.data.synthetic.train_size = 96;
        train_on(&cfg, &load_dataset(&cfg.data, 10, cfg.seed).unwrap(), &mut |_| {})
            .unwrap()
            .records
            .into_iter()
            .map(|r| (r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Layout::Baseline, 10, dir.path());
    cfg.epochs = 3;
    cfg.data.synthetic.train_size = 96;
    cfg.schedule.base = 1e38;
    let data = load_dataset(&cfg.data, 10, cfg.seed).unwrap();
    match train_on(&cfg, &data, &mut |_| {}) {
        Err(Error::NonFinite { layer_norms, .. }) => assert!(!layer_norms.is_empty()),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.records.len())),
    }
    let dump = std::fs::read_to_string(dir.path().join(NAN_DUMP_FILE)).unwrap();
    assert!(dump.contains("layer_norms"));
}
