use dnat::data::{gen_synthetic, Split, SyntheticSpec};

/// Multinomial logistic regression on raw pixels, full-batch gradient descent.
fn linear_accuracy(train: &Split, test: &Split, classes: usize, steps: usize) -> f64 {
    let f = train.images.len() / train.len();
    let mut w = vec![0.0; classes * (f + 1)];
    let row = |s: &Split, i: usize| s.images.data()[i * f..(i + 1) * f].to_vec();
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let wc = &w[c * (f + 1)..(c + 1) * (f + 1)];
                wc[f] + wc[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    let xs: Vec<Vec<f64>> = (0..train.len()).map(|i| row(train, i)).collect();
    let lr = 0.5 / f as f64;
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for (x, &y) in xs.iter().zip(&train.labels) {
            let z = logits(&w, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let d = e[c] / s - if c == y { 1.0 } else { 0.0 };
                let gc = &mut g[c * (f + 1)..(c + 1) * (f + 1)];
                for k in 0..f {
                    gc[k] += d * x[k];
                }
                gc[f] += d;
            }
        }
        let n = xs.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * gi / n;
        }
    }
    let hits = (0..test.len())
        .filter(|&i| {
            let z = logits(&w, &row(test, i));
            let best = (0..classes).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            best == test.labels[i]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn default_set_is_not_linearly_separable() {
    let spec = SyntheticSpec::default();
    let data = gen_synthetic(&spec).unwrap();
    let train_acc = linear_accuracy(&data.train, &data.train, spec.classes, 150);
    let test_acc = linear_accuracy(&data.train, &data.test, spec.classes, 150);
    println!("linear oracle: train {:.1}% test {:.1}%", 100.0 * train_acc, 100.0 * test_acc);
    assert!(test_acc < 0.9, "linear test accuracy {test_acc}");
    assert!(test_acc > 1.5 / spec.classes as f64, "linear model is at chance: {test_acc}");
}

#[test]
fn noiseless_unshifted_set_is_linearly_separable() {
    let spec = SyntheticSpec { noise: 0.0, jitter: 0, train_per_class: 20, test_per_class: 10, ..Default::default() };
    let data = gen_synthetic(&spec).unwrap();
    assert_eq!(linear_accuracy(&data.train, &data.test, spec.classes, 100), 1.0);
}
