use dnat::gradcheck::finite_diff_check;
use dnat::graph::Shape;
use dnat::mixed::{Parameterization, RowKey, ThetaTable, Tying};
use dnat::model::{MixedArch, Model};
use dnat::tape::{ParamId, ParamStore, Tape, Var};
use dnat::templates::{build_network, NetworkConfig, TemplateName};
use dnat::tensor::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so relu kinks stay outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar loss with non-uniform upstream gradient: the flattened output is
/// projected by a fixed irregular matrix onto 3 logits under cross-entropy.
/// A plain softmax over the output would be shift-invariant and give
/// broadcast inputs an exactly zero gradient. The 1/len scale keeps logits
/// O(1) so the loss does not saturate and leave gradients below roundoff.
fn probe(t: &mut Tape, y: Var) -> Result<Var, TensorError> {
    let len = t.value(y).len();
    let flat = t.reshape(y, vec![1, len])?;
    let proj = (0..3 * len).map(|i| (1.3 * i as f64 + 0.7).sin() / len as f64).collect();
    let w = t.constant(Tensor::new(vec![3, len], proj)?);
    let b = t.constant(Tensor::zeros(&[3]));
    let logits = t.dense(flat, w, b)?;
    t.softmax_cross_entropy(logits, &[1])
}

const TOL: f64 = 1e-6;

/// Max relative error with the denominator floored at 1% of the largest
/// analytic gradient, so coordinates near zero are judged against roundoff
/// at the scale of the check instead of against their own magnitude.
fn check(store: &mut ParamStore, ids: &[ParamId], f: impl FnMut(&ParamStore, &mut Tape) -> Result<Var, TensorError>) -> f64 {
    let pairs = finite_diff_check(store, ids, 1e-5, f).unwrap().pairs;
    let floor = 1e-2 * pairs.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
    pairs.iter().map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-8)).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_gradients(seed in any::<u64>(), n in 1usize..3, c in 1usize..3, o in 1usize..3, hw in 2usize..6, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[n, c, hw, hw]));
        let w = s.add("w", random(&mut rng, &[o, c, k, k]));
        let b = s.add("b", random(&mut rng, &[o]));
        let err = check(&mut s, &[x, w, b], |s, t| {
            let (xv, wv, bv) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
            let y = t.conv2d(xv, wv, bv, stride)?;
            probe(t, y)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn dense_gradients(seed in any::<u64>(), n in 1usize..4, f in 1usize..5, o in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[n, f]));
        let w = s.add("w", random(&mut rng, &[o, f]));
        let b = s.add("b", random(&mut rng, &[o]));
        let err = check(&mut s, &[x, w, b], |s, t| {
            let (xv, wv, bv) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
            let y = t.dense(xv, wv, bv)?;
            probe(t, y)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu_gradients(seed in any::<u64>(), len in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", away_from_zero(&mut rng, &[1, len]));
        let err = check(&mut s, &[x], |s, t| {
            let xv = t.param(s, x)?;
            let y = t.relu(xv)?;
            probe(t, y)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn pooling_gradients(seed in any::<u64>(), n in 1usize..3, c in 1usize..3, h in 2usize..6, w in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[n, c, h, w]));
        let err = check(&mut s, &[x], |s, t| {
            let xv = t.param(s, x)?;
            let y = t.avgpool2x2(xv)?;
            probe(t, y)
        });
        prop_assert!(err < TOL, "avgpool {err}");
        let err = check(&mut s, &[x], |s, t| {
            let xv = t.param(s, x)?;
            let y = t.global_avg_pool(xv)?;
            probe(t, y)
        });
        prop_assert!(err < TOL, "global {err}");
    }

    #[test]
    fn add_scale_index_sum_gradients(seed in any::<u64>(), len in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&mut rng, &[len]));
        let b = s.add("b", random(&mut rng, &[len]));
        let k = s.add("k", random(&mut rng, &[1]));
        let err = check(&mut s, &[a, b, k], |s, t| {
            let (av, bv, kv) = (t.param(s, a)?, t.param(s, b)?, t.param(s, k)?);
            let sum = t.add(av, bv)?;
            let scaled = t.scale(sum, kv)?;
            let first = t.index(scaled, 0)?;
            let y = t.scale(scaled, first)?;
            let logits = probe(t, y)?;
            let total = t.sum(bv)?;
            let extra = t.scale(total, kv)?;
            t.add(logits, extra)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn masked_softmax_gradients(seed in any::<u64>(), mask_id in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let th = s.add("theta", random(&mut rng, &[3]));
        let mask = [true, mask_id, true];
        let err = check(&mut s, &[th], |s, t| {
            let v = t.param(s, th)?;
            let p = t.softmax(v, &mask)?;
            let p2 = t.index(p, 2)?;
            let y = t.scale(p, p2)?;
            probe(t, y)
        });
        prop_assert!(err < TOL, "{err}");
        if !mask_id {
            prop_assert_eq!(s.grad(th).data()[1], 0.0);
        }
    }

    #[test]
    fn cross_entropy_gradients(seed in any::<u64>(), n in 1usize..4, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let z = s.add("z", random(&mut rng, &[n, k]));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
        let err = check(&mut s, &[z], |s, t| {
            let v = t.param(s, z)?;
            t.softmax_cross_entropy(v, &labels)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, &[1, 2, 4, 4]));
        let w = s.add("w", random(&mut rng, &[2, 2, 3, 3]));
        let b = s.add("b", random(&mut rng, &[2]));
        let first = |t: &mut Tape, s: &ParamStore| -> Result<Var, TensorError> {
            let (xv, wv, bv) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
            let y = t.conv2d(xv, wv, bv, 1)?;
            let y = t.relu(y)?;
            t.sum(y)
        };
        let second = |t: &mut Tape, s: &ParamStore| -> Result<Var, TensorError> {
            let (xv, wv) = (t.param(s, x)?, t.param(s, w)?);
            let y = t.global_avg_pool(xv)?;
            let bias = t.constant(Tensor::zeros(&[2]));
            let wflat = t.reshape(wv, vec![2, 18])?;
            let wsum = t.sum(wflat)?;
            let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
            let logits = t.dense(y, eye, bias)?;
            let l = t.softmax_cross_entropy(logits, &[1])?;
            t.scale(l, wsum)
        };
        let grads = |s: &mut ParamStore, which: u8| -> Vec<Vec<f64>> {
            let mut t = Tape::new();
            let loss = match which {
                0 => first(&mut t, s).unwrap(),
                1 => second(&mut t, s).unwrap(),
                _ => {
                    let a = first(&mut t, s).unwrap();
                    let c = second(&mut t, s).unwrap();
                    t.add(a, c).unwrap()
                }
            };
            t.backward(loss, s).unwrap();
            [x, w, b].iter().map(|&id| s.grad(id).data().to_vec()).collect()
        };
        let (g1, g2, g12) = (grads(&mut s, 0), grads(&mut s, 1), grads(&mut s, 2));
        for p in 0..3 {
            for i in 0..g12[p].len() {
                let sum = g1[p][i] + g2[p][i];
                prop_assert!((g12[p][i] - sum).abs() <= 1e-12 * sum.abs().max(1.0), "{} vs {}", g12[p][i], sum);
            }
        }
        // replay is bit-identical
        prop_assert_eq!(grads(&mut s, 2), g12);
    }
}

fn theta_grads(tying: Tying, seed: u64, rows: &[[f64; 3]], mode: Parameterization) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = NetworkConfig::new(3, 3, Shape::new(2, 6, 6)).with_cells(3);
    let net = build_network(TemplateName::PlainCnn, &cfg).unwrap();
    let mut model = Model::init(net, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let table = ThetaTable::new(&model.network, tying, &mut model.params).unwrap();
    for i in 0..table.rows() {
        let edge = match table.entries()[i].key {
            RowKey::Template { edge, .. } => edge,
            RowKey::Edge(at) => at.edge,
        };
        table.set_row(&mut model.params, i, rows[edge]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let images = random(&mut rng, &[2, 2, 6, 6]);
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, images, Some(MixedArch { theta: &table, mode })).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[0, 2]).unwrap();
    tape.backward(loss, &mut model.params).unwrap();
    let theta = table.param_ids().iter().map(|&id| model.params.grad(id).data().to_vec()).collect();
    let omega = model.omega_ids().iter().map(|&id| model.params.grad(id).data().to_vec()).collect();
    (theta, omega)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cell_tied_gradient_is_the_sum_of_instance_gradients(
        seed in any::<u64>(),
        rows in prop::collection::vec(prop::array::uniform3(-1.0f64..2.0), 4),
        softmax in any::<bool>(),
    ) {
        let mode = if softmax { Parameterization::Softmax } else { Parameterization::Raw };
        let (tied, omega_tied) = theta_grads(Tying::Cell, seed, &rows, mode);
        let (full, omega_full) = theta_grads(Tying::Full, seed, &rows, mode);
        prop_assert_eq!(tied.len(), 4);
        prop_assert_eq!(full.len(), 12);
        for e in 0..4 {
            for k in 0..3 {
                let sum: f64 = (0..3).map(|cell| full[cell * 4 + e][k]).sum();
                prop_assert!((tied[e][k] - sum).abs() <= 1e-10 * sum.abs().max(1e-3), "edge {e} comp {k}: {} vs {sum}", tied[e][k]);
            }
        }
        prop_assert_eq!(omega_tied, omega_full);
    }
}

#[test]
fn raw_mode_theta_none_gradient_is_exactly_zero() {
    let rows = [[0.3, -0.2, 1.1], [0.0, 0.5, 0.7], [1.0, 1.0, 1.0], [-0.4, 0.1, 0.9]];
    let (theta, _) = theta_grads(Tying::Full, 7, &rows, Parameterization::Raw);
    assert!(theta.iter().all(|g| g[0] == 0.0));
    assert!(theta.iter().any(|g| g[2] != 0.0));
}
