//! Central finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Compares the tape gradient of `f` at `inputs` against central
/// differences; `f` must build a scalar from the given leaves.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let params = ParamStore::new();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new(&params, Mode::Train);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };

    let mut g = Graph::new(&params, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let analytic = g.backward_leaves(out, &vars).unwrap();

    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
            assert!(
                err < TOL,
                "input {k}[{i}]: analytic {a} vs numeric {numeric} (rel {err})"
            );
        }
    }
}

/// Reduces `v` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(v));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

fn shapes(seed: u64) -> impl Iterator<Item = (usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10).map(move |_| (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..7)))
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in shapes(1) {
        let (a, b) = (rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n]));
        check(vec![a, b], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, 7)
        });
    }
}

#[test]
fn matmul_known_values() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let a = g.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
    let i = g.constant(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.matmul(a, bad), Err(NumericsError::ShapeMismatch(_))));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (a, b, _) in shapes(2) {
        let x = rand_tensor(&mut rng, &[a, b]);
        let y = rand_tensor(&mut rng, &[a, b]);
        let bias = rand_tensor(&mut rng, &[b]);
        check(vec![x.clone(), y.clone(), bias], |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[1])?;
            let r = g.relu(m)?;
            let ge = g.gelu(r)?;
            let bb = g.add_bias(ge, v[2])?;
            let sc = g.scale(bb, -1.7)?;
            project(g, sc, 3)
        });
    }
}

#[test]
fn softmax_values_and_gradients() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);
    let x = g.constant(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(x, 1).unwrap();
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12 && g.value(s).data()[1] < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (a, b, c) in shapes(3) {
        for axis in 0..3 {
            let x = Tensor::from_fn(&[a, b, c], |_| rng.gen_range(-3.0..3.0));
            check(vec![x.clone()], |g, v| {
                let s = g.softmax(v[0], axis)?;
                project(g, s, 5)
            });
            let mut g = Graph::new(&params, Mode::Eval);
            let xv = g.constant(x);
            let s = g.softmax(xv, axis).unwrap();
            let out = g.value(s);
            assert!(out.data().iter().all(|&p| p >= 0.0));
            let (outer, n, inner) = match axis {
                0 => (1, a, b * c),
                1 => (a, b, c),
                _ => (a * b, c, 1),
            };
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..n).map(|j| out.data()[(o * n + j) * inner + i]).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn layer_norm_properties_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ParamStore::new();
    for (r, w, _) in shapes(4) {
        let w = w + 1;
        let x = rand_tensor(&mut rng, &[r, w]);
        let gamma = rand_tensor(&mut rng, &[w]);
        let beta = rand_tensor(&mut rng, &[w]);
        check(vec![x.clone(), gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, 9)
        });
        let mut g = Graph::new(&params, Mode::Eval);
        let xv = g.constant(Tensor::from_fn(&[r, w], |i| (i as f64) * 0.37 - 1.0));
        let one = g.constant(Tensor::full(&[w], 1.0));
        let zero = g.constant(Tensor::zeros(&[w]));
        let y = g.layer_norm(xv, one, zero).unwrap();
        for row in g.value(y).data().chunks(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            assert!(mean.abs() < 1e-6);
            // eps shifts the variance by a factor var / (var + eps).
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }
    let mut g = Graph::new(&params, Mode::Eval);
    let xv = g.constant(Tensor::full(&[2, 5], 3.0));
    let one = g.constant(Tensor::full(&[5], 1.0));
    let zero = g.constant(Tensor::zeros(&[5]));
    let y = g.layer_norm(xv, one, zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (b, c, l) in shapes(5) {
        let b = b + 1;
        let x = rand_tensor(&mut rng, &[b, c, l]);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2])?;
            project(g, y, 11)
        });
        let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        check(vec![x, gamma, beta], |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv)?;
            project(g, y, 12)
        });
    }
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Train);
    let x = g.constant(Tensor::full(&[3, 2, 4], -2.0));
    let one = g.constant(Tensor::full(&[2], 1.0));
    let zero = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm_train(x, one, zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(stats.mean, vec![-2.0, -2.0]);
}

#[test]
fn dropout_modes() {
    let params = ParamStore::new();
    let x = Tensor::from_fn(&[4, 50], |i| i as f64 + 1.0);
    let mut g = Graph::new(&params, Mode::Eval);
    let xv = g.constant(x.clone());
    let y = g.dropout(xv, 0.1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::new(&params, Mode::Train).with_rng(42, 3);
    let xv = g.constant(x.clone());
    let y = g.dropout(xv, 0.1, 0).unwrap();
    let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
    assert!(kept > 150 && kept < 200, "{kept}");
    for (o, i) in g.value(y).data().iter().zip(x.data()) {
        assert!(*o == 0.0 || (o - i / 0.9).abs() < 1e-12);
    }
    // Same key, same mask.
    let mut g2 = Graph::new(&params, Mode::Train).with_rng(42, 3);
    let xv2 = g2.constant(x.clone());
    let y2 = g2.dropout(xv2, 0.1, 0).unwrap();
    assert_eq!(g.value(y), g2.value(y2));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(vec![rand_tensor(&mut rng, &[3, 7])], |g, v| {
        let y = g.dropout(v[0], 0.3, 9)?;
        project(g, y, 13)
    });
}

#[test]
fn gelu_zero_and_shape() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);
}

#[test]
fn conv1d_shapes_identity_and_gradients() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 768, 64]));
    let w = g.constant(Tensor::zeros(&[768, 768, 24]));
    let b = g.constant(Tensor::zeros(&[768]));
    let y = g.conv1d(x, w, b, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 768, 41]);
    let p = g.maxpool1d(y, 3, 3).unwrap();
    assert_eq!(g.shape(p), &[1, 768, 13]);

    let mut g = Graph::new(&params, Mode::Eval);
    let xt = Tensor::from_fn(&[2, 1, 5], |i| i as f64 * 0.5);
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, b, 1).unwrap();
    assert_eq!(g.value(y), &xt);
    let wide = g.constant(Tensor::zeros(&[1, 1, 6]));
    assert!(g.conv1d(x, wide, b, 1).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (bsz, cin, extra) in shapes(7) {
        let cout = 1 + extra % 3;
        let k = 1 + extra % 4;
        let stride = 1 + bsz % 2;
        let l = k + extra + 1;
        let x = rand_tensor(&mut rng, &[bsz, cin, l]);
        let w = rand_tensor(&mut rng, &[cout, cin, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        check(vec![x, w, b], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], stride)?;
            project(g, y, 17)
        });
    }
}

#[test]
fn maxpool_constant_and_gradients() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let x = g.constant(Tensor::full(&[1, 2, 41], 0.5));
    let y = g.maxpool1d(x, 3, 3).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 13]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.5));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (b, c, l) in shapes(8) {
        // Distinct values keep the argmax away from ties under perturbation.
        let mut vals: Vec<f64> = (0..b * c * (l + 3)).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        let x = Tensor::new(&[b, c, l + 3], vals).unwrap();
        check(vec![x], |g, v| {
            let y = g.maxpool1d(v[0], 3, 2)?;
            project(g, y, 19)
        });
    }
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (a, b, c) in shapes(9) {
        let x = rand_tensor(&mut rng, &[a, b + 1]);
        let y = rand_tensor(&mut rng, &[c, b + 1]);
        let table = rand_tensor(&mut rng, &[5, b]);
        let ids: Vec<usize> = (0..a + c).map(|i| (i * 3 + a) % 5).collect();
        check(vec![x, y, table], move |g, v| {
            let cat = g.concat_rows(v[0], v[1])?;
            let sl = g.slice_rows(cat, 1.min(a + c - 1), (a + c - 1).max(1))?;
            let t = g.transpose_last2(sl)?;
            let r = g.reshape(t, &[g.value(t).len()])?;
            let r = g.reshape(r, g.shape(t).to_vec().as_slice())?;
            let cols = g.slice_cols(r, 0, 1)?;
            let cc = g.concat_cols(&[r, cols])?;
            let e = g.embedding(v[2], &ids)?;
            let s1 = project(g, cc, 21)?;
            let s2 = project(g, e, 22)?;
            g.add(s1, s2)
        });
    }
}

#[test]
fn rel_shift_gradients_and_layout() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    // N = 2 queries, M = 1 memory slot: distances 0..3.
    let p = g.constant(Tensor::new(&[2, 3], vec![10., 11., 12., 20., 21., 22.]).unwrap());
    let s = g.rel_shift(p, 1).unwrap();
    // Row 0 (absolute 1): j=0 -> d=1, j=1 -> d=0, j=2 masked.
    // Row 1 (absolute 2): j=0 -> d=2, j=1 -> d=1, j=2 -> d=0.
    assert_eq!(g.value(s).data(), &[11., 10., 0., 22., 21., 20.]);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (n, m, _) in shapes(10) {
        let m = m - 1;
        let x = rand_tensor(&mut rng, &[n, n + m]);
        check(vec![x], |g, v| {
            let y = g.rel_shift(v[0], m)?;
            project(g, y, 23)
        });
    }
}

#[test]
fn cross_entropy_values_and_gradients() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[3, 4]));
    let (loss, bits) = g.cross_entropy(x, &[0, 1, 3]).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    assert!(bits.iter().all(|b| (b - 2.0).abs() < 1e-12));
    let x = g.constant(Tensor::new(&[1, 4], vec![60., 0., 0., 0.]).unwrap());
    let (loss, _) = g.cross_entropy(x, &[0]).unwrap();
    assert!(g.value(loss).item() < 1e-20);
    assert!(matches!(
        g.cross_entropy(x, &[4]),
        Err(NumericsError::TargetOutOfRange { target: 4, classes: 4 })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (b, v, _) in shapes(11) {
        let v = v + 1;
        let logits = Tensor::from_fn(&[b, v], |_| rng.gen_range(-2.0..2.0));
        let targets: Vec<usize> = (0..b).map(|i| (i * 7) % v).collect();
        check(vec![logits], |g, vars| {
            let (l, _) = g.cross_entropy(vars[0], &targets)?;
            Ok(l)
        });
    }
}

#[test]
fn composite_softmax_cross_entropy() {
    // Softmax feeding a linear map then cross-entropy, tighter tolerance.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let w = rand_tensor(&mut rng, &[5, 4]);
    check(vec![x, w], |g, v| {
        let s = g.softmax(v[0], 1)?;
        let l = g.matmul(s, v[1])?;
        let (loss, _) = g.cross_entropy(l, &[0, 3, 1])?;
        Ok(loss)
    });
}

#[test]
fn backward_contract() {
    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::new(&[2, 1], vec![0.5, -1.0]).unwrap(), true);
    let unused = params.add("unused", Tensor::new(&[1], vec![3.0]).unwrap(), true);
    let mut grads = GradStore::zeros_like(&params);

    let run = |grads: &mut GradStore| {
        let mut g = Graph::new(&params, Mode::Train);
        let x = g.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
        let wv = g.param(w);
        let y = g.matmul(x, wv).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l, grads).unwrap();
        let nonscalar = g.backward(wv, grads);
        assert!(matches!(nonscalar, Err(NumericsError::NotScalar(_))));
    };
    run(&mut grads);
    assert_eq!(grads.get(w).data(), &[2.0, 3.0]);
    assert_eq!(grads.get(unused).data(), &[0.0]);
    run(&mut grads);
    assert_eq!(grads.get(w).data(), &[4.0, 6.0]);
    grads.zero_grad();
    assert_eq!(grads.get(w).data(), &[0.0, 0.0]);

    let mut g = Graph::new(&params, Mode::Train);
    let x = g.input(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
    let d = g.detach(x);
    let wv = g.param(w);
    let y = g.matmul(d, wv).unwrap();
    let l = g.sum_all(y).unwrap();
    let gx = g.backward_leaves(l, &[x]).unwrap();
    assert_eq!(gx[0].data(), &[0.0, 0.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let params = ParamStore::new();
    let mut g = Graph::new(&params, Mode::Eval);
    let x = g.constant(Tensor::full(&[2], 1e300));
    assert!(matches!(g.mul(x, x), Err(NumericsError::NonFinite("mul"))));
}
