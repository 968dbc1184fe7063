//! Every tape op checked against central differences on random small shapes.

use numcore::{finite_diff_check, LrGroup, ParamStore, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn store(rng: &mut Rng, specs: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in specs {
        s.insert(*name, rand_tensor(rng, shape), LrGroup::NewModules).unwrap();
    }
    s
}

/// Reduces any output to a scalar through a fixed random projection so every
/// output entry gets a distinct upstream gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> numcore::Result<Var> {
    let mut rng = Rng::new(seed ^ 0xabc);
    let w = rand_tensor(&mut rng, t.shape(y));
    let w = t.constant(w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check<F>(s: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> numcore::Result<Var>,
{
    finite_diff_check(s, EPS, |s| {
        let mut t = Tape::new();
        let y = f(&mut t, s)?;
        let l = project(&mut t, y, 1)?;
        Ok((t, l))
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn matmul_and_bias(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let s = store(&mut rng, &[("a", &[m, k]), ("b", &[k, n]), ("bt", &[n, k]), ("c", &[n])]);
        let err = check(&s, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let bt = t.param(s, "bt")?;
            let c = t.param(s, "c")?;
            let x = t.matmul(a, b)?;
            let y = t.matmul_t(a, bt)?;
            let z = t.add(x, y)?;
            t.add_row_bias(z, c)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let s = store(&mut rng, &[("a", &[2, n]), ("b", &[2, n])]);
        let err = check(&s, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let x = t.sub(a, b)?;
            let y = t.mul(x, a)?;
            let y = t.scale(y, 0.7)?;
            let r = t.relu(y)?;
            let g = t.sigmoid(b)?;
            let sm = t.softmax_rows(a)?;
            let u = t.add(r, g)?;
            t.add(u, sm)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), rows in 1usize..4, c in 2usize..6) {
        let mut rng = Rng::new(seed);
        let s = store(&mut rng, &[("x", &[rows, c]), ("g", &[c]), ("b", &[c])]);
        let err = check(&s, |t, s| {
            let x = t.param(s, "x")?;
            let g = t.param(s, "g")?;
            let b = t.param(s, "b")?;
            t.layer_norm(x, g, b)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn reductions_and_layout(seed in any::<u64>(), b in 1usize..3, m in 1usize..4, d in 1usize..4) {
        let mut rng = Rng::new(seed);
        let s = store(&mut rng, &[("x", &[b, m, d]), ("y", &[b, d]), ("e", &[5, d])]);
        let err = check(&s, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.param(s, "y")?;
            let e = t.param(s, "e")?;
            let z = t.add_broadcast_mid(x, y)?;
            let mm = t.mean_mid(z)?;
            let flat = t.reshape(z, &[b * m, d])?;
            let rows = t.gather_rows(e, &[4, 0, 4])?;
            let cat = t.concat_last(mm, y)?;
            let s1 = t.sum(flat)?;
            let s2 = t.mean(rows)?;
            let s3 = t.mean(cat)?;
            let a = t.add(s1, s2)?;
            t.add(a, s3)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn attention(seed in any::<u64>(), b in 1usize..3, tq in 1usize..4, tk in 1usize..4, causal in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let tk = if causal { tq } else { tk };
        let s = store(&mut rng, &[("q", &[b, tq, 4]), ("k", &[b, tk, 4]), ("v", &[b, tk, 4])]);
        let err = check(&s, |t, s| {
            let q = t.param(s, "q")?;
            let k = t.param(s, "k")?;
            let v = t.param(s, "v")?;
            t.attention(q, k, v, 2, causal)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn gate_mix_and_clamp(seed in any::<u64>(), b in 1usize..3, n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let s = store(&mut rng, &[("a", &[b, n]), ("b", &[b, n]), ("g", &[b, 1])]);
        let err = check(&s, |t, s| {
            let a = t.param(s, "a")?;
            let bb = t.param(s, "b")?;
            let g = t.param(s, "g")?;
            let g = t.sigmoid(g)?;
            let g = t.clamp_max(g, 0.95)?;
            t.gate_mix(a, bb, g)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn focal_cross_entropy(seed in any::<u64>(), r in 1usize..5, c in 2usize..5, gamma in prop::sample::select(vec![0.0, 1.0, 2.0])) {
        let mut rng = Rng::new(seed);
        let s = store(&mut rng, &[("z", &[r, c])]);
        let targets: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
        let weights: Vec<f64> = (0..r).map(|_| rng.uniform_in(0.1, 2.0)).collect();
        let err = finite_diff_check(&s, EPS, |s| {
            let mut t = Tape::new();
            let z = t.param(s, "z")?;
            let l = t.softmax_ce(z, &targets, &weights, gamma, r as f64)?;
            Ok((t, l))
        }).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), c in 1usize..8) {
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&mut rng, &[3, c]).scale(20.0);
        let y = x.softmax_rows();
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(x.sigmoid().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mid = rand_tensor(&mut rng, &[8]).sigmoid();
        prop_assert!(mid.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = Rng::new(5);
    let x = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let rate = 0.3;
    let trials = 100_000;
    let mut acc = [0.0; 4];
    for _ in 0..trials {
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let y = t.dropout(xv, rate, &mut rng).unwrap();
        acc.iter_mut().zip(t.value(y).data()).for_each(|(a, v)| *a += v);
    }
    for (a, want) in acc.iter().zip(x.data()) {
        let mean = a / trials as f64;
        assert!((mean - want).abs() <= 0.01 * want.abs(), "{mean} vs {want}");
    }
}

#[test]
fn dropout_gradient_uses_mask() {
    let mut rng = Rng::new(9);
    let mut s = ParamStore::new();
    s.insert("x", Tensor::full(&[50], 1.0), LrGroup::Encoder).unwrap();
    let mut t = Tape::new();
    let x = t.param(&s, "x").unwrap();
    let y = t.dropout(x, 0.5, &mut rng).unwrap();
    let l = t.sum(y).unwrap();
    t.backward_into(l, &mut s).unwrap();
    assert_eq!(s.grad("x").unwrap().data(), t.value(y).data());
}

#[test]
fn training_trajectory_is_bit_identical() {
    use numcore::{AdamW, AdamWConfig};
    let run = || {
        let mut rng = Rng::new(77);
        let mut s = store(&mut rng, &[("w", &[6, 3]), ("b", &[3])]);
        let x = rand_tensor(&mut rng, &[8, 6]);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..10 {
            s.zero_grad();
            let mut t = Tape::new();
            let xv = t.constant(x.clone()).unwrap();
            let w = t.param(&s, "w").unwrap();
            let b = t.param(&s, "b").unwrap();
            let h = t.linear(xv, w, Some(b)).unwrap();
            let h = t.dropout(h, 0.2, &mut rng).unwrap();
            let l = t.softmax_ce(h, &[0, 1, 2, 0, 1, 2, 0, 1], &[1.0; 8], 0.0, 8.0).unwrap();
            t.backward_into(l, &mut s).unwrap();
            opt.step(&mut s, |_, _| Some(0.05)).unwrap();
        }
        s
    };
    assert!(run().values_bit_equal(&run()));
}
