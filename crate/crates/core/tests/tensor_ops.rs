//! Forward oracles and finite-difference checks for every differentiable op.

use multitoken_core::{grad_check, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn loop_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let want = loop_matmul(a.data(), b.data(), 3, 4, 2);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batched_matmul_variants_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 3, 4]);
    let b_shared = random(&mut rng, &[4, 5]);
    let b_batched = random(&mut rng, &[2, 3, 4, 5]);
    let a_shared = random(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vbs = tape.constant(b_shared.clone());
    let vbb = tape.constant(b_batched.clone());
    let vas = tape.constant(a_shared.clone());

    let c = tape.matmul(va, vbs).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3, 5]);
    for bi in 0..6 {
        let want = loop_matmul(&a.data()[bi * 12..(bi + 1) * 12], b_shared.data(), 3, 4, 5);
        let got = &tape.value(c).data()[bi * 15..(bi + 1) * 15];
        assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    let c = tape.matmul(va, vbb).unwrap();
    for bi in 0..6 {
        let want = loop_matmul(
            &a.data()[bi * 12..(bi + 1) * 12],
            &b_batched.data()[bi * 20..(bi + 1) * 20],
            3,
            4,
            5,
        );
        let got = &tape.value(c).data()[bi * 15..(bi + 1) * 15];
        assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    let c = tape.matmul(vas, vbb).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3, 5]);
    for bi in 0..6 {
        let want = loop_matmul(
            a_shared.data(),
            &b_batched.data()[bi * 20..(bi + 1) * 20],
            3,
            4,
            5,
        );
        let got = &tape.value(c).data()[bi * 15..(bi + 1) * 15];
        assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    let bad = tape.constant(random(&mut rng, &[3, 4, 5]));
    assert!(tape.matmul(va, bad).is_err());
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = Tensor::from_fn(vec![5], |_| rng.gen_range(-4.0..4.0));
    let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
    let want: Vec<f64> = x.data().iter().map(|v| v.exp() / denom).collect();
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = tape.softmax(v, 0).unwrap();
    let got = tape.value(y).data();
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (g, w) in got.iter().zip(&want) {
        assert!(*g >= 0.0);
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn layernorm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // unit-scale row: variance of the output is var / (var + eps) exactly
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = x.iter().sum::<f64>() / 32.0;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
    let moments = |x: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, x.len()], x).unwrap());
        let g = tape.constant(Tensor::full(vec![32], 1.0));
        let b = tape.constant(Tensor::zeros(vec![32]));
        let y = tape.layernorm(v, g, b).unwrap();
        let d = tape.value(y).data().to_vec();
        let m = d.iter().sum::<f64>() / 32.0;
        let s2 = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 32.0;
        (m, s2)
    };
    let (m, s2) = moments(x);
    assert!(m.abs() < 1e-9);
    assert!((s2 - var / (var + 1e-5)).abs() < 1e-12);

    // wide row: the epsilon term is negligible
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let (m, s2) = moments(x);
    assert!(m.abs() < 1e-9);
    assert!((s2 - 1.0).abs() < 1e-6, "{s2}");
}

type Build = fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Var;

fn check_op(name: &str, shape: &[usize], build: Build) {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, shape);
        // the closure re-creates identical constants on every evaluation
        let r = grad_check(
            |t, v| {
                let mut inner = ChaCha8Rng::seed_from_u64(seed);
                let y = build(t, v, &mut inner);
                let w = t.constant(Tensor::from_fn(t.shape(y).to_vec(), |i| {
                    (i as f64 * 0.7).sin() + 1.1
                }));
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(
            r.max_rel_error < 1e-4,
            "{name} seed {seed}: {}",
            r.max_rel_error
        );
    }
}

#[test]
fn gradients_of_every_op() {
    check_op("matmul-rhs", &[2, 3, 4], |t, v, r| {
        let w = t.constant(random(r, &[4, 5]));
        t.matmul(v, w).unwrap()
    });
    check_op("matmul-lhs-param", &[4, 5], |t, v, r| {
        let x = t.constant(random(r, &[2, 3, 4]));
        t.matmul(x, v).unwrap()
    });
    check_op("matmul-shared-lhs", &[3, 4], |t, v, r| {
        let x = t.constant(random(r, &[2, 4, 2]));
        t.matmul(v, x).unwrap()
    });
    check_op("matmul-batched", &[2, 3, 4], |t, v, r| {
        let x = t.constant(random(r, &[2, 4, 2]));
        let y = t.matmul(v, x).unwrap();
        let z = t.transpose(v).unwrap();
        let q = t.matmul(v, z).unwrap();
        t.concat(&[q, y], 2).unwrap()
    });
    check_op("add-broadcast", &[3, 1], |t, v, r| {
        let x = t.constant(random(r, &[2, 3, 4]));
        t.add(x, v).unwrap()
    });
    check_op("add-suffix", &[4], |t, v, r| {
        let x = t.constant(random(r, &[2, 3, 4]));
        t.add(x, v).unwrap()
    });
    check_op("sub", &[2, 3], |t, v, r| {
        let x = t.constant(random(r, &[2, 3]));
        let a = t.sub(x, v).unwrap();
        t.sub(a, v).unwrap()
    });
    check_op("mul", &[2, 3], |t, v, r| {
        let x = t.constant(random(r, &[3]));
        let a = t.mul(v, x).unwrap();
        t.mul(a, v).unwrap()
    });
    check_op("scale-square-mask", &[6], |t, v, _| {
        let a = t.scale(v, 1.7);
        let b = t.square(a);
        t.mask(b, vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0]).unwrap()
    });
    check_op("gelu", &[2, 5], |t, v, _| {
        let a = t.scale(v, 3.0);
        t.gelu(a)
    });
    check_op("permute", &[2, 3, 4], |t, v, _| {
        let a = t.permute(v, &[2, 0, 1]).unwrap();
        let b = t.square(a);
        t.reshape(b, &[4, 6]).unwrap()
    });
    check_op("softmax-last", &[3, 4], |t, v, _| {
        let a = t.scale(v, 2.0);
        t.softmax(a, 1).unwrap()
    });
    check_op("softmax-inner", &[3, 4, 2], |t, v, _| {
        t.softmax(v, 1).unwrap()
    });
    check_op("layernorm-input", &[3, 5], |t, v, r| {
        let g = t.constant(random(r, &[5]));
        let b = t.constant(random(r, &[5]));
        t.layernorm(v, g, b).unwrap()
    });
    check_op("layernorm-gain", &[5], |t, v, r| {
        let x = t.constant(random(r, &[3, 5]));
        let b = t.constant(random(r, &[5]));
        t.layernorm(x, v, b).unwrap()
    });
    check_op("layernorm-bias", &[5], |t, v, r| {
        let x = t.constant(random(r, &[3, 5]));
        let g = t.constant(random(r, &[5]));
        t.layernorm(x, g, v).unwrap()
    });
    check_op("mean", &[4, 2], |t, v, _| {
        let s = t.square(v);
        t.mean(s)
    });
}

#[test]
fn seeded_program_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = random(&mut rng, &[4, 4]).with_grad();
        let x = random(&mut rng, &[8, 4]);
        let mut losses = Vec::new();
        for _ in 0..5 {
            let mut tape = Tape::new();
            let vw = tape.leaf(w.clone());
            let vx = tape.constant(x.clone());
            let h = tape.matmul(vx, vw).unwrap();
            let h = tape.gelu(h);
            let s = tape.softmax(h, 1).unwrap();
            let sq = tape.square(s);
            let loss = tape.mean(sq);
            losses.push(tape.value(loss).data()[0].to_bits());
            let g = tape.backward(loss).unwrap();
            let gw = g.get(vw).unwrap().to_vec();
            for (p, d) in w.data_mut().iter_mut().zip(gw) {
                *p -= 0.5 * d;
            }
        }
        losses
    };
    assert_eq!(run(), run());
}
