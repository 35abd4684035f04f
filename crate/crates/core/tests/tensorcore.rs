use l2l::tensorcore::gradcheck::check_inputs;
use l2l::tensorcore::{Tape, Tensor, Var};
use l2l::Result;
use l2l::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn max_rel_err(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    check_inputs(inputs, f).unwrap().max_rel_err
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.leaf(&t(&[1, 2], &[1.0, 0.0]));
    let b = tape.leaf(&t(&[2, 1], &[2.0, 5.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[2.0]);
    assert_eq!(tape.shape(c), &[1, 1]);

    assert!(matches!(tape.matmul(a, a), Err(Error::Shape { .. })));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(&Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s), &[0.5]);

    let x = tape.leaf(&Tensor::scalar(1.3).requires_grad(true));
    let c = tape.clamp(x, 0.0, 1.0).unwrap();
    assert_eq!(tape.value(c), &[1.0]);
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0]);

    let neg = tape.leaf(&t(&[2], &[1.0, -1.0]));
    assert!(matches!(tape.log(neg), Err(Error::Domain { .. })));
    let zero = tape.leaf(&Tensor::scalar(0.0));
    assert!(matches!(tape.log(zero), Err(Error::Domain { .. })));

    let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn sigmoid_gradient_at_two() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0).requires_grad(true));
    let s = tape.sigmoid(x).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap()[0];
    assert!((g - 0.104994).abs() < 1e-6);
    let err = max_rel_err(&[Tensor::scalar(2.0)], |tp, v| tp.sigmoid(v[0]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(&Tensor::zeros(&[1, 4]));
    let s = tape.softmax_rows(z).unwrap();
    assert!(tape.value(s).iter().all(|v| (v - 0.25).abs() < 1e-15));

    let r = tape.leaf(&t(&[1, 2], &[1f64.ln(), 3f64.ln()]));
    let s = tape.softmax_rows(r).unwrap();
    assert!((tape.value(s)[0] - 0.25).abs() < 1e-12);
    assert!((tape.value(s)[1] - 0.75).abs() < 1e-12);

    let big = tape.leaf(&t(&[1, 2], &[1000.0, 1000.0]));
    let s = tape.softmax_rows(big).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5]);
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let v = tape.leaf(&t(&[2], &[3.0, 4.0]));
    let n = tape.l2_normalize(v).unwrap();
    assert!((tape.value(n)[0] - 0.6).abs() < 1e-15 && (tape.value(n)[1] - 0.8).abs() < 1e-15);

    let u = tape.leaf(&t(&[2], &[0.6, 0.8]));
    let n = tape.l2_normalize(u).unwrap();
    assert!((tape.value(n)[0] - 0.6).abs() < 1e-15 && (tape.value(n)[1] - 0.8).abs() < 1e-15);

    let z = tape.leaf(&Tensor::zeros(&[2]).requires_grad(true));
    let n = tape.l2_normalize(z).unwrap();
    assert_eq!(tape.value(n), &[0.0, 0.0]);
    let s = tape.sum(n).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[2, 3]).requires_grad(true));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // A second pass without reset doubles exactly.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);

    let nonscalar = tape.leaf(&Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(nonscalar), Err(Error::Contract(_))));
}

#[test]
fn accumulation_doubles_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0).requires_grad(true);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0).requires_grad(true);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(va, vb).unwrap();
        let c = tape.sigmoid(c).unwrap();
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        let once = tape.grad(va).unwrap().to_vec();
        tape.backward(l).unwrap();
        let twice = tape.grad(va).unwrap();
        for (x, y) in once.iter().zip(twice) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output element influences the loss differently.
fn project(tape: &mut Tape, v: Var, seed: u64) -> l2l::Result<Var> {
    let n = tape.value(v).len();
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(&shape, w)?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[test]
fn finite_difference_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4, 2], -2.0, 2.0);
        let c = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &[3, 4], 0.2, 2.0);
        let bias = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let img = rand_tensor(&mut rng, &[4, 4, 2], -1.0, 1.0);
        let kern = rand_tensor(&mut rng, &[18, 3], -1.0, 1.0);
        let kern1 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let s = rand_tensor(&mut rng, &[1], -1.5, 1.5);

        let checks: Vec<f64> = vec![
            max_rel_err(&[a.clone(), b.clone()], |tp, v| {
                let m = tp.matmul(v[0], v[1])?;
                project(tp, m, trial)
            }),
            max_rel_err(&[a.clone(), c.clone()], |tp, v| {
                let x = tp.add(v[0], v[1])?;
                let y = tp.sub(x, v[1])?;
                let z = tp.mul(y, v[1])?;
                project(tp, z, trial)
            }),
            max_rel_err(&[a.clone(), pos.clone()], |tp, v| {
                let d = tp.div(v[0], v[1])?;
                project(tp, d, trial)
            }),
            max_rel_err(&[a.clone()], |tp, v| {
                let x = tp.sigmoid(v[0])?;
                let y = tp.scale(x, 1.7)?;
                let z = tp.add_scalar(y, 0.3)?;
                project(tp, z, trial)
            }),
            max_rel_err(&[a.clone()], |tp, v| {
                let x = tp.relu(v[0])?;
                project(tp, x, trial)
            }),
            max_rel_err(&[pos.clone()], |tp, v| {
                let x = tp.log(v[0])?;
                project(tp, x, trial)
            }),
            max_rel_err(&[a.clone()], |tp, v| {
                let x = tp.clamp(v[0], -1.0, 1.0)?;
                project(tp, x, trial)
            }),
            max_rel_err(&[a.clone()], |tp, v| {
                let x = tp.softmax_rows(v[0])?;
                project(tp, x, trial)
            }),
            max_rel_err(&[a.clone()], |tp, v| {
                let x = tp.l2_normalize(v[0])?;
                project(tp, x, trial)
            }),
            max_rel_err(&[a.clone()], |tp, v| {
                let x = tp.transpose(v[0])?;
                let y = tp.mean(x)?;
                let z = tp.mul(y, y)?;
                tp.sum(z)
            }),
            max_rel_err(&[a.clone(), bias.clone()], |tp, v| {
                let x = tp.add_bias(v[0], v[1])?;
                project(tp, x, trial)
            }),
            max_rel_err(&[s.clone(), a.clone()], |tp, v| {
                let x = tp.mul_scalar_var(v[0], v[1])?;
                project(tp, x, trial)
            }),
            max_rel_err(&[img.clone(), kern.clone()], |tp, v| {
                let x = tp.conv2d(v[0], v[1], 3)?;
                project(tp, x, trial)
            }),
            max_rel_err(&[img.clone(), kern1.clone()], |tp, v| {
                let x = tp.conv2d(v[0], v[1], 1)?;
                project(tp, x, trial)
            }),
            max_rel_err(&[img.clone()], |tp, v| {
                let x = tp.avg_pool(v[0], 2)?;
                let y = tp.upsample(x, 2)?;
                let z = tp.reshape(y, &[16, 2])?;
                project(tp, z, trial)
            }),
            max_rel_err(&[a.clone(), c.clone()], |tp, v| {
                let x = tp.concat_last(v[0], v[1])?;
                project(tp, x, trial)
            }),
        ];
        for (i, e) in checks.iter().enumerate() {
            assert!(*e <= 1e-5, "trial {trial} check {i}: rel err {e}");
            worst = worst.max(*e);
        }
    }
    assert!(worst <= 1e-5);
}

#[test]
fn two_layer_mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[6, 8], -0.5, 0.5);
        let b1 = rand_tensor(&mut rng, &[8], -0.1, 0.1);
        let w2 = rand_tensor(&mut rng, &[8, 2], -0.5, 0.5);
        let b2 = rand_tensor(&mut rng, &[2], -0.1, 0.1);
        let err = max_rel_err(&[x, w1, b1, w2, b2], |tp, v| {
            let h = tp.matmul(v[0], v[1])?;
            let h = tp.add_bias(h, v[2])?;
            let h = tp.relu(h)?;
            let o = tp.matmul(h, v[3])?;
            let o = tp.add_bias(o, v[4])?;
            let o = tp.sigmoid(o)?;
            let sq = tp.mul(o, o)?;
            tp.mean(sq)
        });
        assert!(err <= 1e-5, "{err}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let m = Tensor::from_rows(&rows).unwrap();
        let shifted = Tensor::from_rows(
            &rows.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect::<Vec<Vec<f64>>>(),
        ).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(&m);
        let b = tape.leaf(&shifted);
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        for (ra, rb) in tape.value(sa).chunks(5).zip(tape.value(sb).chunks(5)) {
            prop_assert!((ra.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(ra.iter().all(|v| *v >= 0.0));
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
