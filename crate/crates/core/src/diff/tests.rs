use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
    Matrix::random_uniform(r, c, -1.0, 1.0, &mut rng(seed))
}

/// Contracts an arbitrary node against a fixed random weighting so the
/// checked scalar depends on every entry.
fn project(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(x).shape();
    let w = t.constant(rand_m(r, c, seed));
    let m = t.mul(x, w)?;
    t.sum(m)
}

fn check(params: &[Matrix], f: impl FnMut(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    gradient_check(params, 1e-5, f).unwrap().max_rel_error
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a = t.param(Matrix::identity(2));
    let b = t.param(Matrix::from_rows(&[[2.0], [3.0]]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c), &Matrix::from_rows(&[[2.0], [3.0]]));

    let mut t = Tape::new();
    let a = t.param(Matrix::from_rows(&[[1.0, 2.0]]));
    let b = t.param(Matrix::from_rows(&[[3.0], [4.0]]));
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap(), &Matrix::from_rows(&[[3.0, 4.0]]));
    assert_eq!(t.grad(b).unwrap(), &Matrix::from_rows(&[[1.0], [2.0]]));

    let mut t = Tape::new();
    let z = t.constant(Matrix::zeros(2, 3));
    let any = t.constant(rand_m(3, 4, 1));
    let out = t.matmul(z, any).unwrap();
    assert_eq!(t.value(out), &Matrix::zeros(2, 4));
    assert!(t.matmul(any, any).is_err());
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::from_rows(&[[0.0, 0.0]]));
    let s = t.row_softmax(x).unwrap();
    assert_eq!(t.value(s), &Matrix::from_rows(&[[0.5, 0.5]]));

    let x = t.constant(Matrix::from_rows(&[[-1.0, 2.0]]));
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r), &Matrix::from_rows(&[[0.0, 2.0]]));

    let d = t.dropout(x, 0.0, true, &mut rng(0)).unwrap();
    assert_eq!(t.value(d), t.value(x));
    let d = t.dropout(x, 0.9, false, &mut rng(0)).unwrap();
    assert_eq!(t.value(d), t.value(x));
    assert!(t.dropout(x, 1.0, true, &mut rng(0)).is_err());
    assert!(t.dropout(x, -0.1, true, &mut rng(0)).is_err());
}

#[test]
fn dropout_scales_survivors() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::filled(50, 40, 1.0));
    let d = t.dropout(x, 0.25, true, &mut rng(3)).unwrap();
    let v = t.value(d);
    assert!(v
        .as_slice()
        .iter()
        .all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-15));
    let dropped = v.as_slice().iter().filter(|&&e| e == 0.0).count() as f64 / 2000.0;
    assert!((dropped - 0.25).abs() < 0.05);
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let l = t.constant(Matrix::from_rows(&[[10.0, -10.0]]));
    let ce = t.cross_entropy(l, &[0], &[0]).unwrap();
    assert!(t.value(ce)[(0, 0)] < 1e-4);

    let l = t.constant(Matrix::from_rows(&[[0.0, 0.0]]));
    let ce = t.cross_entropy(l, &[0], &[0]).unwrap();
    assert!((t.value(ce)[(0, 0)] - std::f64::consts::LN_2).abs() < 1e-12);

    let l = t.constant(Matrix::filled(4, 5, 0.3));
    let ce = t.cross_entropy(l, &[0, 1, 2, 4], &[0, 1, 2, 3]).unwrap();
    assert!((t.value(ce)[(0, 0)] - 5f64.ln()).abs() < 1e-12);

    assert!(t.cross_entropy(l, &[0, 1, 2, 4], &[]).is_err());
    assert!(t.cross_entropy(l, &[0, 1, 2, 9], &[3]).is_err());
}

#[test]
fn backward_trivia() {
    // f(x) = x
    let mut t = Tape::new();
    let x = t.param(Matrix::filled(1, 1, 4.0));
    t.backward(x).unwrap();
    assert_eq!(t.grad(x).unwrap()[(0, 0)], 1.0);

    // constant root: nothing requires a gradient
    let mut t = Tape::new();
    let p = t.param(Matrix::filled(1, 1, 4.0));
    let c = t.constant(Matrix::filled(1, 1, 2.0));
    t.backward(c).unwrap();
    assert!(t.grad(p).is_none());
    assert_eq!(t.grad_or_zeros(p)[(0, 0)], 0.0);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let x = t.param(Matrix::zeros(2, 2));
    assert!(matches!(t.backward(x), Err(Error::ShapeMismatch { .. })));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::BackwardTwice)));
    t.reset_grads();
    t.backward(s).unwrap();
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut t = Tape::new();
    let x = t.param(Matrix::from_rows(&[[1.0, -2.0]]));
    let y = t.add(x, x).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &Matrix::from_rows(&[[2.0, 2.0]]));
}

#[test]
fn non_finite_values_trip_an_error() {
    let mut t = Tape::new();
    let a = t.constant(Matrix::filled(1, 1, 1.0));
    let b = t.constant(Matrix::filled(1, 1, 0.0));
    assert!(matches!(t.div(a, b), Err(Error::NonFinite { op: "div" })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let m = rand_m(20, 7, 5).scale(30.0);
    let s = row_softmax(&m);
    for r in 0..s.rows() {
        assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradient_check_scalar_examples() {
    let quad = check(&[Matrix::filled(1, 1, 3.0)], |t, p| t.mul(p[0], p[0]));
    assert!(quad < 1e-8, "{quad}");
    let lin = check(&[Matrix::filled(1, 1, 3.0)], |t, p| t.mul_scalar(p[0], 5.0));
    assert!(lin < 1e-9, "{lin}");
    assert!(gradient_check(&[Matrix::zeros(1, 1)], 0.0, |t, p| t.sum(p[0])).is_err());
}

#[test]
fn gradient_check_every_primitive() {
    let a = rand_m(4, 3, 10);
    let b = rand_m(3, 5, 11);
    let same = rand_m(4, 3, 12);
    let pos = rand_m(4, 3, 13).map(|x| x.abs() + 0.5);
    let col = rand_m(4, 1, 14).map(|x| x.abs() + 0.5);
    let bias = rand_m(1, 3, 15);
    let tol = 1e-6;

    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul",
            check(&[a.clone(), b.clone()], |t, p| {
                let y = t.matmul(p[0], p[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "add",
            check(&[a.clone(), same.clone()], |t, p| {
                let y = t.add(p[0], p[1])?;
                project(t, y, 2)
            }),
        ),
        (
            "sub",
            check(&[a.clone(), same.clone()], |t, p| {
                let y = t.sub(p[0], p[1])?;
                project(t, y, 3)
            }),
        ),
        (
            "add_row",
            check(&[a.clone(), bias.clone()], |t, p| {
                let y = t.add_row(p[0], p[1])?;
                project(t, y, 4)
            }),
        ),
        (
            "mul",
            check(&[a.clone(), same.clone()], |t, p| {
                let y = t.mul(p[0], p[1])?;
                project(t, y, 5)
            }),
        ),
        (
            "div",
            check(&[a.clone(), pos.clone()], |t, p| {
                let y = t.div(p[0], p[1])?;
                project(t, y, 6)
            }),
        ),
        (
            "mul_col",
            check(&[a.clone(), col.clone()], |t, p| {
                let y = t.mul_col(p[0], p[1])?;
                project(t, y, 7)
            }),
        ),
        (
            "div_col",
            check(&[a.clone(), col.clone()], |t, p| {
                let y = t.div_col(p[0], p[1])?;
                project(t, y, 8)
            }),
        ),
        (
            "scalar",
            check(std::slice::from_ref(&a), |t, p| {
                let y = t.mul_scalar(p[0], -1.7)?;
                let y = t.add_scalar(y, 0.3)?;
                project(t, y, 9)
            }),
        ),
        (
            "relu",
            check(std::slice::from_ref(&a), |t, p| {
                let y = t.relu(p[0])?;
                project(t, y, 10)
            }),
        ),
        (
            "elu_plus_one",
            check(std::slice::from_ref(&a), |t, p| {
                let y = t.elu_plus_one(p[0])?;
                project(t, y, 11)
            }),
        ),
        (
            "dropout",
            check(std::slice::from_ref(&a), |t, p| {
                let y = t.dropout(p[0], 0.3, true, &mut rng(77))?;
                project(t, y, 12)
            }),
        ),
        (
            "concat/slice",
            check(&[a.clone(), same.clone()], |t, p| {
                let y = t.concat_cols(&[p[0], p[1]])?;
                let y = t.slice_cols(y, 1, 4)?;
                project(t, y, 13)
            }),
        ),
        (
            "transpose",
            check(std::slice::from_ref(&a), |t, p| {
                let y = t.transpose(p[0])?;
                project(t, y, 14)
            }),
        ),
        (
            "weighted_sum",
            check(&[a.clone(), same.clone(), rand_m(1, 2, 16)], |t, p| {
                let y = t.weighted_sum(&[p[0], p[1]], p[2])?;
                project(t, y, 15)
            }),
        ),
        (
            "scale_col_blocks",
            check(&[rand_m(3, 8, 17), rand_m(2, 2, 18)], |t, p| {
                let y = t.scale_col_blocks(p[0], p[1], 2)?;
                project(t, y, 16)
            }),
        ),
        (
            "block_weighted_sum",
            check(&[rand_m(3, 8, 19), rand_m(1, 5, 20)], |t, p| {
                let y = t.block_weighted_sum(p[0], p[1], 1, 2)?;
                project(t, y, 17)
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: rel err {err}");
    }
}

#[test]
fn gradient_check_softmax_composites() {
    let x = rand_m(5, 4, 30).scale(2.0);
    let err = check(std::slice::from_ref(&x), |t, p| {
        let y = t.row_softmax(p[0])?;
        project(t, y, 31)
    });
    assert!(err < 1e-5, "row_softmax {err}");

    let labels = [0, 2, 1, 3, 2];
    let err = check(&[x, rand_m(4, 4, 32)], |t, p| {
        let h = t.matmul(p[0], p[1])?;
        let h = t.elu_plus_one(h)?;
        t.cross_entropy(h, &labels, &[0, 1, 3, 4])
    });
    assert!(err < 1e-5, "cross_entropy {err}");
}

#[test]
fn param_store_binding() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Matrix::from_rows(&[[2.0]]));
    let unused = store.insert("unused", Matrix::zeros(1, 2));
    let mut t = Tape::new();
    let vars = store.bind(&mut t);
    let y = t.mul(vars[w], vars[w]).unwrap();
    t.backward(y).unwrap();
    let grads = store.grads(&t, &vars);
    assert_eq!(grads[w][(0, 0)], 4.0);
    assert_eq!(grads[unused], Matrix::zeros(1, 2));
    assert_eq!(store.by_name("w").unwrap()[(0, 0)], 2.0);
    assert_eq!(store.num_scalars(), 3);
}
