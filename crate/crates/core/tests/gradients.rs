use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxseg::gradcheck::*;
use voxseg::{Real, Tape, Tensor};

fn primitives_pass<T: Real>() {
    let tol = Tolerance::for_type::<T>();
    for name in PRIMITIVES {
        for seed in 0..20 {
            let r = check_primitive::<T>(name, seed, &tol).unwrap();
            assert!(r.passed(&tol), "{r:?}");
        }
    }
}

#[test]
fn primitives_match_finite_differences_f32() {
    primitives_pass::<f32>();
}

#[test]
fn primitives_match_finite_differences_f64() {
    primitives_pass::<f64>();
}

#[test]
fn bce_gradient_within_tenth_of_percent() {
    let tol = Tolerance::f64();
    for seed in 0..20 {
        let r = check_primitive::<f64>("bce_loss", seed, &tol).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn sigmoid_gradient_closed_form() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::from_fn(&[64], |_| r.random_range(-8.0..8.0));
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.sigmoid(v);
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    for (xi, gi) in x.data().iter().zip(g.get(v).unwrap().data()) {
        let sig = 1.0 / (1.0 + (-xi).exp());
        assert!((gi - sig * (1.0 - sig)).abs() < 1e-6);
    }
}

#[test]
fn unknown_primitive_rejected() {
    assert!(check_primitive::<f32>("softmax", 0, &Tolerance::f32()).is_err());
}
