use voxseg::{build_model, Mode, Model, ModelConfig, Tape, Tensor};

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 40) as f32 / (1u64 << 24) as f32
    })
}

fn train_forward(m: &mut Model<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = m.forward_with(&mut tape, v, Mode::Train, false).unwrap().output;
    tape.value(out).clone()
}

fn assert_open_unit(t: &Tensor<f32>) {
    assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn m3_full_size_forward_shape() {
    let cfg = ModelConfig::m3(2);
    let mut m = build_model::<f32>(&cfg, 1).unwrap();
    let x = noise(&m.input_dims(1), 3);
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 49, 128, 128]);
    assert_open_unit(&y);
}

#[test]
fn m1_full_size_forward_shape() {
    let cfg = ModelConfig::m1(2);
    let mut m = build_model::<f32>(&cfg, 1).unwrap();
    let x = noise(&m.input_dims(1), 4);
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 28, 44, 44]);
    assert_open_unit(&y);
}

#[test]
fn desk_m3_shape_and_reproducible_init() {
    let cfg = ModelConfig::desk_m3();
    let mut a = build_model::<f32>(&cfg, 42).unwrap();
    let b = build_model::<f32>(&cfg, 42).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    for (p, q) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(p.name, q.name);
        let (pb, qb): (Vec<u32>, Vec<u32>) = (
            p.value.data().iter().map(|v| v.to_bits()).collect(),
            q.value.data().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(pb, qb, "{}", p.name);
    }
    let c = build_model::<f32>(&cfg, 43).unwrap();
    assert_ne!(a.params().at(0).value, c.params().at(0).value);
    let y = a.predict(&noise(&a.input_dims(1), 0)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 17, 32, 32]);
}

#[test]
fn parameter_count_ordering() {
    for base in [2, 4, 8, 16] {
        let m1 = build_model::<f32>(&ModelConfig::m1(base), 0).unwrap().parameter_count();
        let m2 = build_model::<f32>(&ModelConfig::m2(base), 0).unwrap().parameter_count();
        let m3 = build_model::<f32>(&ModelConfig::m3(base), 0).unwrap().parameter_count();
        assert!(m3 > m2, "base {base}: m3 {m3} <= m2 {m2}");
        assert!(m2 < m1 && m3 < m1, "base {base}: m1 {m1}, m2 {m2}, m3 {m3}");
    }
}

#[test]
fn zeroed_residual_m3_matches_m2() {
    let m2cfg = ModelConfig::m2(4).with_input([16, 16, 9]);
    let m3cfg = ModelConfig::m3(4).with_input([16, 16, 9]);
    let mut m2 = build_model::<f32>(&m2cfg, 9).unwrap();
    let mut m3 = build_model::<f32>(&m3cfg, 9).unwrap();
    m3.zero_residual_blocks();
    for p in m2.params().iter() {
        assert_eq!(Some(&p.value), m3.params().get(&p.name).map(|q| &q.value), "{}", p.name);
    }
    let x = noise(&m2.input_dims(2), 5);
    let close = |a: &Tensor<f32>, b: &Tensor<f32>| {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max)
    };
    let (a, b) = (train_forward(&mut m2, &x), train_forward(&mut m3, &x));
    assert!(close(&a, &b) < 1e-5, "train diff {}", close(&a, &b));
    let (a, b) = (m2.predict(&x).unwrap(), m3.predict(&x).unwrap());
    assert!(close(&a, &b) < 1e-5, "eval diff {}", close(&a, &b));
}

#[test]
fn eval_is_pure() {
    let mut m = build_model::<f32>(&ModelConfig::m3(4).with_input([16, 16, 9]), 2).unwrap();
    let x = noise(&m.input_dims(1), 8);
    // move the running statistics away from their initial values first
    train_forward(&mut m, &x);
    let before = m.batchnorm_states().to_vec();
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(m.batchnorm_states(), &before[..]);
    assert_open_unit(&a);
}

#[test]
fn skip_path_carries_encoder_features() {
    let mut m = build_model::<f32>(&ModelConfig::m2(4).with_input([16, 16, 8]), 3).unwrap();
    for i in 0..m.params().len() {
        if m.params().at(i).name.starts_with("up") {
            m.params_mut().at_mut(i).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x1 = noise(&m.input_dims(1), 1);
    let x2 = noise(&m.input_dims(1), 2);
    let (y1, y2) = (train_forward(&mut m, &x1), train_forward(&mut m, &x2));
    let diff = y1.data().iter().zip(y2.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff > 1e-3, "output insensitive to input: {diff}");
}

#[test]
fn wrong_input_shape_rejected() {
    let mut m = build_model::<f32>(&ModelConfig::m2(2).with_input([16, 16, 8]), 0).unwrap();
    assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 16, 12])).is_err());
}
