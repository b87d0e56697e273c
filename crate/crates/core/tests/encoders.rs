use mepoi_core::encoders::*;
use mepoi_numcore::gradcheck::{check_params, max_rel_err, FD_STEP};
use mepoi_numcore::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> EncoderConfig {
    EncoderConfig { scales: 4, time_dim: 8, ..EncoderConfig::default() }
}

#[test]
fn shift_by_wavelength_is_periodic() {
    let cfg = small();
    let x = [0.31, 0.72];
    let base = encode_location(x, &cfg);
    for (s, lambda) in wavelengths(&cfg).into_iter().enumerate() {
        for (j, a) in DIRECTIONS.iter().enumerate() {
            let shifted = encode_location([x[0] + lambda * a[0], x[1] + lambda * a[1]], &cfg);
            let k = (s * 3 + j) * 2;
            assert!((shifted[k] - base[k]).abs() < 1e-9);
            assert!((shifted[k + 1] - base[k + 1]).abs() < 1e-9);
        }
    }
}

#[test]
fn wavelengths_are_geometric() {
    let w = wavelengths(&EncoderConfig::default());
    assert_eq!(w.len(), 64);
    assert_eq!((w[0], w[63]), (0.1, 1.4142));
    let r = w[1] / w[0];
    for p in w.windows(2) {
        assert!((p[1] / p[0] - r).abs() < 1e-9);
    }
}

fn t2v_output(omega: &[f64], phi: &[f64], tau: f64) -> Vec<f64> {
    let mut store = ParamStore::<f64>::new();
    let t = Time2Vec::register(&mut store, "t", omega.len()).unwrap();
    *store.get_mut(t.omega) = Tensor::from_f64(vec![1, omega.len()], omega).unwrap();
    *store.get_mut(t.phi) = Tensor::from_f64(vec![1, phi.len()], phi).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(vec![1, 1], &[tau]).unwrap());
    let y = t.forward(&mut g, x).unwrap();
    g.value(y).to_f64_vec()
}

#[test]
fn time2vec_zero_parameters_give_zero_vector() {
    assert_eq!(t2v_output(&[0.0; 6], &[0.0; 6], 0.7), vec![0.0; 6]);
}

#[test]
fn time2vec_quarter_period_is_one() {
    let omega = time2vec_init(6);
    assert_eq!(omega[1], std::f64::consts::TAU);
    let y = t2v_output(&omega, &[0.0; 6], 0.25);
    assert!((y[1] - 1.0).abs() < 1e-12);
    assert!((y[0] - 0.25).abs() < 1e-15);
}

#[test]
fn time2vec_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let t = Time2Vec::register(&mut store, "t", 6).unwrap();
        *store.get_mut(t.phi) = Tensor::randn(vec![1, 6], 0.5, &mut rng);
        let taus: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let w = Tensor::<f64>::randn(vec![5, 6], 1.0, &mut rng);
        let checks = check_params(&store, FD_STEP, |g| -> mepoi_core::Result<_> {
            let x = g.constant(Tensor::from_f64(vec![5, 1], &taus)?);
            let y = t.forward(g, x)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(max_rel_err(&checks) < 1e-4);
    }
}

#[test]
fn dimensions_of_the_default_configuration() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.location_dim(), 384);
    assert_eq!(cfg.model_dim(), 512);
}

#[test]
fn zero_time_parameters_leave_location_block() {
    let cfg = small();
    let mut store = ParamStore::<f64>::new();
    let enc = VisitEncoder::register(&mut store, &cfg).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(shape);
    }
    let mut f = VisitFeatures::default();
    f.push([0.2, 0.9], 1_583_150_000, 1_583_153_600, &cfg);
    f.push([0.5, 0.5], 1_583_250_000, 1_583_260_000, &cfg);
    let mut g = Graph::new(&store);
    let out = enc.assemble(&mut g, &f, &[Some(1), None, Some(0)]).unwrap();
    let v = g.value(out);
    assert_eq!(v.shape(), &[3, cfg.model_dim()]);
    let ld = cfg.location_dim();
    assert_eq!(&v.row(0)[..ld], encode_location([0.5, 0.5], &cfg).as_slice());
    assert_eq!(&v.row(2)[..ld], encode_location([0.2, 0.9], &cfg).as_slice());
    assert!(v.row(1).iter().all(|&x| x == 0.0));
    assert!(v.row(0)[ld..].iter().all(|&x| x == 0.0));
}

#[test]
fn blocks_slice_out_of_the_concatenation() {
    let cfg = small();
    let mut store = ParamStore::<f64>::new();
    let enc = VisitEncoder::register(&mut store, &cfg).unwrap();
    let mut f = VisitFeatures::default();
    let (ta, td) = (1_583_150_000, 1_583_153_600);
    f.push([0.3, 0.4], ta, td, &cfg);
    let mut g = Graph::new(&store);
    let out = enc.assemble(&mut g, &f, &[Some(0)]).unwrap();
    let row = g.value(out).row(0).to_vec();
    let ld = cfg.location_dim();
    let hour = |ts: i64| mepoi_core::pipeline::Normalizer::time(ts);
    let (ah, ad) = hour(ta);
    let (dh, dd) = hour(td);
    let omega = time2vec_init(cfg.time_dim / 2);
    let block = |tau: f64| -> Vec<f64> {
        omega.iter().enumerate().map(|(i, w)| if i == 0 { w * tau } else { (w * tau).sin() }).collect()
    };
    let expect: Vec<f64> = [block(ah), block(ad), block(dh), block(dd)].concat();
    for (a, b) in row[ld..].iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn positional_encoding_is_bounded() {
    for i in [0, 1, 7, 31] {
        let n: f64 = positional_encoding(i, 80).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n <= (80f64).sqrt() + 1e-12);
    }
    assert!((positional_encoding(1, 80)[0] - 0.8415).abs() < 1e-4);
}
