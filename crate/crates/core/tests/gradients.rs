use mist::autodiff::OpKind;
use mist::gradcheck;
use mist::models::{Decoder, ModelConfig, StatisticsNetwork};
use mist::rng;
use mist::selftest::{self, GRAD_STEP, GRAD_TOL};
use mist::{Graph, Tensor};

#[test]
fn every_op_at_ten_points() {
    for seed in 0..10 {
        for c in selftest::op_gradient_checks(seed, None) {
            assert!(c.passed, "{c}");
        }
    }
}

#[test]
fn every_network_and_loss_at_ten_points() {
    let cfg = ModelConfig::default();
    for seed in 0..10 {
        for c in selftest::network_gradient_checks(&cfg, seed, None) {
            assert!(c.passed, "{c}");
        }
    }
}

#[test]
fn max_pooling_style_encoder_checks() {
    let cfg = ModelConfig {
        pooling: mist::Pooling::Max,
        tokens: 50,
        ..ModelConfig::default()
    };
    for c in selftest::network_gradient_checks(&cfg, 42, None) {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn each_injected_fault_is_caught_by_its_own_check() {
    for op in OpKind::ALL {
        let failed: Vec<String> = selftest::op_gradient_checks(0, Some(op))
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        let own = format!("grad/op/{}/seed0", op.name());
        assert!(failed.contains(&own), "{op}: {failed:?}");
    }
}

#[test]
fn decoder_l1_at_seed_42() {
    let cfg = ModelConfig::default();
    let mut r = rng::seeded(42);
    let dec = Decoder::new(&cfg, &mut r);
    let y = Tensor::new(vec![5, 16], (0..80).map(|i| ((i * 37 % 23) as f64 / 11.0) - 1.0).collect()).unwrap();
    let z = Tensor::new(vec![5, 16], (0..80).map(|i| ((i * 17 % 19) as f64 / 9.0) - 1.0).collect()).unwrap();
    let x = Tensor::new(vec![5, 8], (0..40).map(|i| ((i * 7 % 13) as f64 / 3.0) - 2.0).collect()).unwrap();
    let params: Vec<Tensor> = [&dec.layer1.weight, &dec.layer1.bias, &dec.layer2.weight, &dec.layer2.bias]
        .into_iter()
        .cloned()
        .collect();
    let rep = gradcheck::finite_difference_check(&params, GRAD_STEP, GRAD_TOL, |g: &mut Graph, p| {
        let yz = {
            let y = g.constant(&y);
            let z = g.constant(&z);
            g.concat(&[y, z])?
        };
        let h = g.matmul(yz, p[0])?;
        let h = g.add_bias(h, p[1])?;
        let h = g.tanh(h);
        let o = g.matmul(h, p[2])?;
        let o = g.add_bias(o, p[3])?;
        let t = g.constant(&x);
        let d = g.sub(o, t)?;
        let a = g.abs(d);
        g.mean(a)
    })
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn statistics_dv_at_random_params() {
    let mut r = rng::seeded(3);
    let t = StatisticsNetwork::new(&mut r, 4, 3, 64);
    let y = Tensor::new(vec![8, 4], (0..32).map(|_| rng::normal(&mut r)).collect()).unwrap();
    let z = Tensor::new(vec![8, 3], (0..24).map(|_| rng::normal(&mut r)).collect()).unwrap();
    let perm = rng::permutation(&mut r, 8);
    let rep = gradcheck::check_params(
        &t,
        |t: &mut StatisticsNetwork| mist::nn::Module::params_mut(t),
        Graph::new,
        GRAD_STEP,
        GRAD_TOL,
        |t, g| {
            let ids = t.bind(g, true);
            let yn = g.constant(&y);
            let zn = g.constant(&z);
            let dv = mist::mine::dv_bound(g, &ids, yn, zn, &perm)?;
            Ok((dv.raw, ids.ids()))
        },
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn backward_is_deterministic() {
    let grads = || {
        let cfg = ModelConfig::default();
        let checks = selftest::network_gradient_checks(&cfg, 1, None);
        checks.into_iter().map(|c| c.detail).collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}
