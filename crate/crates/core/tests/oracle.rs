use mist::data::{self, DatasetConfig, World};
use mist::mine::{self, MineBatch};
use mist::models::StatisticsNetwork;
use mist::rng;
use mist::Tensor;

fn world() -> World {
    World::generate(&DatasetConfig::default()).unwrap().0
}

fn random_content(r: &mut rng::Rng, vocab: usize) -> Vec<usize> {
    let len = 4 + rng::uniform_index(r, 9);
    (0..len).map(|_| rng::uniform_index(r, vocab)).collect()
}

#[test]
fn noiseless_round_trip_is_exact() {
    let w = world();
    let mut r = rng::seeded(1);
    for _ in 0..1000 {
        let c = random_content(&mut r, w.vocab());
        let s = rng::uniform_index(&mut r, w.styles.len());
        let rec = w.oracle_recognize(&w.render_clean(&c, s).unwrap());
        assert_eq!(rec.tokens, c);
        assert_eq!(rec.style, s);
    }
}

#[test]
fn noisy_round_trip_ter_below_one_percent() {
    let w = world();
    let mut r = rng::seeded(2);
    let (mut errors, mut total) = (0.0, 0usize);
    for _ in 0..1000 {
        let c = random_content(&mut r, w.vocab());
        let s = rng::uniform_index(&mut r, w.styles.len());
        let x = w.render(&c, s, &mut r).unwrap();
        let rec = w.oracle_recognize(&x);
        errors += data::token_error_rate(&rec.tokens, &c).unwrap() * c.len() as f64;
        total += c.len();
    }
    let ter = errors / total as f64;
    assert!(ter < 0.01, "{ter}");
}

#[test]
fn clean_style_classification_is_perfect() {
    let w = world();
    let mut r = rng::seeded(3);
    for s in 0..w.styles.len() {
        for _ in 0..50 {
            let c = random_content(&mut r, w.vocab());
            assert_eq!(w.oracle_recognize(&w.render_clean(&c, s).unwrap()).style, s);
        }
    }
}

#[test]
fn content_sampling_is_uniform() {
    let y = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut r = rng::seeded(4);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[mine::sample_content_vector(&y, &mut r).unwrap()[0] as usize] += 1;
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((0.22..=0.28).contains(&f), "{counts:?}");
    }
}

#[test]
fn dv_on_independent_data_averages_below_threshold() {
    let mut r = rng::seeded(5);
    let t = StatisticsNetwork::new(&mut r, 4, 4, 64);
    let mut sum = 0.0;
    for _ in 0..500 {
        let y = Tensor::new(vec![32, 4], (0..128).map(|_| rng::normal(&mut r)).collect()).unwrap();
        let z = Tensor::new(vec![32, 4], (0..128).map(|_| rng::normal(&mut r)).collect()).unwrap();
        let batch = MineBatch::sample(y, z, &mut r).unwrap();
        sum += mine::dv_lower_bound(&t, &batch).unwrap().raw;
    }
    assert!(sum / 500.0 < 0.05, "{}", sum / 500.0);
}

#[test]
fn gaussian_estimates_match_closed_form() {
    let cases = [(0.0, 0.05), (0.5, 0.1), (0.9, 0.15)];
    for (rho, tol) in cases {
        let est = mine::estimate_gaussian_mi(rho, 2000, &mut rng::seeded(42)).unwrap();
        let truth = mine::gaussian_mi(rho);
        assert!((est - truth).abs() < tol, "rho {rho}: {est} vs {truth}");
    }
}
