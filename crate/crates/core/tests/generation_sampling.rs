use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcq::generation::{sample_rng, sample_sequence, CountModel, CountModelConfig, GuidancePolicy, Ramp};
use vcq::{Schedule, TokenCorpus};

fn corpus(schedule: &Schedule, n: usize, classes: u32, seed: u64) -> TokenCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = schedule.sizes();
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            // Skewed toward small tokens so the first-position law is far from uniform.
            sizes.iter().map(|&k| rng.random_range(0..k).min(rng.random_range(0..k))).collect()
        })
        .collect();
    let labels = (0..n as u32).map(|i| i % classes).collect();
    TokenCorpus::from_rows(&rows, schedule.k_max(), Some(labels)).unwrap()
}

#[test]
fn first_token_frequencies_pass_chi_square() {
    let schedule = Schedule::linear(6, 32, 5).unwrap();
    let c = corpus(&schedule, 6000, 2, 3);
    let model = CountModel::fit(&c, &schedule, &CountModelConfig::default()).unwrap();
    let policy = GuidancePolicy::plain(0.0, 1.0).unwrap();

    let mut empirical = [0f64; 6];
    let mut in_class = 0f64;
    for (row, &label) in c.rows().zip(c.labels().unwrap()) {
        if label == 1 {
            empirical[row[0] as usize] += 1.0;
            in_class += 1.0;
        }
    }
    let draws = 10_000;
    let mut observed = [0f64; 6];
    for i in 0..draws {
        let seq = sample_sequence(&model, Some(1), &policy, &mut sample_rng(42, i)).unwrap();
        observed[seq[0] as usize] += 1.0;
    }
    let chi2: f64 = (0..6)
        .map(|x| {
            let expected = empirical[x] / in_class * draws as f64;
            (observed[x] - expected).powi(2) / expected
        })
        .sum();
    // 0.999 quantile of chi-square with 5 degrees of freedom.
    assert!(chi2 < 20.52, "chi2 = {chi2}, observed {observed:?}");
}

#[test]
fn sampling_is_reproducible_and_in_support() {
    let schedule = Schedule::power(2, 64, 12, 2.5).unwrap();
    let sizes = schedule.sizes();
    let c = corpus(&schedule, 400, 3, 8);
    let model = CountModel::fit(&c, &schedule, &CountModelConfig::default()).unwrap();
    for temperature in [0.05, 1.0, 4.0] {
        let policy = GuidancePolicy::new(3.0, Ramp::Cosine, 1.5, true, temperature).unwrap();
        for i in 0..30 {
            let a = sample_sequence(&model, Some(i as u32 % 3), &policy, &mut sample_rng(5, i)).unwrap();
            let b = sample_sequence(&model, Some(i as u32 % 3), &policy, &mut sample_rng(5, i)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().zip(&sizes).all(|(&x, &k)| x < k));
        }
    }
}
