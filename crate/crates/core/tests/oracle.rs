use conceptlab::oracle::{optimal_noise, Component, Concept, MixtureSpec};
use conceptlab::schedule::ScheduleConfig;
use conceptlab::RngStream;

fn line_mixture() -> MixtureSpec {
    let concept = |name: &str, comps: &[(f64, f64, f64)]| Concept {
        name: name.into(),
        components: comps
            .iter()
            .map(|&(weight, mean, variance)| Component {
                weight,
                mean: vec![mean],
                variance,
            })
            .collect(),
    };
    MixtureSpec {
        version: 1,
        dim: 1,
        concepts: vec![
            concept("left", &[(0.7, -1.5, 0.3), (0.3, -0.2, 0.1)]),
            concept("right", &[(1.0, 2.0, 0.5)]),
        ],
        prior: vec![0.4, 0.6],
    }
}

/// Draws `(x_0, eps)` jointly, keeps pairs whose `x_t` lands in each bin and
/// checks that the mean of `eps - eps*(x_t)` is zero within 3 standard errors.
fn check_posterior_mean(concept: Option<usize>, seed: u64) {
    let mix = line_mixture();
    let sched = ScheduleConfig::default().build().unwrap();
    let t = 40;
    let ab = sched.alpha_bar(t);
    let bins = [(-1.2, -1.15), (0.3, 0.35), (1.5, 1.55)];
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); bins.len()];
    let mut rng = RngStream::new(seed, 0);
    for _ in 0..1_000_000 {
        let k = match concept {
            Some(k) => k - 1,
            None => rng.categorical(&mix.prior),
        };
        let comps = &mix.concepts[k].components;
        let weights: Vec<f64> = comps.iter().map(|c| c.weight).collect();
        let c = &comps[rng.categorical(&weights)];
        let x0 = c.mean[0] + c.variance.sqrt() * rng.normal();
        let eps = rng.normal();
        let x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
        for (b, &(lo, hi)) in bins.iter().enumerate() {
            if (lo..hi).contains(&x_t) {
                let d = eps - optimal_noise(&mix, &[x_t], t, &sched, concept).unwrap()[0];
                sums[b].0 += d;
                sums[b].1 += d * d;
                sums[b].2 += 1;
            }
        }
    }
    for (b, &(s, s2, n)) in sums.iter().enumerate() {
        assert!(n > 1000, "bin {b} has only {n} draws");
        let n = n as f64;
        let mean = s / n;
        let se = ((s2 / n - mean * mean) / n).sqrt();
        assert!(
            mean.abs() < 3.0 * se,
            "bin {b}: mean residual {mean} vs se {se}"
        );
    }
}

#[test]
fn marginal_oracle_is_the_posterior_mean_of_the_noise() {
    check_posterior_mean(None, 1);
}

#[test]
fn conditional_oracle_is_the_posterior_mean_of_the_noise() {
    check_posterior_mean(Some(1), 2);
}
