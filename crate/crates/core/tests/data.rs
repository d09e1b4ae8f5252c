use conceptlab::data::{load_dataset, make_preset, save_dataset, PRESETS};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn four_corners_means_converge() {
    let (spec, data) = make_preset("four-corners", 3, 100_000).unwrap();
    for (k, concept) in spec.concepts.iter().enumerate() {
        let label = k as u32 + 1;
        let rows: Vec<&[f32]> = (0..data.len())
            .filter(|&i| data.labels[i] == label)
            .map(|i| data.point(i))
            .collect();
        let n = rows.len() as f64;
        let sigma = concept.components[0].variance.sqrt();
        for d in 0..2 {
            let mean = rows.iter().map(|r| f64::from(r[d])).sum::<f64>() / n;
            let want = concept.components[0].mean[d];
            assert!(
                (mean - want).abs() < 3.0 * sigma / n.sqrt(),
                "{}: {mean} vs {want}",
                concept.name
            );
        }
    }
}

#[test]
fn label_frequencies_match_the_prior() {
    for name in PRESETS {
        let n = 100_000;
        let (spec, data) = make_preset(name, 11, n).unwrap();
        let mut counts = vec![0usize; spec.n_concepts()];
        for &l in &data.labels {
            counts[l as usize - 1] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(&spec.prior)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let df = (spec.n_concepts() - 1) as f64;
        let p_value = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
        assert!(p_value > 0.001, "{name}: chi-square {stat}, p {p_value}");
    }
}

#[test]
fn file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/points.clds");
    let (_, data) = make_preset("overlap", 4, 777).unwrap();
    save_dataset(&path, &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, data);
    let bytes = std::fs::read(&path).unwrap();
    save_dataset(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
