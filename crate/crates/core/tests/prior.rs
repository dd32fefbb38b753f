use fcenet_core::freq_analysis::{median, standard_grid, PriorStudy};
use fcenet_core::noise::{synth_dataset, NoiseSpec};

#[test]
fn noisy_falls_and_nir_rises_with_cutoff() {
    let triples = synth_dataset(7, 10, 64, 64, &NoiseSpec::default()).unwrap();
    let study = PriorStudy::run(&triples, &standard_grid()).unwrap();
    let (noisy, nir) = study.median_trends().unwrap();
    assert!(noisy < -0.8, "{noisy}");
    assert!(nir > 0.5, "{nir}");
}

#[test]
fn median_curves_follow_the_grid() {
    let triples = synth_dataset(3, 3, 32, 32, &NoiseSpec::default()).unwrap();
    let curves = PriorStudy::run(&triples, &standard_grid()).unwrap().median_curves().unwrap();
    assert_eq!(curves.len(), 2);
    assert!(curves.iter().all(|c| c.cutoffs == standard_grid()));
}

#[test]
fn median_of_small_sets() {
    assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    assert!(median(&[]).is_err());
}
