use proptest::prelude::*;

use epf_core::distributions::{percentile_grid, DistSpec};
use epf_core::ensembling::{mixture_quantile, probability_average, quantile_average, QuantileStat};
use epf_core::evaluation::crps_approx;

fn member() -> impl Strategy<Value = DistSpec<f64>> {
    let normal = (-20.0..20.0f64, 0.3..8.0f64).prop_map(|(m, s)| DistSpec::normal(m, s));
    let jsu = (-20.0..20.0f64, 0.3..8.0f64, -2.0..2.0f64, 0.6..3.0f64)
        .prop_map(|(m, s, n, t)| DistSpec::jsu(m, s, n, t));
    prop_oneof![normal, jsu]
}

/// Trapezoid rule on a fine grid spanning every member's 1e-9 tails.
fn mixture_mass(members: &[DistSpec<f64>]) -> f64 {
    let mix = probability_average(members).unwrap();
    let lo = members
        .iter()
        .map(|d| d.quantile(1e-9).unwrap())
        .fold(f64::INFINITY, f64::min);
    let hi = members
        .iter()
        .map(|d| d.quantile(1.0 - 1e-9).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |i: usize| mix.pdf(lo + i as f64 * h).unwrap();
    h * ((1..n).map(f).sum::<f64>() + 0.5 * (f(0) + f(n)))
}

#[test]
fn mixture_density_integrates_to_one() {
    let members = vec![
        DistSpec::normal(0.0, 1.0),
        DistSpec::jsu(5.0, 2.0, -1.0, 1.5),
        DistSpec::jsu(-3.0, 0.5, 1.0, 0.8),
        DistSpec::normal(10.0, 4.0),
    ];
    assert!((mixture_mass(&members) - 1.0).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixture_quantiles_invert_the_cdf(members in prop::collection::vec(member(), 1..5)) {
        let mix = probability_average(&members).unwrap();
        for p in percentile_grid::<f64>() {
            let x = mixture_quantile(&members, p).unwrap();
            prop_assert!((mix.cdf(x) - p).abs() < 1e-8);
        }
    }

    #[test]
    fn quantile_average_never_scores_worse_than_its_members(
        members in prop::collection::vec(member(), 2..5),
        y in -30.0..30.0f64,
    ) {
        let ens = quantile_average(&members, QuantileStat::Mean).unwrap();
        let mean_member = members.iter().map(|d| crps_approx(d, y).unwrap()).sum::<f64>() / members.len() as f64;
        prop_assert!(crps_approx(&ens, y).unwrap() <= mean_member + 1e-12);
    }

    #[test]
    fn ensembles_do_not_depend_on_member_order(members in prop::collection::vec(member(), 2..5)) {
        let mut rev = members.clone();
        rev.reverse();
        for stat in [QuantileStat::Mean, QuantileStat::Median] {
            let a = quantile_average(&members, stat).unwrap().percentiles().unwrap();
            let b = quantile_average(&rev, stat).unwrap().percentiles().unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
