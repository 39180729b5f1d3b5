//! Seasonal naive point forecast.

use crate::market_data::{DataError, DayRow, MarketView, MIN_LAG_DAY};
use crate::matrix::Matrix;

use super::Result;

/// Last week's prices on Monday, Saturday and Sunday, yesterday's otherwise.
pub fn naive_forecast(view: &dyn MarketView, t: usize) -> Result<DayRow> {
    if t < MIN_LAG_DAY {
        return Err(DataError::LagUnavailable { t }.into());
    }
    if t >= view.n_days() {
        return Err(DataError::OutOfRange {
            t,
            n: view.n_days(),
        }
        .into());
    }
    let lag = match view.dow(t) {
        1 | 6 | 7 => 7,
        _ => 1,
    };
    Ok(*view.prices(t - lag))
}

/// In-sample residuals `Y_d - naive(d)` for each of `days`, one row per day.
pub fn naive_residuals(view: &dyn MarketView, days: &[usize]) -> Result<Matrix<f64>> {
    let mut rows = Vec::with_capacity(days.len());
    for &d in days {
        let f = naive_forecast(view, d)?;
        let y = view.prices(d);
        rows.push(std::array::from_fn::<f64, 24, _>(|h| y[h] - f[h]));
    }
    Ok(Matrix::from_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Family;
    use crate::market_data::{generate_synthetic, Field, NoiseSpec, SyntheticConfig, TracedView};

    fn market() -> crate::market_data::MarketDataset {
        let cfg = SyntheticConfig {
            n_days: 40,
            start_date: chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            seed: 1,
            noise: NoiseSpec {
                family: Family::Normal,
                scale: 2.0,
                nu: 0.0,
                tau: 1.0,
            },
            equation: Default::default(),
        };
        generate_synthetic(&cfg).unwrap().dataset
    }

    #[test]
    fn weekday_rule_over_all_weekdays() {
        let ds = market();
        let traced = TracedView::new(&ds);
        for t in 14..21 {
            traced.reset();
            let f = naive_forecast(&traced, t).unwrap();
            let dow = ds.dow[t];
            let lag = if matches!(dow, 1 | 6 | 7) { 7 } else { 1 };
            assert_eq!(f, ds.prices[t - lag], "dow {dow}");
            // only the single lagged price row is touched
            assert_eq!(traced.max_day(Field::Price), Some(t - lag));
            assert_eq!(traced.max_day(Field::Load), None);
        }
        // 2015-01-07 is a Wednesday, 2015-01-12 a Monday, 2015-01-10 a Saturday
        assert_eq!(ds.dow[6], 3);
        assert!(naive_forecast(&ds, 6).is_err());
        assert_eq!(naive_forecast(&ds, 13).unwrap(), ds.prices[12]);
        assert_eq!(ds.dow[11], 1);
        assert_eq!(naive_forecast(&ds, 11).unwrap(), ds.prices[4]);
        assert_eq!(ds.dow[9], 6);
        assert_eq!(naive_forecast(&ds, 9).unwrap(), ds.prices[2]);
    }

    #[test]
    fn residuals_are_target_minus_forecast() {
        let ds = market();
        let r = naive_residuals(&ds, &[20, 21]).unwrap();
        let f = naive_forecast(&ds, 21).unwrap();
        for h in 0..24 {
            assert_eq!(r[(1, h)], ds.prices[21][h] - f[h]);
        }
    }
}
