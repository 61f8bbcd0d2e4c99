use mlaqp_core::drift::{ks_statistic, AnswerEcdf};
use mlaqp_core::executor::{execute_aggregate, ExecOutput};
use mlaqp_core::gbdt::{fit, FeatureMatrix, GbdtConfig, Loss};
use mlaqp_core::schema::{AggregateSpec, DatasetSchema};
use mlaqp_core::sql::parse;
use mlaqp_core::vectorize::{vectorize_spa, CategoricalEncoder};
use mlaqp_core::workload::gen_dataset;
use proptest::prelude::*;

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3..1e3f64, 1..60)
}

proptest! {
    #[test]
    fn ks_is_symmetric_bounded_and_rank_based(a in sample(), b in sample()) {
        let (ea, eb) = (AnswerEcdf::new(a.clone()).unwrap(), AnswerEcdf::new(b.clone()).unwrap());
        let d = ks_statistic(&ea, &eb).unwrap();
        prop_assert_eq!(d, ks_statistic(&eb, &ea).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        let t = |v: &[f64]| AnswerEcdf::new(v.iter().map(|x| x / 100.0 * 3.0 + 7.0).map(f64::exp).collect()).unwrap();
        prop_assert!((ks_statistic(&t(&a), &t(&b)).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn vectorized_slots_follow_predicates(
        bounds in prop::collection::vec(prop::option::of((0.0..100.0f64, 0.0..100.0f64)), 4)
    ) {
        let schema = DatasetSchema::numeric("t", 4).unwrap();
        let enc = CategoricalEncoder::hashed_only(&schema);
        let clauses: Vec<String> = bounds
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|(x, y)| format!("a{} BETWEEN {} AND {}", i + 1, x.min(y), x.max(y))))
            .collect();
        let mut sql = "SELECT COUNT(*) FROM t".to_string();
        if !clauses.is_empty() {
            sql = format!("{sql} WHERE {}", clauses.join(" AND "));
        }
        let m = vectorize_spa(&parse(&sql, &schema).unwrap(), &schema, &enc).unwrap();
        prop_assert_eq!(m.width(), 8);
        for (i, b) in bounds.iter().enumerate() {
            match b {
                Some((x, y)) => {
                    prop_assert_eq!(m.get(2 * i), Some(x.min(*y)));
                    prop_assert_eq!(m.get(2 * i + 1), Some(x.max(*y)));
                }
                None => prop_assert!(m.is_missing(2 * i) && m.is_missing(2 * i + 1)),
            }
        }
    }

    #[test]
    fn stump_predictions_stay_in_target_range(
        rows in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64), 2..40)
    ) {
        let x = FeatureMatrix::from_rows(&rows.iter().map(|r| vec![r.0, r.1]).collect::<Vec<_>>());
        let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let model = fit(&x, &y, &GbdtConfig::stump(), Loss::Squared).unwrap();
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        for r in &rows {
            let p = model.predict(&[r.0, r.1]).unwrap();
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }

    #[test]
    fn adding_a_predicate_never_grows_count(c1 in 0.0..1e8f64, c2 in 0.0..1e8f64, r in 1e6..5e7f64) {
        let ds = gen_dataset(2, 2000, 4).unwrap();
        let count = |sql: &str| {
            let q = parse(sql, ds.schema()).unwrap();
            let ExecOutput::Scalar(v) = execute_aggregate(&ds, &q).unwrap() else { unreachable!() };
            v.value(&AggregateSpec::count_star()).unwrap()
        };
        let one = count(&format!("SELECT COUNT(*) FROM synth WHERE a1 BETWEEN {} AND {}", c1 - r, c1 + r));
        let two = count(&format!(
            "SELECT COUNT(*) FROM synth WHERE a1 BETWEEN {} AND {} AND a2 BETWEEN {} AND {}",
            c1 - r, c1 + r, c2 - r, c2 + r
        ));
        prop_assert!(two <= one);
    }
}
