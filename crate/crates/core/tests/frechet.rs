//! Fréchet distance: closed-form cases plus an independent Denman–Beavers
//! oracle working on the non-symmetric product Σ₁Σ₂.

use ddm_core::metrics;
use ndarray::{Array1, Array2};

mod common;
use common::{denman_beavers, frechet_oracle as oracle, spd, summary};
use proptest::prelude::*;

#[test]
fn identical_summaries_are_at_distance_zero() {
    let cov = spd(&[1.0, 0.3, -0.2, 0.5, 0.8, 0.1, 0.0, 0.4, 1.2], 3);
    let p = summary(vec![1.0, -2.0, 0.5], cov);
    assert!(metrics::frechet_distance(&p, &p).unwrap().abs() < 1e-9);
}

#[test]
fn identity_covariances_reduce_to_squared_mean_gap() {
    let m = vec![0.5, -1.5, 2.0, 0.25];
    let p = summary(vec![0.0; 4], Array2::eye(4));
    let q = summary(m.clone(), Array2::eye(4));
    let expected: f64 = m.iter().map(|v| v * v).sum();
    assert!((metrics::frechet_distance(&p, &q).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn diagonal_covariances_match_closed_form() {
    let a = [0.5, 2.0, 3.0, 0.01];
    let b = [1.5, 0.2, 3.0, 4.0];
    let p = summary(vec![0.0; 4], Array2::from_diag(&Array1::from(a.to_vec())));
    let q = summary(vec![0.0; 4], Array2::from_diag(&Array1::from(b.to_vec())));
    let expected: f64 = a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    assert!((metrics::frechet_distance(&p, &q).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn denman_beavers_oracle_sanity() {
    let a = spd(&[1.0, 0.2, 0.3, 0.7], 2);
    let r = denman_beavers(&a);
    let back = r.dot(&r);
    assert!((&back - &a).iter().all(|v| v.abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_denman_beavers_for_small_dimensions(
        d in 1usize..=3,
        a in prop::collection::vec(-1.5f64..1.5, 9),
        b in prop::collection::vec(-1.5f64..1.5, 9),
        ma in prop::collection::vec(-2.0f64..2.0, 3),
        mb in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let p = summary(ma[..d].to_vec(), spd(&a, d));
        let q = summary(mb[..d].to_vec(), spd(&b, d));
        let got = metrics::frechet_distance(&p, &q).unwrap();
        let want = oracle(&p, &q);
        prop_assert!((got - want).abs() < 1e-7, "got {got}, oracle {want}");
    }

    #[test]
    fn symmetric_and_nonnegative(
        d in 1usize..=5,
        a in prop::collection::vec(-1.5f64..1.5, 25),
        b in prop::collection::vec(-1.5f64..1.5, 25),
        ma in prop::collection::vec(-2.0f64..2.0, 5),
        mb in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let p = summary(ma[..d].to_vec(), spd(&a, d));
        let q = summary(mb[..d].to_vec(), spd(&b, d));
        let pq = metrics::frechet_distance(&p, &q).unwrap();
        let qp = metrics::frechet_distance(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() < 1e-9);
        prop_assert!(pq >= 0.0);
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let p = summary(vec![0.0; 2], Array2::eye(2));
    let q = summary(vec![0.0; 3], Array2::eye(3));
    assert!(metrics::frechet_distance(&p, &q).is_err());
}
