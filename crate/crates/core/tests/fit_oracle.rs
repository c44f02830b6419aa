mod common;

use common::dense_grid_sup_error;
use lossearch::losses::{focal_tau_probability, MarginTransform};
use lossearch::piecewise::{fit_to_reference, Transform};

const GRID: usize = 10_000;

struct Target {
    name: &'static str,
    f: Box<dyn Fn(f64) -> f64>,
    domain: (f64, f64),
}

fn targets() -> Vec<Target> {
    let arc = MarginTransform::arcface(0.5).unwrap();
    let lsm = MarginTransform::l_softmax(2).unwrap();
    vec![
        Target {
            name: "arcface",
            f: Box::new(move |x| arc.value(x).unwrap()),
            domain: (-1.0, 1.0),
        },
        // cos(2θ) is the monotone L-softmax branch for θ in [0, π/2]
        Target {
            name: "l-softmax",
            f: Box::new(move |x| lsm.value(x).unwrap()),
            domain: (0.0, 1.0),
        },
        Target {
            name: "focal-tau",
            f: Box::new(|p| focal_tau_probability(p, 2.0)),
            domain: (0.01, 1.0),
        },
    ]
}

#[test]
fn fit_matches_independent_least_squares() {
    for t in targets() {
        let (lo, hi) = t.domain;
        let fit = fit_to_reference(&t.f, t.domain, 6, GRID).unwrap();
        let oracle = dense_grid_sup_error(&t.f, lo, hi, 6, GRID);
        assert!(
            (fit.sup_error - oracle).abs() < 1e-9,
            "{}: {} vs {oracle}",
            t.name,
            fit.sup_error
        );
    }
}

#[test]
fn more_intervals_never_fit_worse() {
    for t in targets() {
        let e6 = fit_to_reference(&t.f, t.domain, 6, GRID).unwrap().sup_error;
        let e12 = fit_to_reference(&t.f, t.domain, 12, GRID)
            .unwrap()
            .sup_error;
        assert!(e12 <= e6, "{}: M=12 {e12} > M=6 {e6}", t.name);
    }
}

#[test]
fn affine_targets_fit_exactly() {
    let fit = fit_to_reference(|x| 0.7 * x - 0.2, (-1.0, 1.0), 6, 600).unwrap();
    assert!(fit.sup_error < 1e-12);
    for (&a, &b) in fit.function.slopes().iter().zip(fit.function.biases()) {
        assert!((a - 0.7).abs() < 1e-12 && (b + 0.2).abs() < 1e-12);
    }
}
