//! Poisson closed form vs a sympy/mpmath derivative oracle
//! (`oracles/make_fixtures.py`).

use atpinn_core::autodiff::Tape;
use atpinn_core::network::DerivBundle;
use atpinn_core::pde::{poisson_exact, poisson_forcing, poisson_problem};
use atpinn_core::tensor::Tensor;

struct Row {
    x: f64,
    y: f64,
    u: f64,
    uxx: f64,
    uyy: f64,
    f: f64,
}

fn fixture() -> Vec<Row> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/poisson_derivatives.csv");
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            let v: Vec<f64> = r.iter().map(|s| s.parse().unwrap()).collect();
            Row { x: v[0], y: v[1], u: v[2], uxx: v[3], uyy: v[4], f: v[5] }
        })
        .collect()
}

#[test]
fn closed_form_matches_oracle() {
    for r in fixture() {
        assert!((poisson_exact(r.x, r.y) - r.u).abs() <= 1e-14, "u at ({}, {})", r.x, r.y);
    }
}

#[test]
fn forcing_matches_symbolic_laplacian() {
    let rows = fixture();
    assert_eq!(rows.len(), 1000);
    for r in rows {
        let got = poisson_forcing(r.x, r.y);
        let scale = r.f.abs().max(1.0);
        assert!((got - r.f).abs() <= 1e-9 * scale, "f at ({}, {}): {got} vs {}", r.x, r.y, r.f);
    }
}

#[test]
fn residual_vanishes_on_analytic_derivatives() {
    let rows: Vec<Row> = fixture().into_iter().take(50).collect();
    let n = rows.len();
    let col = |f: &dyn Fn(&Row) -> f64| Tensor::matrix(n, 1, rows.iter().map(f).collect()).unwrap();
    let mut tape = Tape::new();
    let pts: Vec<f64> = rows.iter().flat_map(|r| [r.x, r.y]).collect();
    let x = tape.constant(Tensor::matrix(n, 2, pts).unwrap()).unwrap();
    let u = tape.constant(col(&|r| r.u)).unwrap();
    let zero = tape.constant(Tensor::zeros(&[n, 1])).unwrap();
    let uxx = tape.constant(col(&|r| r.uxx)).unwrap();
    let uyy = tape.constant(col(&|r| r.uyy)).unwrap();
    let bundle = DerivBundle { u, du: vec![zero, zero], d2u: vec![Some(uxx), Some(uyy)] };
    let r = poisson_problem().residual(&mut tape, x, &bundle).unwrap();
    let worst = tape.value(r).max_abs();
    assert!(worst < 1e-9, "max |residual| {worst}");
}
