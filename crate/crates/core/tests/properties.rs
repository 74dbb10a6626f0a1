use std::sync::Arc;

use proptest::prelude::*;
use thermoeit::boundary::halfspace_root;
use thermoeit::elliptic::{cluster_sorted, dtn_map, Conductivity};
use thermoeit::expr::Expr;
use thermoeit::mesh::{boundary_integral, build_box_mesh, BoundaryTrace, ScalarField};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn box_mesh_invariants(nx in 2usize..10, ny in 2usize..10, lx in 0.2f64..3.0, ly in 0.2f64..3.0) {
        let m = build_box_mesh(2, &[lx, ly], &[nx, ny]).unwrap();
        m.check_invariants().unwrap();
        prop_assert_eq!(m.node_count(), (nx + 1) * (ny + 1));
        prop_assert!((m.volume() - lx * ly).abs() < 1e-12 * lx * ly);
        let one = BoundaryTrace::from_fn(&m, |_| 1.0);
        prop_assert!((boundary_integral(&m, &one) - 2.0 * (lx + ly)).abs() < 1e-12);
    }

    #[test]
    fn dtn_is_symmetric_and_annihilates_constants(g0 in 0.5f64..3.0, slope in -0.4f64..0.4, c in -5.0f64..5.0) {
        let m = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[6, 6]).unwrap());
        let gamma = ScalarField::from_fn(&m, |p| g0 * (1.0 + slope * p[0]));
        let d = dtn_map(m.clone(), &gamma).unwrap();
        let asym = (&d.schur - d.schur.transpose()).norm() / d.schur.norm();
        prop_assert!(asym < 1e-12);
        let flux = d.apply(&BoundaryTrace::from_fn(&m, |_| c));
        prop_assert!(flux.values.iter().all(|v| v.abs() < 1e-10 * (1.0 + c.abs())));
    }

    #[test]
    fn dtn_energy_is_nonnegative(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1.0f64..3.0) {
        let m = Arc::new(build_box_mesh(2, &[1.0, 1.0], &[6, 6]).unwrap());
        let cond = Conductivity::new(m.clone(), ScalarField::constant(&m, 1.5)).unwrap();
        let h = BoundaryTrace::from_fn(&m, |p| a * p[0] + b * (k * p[1]).sin());
        let w = cond.solve(&h).unwrap();
        prop_assert!(cond.energy(&w) >= -1e-12);
    }

    #[test]
    fn halfspace_root_has_positive_imaginary_part(a11 in 0.5f64..4.0, a22 in 0.5f64..4.0, r in -0.9f64..0.9, xi in 0.1f64..20.0) {
        let a12 = r * (a11 * a22).sqrt();
        let a = vec![vec![a11, a12], vec![a12, a22]];
        let z = halfspace_root(&a, &[xi]).unwrap();
        prop_assert!(z.im > 0.0);
        let poly = a22 * z * z + 2.0 * a12 * xi * z + a11 * xi * xi;
        prop_assert!(poly.norm() < 1e-10 * xi * xi * (a11 + a22));
    }

    #[test]
    fn clusters_partition_sorted_values(mut v in prop::collection::vec(0.1f64..100.0, 1..30)) {
        v.sort_by(f64::total_cmp);
        let cs = cluster_sorted(&v, 1e-6);
        prop_assert_eq!(cs.first().unwrap().start, 0);
        prop_assert_eq!(cs.last().unwrap().end, v.len());
        for w in cs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn expression_arithmetic_matches_rust(x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let e = Expr::parse("2*x^2 - 3*y + exp(-x)*sin(y)").unwrap();
        let want = 2.0 * x * x - 3.0 * y + (-x).exp() * y.sin();
        prop_assert!((e.eval(&[x, y, 0.0]) - want).abs() < 1e-12 * (1.0 + want.abs()));
    }
}

#[test]
fn expression_errors_carry_columns() {
    let e = Expr::parse("1 + (x").unwrap_err();
    assert!(e.to_string().contains("column"), "{e}");
}
