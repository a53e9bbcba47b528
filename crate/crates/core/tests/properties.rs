use num_traits::Zero;
use proptest::prelude::*;

use quadcert::coeffcalc::{coords_from_z, z_from_coords, ChangeOfVars};
use quadcert::polyring::{rat, taylor_shift, HomoElem, HomoLayout, MultiIndex, Poly, Rational};
use quadcert::quadform::{classify_phase, multiple_of, normalize_quadratic_form, QuadForm};

fn poly(n: usize, max_deg: u32) -> impl Strategy<Value = Poly> {
    prop::collection::vec((prop::collection::vec(0..=max_deg, n), -4i64..=4), 0..6).prop_map(move |terms| {
        Poly::from_terms(n, terms.into_iter().map(|(e, c)| (MultiIndex::new(e), rat(c))))
    })
}

fn point(n: usize) -> impl Strategy<Value = Vec<Rational>> {
    prop::collection::vec((-5i64..=5, 1i64..=3), n).prop_map(|v| v.into_iter().map(|(a, b)| rat(a) / rat(b)).collect())
}

fn signs(n: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], n)
}

/// `p = c * b` with `c != 0`, decided by evaluation: `p(x) b(x0) = p(x0) b(x)`
/// on `{-k..k}^3`, which has more values per axis than the degree `2k`
/// in each variable allows a nonzero polynomial to vanish on.
fn proportional_on_grid(p: &Poly, b: &Poly, k: u32) -> bool {
    let k = k as i64;
    let grid: Vec<Vec<Rational>> = (-k..=k)
        .flat_map(|a| (-k..=k).flat_map(move |b| (-k..=k).map(move |c| vec![rat(a), rat(b), rat(c)])))
        .collect();
    let Some(x0) = grid.iter().find(|x| !b.eval(x).is_zero()) else { return false };
    let (p0, b0) = (p.eval(x0), b.eval(x0));
    !p0.is_zero() && grid.iter().all(|x| p.eval(x) * &b0 == &p0 * b.eval(x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ring_axioms(a in poly(3, 3), b in poly(3, 3), c in poly(3, 3)) {
        prop_assert_eq!(&a + &b, &b + &a);
        prop_assert_eq!(&a * &b, &b * &a);
        prop_assert_eq!(&(&a * &b) * &c, &a * &(&b * &c));
        prop_assert_eq!(&a * &(&b + &c), &(&a * &b) + &(&a * &c));
        prop_assert!((&a - &a).is_zero());
    }

    #[test]
    fn evaluation_is_a_homomorphism(a in poly(3, 3), b in poly(3, 3), x in point(3)) {
        prop_assert_eq!((&a * &b).eval(&x), a.eval(&x) * b.eval(&x));
        prop_assert_eq!((&a + &b).eval(&x), a.eval(&x) + b.eval(&x));
    }

    #[test]
    fn text_round_trip(a in poly(3, 4)) {
        prop_assert_eq!(Poly::parse(&a.to_text(), 3).unwrap(), a);
    }

    #[test]
    fn taylor_shift_reassembles(p in poly(2, 4), v in point(2), w in point(2)) {
        let layout = HomoLayout::new(2, 0);
        let vs: Vec<HomoElem> = v.iter().map(|x| HomoElem::constant(layout, x.clone())).collect();
        let shifted: Vec<Rational> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
        let mut total = rat(0);
        for (alpha, c) in taylor_shift(&p, &vs) {
            let c = c.body().eval(&vec![rat(0); layout.nvars()]);
            let mono = Poly::monomial(alpha, rat(1)).eval(&w);
            total += c * mono;
        }
        prop_assert_eq!(total, p.eval(&shifted));
    }

    #[test]
    fn reduction_preserves_value(body in poly(5, 3), spow in 0u32..3, u in prop::collection::vec(-2.0f64..2.0, 2), tau in -1.0f64..1.0) {
        // layout vars: u1, u2, tau, s, one parameter
        let layout = HomoLayout::new(2, 1);
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 0.1);
        let h = HomoElem::new(layout, body, spow);
        let params = [0.7];
        let want = h.eval_f64(&u, tau, &params);
        for other in [h.reduce(), h.canonical()] {
            let got = other.eval_f64(&u, tau, &params);
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
        }
    }

    #[test]
    fn witness_is_nonvanishing(p in poly(3, 4)) {
        match p.find_nonvanishing_witness() {
            Some(x) => prop_assert!(!p.eval(&x).is_zero()),
            None => prop_assert!(p.is_zero()),
        }
    }

    #[test]
    fn inertia_is_congruence_invariant(
        d in prop::collection::vec(prop_oneof![-3i64..=-1, 1i64..=3], 3),
        upper in prop::collection::vec(-2i64..=2, 3),
    ) {
        // A = S^t diag(d) S with S unit upper triangular
        let s = [[1, upper[0], upper[1]], [0, 1, upper[2]], [0, 0, 1]];
        let a: Vec<Vec<Rational>> = (0..3)
            .map(|i| (0..3).map(|j| rat((0..3).map(|k| s[k][i] * d[k] * s[k][j]).sum())).collect())
            .collect();
        let norm = normalize_quadratic_form(&a).unwrap();
        let pos = d.iter().filter(|&&x| x > 0).count();
        prop_assert_eq!(norm.form.signature(), (pos, 3 - pos));
        // T^t A T is the reported diagonal
        let t = &norm.transform;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = rat(0);
                for k in 0..3 {
                    for l in 0..3 {
                        v += &t[k][i] * &a[k][l] * &t[l][j];
                    }
                }
                let want = if i == j { norm.diagonal[i].clone() } else { rat(0) };
                prop_assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn qtype_powers_are_recognized(t in signs(3), k in 1u32..=3, c in prop_oneof![-5i64..=-1, 1i64..=5], extra in poly(3, 6)) {
        let q = QuadForm::new(t).unwrap();
        let p = q.power(k).scale(&rat(c));
        prop_assert!(classify_phase(&p, 2 * k, &q).unwrap().is_qtype());
        prop_assert_eq!(multiple_of(&p, &q.power(k)), Some(rat(c)));
        // a homogeneous perturbation off the Q^k line is not Q-type
        let bump: Poly = Poly::from_terms(3, extra.terms().filter(|(m, _)| m.degree() == 2 * k).map(|(m, c)| (m.clone(), c.clone())));
        let moved = &p + &bump;
        prop_assert_eq!(classify_phase(&moved, 2 * k, &q).unwrap().is_qtype(), proportional_on_grid(&moved, &q.power(k), k));
    }

    #[test]
    fn change_of_variables_round_trip(
        t in signs(3),
        l in 1usize..=3,
        u in prop::collection::vec(-2.0f64..2.0, 3),
        tau in -1.0f64..1.0,
        sigma in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let cov = ChangeOfVars::new(QuadForm::new(t).unwrap(), l).unwrap();
        prop_assume!(u[l - 1].abs() > 0.1);
        let z = z_from_coords(&u, tau, &sigma, &cov).unwrap();
        let (tau2, sigma2) = coords_from_z(&u, &z, &cov).unwrap();
        prop_assert!((tau2 - tau).abs() < 1e-9);
        for (a, b) in sigma.iter().zip(&sigma2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
