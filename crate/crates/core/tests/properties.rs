use proptest::prelude::*;
use segflow::adapt::relax_metric;
use segflow::adapt::MetricField;
use segflow::bregman::shrink;
use segflow::tensor::{norm, sub, Sym2};

fn spd() -> impl Strategy<Value = Sym2> {
    (0.01f64..10.0, 0.01f64..10.0, 0.0f64..std::f64::consts::PI)
        .prop_map(|(a, b, t)| Sym2::from_eigen([a, b], [[t.cos(), t.sin()], [-t.sin(), t.cos()]]))
}

proptest! {
    #[test]
    fn shrink_is_non_expansive(
        a in prop::array::uniform2(-10.0f64..10.0),
        b in prop::array::uniform2(-10.0f64..10.0),
        g in 0.0f64..5.0,
    ) {
        let d = norm(sub(shrink(a, g), shrink(b, g)));
        prop_assert!(d <= norm(sub(a, b)) + 1e-12);
    }

    #[test]
    fn relaxation_keeps_spd(t in spd(), o in spd(), w in 0.0f64..=1.0) {
        let r = relax_metric(
            &MetricField { tensors: vec![t] },
            &MetricField { tensors: vec![o] },
            w,
        );
        prop_assert!(r.tensors[0].is_spd());
    }

    #[test]
    fn intersection_dominates_both(a in spd(), b in spd(), t in 0.0f64..std::f64::consts::PI) {
        let c = a.intersect(&b);
        let v = [t.cos(), t.sin()];
        prop_assert!(c.is_spd());
        prop_assert!(c.quad(v) >= a.quad(v).max(b.quad(v)) * (1.0 - 1e-9));
    }
}
