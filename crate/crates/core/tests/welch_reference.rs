//! Welch t-test against reference values computed independently with
//! scipy.stats.ttest_ind(a, b, equal_var=False).

use resonance::stats::welch_t_test;

struct Case {
    a: &'static [f64],
    b: &'static [f64],
    t: f64,
    df: f64,
    p: f64,
}

const CASES: [Case; 3] = [
    Case {
        a: &[
            27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7,
            21.4,
        ],
        b: &[
            27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5,
            24.4,
        ],
        t: -2.455356398286006,
        df: 24.988529290231416,
        p: 0.021378001462866985,
    },
    Case {
        a: &[17.2, 20.9, 22.6, 18.1, 21.7, 21.4, 23.5, 24.2, 14.7, 21.8],
        b: &[
            21.5, 22.8, 21.0, 23.0, 21.6, 23.6, 22.5, 20.7, 23.4, 21.8, 20.7, 21.7, 21.5, 22.5,
            23.6, 21.5, 22.5, 23.5, 21.5, 21.8,
        ],
        t: -1.5654335235985037,
        df: 9.904741248650831,
        p: 0.14884169660532834,
    },
    Case {
        a: &[19.8, 20.4, 19.6, 17.8, 18.5, 18.9, 18.3, 18.9, 19.5, 22.0],
        b: &[
            28.2, 26.6, 20.1, 23.3, 25.2, 22.1, 17.7, 27.6, 20.6, 13.7, 23.2, 17.5, 20.6, 18.0,
            23.9, 21.6, 24.3, 20.4, 23.9, 13.3,
        ],
        t: -2.225512039969852,
        df: 24.524634944257343,
        p: 0.035484530830010325,
    },
];

#[test]
fn matches_reference_to_1e_6() {
    for (i, c) in CASES.iter().enumerate() {
        let r = welch_t_test(c.a, c.b).unwrap();
        assert!((r.t - c.t).abs() < 1e-6, "case {i}: t {} vs {}", r.t, c.t);
        assert!(
            (r.df - c.df).abs() < 1e-6,
            "case {i}: df {} vs {}",
            r.df,
            c.df
        );
        assert!(
            (r.p_value - c.p).abs() < 1e-6,
            "case {i}: p {} vs {}",
            r.p_value,
            c.p
        );
    }
}

#[test]
fn swapping_samples_flips_t() {
    for c in &CASES {
        let r = welch_t_test(c.b, c.a).unwrap();
        assert!((r.t + c.t).abs() < 1e-6);
        assert!((r.p_value - c.p).abs() < 1e-6);
    }
}
