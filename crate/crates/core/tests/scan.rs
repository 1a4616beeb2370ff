//! Selective scan against a direct evaluation of the recurrence.

mod common;

use std::time::{Duration, Instant};

use common::{rand_vec, rng};
use hdmba::ssm::{discretize, scan};
use hdmba::Tensor;
use proptest::prelude::*;

struct Case {
    s: usize,
    l: usize,
    d: usize,
    n: usize,
    u: Vec<f64>,
    delta: Vec<f64>,
    a_log: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    skip: Vec<f64>,
}

impl Case {
    fn random(seed: u64, s: usize, l: usize, d: usize, n: usize) -> Self {
        let mut r = rng(seed);
        Self {
            s,
            l,
            d,
            n,
            u: rand_vec(&mut r, s * l * d, -1.0, 1.0),
            delta: rand_vec(&mut r, s * l * d, 0.01, 1.0),
            a_log: rand_vec(&mut r, d * n, -1.0, 1.5),
            b: rand_vec(&mut r, s * l * n, -1.0, 1.0),
            c: rand_vec(&mut r, s * l * n, -1.0, 1.0),
            skip: rand_vec(&mut r, d, -1.0, 1.0),
        }
    }

    fn run(&self) -> Vec<f64> {
        let t = |shape: &[usize], v: &[f64]| Tensor::from_vec(shape, v.to_vec()).unwrap();
        let (s, l, d, n) = (self.s, self.l, self.d, self.n);
        scan(
            &t(&[s, l, d], &self.u),
            &t(&[s, l, d], &self.delta),
            &t(&[d, n], &self.a_log),
            &t(&[s, l, n], &self.b),
            &t(&[s, l, n], &self.c),
            &t(&[d], &self.skip),
        )
        .unwrap()
        .to_vec()
    }

    /// `h_t = Abar_t h_{t-1} + Bbar_t u_t`, `y_t = C_t h_t + D u_t` with the
    /// zero-order-hold discretization, one sequence and channel at a time.
    fn naive(&self) -> Vec<f64> {
        let (s, l, d, n) = (self.s, self.l, self.d, self.n);
        let a: Vec<f64> = self.a_log.iter().map(|v| -v.exp()).collect();
        let mut y = vec![0.0; s * l * d];
        for q in 0..s {
            let bs = &self.b[q * l * n..(q + 1) * l * n];
            let ds = &self.delta[q * l * d..(q + 1) * l * d];
            let (abar, bbar) = discretize(&a, bs, ds, l, d, n).unwrap();
            for ch in 0..d {
                let mut h = vec![0.0; n];
                for t in 0..l {
                    let ut = self.u[(q * l + t) * d + ch];
                    let mut acc = self.skip[ch] * ut;
                    for k in 0..n {
                        let idx = (t * d + ch) * n + k;
                        h[k] = abar[idx] * h[k] + bbar[idx] * ut;
                        acc += self.c[(q * l + t) * n + k] * h[k];
                    }
                    y[(q * l + t) * d + ch] = acc;
                }
            }
        }
        y
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_recurrence(seed in any::<u64>(), s in 1usize..4, l in 1usize..40, d in 1usize..6, n in 1usize..9) {
        let case = Case::random(seed, s, l, d, n);
        prop_assert!(max_abs_diff(&case.run(), &case.naive()) < 1e-10);
    }

    #[test]
    fn output_is_causal(seed in any::<u64>(), l in 2usize..24, cut in 0usize..23) {
        let cut = cut % (l - 1);
        let mut case = Case::random(seed, 1, l, 3, 4);
        let before = case.run();
        let mut r = rng(seed ^ 0x5eed);
        let tail = cut + 1;
        for v in case.u[tail * 3..].iter_mut() {
            *v += rand_vec(&mut r, 1, -2.0, 2.0)[0];
        }
        for v in case.delta[tail * 3..].iter_mut() {
            *v *= 1.5;
        }
        for v in case.b[tail * 4..].iter_mut().chain(case.c[tail * 4..].iter_mut()) {
            *v = -*v;
        }
        let after = case.run();
        prop_assert_eq!(&before[..tail * 3], &after[..tail * 3]);
    }

    #[test]
    fn zero_input_gives_zero_output(seed in any::<u64>(), l in 1usize..30) {
        let mut case = Case::random(seed, 2, l, 3, 5);
        case.u.iter_mut().for_each(|v| *v = 0.0);
        prop_assert!(case.run().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn sequences_are_independent() {
    let case = Case::random(3, 3, 12, 4, 5);
    let all = case.run();
    for q in 0..3 {
        let single = Case {
            s: 1,
            u: case.u[q * 48..(q + 1) * 48].to_vec(),
            delta: case.delta[q * 48..(q + 1) * 48].to_vec(),
            b: case.b[q * 60..(q + 1) * 60].to_vec(),
            c: case.c[q * 60..(q + 1) * 60].to_vec(),
            a_log: case.a_log.clone(),
            skip: case.skip.clone(),
            ..case
        };
        assert_eq!(single.run(), all[q * 48..(q + 1) * 48]);
    }
}

fn best_of(case: &Case, reps: usize) -> Duration {
    (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            std::hint::black_box(case.run());
            t0.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn cost_is_linear_in_length() {
    let short = Case::random(1, 1, 4096, 16, 16);
    let long = Case::random(1, 1, 8192, 16, 16);
    best_of(&short, 2);
    let ratio = best_of(&long, 7).as_secs_f64() / best_of(&short, 7).as_secs_f64();
    assert!(ratio <= 2.3, "doubling the length cost {ratio:.2}x");
}
