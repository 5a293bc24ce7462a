use serde::{Deserialize, Serialize};

/// Two-sided CUSUM accumulators over residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CusumState {
    /// Upward accumulator, `max(0, c + r - mu0 - k)`.
    pub c: f64,
    /// Mirrored downward accumulator.
    pub c_neg: f64,
    /// Expected residual mean.
    pub mu0: f64,
}

impl CusumState {
    pub fn new(mu0: f64) -> Self {
        CusumState {
            c: 0.0,
            c_neg: 0.0,
            mu0,
        }
    }

    /// Larger of the two sides; this is the detector score.
    pub fn score(&self) -> f64 {
        self.c.max(self.c_neg)
    }
}

pub fn cusum_update(state: CusumState, r: f64, k: f64) -> CusumState {
    let dev = r - state.mu0;
    CusumState {
        c: (state.c + dev - k).max(0.0),
        c_neg: (state.c_neg - dev - k).max(0.0),
        mu0: state.mu0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stays_zero_at_mean() {
        let mut s = CusumState::new(1.5);
        for _ in 0..100 {
            s = cusum_update(s, 1.5, 0.0);
            assert_eq!(s.score(), 0.0);
        }
    }

    #[test]
    fn direct_recursion() {
        let mut s = CusumState::new(0.0);
        let mut got = vec![];
        for r in [1.0, 1.0, 1.0] {
            s = cusum_update(s, r, 0.5);
            got.push(s.c);
        }
        assert_eq!(got, vec![0.5, 1.0, 1.5]);
    }

    #[test]
    fn two_sided() {
        // hand recursion: pos 2-0.5=1.5, then max(0,1.5-5-0.5)=0;
        // neg 0, then max(0, 0+5-0.5)=4.5
        let s1 = cusum_update(CusumState::new(0.0), 2.0, 0.5);
        assert_eq!((s1.c, s1.c_neg), (1.5, 0.0));
        let s2 = cusum_update(s1, -5.0, 0.5);
        assert_eq!((s2.c, s2.c_neg), (0.0, 4.5));
        assert_eq!(s2.score(), 4.5);
    }

    proptest! {
        #[test]
        fn never_negative(rs in proptest::collection::vec(-1e6f64..1e6, 0..200), mu in -10f64..10.0, k in 0f64..5.0) {
            let mut s = CusumState::new(mu);
            for r in rs {
                s = cusum_update(s, r, k);
                prop_assert!(s.c >= 0.0 && s.c_neg >= 0.0);
            }
        }
    }
}
