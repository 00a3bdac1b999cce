//! Binomial probability machinery.
//!
//! Every test, p-value, confidence interval and power computation in this
//! crate reduces to the pmf, cdf and lower quantile of `B(N, s)`. The pmf is
//! evaluated in log space with Loader's saddle-point decomposition (Stirling
//! error terms plus a deviance term), which stays accurate to a few ulps in
//! relative terms for `N` up to `10^6` and beyond, where a naive
//! `C(N, n) s^n (1-s)^(N-n)` underflows.
//!
//! Tail probabilities always sum the *shorter* tail, walking away from the
//! mode with the pmf ratio recurrence (resynchronised against the exact pmf
//! at fixed intervals) and compensated summation. The walk stops once a
//! geometric bound on the remaining mass drops below `2^-60` of the running
//! sum.

use crate::error::{AicoError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Steps between exact pmf re-evaluations in a tail walk.
const RESYNC: u64 = 64;

/// Relative stopping tolerance for tail sums.
const TAIL_TOL: f64 = 8.673_617_379_884_035e-19; // 2^-60

/// `ln n! - [(n + 1/2) ln n - n + ln sqrt(2 pi)]` for n = 0..=15.
#[allow(clippy::excessive_precision)]
const STIRLERR_SMALL: [f64; 16] = [
    0.0,
    0.081_061_466_795_327_258_219_67,
    0.041_340_695_955_409_294_093_82,
    0.027_677_925_684_998_339_148_79,
    0.020_790_672_103_765_093_111_52,
    0.016_644_691_189_821_192_163_19,
    0.013_876_128_823_070_747_998_75,
    0.011_896_709_945_891_770_095_06,
    0.010_411_265_261_972_096_497_48,
    0.009_255_462_182_712_732_917_729,
    0.008_330_563_433_362_871_256_469,
    0.007_573_675_487_951_840_794_972,
    0.006_942_840_107_209_529_865_664,
    0.006_408_994_188_004_207_068_44,
    0.005_951_370_112_758_847_735_624,
    0.005_554_733_551_962_801_371_039,
];

fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15 {
        return STIRLERR_SMALL[n as usize];
    }
    let n = n as f64;
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x / np) + np - x`, evaluated without cancellation
/// when `x` is close to `np`.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        let mut j = 1.0;
        loop {
            ej *= v;
            let s1 = s + ej / (2.0 * j + 1.0);
            if s1 == s {
                return s1;
            }
            s = s1;
            j += 1.0;
        }
    }
    x * (x / np).ln() + np - x
}

/// Natural-log probability. Always `<= 0` up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn exp(self) -> f64 {
        self.0.exp()
    }
}

/// Neumaier compensated accumulator.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// The binomial law `B(N, s)` with `N >= 1` trials and `0 < s < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binomial {
    trials: u64,
    p: f64,
    q: f64,
}

impl Binomial {
    pub fn new(trials: u64, success_prob: f64) -> Result<Self> {
        if trials == 0 {
            return Err(AicoError::Domain("binomial needs at least one trial".into()));
        }
        if !(success_prob > 0.0 && success_prob < 1.0) {
            return Err(AicoError::Domain(format!(
                "success probability must lie in (0, 1), got {success_prob}"
            )));
        }
        Ok(Self {
            trials,
            p: success_prob,
            q: 1.0 - success_prob,
        })
    }

    /// `B(N, 1/2)`, the null law of the sign statistic.
    pub fn fair(trials: u64) -> Result<Self> {
        Self::new(trials, 0.5)
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn success_prob(&self) -> f64 {
        self.p
    }

    fn mean(&self) -> f64 {
        self.trials as f64 * self.p
    }

    fn ln_mass(&self, k: u64) -> f64 {
        let n = self.trials as f64;
        let (p, q) = (self.p, self.q);
        if k == 0 {
            return if p < 0.1 { -bd0(n, n * q) - n * p } else { n * q.ln() };
        }
        if k == self.trials {
            return if q < 0.1 { -bd0(n, n * p) - n * q } else { n * p.ln() };
        }
        let x = k as f64;
        let lc = stirlerr(self.trials)
            - stirlerr(k)
            - stirlerr(self.trials - k)
            - bd0(x, n * p)
            - bd0(n - x, n * q);
        let lf = LN_2PI + x.ln() + (-x / n).ln_1p();
        lc - 0.5 * lf
    }

    fn mass(&self, k: u64) -> f64 {
        self.ln_mass(k).exp()
    }

    pub fn ln_pmf(&self, k: u64) -> Result<LogProb> {
        if k > self.trials {
            return Err(AicoError::Domain(format!(
                "pmf argument {k} outside 0..={}",
                self.trials
            )));
        }
        Ok(LogProb(self.ln_mass(k)))
    }

    pub fn pmf(&self, k: u64) -> Result<f64> {
        self.ln_pmf(k).map(LogProb::exp)
    }

    /// `sum_{j <= n} pmf(j)`; caller guarantees `n < N s` so terms shrink
    /// monotonically as `j` decreases.
    fn lower_tail(&self, n: u64) -> f64 {
        let odds = self.q / self.p;
        let big_n = self.trials as f64;
        let mut term = self.mass(n);
        let mut acc = CompensatedSum::default();
        acc.add(term);
        let mut j = n;
        while j > 0 {
            let ratio = j as f64 / (big_n - j as f64 + 1.0) * odds;
            j -= 1;
            term = if (n - j).is_multiple_of(RESYNC) {
                self.mass(j)
            } else {
                term * ratio
            };
            acc.add(term);
            if term == 0.0 {
                break;
            }
            if j > 0 {
                let next = j as f64 / (big_n - j as f64 + 1.0) * odds;
                if next < 1.0 && term * next / (1.0 - next) <= acc.value() * TAIL_TOL {
                    break;
                }
            }
        }
        acc.value()
    }

    /// `sum_{j >= n} pmf(j)`; caller guarantees `n > N s` so terms shrink
    /// monotonically as `j` increases.
    fn upper_tail(&self, n: u64) -> f64 {
        if n > self.trials {
            return 0.0;
        }
        let odds = self.p / self.q;
        let big_n = self.trials as f64;
        let mut term = self.mass(n);
        let mut acc = CompensatedSum::default();
        acc.add(term);
        let mut j = n;
        while j < self.trials {
            let ratio = (big_n - j as f64) / (j as f64 + 1.0) * odds;
            j += 1;
            term = if (j - n).is_multiple_of(RESYNC) {
                self.mass(j)
            } else {
                term * ratio
            };
            acc.add(term);
            if term == 0.0 {
                break;
            }
            if j < self.trials {
                let next = (big_n - j as f64) / (j as f64 + 1.0) * odds;
                if next < 1.0 && term * next / (1.0 - next) <= acc.value() * TAIL_TOL {
                    break;
                }
            }
        }
        acc.value()
    }

    /// By symmetry `P(X <= (N-1)/2) = 1/2` exactly for a fair law with odd
    /// `N`; summing pmfs would land an ulp away and shift the median.
    fn is_fair_midpoint(&self, k: u64) -> bool {
        self.p == 0.5 && 2 * k + 1 == self.trials
    }

    /// Distribution function `P(X <= n)`; 0 for `n < 0`, 1 for `n >= N`.
    pub fn cdf(&self, n: i64) -> f64 {
        if n < 0 {
            return 0.0;
        }
        let k = n as u64;
        if k >= self.trials {
            return 1.0;
        }
        if self.is_fair_midpoint(k) {
            return 0.5;
        }
        if (k as f64) < self.mean() {
            self.lower_tail(k).min(1.0)
        } else {
            (1.0 - self.upper_tail(k + 1)).max(0.0)
        }
    }

    /// Survival function `P(X > n)`, accurate in relative terms deep into
    /// the upper tail.
    pub fn sf(&self, n: i64) -> f64 {
        if n < 0 {
            return 1.0;
        }
        let k = n as u64;
        if k >= self.trials {
            return 0.0;
        }
        if self.is_fair_midpoint(k) {
            return 0.5;
        }
        if (k as f64) >= self.mean() {
            self.upper_tail(k + 1).min(1.0)
        } else {
            (1.0 - self.lower_tail(k)).max(0.0)
        }
    }

    /// Lower quantile `min{n : P(X <= n) >= level}`.
    pub fn quantile(&self, level: f64) -> Result<u64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(AicoError::Domain(format!(
                "quantile level must lie in (0, 1), got {level}"
            )));
        }
        if self.cdf(0) >= level {
            return Ok(0);
        }
        // cdf(lo) < level <= cdf(hi)
        let (mut lo, mut hi) = (0u64, self.trials);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.cdf(mid as i64) >= level {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}
