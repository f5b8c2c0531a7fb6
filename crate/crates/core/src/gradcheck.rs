//! Central finite differences against tape gradients.

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckResult {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±h` evaluations landed in different regimes
    /// (e.g. a ReLU input changed sign), where the function is not smooth.
    pub skipped: usize,
}

impl CheckResult {
    pub fn merge(self, other: CheckResult) -> CheckResult {
        CheckResult {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Compares `analytic[i]` with `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for each
/// `i` in `coords`. `f` returns the value and a regime tag; coordinates whose
/// two evaluations disagree on the tag are skipped.
pub fn check<F>(mut f: F, x: &[f64], analytic: &[f64], coords: &[usize], h: f64, floor: f64) -> CheckResult
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    let mut probe = x.to_vec();
    let mut out = CheckResult::default();
    for &i in coords {
        probe[i] = x[i] + h;
        let (up, ru) = f(&probe);
        probe[i] = x[i] - h;
        let (down, rd) = f(&probe);
        probe[i] = x[i];
        if ru != rd {
            out.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic[i], numeric, floor));
        out.checked += 1;
    }
    out
}

/// Order-sensitive hash of a sign pattern, for use as a regime tag.
pub fn sign_pattern<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &v in values {
        h ^= u64::from(v > 0.0);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
