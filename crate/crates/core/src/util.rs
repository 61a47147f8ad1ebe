//! Small numeric helpers shared across modules.

/// Stand-in for log(0) at masked entries; finite so arithmetic on masked
/// logits never produces NaN.
pub const MASKED: f64 = -1.0e30;

/// Streaming log-sum-exp; `-inf` for an empty iterator.
pub fn logsumexp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut m = f64::NEG_INFINITY;
    let mut s = 0.0;
    for x in xs {
        if x == f64::NEG_INFINITY {
            continue;
        }
        if x > m {
            s = s * (m - x).exp() + 1.0;
            m = x;
        } else {
            s += (x - m).exp();
        }
    }
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + s.ln()
    }
}

/// In-place log-softmax over the entries selected by `legal`; others are
/// set to [`MASKED`].
pub fn masked_log_softmax(logits: &mut [f64], legal: impl Fn(usize) -> bool) {
    let m = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| legal(*i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().enumerate().filter(|(i, _)| legal(*i)).map(|(_, &x)| (x - m).exp()).sum();
    let lz = m + z.ln();
    for (i, x) in logits.iter_mut().enumerate() {
        *x = if legal(i) { *x - lz } else { MASKED };
    }
}
