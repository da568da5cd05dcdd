use std::collections::VecDeque;

/// Sliding-window extrema over clamped offset windows.
///
/// `out[i]` is the min (or max) of `vals[j]` for `j` in
/// `[i + lo, min(i + hi, len - 1)]`; windows that start past the end of the
/// slice produce `empty_val`. Runs in O(len) using a monotonic index deque.
pub fn sliding_extreme(vals: &[f64], lo: usize, hi: usize, minimum: bool, empty_val: f64) -> Vec<f64> {
    debug_assert!(lo <= hi);
    let len = vals.len();
    let mut out = vec![empty_val; len];
    let mut deque: VecDeque<usize> = VecDeque::new();
    let mut next = 0usize;
    let better = |a: f64, b: f64| if minimum { a <= b } else { a >= b };
    for i in 0..len {
        let right = (i + hi).min(len - 1);
        while next <= right {
            while let Some(&back) = deque.back() {
                if better(vals[next], vals[back]) {
                    deque.pop_back();
                } else {
                    break;
                }
            }
            deque.push_back(next);
            next += 1;
        }
        if i + lo >= len {
            continue;
        }
        while let Some(&front) = deque.front() {
            if front < i + lo {
                deque.pop_front();
            } else {
                break;
            }
        }
        out[i] = vals[*deque.front().expect("window is nonempty")];
    }
    out
}

/// `out[i] = extreme(vals[i..])`, the untimed suffix min/max.
pub fn suffix_extreme(vals: &[f64], minimum: bool) -> Vec<f64> {
    let mut out = vec![0.0; vals.len()];
    let mut acc = *vals.last().expect("nonempty");
    for i in (0..vals.len()).rev() {
        let v = vals[i];
        acc = if minimum { v.min(acc) } else { v.max(acc) };
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(vals: &[f64], lo: usize, hi: usize, minimum: bool, empty_val: f64) -> Vec<f64> {
        (0..vals.len())
            .map(|i| {
                let from = i + lo;
                let to = (i + hi).min(vals.len() - 1);
                if from > to {
                    return empty_val;
                }
                vals[from..=to]
                    .iter()
                    .copied()
                    .fold(if minimum { f64::INFINITY } else { f64::NEG_INFINITY }, |acc, v| {
                        if minimum {
                            acc.min(v)
                        } else {
                            acc.max(v)
                        }
                    })
            })
            .collect()
    }

    #[test]
    fn matches_direct_scan() {
        let vals = [3.0, 1.0, 2.0, -5.0, 4.0, 4.0, 0.5];
        for lo in 0..4 {
            for hi in lo..6 {
                for minimum in [true, false] {
                    assert_eq!(
                        sliding_extreme(&vals, lo, hi, minimum, 99.0),
                        brute(&vals, lo, hi, minimum, 99.0),
                        "lo={lo} hi={hi} min={minimum}"
                    );
                }
            }
        }
    }

    #[test]
    fn clamps_at_end() {
        // width-2 sliding min of [7,9,8], clamped at the last step
        assert_eq!(sliding_extreme(&[7.0, 9.0, 8.0], 0, 1, true, 0.0), vec![7.0, 8.0, 8.0]);
    }

    #[test]
    fn empty_window_yields_marker() {
        assert_eq!(sliding_extreme(&[1.0, 2.0], 3, 5, true, 123.0), vec![123.0, 123.0]);
    }

    #[test]
    fn suffix_scan() {
        assert_eq!(suffix_extreme(&[1.0, 3.0, 0.0], true), vec![0.0, 0.0, 0.0]);
        assert_eq!(suffix_extreme(&[1.0, 3.0, 0.0], false), vec![3.0, 3.0, 0.0]);
    }
}
