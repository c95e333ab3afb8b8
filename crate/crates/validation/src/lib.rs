//! Reference oracles and reporting for the acceptance suite in
//! `tests/acceptance.rs`. The oracles are deliberately naive: full sorts
//! and nested loops over plain slices, sharing no code with the library.

use std::io::Write as _;
use std::time::Duration;

/// Indices of the `k` largest values by a full stable sort, ties to the
/// lower index, returned in increasing order.
pub fn full_sort_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top = order[..k.min(values.len())].to_vec();
    top.sort_unstable();
    top
}

/// Features nonzero at exactly the two think positions, by brute force
/// over a row-major `[positions × m]` map.
pub fn brute_force_reasoning_count(z: &[f64], positions: usize, m: usize, open: usize, close: usize) -> usize {
    let mut count = 0;
    for f in 0..m {
        let mut exclusive = true;
        for p in 0..positions {
            let active = z[p * m + f] != 0.0;
            if active != (p == open || p == close) {
                exclusive = false;
                break;
            }
        }
        if exclusive {
            count += 1;
        }
    }
    count
}

/// Result of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub criterion: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Verdict {
    /// One line, written straight to the stderr handle so it shows even
    /// when the test harness captures output.
    pub fn print(&self) {
        let line = format!(
            "acceptance criterion {:>2} {:<28} {}  ({:.1}s of {}s) {}\n",
            self.criterion,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        );
        let mut err = std::io::stderr().lock();
        let _ = err.write_all(line.as_bytes());
        let _ = err.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_oracle_breaks_ties_low() {
        assert_eq!(full_sort_top_k(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(full_sort_top_k(&[1.0, 3.0, 3.0, 2.0], 1), vec![1]);
    }

    #[test]
    fn count_oracle_on_hand_map() {
        // 3 positions × 2 features; think at 0 and 2.
        let z = [1.0, 1.0, 0.0, 1.0, 2.0, 1.0];
        assert_eq!(brute_force_reasoning_count(&z, 3, 2, 0, 2), 1);
    }
}
