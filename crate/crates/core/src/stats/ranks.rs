use alloc::vec;
use alloc::vec::Vec;

/// Midranks of a pooled sample plus the sizes of its tie groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Rank of each input position (1-based, ties averaged).
    pub ranks: Vec<f64>,
    /// Size of every tie group with more than one member.
    pub ties: Vec<usize>,
}

impl Ranking {
    /// `sum(t^3 - t)` over tie groups.
    pub fn tie_term(&self) -> f64 {
        self.ties
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum()
    }
}

/// Assigns midranks to `values` (which must be finite).
pub fn midranks(values: &[f64]) -> Ranking {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1 ..= end.
        let mid = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    Ranking { ranks, ties }
}
