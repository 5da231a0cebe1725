//! Benjamini-Hochberg step-up adjustment for multiple comparisons.

use crate::error::{IguaneError, Result};

/// Adjusted p-values (q-values) in the input's order. `m` is the family
/// size — the number of p-values passed in. Adjusted value i is
/// `min_{j >= rank(i)} (m * p_(j) / j)`, capped at 1.
pub fn benjamini_hochberg(p: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(IguaneError::DegenerateInput(
            "benjamini_hochberg: empty p-value family".into(),
        ));
    }
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(IguaneError::Validation(format!(
                "benjamini_hochberg: p-value {v} outside [0, 1]"
            )));
        }
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let raw = p[idx] * m as f64 / (rank + 1) as f64;
        running_min = running_min.min(raw);
        adjusted[idx] = running_min.min(1.0);
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn worked_example() {
        // sorted: 0.005, 0.01, 0.03, 0.04 with m=4
        // raw: 0.02, 0.02, 0.04, 0.04; step-up running min keeps them
        let adj = benjamini_hochberg(&[0.01, 0.04, 0.03, 0.005]).unwrap();
        assert_relative_eq!(adj[0], 0.02, epsilon = 1e-15);
        assert_relative_eq!(adj[1], 0.04, epsilon = 1e-15);
        assert_relative_eq!(adj[2], 0.04, epsilon = 1e-15);
        assert_relative_eq!(adj[3], 0.02, epsilon = 1e-15);
    }

    #[test]
    fn monotone_enforcement_from_the_top() {
        // p = {0.01, 0.02}: raw adj = {0.02, 0.02}; the larger p's
        // adjusted value caps the smaller one's.
        let adj = benjamini_hochberg(&[0.01, 0.02]).unwrap();
        assert_relative_eq!(adj[0], 0.02, epsilon = 1e-15);
        assert_relative_eq!(adj[1], 0.02, epsilon = 1e-15);
    }

    #[test]
    fn caps_at_one_and_keeps_input_order() {
        let adj = benjamini_hochberg(&[0.9, 0.95, 0.2]).unwrap();
        assert!(adj.iter().all(|&v| v <= 1.0));
        // sorted raws: 0.2*3/1=0.6, 0.9*3/2=1.35, 0.95*3/3=0.95
        // step-up running min pulls the 1.35 down to 0.95
        assert_relative_eq!(adj[2], 0.6, epsilon = 1e-15);
        assert_relative_eq!(adj[0], 0.95, epsilon = 1e-15);
        assert_relative_eq!(adj[1], 0.95, epsilon = 1e-15);
        // intermediate raw 1.6 exceeds 1 but the top-rank raw (= max p) bounds it
        let adj2 = benjamini_hochberg(&[0.8, 0.9]).unwrap();
        assert_relative_eq!(adj2[0], 0.9, epsilon = 1e-15); // min(1.6, 0.9)
        assert_relative_eq!(adj2[1], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn single_p_value_is_unchanged() {
        let adj = benjamini_hochberg(&[0.037]).unwrap();
        assert_relative_eq!(adj[0], 0.037, epsilon = 1e-15);
    }

    #[test]
    fn permutation_of_input_permutes_output() {
        let p = [0.03, 0.2, 0.007, 0.56, 0.11];
        let adj = benjamini_hochberg(&p).unwrap();
        let perm = [2usize, 0, 4, 1, 3];
        let p2: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let adj2 = benjamini_hochberg(&p2).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_relative_eq!(adj2[k], adj[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn ties_get_equal_adjusted_values() {
        let adj = benjamini_hochberg(&[0.02, 0.02, 0.5]).unwrap();
        assert_relative_eq!(adj[0], adj[1], epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(benjamini_hochberg(&[]).is_err());
        assert!(benjamini_hochberg(&[0.5, 1.2]).is_err());
        assert!(benjamini_hochberg(&[-0.1]).is_err());
    }
}
