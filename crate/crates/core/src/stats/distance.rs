//! Distance-structure preservation: does harmonization keep the
//! between-subject geometry of a site intact?
//!
//! For one group of images, compute all pairwise Euclidean distances
//! before and after harmonization; report the Pearson correlation of
//! the two distance vectors and the ICC(1,1) of the mean-normalized
//! distances (normalization removes the global intensity rescaling a
//! harmonizer is allowed to apply).

use crate::error::{IguaneError, Result};
use crate::stats::{icc_1_1, mean, pearson};

/// Upper-triangle (i < j) pairwise Euclidean distances.
pub fn pairwise_distances(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = features.len();
    if n < 3 {
        return Err(IguaneError::DegenerateInput(format!(
            "pairwise_distances: need at least 3 points, got {n}"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) || d == 0 {
        return Err(IguaneError::Validation(
            "pairwise_distances: inconsistent or empty feature vectors".into(),
        ));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = features[i]
                .iter()
                .zip(features[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push(s.sqrt());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct DistancePreservation {
    /// Pearson correlation of before/after distance vectors.
    pub r: f64,
    /// ICC(1,1) of mean-normalized distances, each pair a group.
    pub icc: f64,
    pub n_pairs: usize,
}

/// `before[i]` and `after[i]` must describe the same image.
pub fn distance_preservation(
    before: &[Vec<f64>],
    after: &[Vec<f64>],
) -> Result<DistancePreservation> {
    if before.len() != after.len() {
        return Err(IguaneError::Validation(format!(
            "distance_preservation: {} images before vs {} after",
            before.len(),
            after.len()
        )));
    }
    let db = pairwise_distances(before)?;
    let da = pairwise_distances(after)?;
    let r = pearson(&db, &da)?;
    let mb = mean(&db);
    let ma = mean(&da);
    if mb == 0.0 || ma == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "distance_preservation: all images identical".into(),
        ));
    }
    let groups: Vec<Vec<f64>> = db
        .iter()
        .zip(da.iter())
        .map(|(&b, &a)| vec![b / mb, a / ma])
        .collect();
    let icc = icc_1_1(&groups)?;
    Ok(DistancePreservation {
        r,
        icc,
        n_pairs: db.len(),
    })
}
