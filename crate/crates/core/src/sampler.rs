//! Age-balanced sampling of source-site images.
//!
//! During training, source-site images are drawn with probabilities chosen so
//! that the expected age distribution of the draws matches the reference
//! site's age distribution. Weights are computed per age bin: an image in bin
//! `b` gets weight proportional to `ref_count(b) / source_count(b)`, so the
//! total mass landing in bin `b` is proportional to the reference mass there.
//! Reference mass in bins without any source image is redistributed
//! proportionally over the covered bins (equivalently: normalization runs
//! over covered bins only).

use crate::error::{IguaneError, Result};

/// Default age bin edges: 5-year bins over [18, 80].
///
/// The final bin is truncated to end at 80, giving 13 bins. Ages outside the
/// range are clamped onto it before binning.
pub fn default_bin_edges() -> Vec<f64> {
    let mut edges: Vec<f64> = Vec::new();
    let mut e = 18.0;
    while e < 80.0 {
        edges.push(e);
        e += 5.0;
    }
    edges.push(80.0);
    edges
}

fn validate_edges(bin_edges: &[f64]) -> Result<()> {
    if bin_edges.len() < 2 {
        return Err(IguaneError::Validation(
            "bin_edges needs at least two entries".into(),
        ));
    }
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(IguaneError::Validation(
            "bin_edges must be strictly ascending".into(),
        ));
    }
    if bin_edges.iter().any(|e| !e.is_finite()) {
        return Err(IguaneError::Validation("bin_edges must be finite".into()));
    }
    Ok(())
}

/// Index of the bin containing `age`, after clamping `age` onto the edge
/// range. Bins are `[e_i, e_{i+1})`; the last bin includes its upper edge.
pub fn bin_index(age: f64, bin_edges: &[f64]) -> usize {
    let n_bins = bin_edges.len() - 1;
    let lo = bin_edges[0];
    let hi = bin_edges[n_bins];
    let a = age.clamp(lo, hi);
    // First edge strictly greater than `a`, minus one; the top edge maps to
    // the last bin.
    let upper = bin_edges.partition_point(|&e| e <= a);
    upper.saturating_sub(1).min(n_bins - 1)
}

fn bin_counts(ages: &[f64], bin_edges: &[f64]) -> Vec<usize> {
    let mut counts = vec![0usize; bin_edges.len() - 1];
    for &a in ages {
        counts[bin_index(a, bin_edges)] += 1;
    }
    counts
}

/// Per-image sampling distribution for one source site.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// Ascending age bin edges the plan was built against.
    pub bin_edges: Vec<f64>,
    /// Probability of drawing each image, indexed like the source list.
    pub weights: Vec<f64>,
    /// Fraction of reference mass that sat in bins without source images and
    /// was redistributed proportionally over the covered bins. Zero when the
    /// source covers every reference bin; callers can surface it as a
    /// warning when nonzero.
    pub redistributed_reference_mass: f64,
    /// Cumulative weights, used for inverse-CDF draws.
    cumulative: Vec<f64>,
}

impl SamplingPlan {
    fn from_weights(
        bin_edges: Vec<f64>,
        weights: Vec<f64>,
        redistributed_reference_mass: f64,
    ) -> Self {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        SamplingPlan {
            bin_edges,
            weights,
            redistributed_reference_mass,
            cumulative,
        }
    }

    /// Equiprobable plan over `n_images` (the `single_fwd_disc_uniform_sampling`
    /// ablation): every weight is exactly `1/n_images`.
    pub fn uniform(n_images: usize, bin_edges: Vec<f64>) -> Result<Self> {
        validate_edges(&bin_edges)?;
        if n_images == 0 {
            return Err(IguaneError::Validation(
                "uniform plan needs at least one image".into(),
            ));
        }
        let w = 1.0 / n_images as f64;
        Ok(Self::from_weights(bin_edges, vec![w; n_images], 0.0))
    }

    /// Number of images covered by the plan.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// True when the plan covers no images (never constructed in practice).
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Expected per-bin mass of the sampled age distribution, given the ages
    /// the plan was built from.
    pub fn expected_age_histogram(&self, source_ages: &[f64]) -> Result<Vec<f64>> {
        if source_ages.len() != self.weights.len() {
            return Err(IguaneError::Validation(format!(
                "plan covers {} images but {} ages were given",
                self.weights.len(),
                source_ages.len()
            )));
        }
        let mut hist = vec![0.0; self.bin_edges.len() - 1];
        for (&a, &w) in source_ages.iter().zip(&self.weights) {
            hist[bin_index(a, &self.bin_edges)] += w;
        }
        Ok(hist)
    }

    /// Draw one image index with the plan's probabilities.
    pub fn draw<R: rand::Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("plan is non-empty");
        let u: f64 = rng.gen::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.weights.len() - 1)
    }

    /// Write the plan as CSV (`image_id,weight`) for audit.
    pub fn write_csv<W: std::io::Write>(&self, ids: &[String], out: W) -> Result<()> {
        if ids.len() != self.weights.len() {
            return Err(IguaneError::Validation(format!(
                "plan covers {} images but {} ids were given",
                self.weights.len(),
                ids.len()
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "weight"])
            .map_err(|e| IguaneError::Data(format!("{e}")))?;
        for (id, weight) in ids.iter().zip(&self.weights) {
            w.write_record([id.as_str(), &format!("{weight:.17e}")])
                .map_err(|e| IguaneError::Data(format!("{e}")))?;
        }
        w.flush().map_err(|e| IguaneError::Data(format!("{e}")))?;
        Ok(())
    }
}

/// Build the age-balanced sampling plan for one source site.
///
/// The weight of image `i` in bin `b` is `ref_count(b) / (R * source_count(b))`
/// where `R` is the reference count summed over bins that contain at least
/// one source image. Computing with integer counts keeps the "reference equals
/// source" case exactly uniform.
pub fn compute_sampling_weights(
    source_ages: &[f64],
    reference_ages: &[f64],
    bin_edges: &[f64],
) -> Result<SamplingPlan> {
    validate_edges(bin_edges)?;
    if source_ages.is_empty() {
        return Err(IguaneError::Validation("source age list is empty".into()));
    }
    if reference_ages.is_empty() {
        return Err(IguaneError::Validation(
            "reference age list is empty".into(),
        ));
    }
    let src_counts = bin_counts(source_ages, bin_edges);
    let ref_counts = bin_counts(reference_ages, bin_edges);

    let covered_ref: usize = src_counts
        .iter()
        .zip(&ref_counts)
        .filter(|(s, _)| **s > 0)
        .map(|(_, r)| *r)
        .sum();
    if covered_ref == 0 {
        return Err(IguaneError::DegenerateInput(
            "no reference mass falls in any age bin covered by the source site".into(),
        ));
    }
    let total_ref = reference_ages.len();
    let redistributed = (total_ref - covered_ref) as f64 / total_ref as f64;

    let weights: Vec<f64> = source_ages
        .iter()
        .map(|&a| {
            let b = bin_index(a, bin_edges);
            ref_counts[b] as f64 / (covered_ref as f64 * src_counts[b] as f64)
        })
        .collect();
    Ok(SamplingPlan::from_weights(
        bin_edges.to_vec(),
        weights,
        redistributed,
    ))
}
