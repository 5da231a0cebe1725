//! The built-in evaluation analyses.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::baselines::{rescale_for_predictor, RescaleMethod};
use crate::config::stream_rng;
use crate::error::{IguaneError, Result};
use crate::manifest::Sex;
use crate::stats::{
    clustered_signed_rank, cohens_d, distance_preservation, linear_regression, mean, pearson,
    r2_score, steiger_dependent_correlations, weighted_pearson,
};
use crate::trainer::{
    denormalize_age, net_input, normalize_age, pretrain_predictors, AugmentParams, TrainImage,
    TrainingConfig,
};

use super::{
    ssim_pair, ssim_shift_for, Analysis, AnalysisOutput, EvalImage, EvalInput, Measurement,
    MetricRow,
};

fn require_images<'a>(input: &'a EvalInput, analysis: &str) -> Result<&'a [EvalImage]> {
    if input.images.is_empty() {
        return Err(IguaneError::Validation(format!(
            "{analysis} requires images; none were provided"
        )));
    }
    Ok(&input.images)
}

fn require_measurements<'a>(input: &'a EvalInput, analysis: &str) -> Result<&'a [Measurement]> {
    if input.measurements.is_empty() {
        return Err(IguaneError::Validation(format!(
            "{analysis} requires measurements; none were provided"
        )));
    }
    Ok(&input.measurements)
}

/// SSIM between traveling-subject pairs, before vs after harmonization,
/// with a clustered Wilcoxon signed-rank test on the per-pair deltas
/// (subjects as clusters).
pub struct SsimTraveling;

impl Analysis for SsimTraveling {
    fn name(&self) -> &'static str {
        "ssim-traveling"
    }

    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput> {
        let images = require_images(input, self.name())?;
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            by_subject.entry(&img.subject_id).or_default().push(i);
        }
        let before_shift = ssim_shift_for(RescaleMethod::PreprocOrIguane);
        let after_shift = ssim_shift_for(input.rescale);

        let mut out = AnalysisOutput::default();
        let mut deltas: Vec<(String, f64)> = Vec::new();
        let mut befores = Vec::new();
        let mut afters = Vec::new();
        for (subject, mut idxs) in by_subject {
            idxs.sort_by(|&a, &b| images[a].site_id.cmp(&images[b].site_id));
            if idxs.len() < 2 {
                continue;
            }
            for a in 0..idxs.len() {
                for b in a + 1..idxs.len() {
                    let (ia, ib) = (idxs[a], idxs[b]);
                    let sb = ssim_pair(&images[ia].before, &images[ib].before, before_shift)?;
                    let sa = ssim_pair(&images[ia].after, &images[ib].after, after_shift)?;
                    let group =
                        format!("{subject}:{}|{}", images[ia].site_id, images[ib].site_id);
                    out.rows
                        .push(MetricRow::new(self.name(), &group, "ssim_before", sb, 1));
                    out.rows
                        .push(MetricRow::new(self.name(), &group, "ssim_after", sa, 1));
                    out.rows
                        .push(MetricRow::new(self.name(), &group, "ssim_delta", sa - sb, 1));
                    deltas.push((subject.to_string(), sa - sb));
                    befores.push(sb);
                    afters.push(sa);
                }
            }
        }
        if deltas.is_empty() {
            return Err(IguaneError::Validation(
                "ssim-traveling: no subject has images from two or more sites".into(),
            ));
        }
        let n = deltas.len();
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "mean_ssim_before",
            mean(&befores),
            n,
        ));
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "mean_ssim_after",
            mean(&afters),
            n,
        ));
        let delta_vals: Vec<f64> = deltas.iter().map(|(_, d)| *d).collect();
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "mean_ssim_delta",
            mean(&delta_vals),
            n,
        ));
        match clustered_signed_rank(&deltas) {
            Ok(w) => out.rows.push(
                MetricRow::new(self.name(), "all", "wilcoxon_z", w.z, w.n_used).with_p(w.p),
            ),
            Err(IguaneError::UndefinedResult(_)) | Err(IguaneError::DegenerateInput(_)) => {
                out.notices
                    .push("all SSIM deltas are zero; clustered Wilcoxon skipped".into());
            }
            Err(e) => return Err(e),
        }
        Ok(out)
    }
}

/// Within-site pairwise-distance structure before vs after harmonization.
pub struct DistancePreservationAnalysis;

impl Analysis for DistancePreservationAnalysis {
    fn name(&self) -> &'static str {
        "distance-preservation"
    }

    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput> {
        let images = require_images(input, self.name())?;
        let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            by_site.entry(&img.site_id).or_default().push(i);
        }
        let mut out = AnalysisOutput::default();
        let mut rs = Vec::new();
        for (site, idxs) in by_site {
            if idxs.len() < 3 {
                out.notices.push(format!(
                    "site {site}: {} image(s), need at least 3; skipped",
                    idxs.len()
                ));
                continue;
            }
            let dims = images[idxs[0]].before.dims();
            if idxs
                .iter()
                .any(|&i| images[i].before.dims() != dims || images[i].after.dims() != dims)
            {
                return Err(IguaneError::Validation(format!(
                    "distance-preservation: site {site} mixes volume dimensions"
                )));
            }
            let before: Vec<Vec<f64>> = idxs
                .iter()
                .map(|&i| images[i].before.data.iter().copied().collect())
                .collect();
            let after: Vec<Vec<f64>> = idxs
                .iter()
                .map(|&i| images[i].after.data.iter().copied().collect())
                .collect();
            let dp = distance_preservation(&before, &after)?;
            out.rows
                .push(MetricRow::new(self.name(), site, "distance_r", dp.r, dp.n_pairs));
            out.rows.push(MetricRow::new(
                self.name(),
                site,
                "distance_icc",
                dp.icc,
                dp.n_pairs,
            ));
            rs.push(dp.r);
        }
        if !rs.is_empty() {
            out.rows.push(MetricRow::new(
                self.name(),
                "all",
                "mean_distance_r",
                mean(&rs),
                rs.len(),
            ));
        }
        Ok(out)
    }
}

/// Per-participant mean of a method's measurements within one group.
fn per_subject_means(rows: &[&Measurement]) -> BTreeMap<String, (f64, f64)> {
    let mut acc: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
    for m in rows {
        let e = acc.entry(m.subject_id.clone()).or_insert((0.0, 0.0, 0.0));
        e.0 += m.value;
        e.1 += 1.0;
        e.2 = m.age.unwrap_or(f64::NAN);
    }
    acc.into_iter()
        .map(|(s, (sum, k, age))| (s, (sum / k, age)))
        .collect()
}

/// Age vs measurement correlation per (group, method): weighted Pearson
/// (each participant's image weights sum to 1), least-squares slope, and
/// Steiger tests between method pairs sharing the age variable.
pub struct AgeGmCorrelation;

impl Analysis for AgeGmCorrelation {
    fn name(&self) -> &'static str {
        "age-gm-correlation"
    }

    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput> {
        let measurements = require_measurements(input, self.name())?;
        for m in measurements {
            if m.age.is_none() {
                return Err(IguaneError::Validation(format!(
                    "age-gm-correlation: measurement for subject {} (group {}, method {}) \
                     is missing the age column",
                    m.subject_id, m.group, m.method
                )));
            }
        }
        let mut by_group: BTreeMap<&str, Vec<&Measurement>> = BTreeMap::new();
        for m in measurements {
            by_group.entry(&m.group).or_default().push(m);
        }

        let mut out = AnalysisOutput::default();
        for (group, rows) in by_group {
            let mut by_method: BTreeMap<&str, Vec<&Measurement>> = BTreeMap::new();
            for m in &rows {
                by_method.entry(&m.method).or_default().push(m);
            }

            for (method, mrows) in &by_method {
                // Image-level weighted correlation: each participant's
                // weights sum to 1.
                let mut images_per_subject: BTreeMap<&str, usize> = BTreeMap::new();
                for m in mrows {
                    *images_per_subject.entry(&m.subject_id).or_insert(0) += 1;
                }
                let n_subjects = images_per_subject.len();
                let ages: Vec<f64> = mrows.iter().map(|m| m.age.unwrap()).collect();
                let vals: Vec<f64> = mrows.iter().map(|m| m.value).collect();
                let weights: Vec<f64> = mrows
                    .iter()
                    .map(|m| 1.0 / images_per_subject[m.subject_id.as_str()] as f64)
                    .collect();
                let label = format!("{group}/{method}");
                match weighted_pearson(&ages, &vals, &weights) {
                    Ok(r) => out.rows.push(MetricRow::new(
                        self.name(),
                        &label,
                        "weighted_age_r",
                        r,
                        n_subjects,
                    )),
                    Err(IguaneError::UndefinedResult(_)) => {
                        out.notices
                            .push(format!("{label}: zero variance; correlation skipped"));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                match linear_regression(&ages, &vals) {
                    Ok(reg) => out.rows.push(MetricRow::new(
                        self.name(),
                        &label,
                        "slope",
                        reg.slope,
                        mrows.len(),
                    )),
                    Err(IguaneError::UndefinedResult(_)) => out
                        .notices
                        .push(format!("{label}: constant ages; slope skipped")),
                    Err(e) => return Err(e),
                }
            }

            // Steiger tests between method pairs, on per-participant means.
            let methods: Vec<&str> = by_method.keys().copied().collect();
            for a in 0..methods.len() {
                for b in a + 1..methods.len() {
                    let ma = per_subject_means(&by_method[methods[a]]);
                    let mb = per_subject_means(&by_method[methods[b]]);
                    let mut ages = Vec::new();
                    let mut va = Vec::new();
                    let mut vb = Vec::new();
                    for (subject, &(mean_a, age)) in &ma {
                        if let Some(&(mean_b, _)) = mb.get(subject) {
                            ages.push(age);
                            va.push(mean_a);
                            vb.push(mean_b);
                        }
                    }
                    let label = format!("{} vs {}", methods[a], methods[b]);
                    if ages.len() < 4 {
                        out.notices.push(format!(
                            "{group}: {label}: only {} shared participant(s); Steiger skipped",
                            ages.len()
                        ));
                        continue;
                    }
                    let rs = (
                        pearson(&ages, &va),
                        pearson(&ages, &vb),
                        pearson(&va, &vb),
                    );
                    let (r12, r13, r23) = match rs {
                        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
                        _ => {
                            out.notices.push(format!(
                                "{group}: {label}: zero variance; Steiger skipped"
                            ));
                            continue;
                        }
                    };
                    match steiger_dependent_correlations(r12, r13, r23, ages.len()) {
                        Ok(s) => out.rows.push(
                            MetricRow::new(
                                self.name(),
                                group,
                                &format!("steiger_z[{label}]"),
                                s.z,
                                ages.len(),
                            )
                            .with_p(s.p),
                        ),
                        Err(IguaneError::DegenerateInput(_)) => out.notices.push(format!(
                            "{group}: {label}: degenerate correlations; Steiger skipped"
                        )),
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Cohen's d between the CN and AD diagnosis groups per (group, method).
pub struct CohensDAnalysis;

impl Analysis for CohensDAnalysis {
    fn name(&self) -> &'static str {
        "cohens-d"
    }

    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput> {
        let measurements = require_measurements(input, self.name())?;
        let mut by_key: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for m in measurements {
            let entry = by_key
                .entry((m.group.clone(), m.method.clone()))
                .or_default();
            match m.diagnosis.as_deref() {
                Some("CN") => entry.0.push(m.value),
                Some("AD") => entry.1.push(m.value),
                _ => {}
            }
        }
        let mut out = AnalysisOutput::default();
        for ((group, method), (cn, ad)) in by_key {
            let label = format!("{group}/{method}");
            if cn.len() < 2 || ad.len() < 2 {
                out.notices.push(format!(
                    "{label}: CN n={} and AD n={}; need at least 2 each; skipped",
                    cn.len(),
                    ad.len()
                ));
                continue;
            }
            match cohens_d(&cn, &ad) {
                Ok(d) => out.rows.push(MetricRow::new(
                    self.name(),
                    &label,
                    "cohens_d",
                    d,
                    cn.len() + ad.len(),
                )),
                Err(IguaneError::UndefinedResult(_)) => out
                    .notices
                    .push(format!("{label}: zero pooled variance; skipped")),
                Err(e) => return Err(e),
            }
        }
        if out.rows.is_empty() && out.notices.is_empty() {
            out.notices
                .push("no measurements carry a CN or AD diagnosis".into());
        }
        Ok(out)
    }
}

/// Trains age/sex predictors on one split of the harmonized images and
/// scores them on the held-out split.
pub struct PredictorTrainTest;

impl Analysis for PredictorTrainTest {
    fn name(&self) -> &'static str {
        "predictor-train-test"
    }

    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput> {
        let images = require_images(input, self.name())?;
        if !(input.train_fraction > 0.0 && input.train_fraction < 1.0) {
            return Err(IguaneError::Validation(format!(
                "predictor-train-test: train_fraction must be in (0, 1), got {}",
                input.train_fraction
            )));
        }
        for img in images {
            if img.age.is_none() || img.sex.is_none() {
                return Err(IguaneError::Validation(format!(
                    "predictor-train-test: image {}:{} is missing the age or sex column",
                    img.subject_id, img.site_id
                )));
            }
        }
        if images.len() < 4 {
            return Err(IguaneError::Validation(format!(
                "predictor-train-test: need at least 4 images, got {}",
                images.len()
            )));
        }

        // Deterministic split: stable order, then a seeded shuffle.
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.sort_by(|&a, &b| {
            (&images[a].subject_id, &images[a].site_id)
                .cmp(&(&images[b].subject_id, &images[b].site_id))
        });
        let mut rng = stream_rng(input.seed, "eval/predictor-split");
        order.shuffle(&mut rng);
        let n_train = ((images.len() as f64 * input.train_fraction).floor() as usize)
            .clamp(2, images.len() - 1);

        let to_train_image = |i: usize| -> Result<TrainImage> {
            let img = &images[i];
            Ok(TrainImage {
                subject_id: img.subject_id.clone(),
                age: img.age.unwrap(),
                sex: img.sex.unwrap(),
                volume: rescale_for_predictor(&img.after, input.rescale)?,
            })
        };
        let train: Vec<TrainImage> = order[..n_train]
            .iter()
            .map(|&i| to_train_image(i))
            .collect::<Result<_>>()?;
        let test: Vec<TrainImage> = order[n_train..]
            .iter()
            .map(|&i| to_train_image(i))
            .collect::<Result<_>>()?;

        let config = TrainingConfig {
            predictor: input.predictor.clone(),
            predictor_epochs: input.predictor_epochs,
            predictor_lr: input.predictor_lr,
            seed: input.seed,
            augmentation: AugmentParams {
                max_translation: 0,
                max_rotation_deg: 0.0,
                rotation_prob: 0.0,
            },
            ..TrainingConfig::default()
        };
        config.validate()?;
        let (age_pred, sex_pred) = pretrain_predictors(&config, &train)?;

        let mut ages = Vec::new();
        let mut ages_hat = Vec::new();
        let mut correct = 0usize;
        for img in &test {
            let x = net_input(&img.volume);
            ages.push(img.age);
            ages_hat.push(denormalize_age(age_pred.predict(&x)?));
            let p = sex_pred.predict(&x)?;
            if (p >= 0.5) == (img.sex == Sex::M) {
                correct += 1;
            }
        }
        let n = test.len();
        let mae = ages
            .iter()
            .zip(&ages_hat)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;

        let mut out = AnalysisOutput::default();
        out.rows
            .push(MetricRow::new(self.name(), "all", "age_mae", mae, n));
        match r2_score(&ages, &ages_hat) {
            Ok(r2) => out
                .rows
                .push(MetricRow::new(self.name(), "all", "age_r2", r2, n)),
            Err(IguaneError::UndefinedResult(_)) | Err(IguaneError::DegenerateInput(_)) => {
                out.notices
                    .push("test ages have zero variance; R^2 skipped".into());
            }
            Err(e) => return Err(e),
        }
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "sex_accuracy",
            correct as f64 / n as f64,
            n,
        ));
        // Report the normalized-age spread of the training split so the
        // row is interpretable next to age_mae.
        let train_ages: Vec<f64> = train.iter().map(|t| normalize_age(t.age)).collect();
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "train_age_spread",
            train_ages
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                - train_ages.iter().cloned().fold(f64::INFINITY, f64::min),
            train.len(),
        ));
        Ok(out)
    }
}

/// 32-bin normalized brain-intensity histogram.
fn intensity_histogram(vals: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    const BINS: usize = 32;
    let mut h = vec![0.0; BINS];
    let width = (hi - lo) / BINS as f64;
    for &v in vals {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        h[b] += 1.0;
    }
    let total = vals.len() as f64;
    for x in &mut h {
        *x /= total;
    }
    h
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Leave-one-out nearest-centroid site classification on brain-intensity
/// histograms, before and after harmonization. Harmonization succeeds
/// when accuracy falls toward chance.
pub struct SiteClassifier;

impl SiteClassifier {
    fn accuracy(images: &[EvalImage], after: bool) -> Result<f64> {
        let vals: Vec<Vec<f64>> = images
            .iter()
            .map(|img| {
                if after {
                    img.after.brain_values()
                } else {
                    img.before.brain_values()
                }
            })
            .collect();
        if vals.iter().any(|v| v.is_empty()) {
            return Err(IguaneError::DegenerateInput(
                "site-classifier: a volume mask contains no voxels".into(),
            ));
        }
        let lo = vals
            .iter()
            .flat_map(|v| v.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = vals
            .iter()
            .flat_map(|v| v.iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(IguaneError::DegenerateInput(
                "site-classifier: all brain intensities identical".into(),
            ));
        }
        let hists: Vec<Vec<f64>> = vals
            .iter()
            .map(|v| intensity_histogram(v, lo, hi))
            .collect();

        // Per-site histogram sums for O(1) leave-one-out centroids.
        let mut site_sum: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for (img, h) in images.iter().zip(&hists) {
            let entry = site_sum
                .entry(&img.site_id)
                .or_insert_with(|| (vec![0.0; h.len()], 0));
            for (s, x) in entry.0.iter_mut().zip(h) {
                *s += x;
            }
            entry.1 += 1;
        }

        let mut correct = 0usize;
        for (i, img) in images.iter().enumerate() {
            let mut best: Option<(&str, f64)> = None;
            for (site, (sum, count)) in &site_sum {
                let centroid: Vec<f64> = if *site == img.site_id {
                    sum.iter()
                        .zip(&hists[i])
                        .map(|(s, h)| (s - h) / (*count as f64 - 1.0))
                        .collect()
                } else {
                    sum.iter().map(|s| s / *count as f64).collect()
                };
                let d = sq_dist(&hists[i], &centroid);
                // Strict improvement keeps ties on the first site in
                // BTreeMap (lexicographic) order, deterministically.
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((site, d));
                }
            }
            if best.unwrap().0 == img.site_id {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

impl Analysis for SiteClassifier {
    fn name(&self) -> &'static str {
        "site-classifier"
    }

    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput> {
        let images = require_images(input, self.name())?;
        let mut per_site: BTreeMap<&str, usize> = BTreeMap::new();
        for img in images {
            *per_site.entry(&img.site_id).or_insert(0) += 1;
        }
        if per_site.len() < 2 {
            return Err(IguaneError::Validation(
                "site-classifier: need images from at least 2 sites".into(),
            ));
        }
        if let Some((site, _)) = per_site.iter().find(|(_, &n)| n < 2) {
            return Err(IguaneError::Validation(format!(
                "site-classifier: site {site} has fewer than 2 images"
            )));
        }
        let acc_before = Self::accuracy(images, false)?;
        let acc_after = Self::accuracy(images, true)?;
        let n = images.len();
        let mut out = AnalysisOutput::default();
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "site_accuracy_before",
            acc_before,
            n,
        ));
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "site_accuracy_after",
            acc_after,
            n,
        ));
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "site_accuracy_drop",
            acc_before - acc_after,
            n,
        ));
        out.rows.push(MetricRow::new(
            self.name(),
            "all",
            "chance_accuracy",
            1.0 / per_site.len() as f64,
            n,
        ));
        Ok(out)
    }
}
