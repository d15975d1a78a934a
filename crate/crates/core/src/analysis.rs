//! Per-class and spectral diagnostics: confusion matrices, class-wise
//! accuracy, spectral envelopes, spectral total variation and the
//! classification-imbalance report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|c| self.row(c).iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Overall accuracy in percent; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| 100.0 * self.trace() as f64 / total as f64)
    }

    /// Most frequent wrong prediction for `truth`, with its count. Ties go
    /// to the lower class index; `None` if the class has no errors.
    pub fn top_confusion(&self, truth: usize) -> Option<(usize, u64)> {
        self.row(truth)
            .iter()
            .enumerate()
            .filter(|&(p, &n)| p != truth && n > 0)
            .fold(None, |best: Option<(usize, u64)>, (p, &n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((p, n)),
            })
    }

    /// CSV with a header row of predicted-class names.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for c in 0..self.classes {
            out.push(',');
            out.push_str(&csv_field(names.get(c).map(String::as_str).unwrap_or("")));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&csv_field(names.get(t).map(String::as_str).unwrap_or("")));
            for n in self.row(t) {
                out.push_str(&format!(",{n}"));
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Tallies zero-based predictions against zero-based labels.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("confusion_matrix", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        if let Some(&bad) = [t, p].iter().find(|&&id| id >= classes) {
            return Err(Error::ClassRange { id: bad + 1, classes });
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

/// Per-class accuracy in percent; `None` for classes without samples.
pub fn classwise_accuracy(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    cm.row_sums()
        .iter()
        .enumerate()
        .map(|(c, &n)| (n > 0).then(|| 100.0 * cm.get(c, c) as f64 / n as f64))
        .collect()
}

/// Per-band minimum, mean and maximum over a set of spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEnvelope {
    pub lower: Vec<f64>,
    pub mean: Vec<f64>,
    pub upper: Vec<f64>,
    pub samples: usize,
}

impl SpectralEnvelope {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// `band,wavelength,lower,mean,upper` rows.
    pub fn to_csv(&self, wavelengths: Option<&[f64]>) -> String {
        let mut out = String::from("band,wavelength,lower,mean,upper\n");
        for b in 0..self.bands() {
            let wl = wavelengths.and_then(|w| w.get(b)).map(|w| w.to_string()).unwrap_or_default();
            out.push_str(&format!("{b},{wl},{:.6},{:.6},{:.6}\n", self.lower[b], self.mean[b], self.upper[b]));
        }
        out
    }
}

pub fn spectral_envelope<S: AsRef<[f32]>>(spectra: &[S]) -> Result<SpectralEnvelope> {
    let first = spectra.first().ok_or(Error::Empty("spectrum set"))?;
    let bands = first.as_ref().len();
    let mut lower = vec![f64::INFINITY; bands];
    let mut upper = vec![f64::NEG_INFINITY; bands];
    let mut sum = vec![0.0f64; bands];
    for (i, s) in spectra.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != bands {
            return Err(Error::shape("spectral_envelope", format!("spectrum {i} has {} bands, expected {bands}", s.len())));
        }
        for (b, &v) in s.iter().enumerate() {
            let v = v as f64;
            lower[b] = lower[b].min(v);
            upper[b] = upper[b].max(v);
            sum[b] += v;
        }
    }
    let n = spectra.len() as f64;
    // Clamp guards the mean against rounding past an extreme when all
    // samples share one value.
    let mean = sum.iter().enumerate().map(|(b, s)| (s / n).clamp(lower[b], upper[b])).collect();
    Ok(SpectralEnvelope { lower, mean, upper, samples: spectra.len() })
}

/// Sum of absolute first differences along the band axis.
pub fn spectral_tv(spectrum: &[f64]) -> Result<f64> {
    if spectrum.len() < 2 {
        return Err(Error::InvalidArgument(format!("spectral_tv needs at least 2 bands, got {}", spectrum.len())));
    }
    Ok(spectrum.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceThresholds {
    /// Points below the mean adversarial accuracy of the other classes.
    pub gap: f64,
    /// Absolute adversarial accuracy floor in points.
    pub floor: f64,
}

impl Default for ImbalanceThresholds {
    fn default() -> Self {
        Self { gap: 10.0, floor: 70.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassImbalance {
    pub class: usize,
    pub name: String,
    pub benign: Option<f64>,
    pub adversarial: Option<f64>,
    /// Mean adversarial accuracy of the other classes.
    pub reference: Option<f64>,
    pub below_gap: bool,
    pub below_floor: bool,
    /// Most frequent adversarial misprediction `(class, count)`.
    pub top_confusion: Option<(usize, u64)>,
}

impl ClassImbalance {
    pub fn flagged(&self) -> bool {
        self.below_gap || self.below_floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub thresholds: ImbalanceThresholds,
    pub classes: Vec<ClassImbalance>,
}

impl ImbalanceReport {
    pub fn flagged(&self) -> Vec<&ClassImbalance> {
        self.classes.iter().filter(|c| c.flagged()).collect()
    }

    pub fn flagged_names(&self) -> Vec<&str> {
        self.flagged().iter().map(|c| c.name.as_str()).collect()
    }

    /// `Class ID,Class Name,Benign,Adversarial,Flagged,Top confusion,Count`,
    /// class ids one-based.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "NA".into());
        let mut out = String::from("Class ID,Class Name,Benign,Adversarial,Flagged,Top confusion,Count\n");
        for c in &self.classes {
            let (target, count) = match c.top_confusion {
                Some((t, n)) => (
                    csv_field(self.classes.get(t).map(|x| x.name.as_str()).unwrap_or("")),
                    n.to_string(),
                ),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.class + 1,
                csv_field(&c.name),
                fmt(c.benign),
                fmt(c.adversarial),
                c.flagged(),
                target,
                count
            ));
        }
        out
    }
}

/// Flags classes whose adversarial accuracy is more than `gap` points
/// below the mean of the other classes, or below `floor`, and lists each
/// class's top adversarial confusion.
pub fn imbalance_report(
    cm_benign: &ConfusionMatrix,
    cm_adv: &ConfusionMatrix,
    names: &[String],
    thresholds: ImbalanceThresholds,
) -> Result<ImbalanceReport> {
    if cm_benign.classes() != cm_adv.classes() {
        return Err(Error::shape("imbalance_report", format!("{} vs {} classes", cm_benign.classes(), cm_adv.classes())));
    }
    let mut report = imbalance_from_accuracies(&classwise_accuracy(cm_benign), &classwise_accuracy(cm_adv), names, thresholds)?;
    for c in &mut report.classes {
        c.top_confusion = cm_adv.top_confusion(c.class);
    }
    Ok(report)
}

/// [`imbalance_report`] from per-class accuracies alone (no confusion
/// targets).
pub fn imbalance_from_accuracies(
    benign: &[Option<f64>],
    adversarial: &[Option<f64>],
    names: &[String],
    thresholds: ImbalanceThresholds,
) -> Result<ImbalanceReport> {
    if benign.len() != adversarial.len() {
        return Err(Error::shape("imbalance_report", format!("{} benign vs {} adversarial accuracies", benign.len(), adversarial.len())));
    }
    let defined: Vec<(usize, f64)> = adversarial.iter().enumerate().filter_map(|(i, a)| a.map(|a| (i, a))).collect();
    let classes = (0..adversarial.len())
        .map(|c| {
            let others: Vec<f64> = defined.iter().filter(|&&(i, _)| i != c).map(|&(_, a)| a).collect();
            let reference = (!others.is_empty()).then(|| others.iter().sum::<f64>() / others.len() as f64);
            let adv = adversarial[c];
            let below_gap = matches!((adv, reference), (Some(a), Some(r)) if a < r - thresholds.gap);
            let below_floor = matches!(adv, Some(a) if a < thresholds.floor);
            ClassImbalance {
                class: c,
                name: names.get(c).cloned().unwrap_or_else(|| format!("class {}", c + 1)),
                benign: benign[c],
                adversarial: adv,
                reference,
                below_gap,
                below_floor,
                top_confusion: None,
            }
        })
        .collect();
    Ok(ImbalanceReport { thresholds, classes })
}
