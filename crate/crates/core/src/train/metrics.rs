//! Presentation-attack error rates, DET sweeps and confusion matrices.
//!
//! Scores are attack probabilities and a sample is called an attack when its
//! score reaches the threshold. All rates are percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target value of the attack class.
pub const ATTACK: usize = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Rounds to `decimals` places with exact halves going down. Values within
/// `1e-9` of a half count as halves, so decimal inputs like 7.425 that are not
/// representable exactly still round as written.
pub fn round_half_down(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let y = x * scale;
    let floor = y.floor();
    let r = if y - floor > 0.5 + 1e-9 { floor + 1.0 } else { floor };
    r / scale
}

/// Two-decimal reporting rounding.
pub fn round2(x: f64) -> f64 {
    round_half_down(x, 2)
}

/// ACER as reported: the mean of the two rounded error rates, rounded again.
pub fn reported_acer(apcer: f64, npcer: f64) -> f64 {
    round2((round2(apcer) + round2(npcer)) / 2.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub attacks: usize,
    pub attacks_missed: usize,
    pub bonafide: usize,
    pub bonafide_rejected: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.attacks + self.bonafide
    }

    pub fn correct(&self) -> usize {
        self.total() - self.attacks_missed - self.bonafide_rejected
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            attacks: self.attacks + o.attacks,
            attacks_missed: self.attacks_missed + o.attacks_missed,
            bonafide: self.bonafide + o.bonafide,
            bonafide_rejected: self.bonafide_rejected + o.bonafide_rejected,
        }
    }

    pub fn rates(&self) -> ErrorRates {
        let pct = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
        let apcer = pct(self.attacks_missed, self.attacks);
        let npcer = pct(self.bonafide_rejected, self.bonafide);
        ErrorRates {
            aa: pct(self.correct(), self.total()).unwrap_or(0.0),
            apcer,
            npcer,
            acer: apcer.zip(npcer).map(|(a, n)| (a + n) / 2.0),
        }
    }
}

/// Unrounded rates; a rate is `None` when its class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub aa: f64,
    pub apcer: Option<f64>,
    pub npcer: Option<f64>,
    pub acer: Option<f64>,
}

/// Tallies decisions at `threshold`; labels are 0 bonafide, 1 attack.
pub fn count(scores: &[f64], labels: &[usize], threshold: f64) -> Result<Counts> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > ATTACK) {
        return Err(Error::InvalidArgument(format!("binary label {l} is not 0 or 1")));
    }
    const CHUNK: usize = 1024;
    let parts = crate::par::map_range(scores.len().div_ceil(CHUNK), |c| {
        let range = c * CHUNK..((c + 1) * CHUNK).min(scores.len());
        let mut k = Counts::default();
        for (&s, &l) in scores[range.clone()].iter().zip(&labels[range]) {
            let says_attack = s >= threshold;
            if l == ATTACK {
                k.attacks += 1;
                k.attacks_missed += usize::from(!says_attack);
            } else {
                k.bonafide += 1;
                k.bonafide_rejected += usize::from(says_attack);
            }
        }
        k
    });
    Ok(parts.into_iter().fold(Counts::default(), Counts::merge))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub npcer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Det {
    /// One point per distinct score in increasing order, then one above the
    /// largest score where everything is called bonafide.
    pub points: Vec<DetPoint>,
    pub eer: f64,
}

/// Sweeps the threshold over the distinct scores. The equal error rate is
/// read where `APCER − NPCER` changes sign, interpolating linearly between
/// the neighbouring points.
pub fn det_curve(scores: &[f64], labels: &[usize]) -> Result<Det> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let attacks = labels.iter().filter(|&&l| l == ATTACK).count();
    let bonafide = labels.len() - attacks;
    if attacks == 0 || bonafide == 0 {
        return Err(Error::InvalidArgument("DET curve needs both classes".into()));
    }
    let (na, nb) = (attacks as f64, bonafide as f64);
    // Walking up the sorted scores: at threshold t, attacks below t are
    // missed and bonafide at or above t are rejected.
    let (mut missed, mut rejected) = (0usize, bonafide);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        points.push(DetPoint {
            threshold: t,
            apcer: 100.0 * missed as f64 / na,
            npcer: 100.0 * rejected as f64 / nb,
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == ATTACK {
                missed += 1;
            } else {
                rejected -= 1;
            }
            i += 1;
        }
    }
    let top = scores[order[order.len() - 1]];
    points.push(DetPoint {
        threshold: if top < 1.0 { 1.0 } else { top + 1.0 },
        apcer: 100.0,
        npcer: 0.0,
    });
    let eer = crossing(&points);
    Ok(Det { points, eer })
}

fn crossing(points: &[DetPoint]) -> f64 {
    for w in points.windows(2) {
        let (d0, d1) = (w[0].apcer - w[0].npcer, w[1].apcer - w[1].npcer);
        if d0 == 0.0 {
            return w[0].apcer;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let t = d0 / (d0 - d1);
            return w[0].apcer + t * (w[1].apcer - w[0].apcer);
        }
    }
    let last = points[points.len() - 1];
    last.apcer
}

/// Rows are true classes, columns predictions.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::InvalidArgument(format!("class index {} out of range for {k} classes", p.max(l))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Evaluation summary. Table metrics are rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub threshold: f64,
    pub aa: f64,
    pub apcer: Option<f64>,
    pub npcer: Option<f64>,
    pub acer: Option<f64>,
    pub eer: Option<f64>,
    pub det_points: Vec<DetPoint>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Binary report from attack scores. `aa` is overridden by `accuracy`
    /// when the task has more than two classes.
    pub fn from_scores(
        scores: &[f64],
        labels: &[usize],
        threshold: f64,
        confusion: Vec<Vec<usize>>,
        accuracy: Option<f64>,
    ) -> Result<Self> {
        let rates = count(scores, labels, threshold)?.rates();
        let det = det_curve(scores, labels).ok();
        let (apcer, npcer) = (rates.apcer.map(round2), rates.npcer.map(round2));
        Ok(MetricsReport {
            samples: scores.len(),
            threshold,
            aa: round2(accuracy.unwrap_or(rates.aa)),
            apcer,
            npcer,
            acer: apcer.zip(npcer).map(|(a, n)| reported_acer(a, n)),
            eer: det.as_ref().map(|d| round2(d.eer)),
            det_points: det.map(|d| d.points).unwrap_or_default(),
            confusion,
        })
    }
}
