//! Frame- and video-level detection metrics over score tables.

pub mod export;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub video_id: String,
    pub label: u8,
    /// Probability of the fake class.
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(rows: Vec<ScoreRow>) -> Result<Self> {
        let t = ScoreTable { rows };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.label > 1 {
                return Err(DfaError::Data(format!("{}: label {} not in {{0,1}}", r.sample_id, r.label)));
            }
            if !r.score.is_finite() || !(0.0..=1.0).contains(&r.score) {
                return Err(DfaError::Data(format!("{}: score {} not in [0,1]", r.sample_id, r.score)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `(reals, fakes)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let fakes = self.rows.iter().filter(|r| r.label == 1).count();
        (self.rows.len() - fakes, fakes)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| DfaError::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
        Self::new(rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| DfaError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| DfaError::io(path, e))?;
        Ok(())
    }

    fn split_scores(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut reals = Vec::new();
        let mut fakes = Vec::new();
        for r in &self.rows {
            if r.label == 1 {
                fakes.push(r.score);
            } else {
                reals.push(r.score);
            }
        }
        if reals.is_empty() || fakes.is_empty() {
            return Err(DfaError::UndefinedMetric(format!(
                "needs both classes, got {} real and {} fake rows",
                reals.len(),
                fakes.len()
            )));
        }
        Ok((reals, fakes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }

    /// `None` when nothing was predicted fake.
    pub fn precision(&self) -> Option<f64> {
        (self.tp + self.fp > 0).then(|| self.tp as f64 / (self.tp + self.fp) as f64)
    }
}

/// Counts with "fake" predicted iff `score >= threshold`.
pub fn confusion(table: &ScoreTable, threshold: f64) -> Result<Confusion> {
    if table.is_empty() {
        return Err(DfaError::Data("empty score table".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DfaError::InvalidArgument(format!("threshold {threshold} not in [0,1]")));
    }
    let mut c = Confusion {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for r in &table.rows {
        match (r.label == 1, r.score >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(accuracy, precision)` at `threshold`.
pub fn confusion_metrics(table: &ScoreTable, threshold: f64) -> Result<(f64, Option<f64>)> {
    let c = confusion(table, threshold)?;
    Ok((c.accuracy(), c.precision()))
}

/// Probability that a random fake outscores a random real, ties 1/2.
///
/// Counted in integer half-units over tie groups, so the result is the
/// same rational number the pairwise definition yields, rounded once.
pub fn auc(table: &ScoreTable) -> Result<f64> {
    let (reals, fakes) = table.split_scores()?;
    let mut all: Vec<(f64, bool)> = reals
        .iter()
        .map(|&s| (s, false))
        .chain(fakes.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut half_units: u128 = 0;
    let mut reals_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut f, mut r) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                f += 1;
            } else {
                r += 1;
            }
            j += 1;
        }
        half_units += 2 * f * reals_below + f * r;
        reals_below += r;
        i = j;
    }
    let denom = 2 * reals.len() as u128 * fakes.len() as u128;
    Ok(half_units as f64 / denom as f64)
}

/// Equal error rate and its threshold.
///
/// Every distinct score is tried as a threshold; the one minimizing
/// `|FPR - FNR|` wins, the lowest on ties, and `(FPR + FNR) / 2` there is
/// reported.
pub fn eer(table: &ScoreTable) -> Result<(f64, f64)> {
    let (mut reals, mut fakes) = table.split_scores()?;
    reals.sort_by(f64::total_cmp);
    fakes.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = reals.iter().chain(&fakes).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nr, nf) = (reals.len() as f64, fakes.len() as f64);
    let mut best: Option<(f64, f64, f64)> = None;
    // reals with score < t and fakes with score < t, advanced monotonically
    let (mut ri, mut fi) = (0, 0);
    for &t in &thresholds {
        while ri < reals.len() && reals[ri] < t {
            ri += 1;
        }
        while fi < fakes.len() && fakes[fi] < t {
            fi += 1;
        }
        let fpr = (reals.len() - ri) as f64 / nr;
        let fnr = fi as f64 / nf;
        let gap = (fpr - fnr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (fpr + fnr) / 2.0, t));
        }
    }
    let (_, rate, t) = best.expect("at least two scores");
    Ok((rate, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    /// Fraction of frames scored at or above the decision threshold.
    Vote,
}

impl std::str::FromStr for Aggregation {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "vote" => Ok(Aggregation::Vote),
            _ => Err(DfaError::InvalidArgument(format!("unknown aggregation `{s}`"))),
        }
    }
}

/// One row per video, ordered by video id; `sample_id` is the video id.
pub fn aggregate_video(frames: &ScoreTable, agg: Aggregation, threshold: f64) -> Result<ScoreTable> {
    let mut groups: BTreeMap<&str, (u8, Vec<f64>)> = BTreeMap::new();
    for r in &frames.rows {
        if r.video_id.is_empty() {
            return Err(DfaError::Data(format!("{}: missing video_id", r.sample_id)));
        }
        let g = groups.entry(&r.video_id).or_insert((r.label, Vec::new()));
        if g.0 != r.label {
            return Err(DfaError::Data(format!("video {} has inconsistent labels", r.video_id)));
        }
        g.1.push(r.score);
    }
    let rows = groups
        .into_iter()
        .map(|(vid, (label, scores))| {
            let n = scores.len() as f64;
            let score = match agg {
                Aggregation::Mean => scores.iter().sum::<f64>() / n,
                Aggregation::Max => scores.iter().copied().fold(f64::MIN, f64::max),
                Aggregation::Vote => scores.iter().filter(|&&s| s >= threshold).count() as f64 / n,
            };
            ScoreRow {
                sample_id: vid.to_string(),
                video_id: vid.to_string(),
                label,
                score,
            }
        })
        .collect();
    Ok(ScoreTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Frame,
    Video,
}

impl std::str::FromStr for Level {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Level::Frame),
            "video" => Ok(Level::Video),
            _ => Err(DfaError::InvalidArgument(format!("unknown level `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub num_samples: usize,
    pub num_real: usize,
    pub num_fake: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub threshold_used: f64,
}

/// All four metrics on a frame table, aggregated to videos first when
/// `level` is [`Level::Video`].
pub fn evaluate(frames: &ScoreTable, level: Level, agg: Aggregation, threshold: f64) -> Result<MetricsReport> {
    let video;
    let table = match level {
        Level::Frame => frames,
        Level::Video => {
            video = aggregate_video(frames, agg, threshold)?;
            &video
        }
    };
    let (accuracy, precision) = confusion_metrics(table, threshold)?;
    let (num_real, num_fake) = table.class_counts();
    let (eer, eer_threshold) = eer(table)?;
    Ok(MetricsReport {
        level,
        num_samples: table.len(),
        num_real,
        num_fake,
        accuracy,
        precision,
        auc: auc(table)?,
        eer,
        eer_threshold,
        threshold_used: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(fakes: &[f64], reals: &[f64]) -> ScoreTable {
        let rows = fakes
            .iter()
            .map(|&s| (1, s))
            .chain(reals.iter().map(|&s| (0, s)))
            .enumerate()
            .map(|(i, (label, score))| ScoreRow {
                sample_id: format!("s{i}"),
                video_id: format!("v{i}"),
                label,
                score,
            })
            .collect();
        ScoreTable::new(rows).unwrap()
    }

    #[test]
    fn confusion_formula() {
        // TP=3, TN=4, FP=1, FN=2
        let t = table(&[0.9, 0.8, 0.7, 0.1, 0.2], &[0.0, 0.1, 0.2, 0.3, 0.6]);
        let (acc, prec) = confusion_metrics(&t, 0.5).unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
        assert!((prec.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn all_correct_and_no_positive_predictions() {
        let t = table(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(confusion_metrics(&t, 0.5).unwrap().0, 1.0);
        let (acc, prec) = confusion_metrics(&t, 0.95).unwrap();
        assert_eq!(prec, None);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(confusion_metrics(&ScoreTable::default(), 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&table(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&table(&[0.9, 0.1], &[0.2, 0.3])).unwrap(), 0.5);
        assert_eq!(auc(&table(&[0.5], &[0.5])).unwrap(), 0.5);
        assert!(matches!(auc(&table(&[0.5], &[])), Err(DfaError::UndefinedMetric(_))));
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&table(&[0.9, 0.8], &[0.1, 0.2])).unwrap().0, 0.0);
        // hand sweep: at t = 0.7, FPR = FNR = 1/3
        let (rate, t) = eer(&table(&[0.9, 0.8, 0.2], &[0.1, 0.3, 0.7])).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(t, 0.7);
        // half of each class flipped
        let (rate, _) = eer(&table(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(rate, 0.5);
        assert!(eer(&table(&[], &[0.1])).is_err());
    }

    #[test]
    fn video_aggregation() {
        let mut rows = Vec::new();
        for (i, s) in [0.2, 0.4, 0.9].iter().enumerate() {
            rows.push(ScoreRow {
                sample_id: format!("a{i}"),
                video_id: "a".into(),
                label: 1,
                score: *s,
            });
        }
        rows.push(ScoreRow {
            sample_id: "b0".into(),
            video_id: "b".into(),
            label: 0,
            score: 0.3,
        });
        let t = ScoreTable::new(rows).unwrap();
        let v = aggregate_video(&t, Aggregation::Mean, 0.5).unwrap();
        assert_eq!(v.len(), 2);
        assert!((v.rows[0].score - 0.5).abs() < 1e-12);
        assert_eq!(v.rows[1].score, 0.3);
        assert_eq!(aggregate_video(&t, Aggregation::Max, 0.5).unwrap().rows[0].score, 0.9);
        let vote = aggregate_video(&t, Aggregation::Vote, 0.5).unwrap();
        assert!((vote.rows[0].score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_video_labels() {
        let rows = vec![
            ScoreRow {
                sample_id: "x0".into(),
                video_id: "x".into(),
                label: 0,
                score: 0.1,
            },
            ScoreRow {
                sample_id: "x1".into(),
                video_id: "x".into(),
                label: 1,
                score: 0.1,
            },
        ];
        let t = ScoreTable::new(rows).unwrap();
        assert!(matches!(aggregate_video(&t, Aggregation::Mean, 0.5), Err(DfaError::Data(_))));
    }

    #[test]
    fn out_of_range_scores_are_rejected() {
        let r = ScoreTable::new(vec![ScoreRow {
            sample_id: "s".into(),
            video_id: "v".into(),
            label: 0,
            score: 1.5,
        }]);
        assert!(r.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        let t = table(&[0.9, 0.25], &[0.125]);
        t.write_csv(&p).unwrap();
        assert_eq!(ScoreTable::read_csv(&p).unwrap(), t);
    }
}
