use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::dataset::SceneRecord;
use crate::model::{scene_predictions, DistancePredictor};
use crate::ppn::PpnError;
use crate::prediction::DistancePredictionSet;

use super::BaselineError;

pub const MODE_BIN_WIDTH: f64 = 0.1;
const FALLBACK: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Mean,
    Median,
    Mode,
}

impl FromStr for Statistic {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "median" => Ok(Statistic::Median),
            "mode" => Ok(Statistic::Mode),
            other => Err(BaselineError::Parse { line: 0, message: format!("unknown statistic `{other}`") }),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::Mode => "mode",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub mean: f64,
    pub median: f64,
    pub mode: f64,
    pub count: usize,
}

impl PairStats {
    /// Panics on an empty sample.
    pub fn from_samples(samples: &[f64], bin_width: f64) -> Self {
        assert!(!samples.is_empty(), "no samples");
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
        for &d in &sorted {
            *bins.entry(bin_index(d, bin_width)).or_default() += 1;
        }
        let mut best = (i64::MIN, 0);
        for (&b, &c) in &bins {
            if c > best.1 {
                best = (b, c);
            }
        }
        Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            mode: (best.0 as f64 + 0.5) * bin_width,
            count: n,
        }
    }

    pub fn get(&self, stat: Statistic) -> f64 {
        match stat {
            Statistic::Mean => self.mean,
            Statistic::Median => self.median,
            Statistic::Mode => self.mode,
        }
    }
}

/// Index `k` of the half-open bin `[k·w, (k+1)·w)` containing `d`, with a
/// small allowance so decimal edges such as 0.3 land in the upper bin.
fn bin_index(d: f64, w: f64) -> i64 {
    (d / w + 1e-9).floor() as i64
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Training-set distance statistics per unordered category pair, with a
/// global fallback for pairs never seen together.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStatsTable {
    pub bin_width: f64,
    pub pairs: BTreeMap<(String, String), PairStats>,
    pub fallback: PairStats,
}

impl PairStatsTable {
    /// Raw target-instance ↔ observed-object distances per unordered pair.
    pub fn samples(records: &[SceneRecord]) -> BTreeMap<(String, String), Vec<f64>> {
        let mut samples: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in records {
            for t in &r.targets {
                for g in &t.gt_positions {
                    for o in &r.objects {
                        samples.entry(pair_key(&t.category, &o.category)).or_default().push(g.distance(&o.position));
                    }
                }
            }
        }
        samples
    }

    pub fn fit(records: &[SceneRecord]) -> Result<Self, BaselineError> {
        let samples = Self::samples(records);
        if samples.is_empty() {
            return Err(BaselineError::EmptyDataset);
        }
        let all: Vec<f64> = samples.values().flatten().copied().collect();
        Ok(Self {
            bin_width: MODE_BIN_WIDTH,
            pairs: samples.iter().map(|(k, v)| (k.clone(), PairStats::from_samples(v, MODE_BIN_WIDTH))).collect(),
            fallback: PairStats::from_samples(&all, MODE_BIN_WIDTH),
        })
    }

    pub fn lookup(&self, target: &str, observed: &str) -> &PairStats {
        self.pairs.get(&pair_key(target, observed)).unwrap_or(&self.fallback)
    }

    pub fn predictor(&self, stat: Statistic) -> StatsPredictor<'_> {
        StatsPredictor { table: self, stat }
    }

    /// Tab-separated `a b mean median mode count`, fallback row as `* *`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# bin_width={}\n# a\tb\tmean\tmedian\tmode\tcount\n", self.bin_width);
        let mut row = |a: &str, b: &str, s: &PairStats| {
            let _ = writeln!(out, "{a}\t{b}\t{}\t{}\t{}\t{}", s.mean, s.median, s.mode, s.count);
        };
        row(FALLBACK, FALLBACK, &self.fallback);
        for ((a, b), s) in &self.pairs {
            row(a, b, s);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, BaselineError> {
        let mut bin_width = None;
        let mut fallback = None;
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| BaselineError::Parse { line, message };
            if let Some(w) = raw.strip_prefix("# bin_width=") {
                bin_width = Some(w.trim().parse::<f64>().map_err(|_| err(format!("invalid bin width `{w}`")))?);
                continue;
            }
            if raw.starts_with('#') || raw.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() != 6 {
                return Err(err(format!("expected 6 columns, found {}", cols.len())));
            }
            let num = |s: &str| -> Result<f64, BaselineError> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| err(format!("invalid statistic `{s}`")))
            };
            let stats = PairStats {
                mean: num(cols[2])?,
                median: num(cols[3])?,
                mode: num(cols[4])?,
                count: cols[5].parse().map_err(|_| err(format!("invalid count `{}`", cols[5])))?,
            };
            if cols[0] == FALLBACK && cols[1] == FALLBACK {
                fallback = Some(stats);
            } else {
                pairs.insert(pair_key(cols[0], cols[1]), stats);
            }
        }
        Ok(Self {
            bin_width: bin_width.ok_or(BaselineError::Parse { line: 1, message: "missing bin width".into() })?,
            pairs,
            fallback: fallback.ok_or(BaselineError::Parse { line: 1, message: "missing fallback row".into() })?,
        })
    }
}

/// Predicts the chosen statistic for every (target, observed) pair.
#[derive(Debug, Clone, Copy)]
pub struct StatsPredictor<'a> {
    pub table: &'a PairStatsTable,
    pub stat: Statistic,
}

impl DistancePredictor for StatsPredictor<'_> {
    fn predict(&self, scene: &SceneRecord, target: &str) -> Result<DistancePredictionSet, PpnError> {
        let d: Vec<f64> = scene.objects.iter().map(|o| self.table.lookup(target, &o.category).get(self.stat)).collect();
        Ok(scene_predictions(scene, target, &d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GeneratorSpec};

    #[test]
    fn hand_example() {
        let s = PairStats::from_samples(&[1.0, 1.0, 3.0], 0.1);
        assert_eq!(s.mean, 5.0 / 3.0);
        assert_eq!(s.median, 1.0);
        assert!((s.mode - 1.05).abs() < 1e-12);
        let even = PairStats::from_samples(&[0.31, 0.39, 0.52, 0.58], 0.1);
        assert_eq!(even.median, 0.455);
        // two bins of two: the lower one wins
        assert!((even.mode - 0.35).abs() < 1e-12);
        assert_eq!(bin_index(0.3, 0.1), 3);
        assert_eq!(bin_index(0.7, 0.1), 7);
    }

    #[test]
    fn matches_recomputation_and_falls_back() {
        let corpus = generate(&GeneratorSpec::default(), 0, 40).unwrap();
        let table = PairStatsTable::fit(&corpus.records).unwrap();
        let mut raw: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &corpus.records {
            for t in &r.targets {
                for o in &r.objects {
                    for g in &t.gt_positions {
                        let (a, b) = if t.category < o.category { (&t.category, &o.category) } else { (&o.category, &t.category) };
                        raw.entry((a.clone(), b.clone())).or_default().push(((g.x - o.position.x).powi(2) + (g.y - o.position.y).powi(2)).sqrt());
                    }
                }
            }
        }
        assert_eq!(raw.len(), table.pairs.len());
        for (k, v) in &raw {
            let s = &table.pairs[k];
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!((s.mean - mean).abs() < 1e-12);
            assert_eq!(s.count, v.len());
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
            assert!((s.median - median).abs() < 1e-12);
            let in_mode = |c: f64| v.iter().filter(|&&d| d >= c - 0.05 - 1e-12 && d < c + 0.05 - 1e-12).count();
            let best = (0..200).map(|k| in_mode(k as f64 * 0.1 + 0.05)).max().unwrap();
            assert_eq!(in_mode(s.mode), best);
        }
        assert_eq!(table.lookup("no-such", "thing"), &table.fallback);
        assert_eq!(table.fallback.count, raw.values().map(Vec::len).sum::<usize>());
        let p = table.predictor(Statistic::Median);
        let scene = &corpus.records[0];
        let target = &scene.targets[0].category;
        let a = p.predict(scene, target).unwrap();
        assert_eq!(a.anchors.len(), scene.objects.len());
        assert_eq!(a, p.predict(scene, target).unwrap());
        assert!(matches!(PairStatsTable::fit(&[]), Err(BaselineError::EmptyDataset)));
    }

    #[test]
    fn tsv_round_trip() {
        let corpus = generate(&GeneratorSpec::default(), 0, 10).unwrap();
        let table = PairStatsTable::fit(&corpus.records).unwrap();
        let text = table.to_tsv();
        let back = PairStatsTable::parse(&text).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.to_tsv(), text);
        assert!(PairStatsTable::parse("# bin_width=0.1\na\tb\t1\t1\t1\n").is_err());
    }
}
