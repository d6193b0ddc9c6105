//! Retrieval metrics and difficulty-binned reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kg::{Query, QuerySet};
use crate::sampler::RetrievalResult;

/// 1 if any of the first `k` ranked items is a target.
pub fn hit_at_k<S: AsRef<str>>(ranked: &[S], targets: &BTreeSet<String>, k: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets("hit_at_k".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    Ok(f64::from(u8::from(ranked.iter().take(k).any(|r| targets.contains(r.as_ref())))))
}

/// Reciprocal rank of the first target; 0 when none is ranked.
pub fn mrr<S: AsRef<str>>(ranked: &[S], targets: &BTreeSet<String>) -> f64 {
    ranked
        .iter()
        .position(|r| targets.contains(r.as_ref()))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn normalizer(k: usize, targets: &BTreeSet<String>) -> Option<f64> {
    let d = k.min(targets.len());
    (d > 0).then_some(d as f64)
}

/// Correct retrievals among the first `k`, duplicates included, over
/// `min(k, |targets|)`, capped at 1.
pub fn recall_at_k<S: AsRef<str>>(retrieved: &[S], targets: &BTreeSet<String>, k: usize) -> f64 {
    let Some(d) = normalizer(k, targets) else {
        return 0.0;
    };
    let hits = retrieved.iter().take(k).filter(|r| targets.contains(r.as_ref())).count();
    (hits as f64 / d).min(1.0)
}

/// Distinct targets among the first `k` retrievals over `min(k, |targets|)`.
pub fn dedup_recall_at_k<S: AsRef<str>>(retrieved: &[S], targets: &BTreeSet<String>, k: usize) -> f64 {
    let Some(d) = normalizer(k, targets) else {
        return 0.0;
    };
    let unique: HashSet<&str> = retrieved
        .iter()
        .take(k)
        .map(|r| r.as_ref())
        .filter(|r| targets.contains(*r))
        .collect();
    unique.len() as f64 / d
}

/// Difficulty bins given by their inclusive lower bounds on `|targets|`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Bins {
    pub lower: Vec<usize>,
}

impl Default for Bins {
    fn default() -> Self {
        Bins { lower: vec![1, 6, 11, 16] }
    }
}

impl Bins {
    pub fn new(lower: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower[0] != 1 || lower.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bin lower bounds must start at 1 and increase".into()));
        }
        Ok(Bins { lower })
    }

    /// 1-based bin of a query with `n` targets.
    pub fn bin(&self, n: usize) -> usize {
        self.lower.iter().filter(|&&l| l <= n).count().max(1)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub qid: String,
    pub num_targets: usize,
    pub bin: usize,
    pub hit1: f64,
    pub hit5: f64,
    pub mrr: f64,
    pub r20: f64,
    pub dr20: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub hit1: f64,
    pub hit5: f64,
    pub mrr: f64,
    pub r20: f64,
    pub dr20: f64,
}

impl Aggregate {
    fn of<'a>(rows: impl Iterator<Item = &'a QueryMetrics>) -> Self {
        let mut a = Aggregate::default();
        for r in rows {
            a.count += 1;
            a.hit1 += r.hit1;
            a.hit5 += r.hit5;
            a.mrr += r.mrr;
            a.r20 += r.r20;
            a.dr20 += r.dr20;
        }
        if a.count > 0 {
            let n = a.count as f64;
            a.hit1 /= n;
            a.hit5 /= n;
            a.mrr /= n;
            a.r20 /= n;
            a.dr20 /= n;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub bins: Bins,
    /// Number of raw samples considered by the recall metrics.
    pub recall_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bins: Bins::default(),
            recall_k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<QueryMetrics>,
    pub overall: Aggregate,
    /// Keyed by 1-based bin; empty bins appear with `count = 0`.
    pub per_bin: BTreeMap<usize, Aggregate>,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub const HEADER: &'static str = "qid,num_targets,bin,hit@1,hit@5,mrr,r@20,d-r@20";

    /// Per-query rows in query order, then `mean` and one `mean_bin<i>` row per bin.
    /// For the summary rows the second column holds the number of queries averaged.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.qid, r.num_targets, r.bin, r.hit1, r.hit5, r.mrr, r.r20, r.dr20
            );
        }
        let mut agg = |name: String, bin: String, a: &Aggregate| {
            let _ = writeln!(
                out,
                "{name},{},{bin},{},{},{},{},{}",
                a.count, a.hit1, a.hit5, a.mrr, a.r20, a.dr20
            );
        };
        agg("mean".into(), "all".into(), &self.overall);
        for (b, a) in &self.per_bin {
            agg(format!("mean_bin{b}"), b.to_string(), a);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, csv: impl AsRef<Path>, json: Option<&Path>) -> Result<()> {
        let csv = csv.as_ref();
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        if let Some(j) = json {
            fs::write(j, self.to_json()? + "\n").map_err(|e| Error::io(j, e))?;
        }
        Ok(())
    }
}

/// Scores every query. Hit and MRR read the ranked list; recall metrics read
/// the raw samples in draw order.
pub fn evaluate(results: &[RetrievalResult], queries: &QuerySet, cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with_jobs(results, queries, cfg, 1)
}

fn query_row(q: &Query, r: &RetrievalResult, cfg: &EvalConfig) -> Result<QueryMetrics> {
    let ranked = r.ranked_ids();
    let samples = r.sample_terminals();
    Ok(QueryMetrics {
        qid: q.qid.clone(),
        num_targets: q.targets.len(),
        bin: cfg.bins.bin(q.targets.len()),
        hit1: hit_at_k(&ranked, &q.targets, 1)?,
        hit5: hit_at_k(&ranked, &q.targets, 5)?,
        mrr: mrr(&ranked, &q.targets),
        r20: recall_at_k(&samples, &q.targets, cfg.recall_k),
        dr20: dedup_recall_at_k(&samples, &q.targets, cfg.recall_k),
    })
}

/// [`evaluate`] with per-query scoring spread over `jobs` threads; the report
/// does not depend on `jobs`.
pub fn evaluate_with_jobs(
    results: &[RetrievalResult],
    queries: &QuerySet,
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<MetricsReport> {
    let mut by_qid: BTreeMap<&str, &RetrievalResult> = BTreeMap::new();
    for r in results {
        if queries.get(&r.qid).is_none() {
            return Err(Error::QidMismatch(format!("result for unknown query {}", r.qid)));
        }
        if by_qid.insert(&r.qid, r).is_some() {
            return Err(Error::QidMismatch(format!("duplicate result for query {}", r.qid)));
        }
    }
    let pairs = queries
        .iter()
        .map(|q| {
            by_qid
                .get(q.qid.as_str())
                .map(|r| (q, *r))
                .ok_or_else(|| Error::QidMismatch(format!("no result for query {}", q.qid)))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs = jobs.clamp(1, pairs.len().max(1));
    let rows: Vec<QueryMetrics> = if jobs == 1 {
        pairs.iter().map(|(q, r)| query_row(q, r, cfg)).collect::<Result<_>>()?
    } else {
        let chunk = pairs.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<QueryMetrics>>> = std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|(q, r)| query_row(q, r, cfg)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("metrics worker panicked")).collect()
        });
        let mut rows = Vec::with_capacity(pairs.len());
        for p in parts {
            rows.extend(p?);
        }
        rows
    };
    let per_bin = (1..=cfg.bins.len())
        .map(|b| (b, Aggregate::of(rows.iter().filter(|r| r.bin == b))))
        .collect();
    Ok(MetricsReport {
        overall: Aggregate::of(rows.iter()),
        per_bin,
        rows,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hit_examples() {
        let t = set(&["a"]);
        assert_eq!(hit_at_k(&["a", "x"], &t, 1).unwrap(), 1.0);
        assert_eq!(hit_at_k(&["x", "y", "z", "u", "v", "a"], &t, 5).unwrap(), 0.0);
        assert_eq!(hit_at_k::<&str>(&[], &t, 5).unwrap(), 0.0);
        assert!(hit_at_k(&["a"], &BTreeSet::new(), 1).is_err());
    }

    #[test]
    fn mrr_examples() {
        let t = set(&["a"]);
        assert_eq!(mrr(&["a"], &t), 1.0);
        assert_eq!(mrr(&["x", "y", "z", "a"], &t), 0.25);
        assert_eq!(mrr(&["x"], &t), 0.0);
    }

    #[test]
    fn recall_examples() {
        let t = set(&["a", "b"]);
        let twenty_a = vec!["a"; 20];
        assert_eq!(recall_at_k(&twenty_a, &t, 20), 1.0);
        assert_eq!(dedup_recall_at_k(&twenty_a, &t, 20), 0.5);
        let mut once = vec!["x"; 19];
        once.insert(3, "a");
        assert_eq!(recall_at_k(&once, &t, 20), 0.5);
        assert_eq!(recall_at_k(&["x", "y"], &t, 20), 0.0);
        assert_eq!(dedup_recall_at_k(&["x", "y"], &t, 20), 0.0);
        let both = ["a", "x", "b"];
        assert_eq!(dedup_recall_at_k(&both, &t, 20), 1.0);
        assert_eq!(recall_at_k(&both, &t, 20), 1.0);
    }

    #[test]
    fn bins() {
        let b = Bins::default();
        assert_eq!([1, 5, 6, 10, 11, 15, 16, 400].map(|n| b.bin(n)), [1, 1, 2, 2, 3, 3, 4, 4]);
        assert!(Bins::new(vec![2, 3]).is_err());
    }

    proptest! {
        #[test]
        fn duplicate_free_recalls_agree(
            perm in prop::sample::subsequence((0..30).collect::<Vec<u32>>(), 0..30).prop_shuffle(),
            tmask in prop::collection::vec(prop::bool::ANY, 30),
            k in 1usize..25,
        ) {
            let ids: Vec<String> = perm.iter().map(|i| format!("n{i}")).collect();
            let targets: BTreeSet<String> = (0..30).filter(|&i| tmask[i]).map(|i| format!("n{i}")).collect();
            prop_assert_eq!(recall_at_k(&ids, &targets, k), dedup_recall_at_k(&ids, &targets, k));
            if !targets.is_empty() {
                let mut prev = 0.0;
                for kk in 1..=25 {
                    let h = hit_at_k(&ids, &targets, kk).unwrap();
                    prop_assert!(h >= prev);
                    if h == 1.0 {
                        prop_assert!(mrr(&ids, &targets) >= 1.0 / kk as f64);
                    }
                    prev = h;
                }
                for v in [recall_at_k(&ids, &targets, k), dedup_recall_at_k(&ids, &targets, k), mrr(&ids, &targets)] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                let relabel = |s: &String| if targets.contains(s) { s.clone() } else { format!("other-{s}") };
                let ids2: Vec<String> = ids.iter().map(relabel).collect();
                prop_assert_eq!(mrr(&ids, &targets), mrr(&ids2, &targets));
                prop_assert_eq!(recall_at_k(&ids, &targets, k), recall_at_k(&ids2, &targets, k));
            }
        }
    }
}
