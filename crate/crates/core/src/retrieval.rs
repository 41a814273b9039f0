//! Gallery storage, truncation-aware cosine distance, CMC and mAP metrics,
//! and the backward-compatibility / not-hurting checkers.
//!
//! Vectors of unequal dimension are compared by truncating the longer one,
//! then normalizing both, so a grown embedding can query an old gallery
//! directly. Per-query ranking is data-parallel; results merge in query
//! order, so reports are deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("input error: gallery is empty")]
    EmptyGallery,
    #[error("input error: duplicate record id {0}")]
    DuplicateId(u64),
    #[error("input error: records {0} and {1} share model tag but differ in dimension")]
    MixedDims(u64, u64),
    #[error("degenerate-vector error: record {0} is zero after truncation")]
    DegenerateVector(u64),
    #[error("input error: query sets are not aligned by id")]
    IdMisalignment,
    #[error("metric error: {0}")]
    Metric(String),
}

/// One stored embedding: id, class label, raw vector, producing model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub label: u32,
    pub vector: Vec<f64>,
    pub model_tag: String,
}

/// An immutable set of embedding records with unique ids and, per model
/// tag, a consistent dimension.
#[derive(Debug, Clone)]
pub struct Gallery {
    records: Vec<EmbeddingRecord>,
}

impl Gallery {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        let mut dim_by_tag: BTreeMap<&str, (u64, usize)> = BTreeMap::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(EvalError::DuplicateId(r.id));
            }
            match dim_by_tag.get(r.model_tag.as_str()) {
                Some(&(first_id, dim)) if dim != r.vector.len() => {
                    return Err(EvalError::MixedDims(first_id, r.id));
                }
                Some(_) => {}
                None => {
                    dim_by_tag.insert(&r.model_tag, (r.id, r.vector.len()));
                }
            }
        }
        Ok(Gallery { records })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Truncates the longer vector to the shorter length, L2-normalizes both,
/// and returns the negative dot product; the result lies in [-1, 1].
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let len = a.len().min(b.len());
    let (ta, tb) = (&a[..len], &b[..len]);
    let na = crate::linalg::vec_norm(ta);
    let nb = crate::linalg::vec_norm(tb);
    if na == 0.0 {
        return Err(EvalError::DegenerateVector(0));
    }
    if nb == 0.0 {
        return Err(EvalError::DegenerateVector(1));
    }
    let mut dot = 0.0;
    for (x, y) in ta.iter().zip(tb.iter()) {
        dot += (x / na) * (y / nb);
    }
    Ok(-dot)
}

fn distance_records(q: &EmbeddingRecord, g: &EmbeddingRecord) -> Result<f64, EvalError> {
    distance(&q.vector, &g.vector).map_err(|e| match e {
        EvalError::DegenerateVector(0) => EvalError::DegenerateVector(q.id),
        EvalError::DegenerateVector(_) => EvalError::DegenerateVector(g.id),
        other => other,
    })
}

/// Gallery ids ordered by ascending distance to the query, ties broken by
/// ascending id. The query's own id, if present, is excluded.
pub fn rank_gallery(query: &EmbeddingRecord, gallery: &Gallery) -> Result<Vec<u64>, EvalError> {
    Ok(ranked_entries(query, gallery, true)?
        .into_iter()
        .map(|(id, _, _)| id)
        .collect())
}

/// `(id, label, distance)` rows in rank order.
fn ranked_entries(
    query: &EmbeddingRecord,
    gallery: &Gallery,
    exclude_self: bool,
) -> Result<Vec<(u64, u32, f64)>, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let mut rows = Vec::with_capacity(gallery.len());
    for rec in gallery.records() {
        if exclude_self && rec.id == query.id {
            continue;
        }
        rows.push((rec.id, rec.label, distance_records(query, rec)?));
    }
    rows.sort_unstable_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    Ok(rows)
}

/// Evaluation knobs; self-match exclusion defaults to on because the
/// validation set usually serves as both query and gallery.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { exclude_self: true }
    }
}

/// Per-case retrieval quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// "query-tag/gallery-tag".
    pub case: String,
    pub cmc1: f64,
    pub cmc5: f64,
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
    /// Queries whose label never occurs in the gallery; excluded from mAP.
    #[serde(skip)]
    pub map_skipped: usize,
}

fn average_precision(ranked_labels: &[u32], query_label: u32) -> Option<f64> {
    let mut relevant_seen = 0usize;
    let mut sum = 0.0;
    for (i, &label) in ranked_labels.iter().enumerate() {
        if label == query_label {
            relevant_seen += 1;
            sum += relevant_seen as f64 / (i + 1) as f64;
        }
    }
    (relevant_seen > 0).then(|| sum / relevant_seen as f64)
}

fn hit_in_top_k(ranked_labels: &[u32], query_label: u32, k: usize) -> bool {
    ranked_labels.iter().take(k).any(|&l| l == query_label)
}

/// Ranks every query against the gallery (in parallel, merged in query
/// order) and aggregates CMC@1, CMC@5, and all-points mAP into one report.
pub fn evaluate(
    case: &str,
    queries: &[EmbeddingRecord],
    gallery: &Gallery,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    if queries.is_empty() {
        return Err(EvalError::Metric("no queries to evaluate".into()));
    }
    let rankings: Vec<Result<Vec<(u64, u32, f64)>, EvalError>> =
        par::map_ordered(queries, |q| ranked_entries(q, gallery, opts.exclude_self));

    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    let mut skipped = 0usize;
    for (q, ranking) in queries.iter().zip(rankings) {
        let ranking = ranking?;
        let labels: Vec<u32> = ranking.iter().map(|&(_, l, _)| l).collect();
        if hit_in_top_k(&labels, q.label, 1) {
            hits1 += 1;
        }
        if hit_in_top_k(&labels, q.label, 5) {
            hits5 += 1;
        }
        match average_precision(&labels, q.label) {
            Some(ap) => {
                ap_sum += ap;
                ap_count += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(EvalReport {
        case: case.to_string(),
        cmc1: hits1 as f64 / queries.len() as f64,
        cmc5: hits5 as f64 / queries.len() as f64,
        map: if ap_count > 0 {
            ap_sum / ap_count as f64
        } else {
            0.0
        },
        queries: queries.len(),
        gallery: gallery.len(),
        map_skipped: skipped,
    })
}

/// Fraction of queries whose top-k ranked gallery items contain at least one
/// same-label record.
pub fn cmc_at_k(
    queries: &[EmbeddingRecord],
    gallery: &Gallery,
    k: usize,
    opts: &EvalOptions,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::Metric("k must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(EvalError::Metric("no queries to evaluate".into()));
    }
    let hits: Vec<Result<bool, EvalError>> = par::map_ordered(queries, |q| {
        let ranking = ranked_entries(q, gallery, opts.exclude_self)?;
        let labels: Vec<u32> = ranking.iter().map(|&(_, l, _)| l).collect();
        Ok(hit_in_top_k(&labels, q.label, k))
    });
    let mut count = 0usize;
    for h in hits {
        if h? {
            count += 1;
        }
    }
    Ok(count as f64 / queries.len() as f64)
}

/// All-points mean average precision over the full ranking. Queries whose
/// label is absent from the gallery are excluded and counted.
pub fn mean_average_precision(
    queries: &[EmbeddingRecord],
    gallery: &Gallery,
    opts: &EvalOptions,
) -> Result<(f64, usize), EvalError> {
    if queries.is_empty() {
        return Err(EvalError::Metric("no queries to evaluate".into()));
    }
    let aps: Vec<Result<Option<f64>, EvalError>> = par::map_ordered(queries, |q| {
        let ranking = ranked_entries(q, gallery, opts.exclude_self)?;
        let labels: Vec<u32> = ranking.iter().map(|&(_, l, _)| l).collect();
        Ok(average_precision(&labels, q.label))
    });
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for ap in aps {
        match ap? {
            Some(v) => {
                sum += v;
                count += 1;
            }
            None => skipped += 1,
        }
    }
    if count == 0 {
        return Err(EvalError::Metric(
            "every query label is absent from the gallery".into(),
        ));
    }
    Ok((sum / count as f64, skipped))
}

/// Which empirical metric backs a relaxed compatibility verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cmc1,
    Cmc5,
    Map,
}

impl Metric {
    pub fn of(&self, report: &EvalReport) -> f64 {
        match self {
            Metric::Cmc1 => report.cmc1,
            Metric::Cmc5 => report.cmc5,
            Metric::Map => report.map,
        }
    }

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s {
            "cmc1" => Ok(Metric::Cmc1),
            "cmc5" => Ok(Metric::Cmc5),
            "map" => Ok(Metric::Map),
            other => Err(EvalError::Metric(format!("unknown metric '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Cmc1 => "cmc1",
            Metric::Cmc5 => "cmc5",
            Metric::Map => "map",
        }
    }
}

/// One relaxed comparison `M(lhs) >= M(rhs)`.
#[derive(Debug, Clone, Serialize)]
pub struct RelaxedVerdict {
    pub metric: Metric,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Outcome of the backward-compatibility check: the relaxed metric
/// comparison plus the strict per-pair violation fraction.
#[derive(Debug, Clone, Serialize)]
pub struct CompatReport {
    pub relaxed: Vec<RelaxedVerdict>,
    pub strict_violations: usize,
    pub strict_pairs: usize,
    pub new_vs_old: EvalReport,
    pub old_vs_old: EvalReport,
}

impl CompatReport {
    pub fn strict_violation_fraction(&self) -> f64 {
        if self.strict_pairs == 0 {
            0.0
        } else {
            self.strict_violations as f64 / self.strict_pairs as f64
        }
    }
}

fn check_alignment(a: &[EmbeddingRecord], b: &[EmbeddingRecord]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::IdMisalignment);
    }
    if a.iter().zip(b).any(|(x, y)| x.id != y.id) {
        return Err(EvalError::IdMisalignment);
    }
    Ok(())
}

/// Backward compatibility of new query embeddings against an old gallery.
///
/// Relaxed form: `M(new/old) >= M(old/old)` for each requested metric.
/// Strict form: over every (query i, gallery j) pair with distinct ids, the
/// distance inequality required for their label relation — new-to-old at
/// most (same label) or at least (different label) the old-to-old distance —
/// is checked, and the failing fraction reported.
pub fn check_backward_compat(
    old_query_emb: &[EmbeddingRecord],
    new_query_emb: &[EmbeddingRecord],
    old_gallery: &Gallery,
    metrics: &[Metric],
) -> Result<CompatReport, EvalError> {
    check_alignment(old_query_emb, new_query_emb)?;
    let opts = EvalOptions::default();
    let new_vs_old = evaluate("new/old", new_query_emb, old_gallery, &opts)?;
    let old_vs_old = evaluate("old/old", old_query_emb, old_gallery, &opts)?;
    let relaxed = metrics
        .iter()
        .map(|m| {
            let lhs = m.of(&new_vs_old);
            let rhs = m.of(&old_vs_old);
            RelaxedVerdict {
                metric: *m,
                lhs,
                rhs,
                holds: lhs >= rhs,
            }
        })
        .collect();

    let pair_counts: Vec<Result<(usize, usize), EvalError>> =
        par::map_indices(old_query_emb.len(), |i| {
            let old_q = &old_query_emb[i];
            let new_q = &new_query_emb[i];
            let mut violations = 0usize;
            let mut pairs = 0usize;
            for g in old_gallery.records() {
                if g.id == old_q.id {
                    continue;
                }
                let d_new = distance_records(new_q, g)?;
                let d_old = distance_records(old_q, g)?;
                let same_label = old_q.label == g.label;
                let violated = if same_label {
                    d_new > d_old
                } else {
                    d_new < d_old
                };
                pairs += 1;
                if violated {
                    violations += 1;
                }
            }
            Ok((violations, pairs))
        });
    let mut strict_violations = 0;
    let mut strict_pairs = 0;
    for c in pair_counts {
        let (v, p) = c?;
        strict_violations += v;
        strict_pairs += p;
    }

    Ok(CompatReport {
        relaxed,
        strict_violations,
        strict_pairs,
        new_vs_old,
        old_vs_old,
    })
}

/// Outcome of the not-hurting check: self-retrieval of the compatible model
/// against self-retrieval of the independently trained model.
#[derive(Debug, Clone, Serialize)]
pub struct NotHurtReport {
    pub relaxed: Vec<RelaxedVerdict>,
    pub new_vs_new: EvalReport,
    pub independent_vs_independent: EvalReport,
}

/// Relaxed not-hurting check: `M(new/new) >= M(new'/new')`, each record set
/// serving as its own query set and gallery with self-matches excluded.
pub fn check_not_hurting(
    new_emb: &[EmbeddingRecord],
    new_independent_emb: &[EmbeddingRecord],
    metrics: &[Metric],
) -> Result<NotHurtReport, EvalError> {
    check_alignment(new_emb, new_independent_emb)?;
    let opts = EvalOptions::default();
    let new_gallery = Gallery::new(new_emb.to_vec())?;
    let ind_gallery = Gallery::new(new_independent_emb.to_vec())?;
    let new_vs_new = evaluate("new/new", new_emb, &new_gallery, &opts)?;
    let ind_vs_ind = evaluate(
        "new-independent/new-independent",
        new_independent_emb,
        &ind_gallery,
        &opts,
    )?;
    let relaxed = metrics
        .iter()
        .map(|m| {
            let lhs = m.of(&new_vs_new);
            let rhs = m.of(&ind_vs_ind);
            RelaxedVerdict {
                metric: *m,
                lhs,
                rhs,
                holds: lhs >= rhs,
            }
        })
        .collect();
    Ok(NotHurtReport {
        relaxed,
        new_vs_new,
        independent_vs_independent: ind_vs_ind,
    })
}

/// One JSON object per report, one per line.
pub fn reports_to_jsonl(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

/// CSV with the same columns as the JSON lines; `comments` become leading
/// `#` lines.
pub fn reports_to_csv(reports: &[EvalReport], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str("case,cmc1,cmc5,map,queries,gallery\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.case, r.cmc1, r.cmc5, r.map, r.queries, r.gallery
        ));
    }
    out
}
