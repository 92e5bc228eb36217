//! Exhaustive inner-product search over short vectors and average-precision
//! evaluation with positive / junk ground truth.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bow::BowMatrix;
use crate::error::{Error, Result};

/// Rows must have unit norm within this tolerance unless all-zero.
pub const NORM_TOL: f64 = 1e-6;

/// `N x D'` matrix of unit short vectors. All-zero rows are allowed and
/// always rank last.
#[derive(Debug, Clone)]
pub struct Index {
    vectors: BowMatrix,
    zero: Vec<bool>,
    by_id: HashMap<String, usize>,
}

impl Index {
    pub fn build(vectors: BowMatrix) -> Result<Self> {
        let mut zero = Vec::with_capacity(vectors.len());
        let mut by_id = HashMap::with_capacity(vectors.len());
        for i in 0..vectors.len() {
            let row = vectors.row(i);
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let is_zero = norm == 0.0;
            if !is_zero && (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::Data(format!(
                    "index row {} has norm {norm}, expected 1",
                    vectors.ids[i]
                )));
            }
            if by_id.insert(vectors.ids[i].clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate index id {}", vectors.ids[i])));
            }
            zero.push(is_zero);
        }
        Ok(Index {
            vectors,
            zero,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.vectors.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.vectors.row(i))
    }

    pub fn vectors(&self) -> &BowMatrix {
        &self.vectors
    }

    /// Ranks the whole index (or its first `top` entries) by descending inner
    /// product with `q`. Ties go to the smaller image id; zero rows come last.
    pub fn query(&self, q: &[f32], top: usize) -> Result<Vec<(String, f64)>> {
        if top == 0 {
            return Err(Error::Parameter("top must be positive".into()));
        }
        if q.len() != self.dim() {
            return Err(Error::Parameter(format!(
                "query dimension {} does not match index dimension {}",
                q.len(),
                self.dim()
            )));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let s = self
                    .vectors
                    .row(i)
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (i, s)
            })
            .collect();
        scored.sort_by(|&(a, sa), &(b, sb)| {
            self.zero[a]
                .cmp(&self.zero[b])
                .then_with(|| sb.partial_cmp(&sa).unwrap_or(Ordering::Equal))
                .then_with(|| self.vectors.ids[a].cmp(&self.vectors.ids[b]))
        });
        scored.truncate(top);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.vectors.ids[i].clone(), s))
            .collect())
    }
}

/// One evaluation query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTruth {
    pub query_id: String,
    pub positives: HashSet<String>,
    pub junk: HashSet<String>,
    /// Drop the query image itself from its ranking.
    pub exclude_self: bool,
}

impl QueryTruth {
    pub fn new<I, J>(query_id: &str, positives: I, junk: J, exclude_self: bool) -> Self
    where
        I: IntoIterator,
        I::Item: Into<String>,
        J: IntoIterator,
        J::Item: Into<String>,
    {
        QueryTruth {
            query_id: query_id.to_string(),
            positives: positives.into_iter().map(Into::into).collect(),
            junk: junk.into_iter().map(Into::into).collect(),
            exclude_self,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::Data(format!("query {} has no positives", self.query_id)));
        }
        if let Some(id) = self.positives.intersection(&self.junk).next() {
            return Err(Error::Data(format!(
                "query {}: {id} is both positive and junk",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// Ground truth for a query set.
///
/// Text format: a `Q<TAB>query_id<TAB>exclude_self` line (exclude_self is 0
/// or 1) opens each query, followed by its `P<TAB>id` and `J<TAB>id` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub queries: Vec<QueryTruth>,
}

impl GroundTruth {
    pub fn parse(text: &str) -> Result<Self> {
        let mut queries: Vec<QueryTruth> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Data(format!("ground truth line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[..] {
                ["Q", id, flag] => {
                    let exclude_self = match flag {
                        "0" => false,
                        "1" => true,
                        _ => return Err(err("exclude_self must be 0 or 1")),
                    };
                    queries.push(QueryTruth::new(id, Vec::<String>::new(), Vec::<String>::new(), exclude_self));
                }
                ["P", id] => {
                    queries
                        .last_mut()
                        .ok_or_else(|| err("P line before any Q line"))?
                        .positives
                        .insert(id.to_string());
                }
                ["J", id] => {
                    queries
                        .last_mut()
                        .ok_or_else(|| err("J line before any Q line"))?
                        .junk
                        .insert(id.to_string());
                }
                _ => return Err(err("expected Q, P or J record")),
            }
        }
        let gt = GroundTruth { queries };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        self.queries.iter().try_for_each(QueryTruth::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Serializes with sorted positive and junk ids so output is stable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for q in &self.queries {
            writeln!(out, "Q\t{}\t{}", q.query_id, q.exclude_self as u8).unwrap();
            let mut pos: Vec<_> = q.positives.iter().collect();
            pos.sort();
            for p in pos {
                writeln!(out, "P\t{p}").unwrap();
            }
            let mut junk: Vec<_> = q.junk.iter().collect();
            junk.sort();
            for j in junk {
                writeln!(out, "J\t{j}").unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Non-interpolated average precision of `ranked`.
///
/// Junk ids are dropped from the list (as is the query id when
/// `exclude_self` is set). AP is the mean, over all positives, of the
/// precision at each positive's rank in the cleaned list; positives missing
/// from the list contribute zero.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], gt: &QueryTruth) -> Result<f64> {
    gt.validate()?;
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut seen = HashSet::new();
    for id in ranked {
        let id = id.as_ref();
        if gt.junk.contains(id) || (gt.exclude_self && id == gt.query_id) {
            continue;
        }
        rank += 1;
        if gt.positives.contains(id) && seen.insert(id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Ok(sum / gt.positives.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// `(query id, AP)` in ground-truth order.
    pub per_query: Vec<(String, f64)>,
    pub map: f64,
}

/// Ranks the full index for every query and averages the APs.
///
/// Query vectors are looked up in `external` first (separately encoded
/// query regions), then in the index itself.
pub fn mean_ap(index: &Index, gt: &GroundTruth, external: Option<&Index>) -> Result<MapReport> {
    if gt.queries.is_empty() {
        return Err(Error::Data("ground truth has no queries".into()));
    }
    let per_query = gt
        .queries
        .par_iter()
        .map(|q| {
            let vector = external
                .and_then(|e| e.vector(&q.query_id))
                .or_else(|| index.vector(&q.query_id))
                .ok_or_else(|| Error::Data(format!("query {} has no vector", q.query_id)))?;
            let ranked: Vec<String> = index
                .query(vector, index.len().max(1))?
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            let ap = average_precision(&ranked, q).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("query {}: {msg}", q.query_id)),
                other => other,
            })?;
            Ok((q.query_id.clone(), ap))
        })
        .collect::<Result<Vec<_>>>()?;
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok(MapReport { per_query, map })
}

/// `(image id, score)` pairs, best first.
pub type Ranking = Vec<(String, f64)>;

/// Ranked results as `query_id<TAB>rank<TAB>image_id<TAB>score` lines,
/// ranks from 1, scores with six decimals.
pub fn format_results(results: &[(String, Ranking)]) -> String {
    let mut out = String::new();
    for (qid, ranked) in results {
        for (r, (id, score)) in ranked.iter().enumerate() {
            writeln!(out, "{qid}\t{}\t{id}\t{score:.6}", r + 1).unwrap();
        }
    }
    out
}

/// Parses a results file back into per-query rankings, in file order.
pub fn parse_results(text: &str) -> Result<Vec<(String, Ranking)>> {
    let mut out: Vec<(String, Ranking)> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = || Error::Data(format!("results line {}: malformed", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [qid, rank, id, score] = fields[..] else {
            return Err(err());
        };
        let rank: usize = rank.parse().map_err(|_| err())?;
        let score: f64 = score.parse().map_err(|_| err())?;
        let slot = *pos.entry(qid.to_string()).or_insert_with(|| {
            out.push((qid.to_string(), Vec::new()));
            out.len() - 1
        });
        let ranked = &mut out[slot].1;
        if rank != ranked.len() + 1 {
            return Err(Error::Data(format!(
                "results line {}: rank {rank} out of order for query {qid}",
                lineno + 1
            )));
        }
        ranked.push((id.to_string(), score));
    }
    Ok(out)
}
