//! Query/gallery retrieval evaluation.
//!
//! Each query is ranked only against the gallery of its own action, by
//! ascending Euclidean distance with ties broken by ascending sample id.
//!
//! # Report schema
//!
//! The JSON report has the fields
//! `config_hash` (string), `num_queries` (integer), `mAP` (number),
//! `rank_k` (object mapping `"1"`/`"5"` to accuracies) and `per_query`
//! (array of `{query_id, action_id, ap, first_match_rank}`). The CSV file has
//! the header `query_id,action_id,ap,first_match_rank` and one row per query.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Manifest, Role, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const RANK_KS: [usize; 2] = [1, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_id: u64,
    pub ordered_gallery: Vec<u64>,
    pub relevance: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub action_id: u32,
    pub ap: f64,
    /// 1-based position of the first relevant gallery item.
    pub first_match_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub num_queries: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank_k: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.rank_k.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for q in &self.per_query {
            writer.serialize(q).map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `eval_report.json` and `eval_report.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_json(&dir.join("eval_report.json"))?;
        self.write_csv(&dir.join("eval_report.csv"))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// `(1/R)·Σ precision@r` over the relevant positions `r`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Usage(
            "average precision needs at least one relevant item".into(),
        ));
    }
    Ok(sum / hits as f64)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks `gallery` (already restricted to the query's action) for `query`.
pub fn rank_gallery(query: &Sample, query_desc: &[f64], gallery: &[(&Sample, &[f64])]) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(Error::Eval(format!(
            "query {} has no gallery samples in action {}",
            query.sample_id, query.action_id
        )));
    }
    let mut scored: Vec<(f64, &Sample)> = gallery
        .iter()
        .map(|(s, d)| {
            if d.len() != query_desc.len() {
                return Err(Error::Eval(format!(
                    "descriptor of sample {} has length {}, query {} has {}",
                    s.sample_id,
                    d.len(),
                    query.sample_id,
                    query_desc.len()
                )));
            }
            Ok((squared_distance(query_desc, d), *s))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|(da, a), (db, b)| da.total_cmp(db).then(a.sample_id.cmp(&b.sample_id)));
    Ok(RankingResult {
        query_id: query.sample_id,
        ordered_gallery: scored.iter().map(|(_, s)| s.sample_id).collect(),
        relevance: scored.iter().map(|(_, s)| s.identity() == query.identity()).collect(),
    })
}

/// Evaluates precomputed descriptors keyed by sample id.
pub fn evaluate_descriptors(
    manifest: &Manifest,
    descriptors: &HashMap<u64, Vec<f64>>,
    config_hash: &str,
) -> Result<EvalReport> {
    let lookup = |s: &Sample| -> Result<&[f64]> {
        descriptors
            .get(&s.sample_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Eval(format!("no descriptor for sample {}", s.sample_id)))
    };
    let mut galleries: BTreeMap<u32, Vec<(&Sample, &[f64])>> = BTreeMap::new();
    for s in manifest.with_role(Role::Gallery) {
        galleries.entry(s.action_id).or_default().push((s, lookup(s)?));
    }
    let mut queries: Vec<&Sample> = manifest.with_role(Role::Query).collect();
    queries.sort_by_key(|s| (s.action_id, s.sample_id));
    if queries.is_empty() {
        return Err(Error::Eval("manifest has no query samples".into()));
    }

    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        let gallery = galleries.get(&q.action_id).map(Vec::as_slice).unwrap_or(&[]);
        let ranking = rank_gallery(q, lookup(q)?, gallery)?;
        let ap = average_precision(&ranking.relevance).map_err(|_| {
            Error::Eval(format!(
                "query {} has no matching gallery sample in action {}",
                q.sample_id, q.action_id
            ))
        })?;
        let first = ranking.relevance.iter().position(|&r| r).expect("AP succeeded") + 1;
        per_query.push(QueryResult {
            query_id: q.sample_id,
            action_id: q.action_id,
            ap,
            first_match_rank: first,
        });
    }
    let n = per_query.len() as f64;
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / n;
    let rank_k = RANK_KS
        .iter()
        .map(|&k| {
            (
                k,
                per_query.iter().filter(|q| q.first_match_rank <= k).count() as f64 / n,
            )
        })
        .collect();
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        num_queries: per_query.len(),
        map,
        rank_k,
        per_query,
    })
}

/// Normalized descriptors for every sample whose role passes `filter`.
pub fn extract_descriptors(
    manifest: &Manifest,
    model: &Model,
    filter: impl Fn(Role) -> bool,
) -> Result<HashMap<u64, Vec<f64>>> {
    let mut out = HashMap::new();
    for s in manifest.records.iter().filter(|s| filter(s.role)) {
        let path = manifest.tensor_path(s);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("tensor of sample {} is missing", s.sample_id),
                ),
            ));
        }
        let image = manifest.load_image(s)?;
        out.insert(s.sample_id, model.descriptor(&image)?);
    }
    Ok(out)
}

/// Extracts query and gallery descriptors with `model` and scores them.
pub fn evaluate(manifest: &Manifest, model: &Model) -> Result<EvalReport> {
    let descriptors = extract_descriptors(manifest, model, |r| r != Role::Train)?;
    evaluate_descriptors(manifest, &descriptors, &model.config.config_hash())
}

/// Reads an `N×D` descriptor tensor whose rows follow the manifest's record order.
pub fn descriptors_from_tensor(manifest: &Manifest, table: &Tensor) -> Result<HashMap<u64, Vec<f64>>> {
    let &[n, d] = table.shape() else {
        return Err(Error::Eval(format!(
            "descriptor table must be N×D, got {:?}",
            table.shape()
        )));
    };
    if n != manifest.records.len() {
        return Err(Error::Eval(format!(
            "descriptor table has {n} rows for {} manifest records",
            manifest.records.len()
        )));
    }
    Ok(manifest
        .records
        .iter()
        .zip(table.data().chunks(d.max(1)))
        .map(|(s, row)| (s.sample_id, row.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn sample(id: u64, action: u32, pid: u32, role: Role) -> Sample {
        Sample {
            sample_id: id,
            action_id: action,
            pid,
            role,
            tensor_path: PathBuf::from(format!("{id}.tsr")),
        }
    }

    fn manifest(records: Vec<Sample>) -> Manifest {
        Manifest {
            version: 1,
            image_shape: (3, 4, 4),
            records,
            root: PathBuf::new(),
        }
    }

    /// Precision at every rank, averaged over the relevant ranks.
    fn brute_force_ap(rel: &[bool]) -> f64 {
        let precision: Vec<f64> = (1..=rel.len())
            .map(|k| rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
            .collect();
        let relevant: Vec<f64> = (0..rel.len()).filter(|&i| rel[i]).map(|i| precision[i]).collect();
        relevant.iter().sum::<f64>() / relevant.len() as f64
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true]).unwrap(), 1.0);
        assert!((average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, true]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[false, false]), Err(Error::Usage(_))));
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn ap_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let len = rng.gen_range(1..40);
            let mut rel: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.3)).collect();
            let forced = rng.gen_range(0..len);
            rel[forced] = true;
            let (got, want) = (average_precision(&rel).unwrap(), brute_force_ap(&rel));
            assert!((got - want).abs() <= 1e-12, "{rel:?}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn moving_a_hit_earlier_never_lowers_ap(
            mut rel in proptest::collection::vec(any::<bool>(), 2..30),
            pick in any::<prop::sample::Index>(),
        ) {
            let hits: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
            prop_assume!(!hits.is_empty());
            let from = hits[pick.index(hits.len())];
            prop_assume!(from > 0 && !rel[from - 1]);
            let before = average_precision(&rel).unwrap();
            rel.swap(from, from - 1);
            prop_assert!(average_precision(&rel).unwrap() >= before);
        }
    }

    #[test]
    fn ranking_ties_and_trivial_cases() {
        let q = sample(10, 0, 1, Role::Query);
        let g5 = sample(5, 0, 2, Role::Gallery);
        let g3 = sample(3, 0, 1, Role::Gallery);
        let (d, e1, e2) = (vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]);
        let r = rank_gallery(&q, &d, &[(&g5, &e1), (&g3, &e2)]).unwrap();
        assert_eq!(r.ordered_gallery, vec![3, 5]);
        assert_eq!(r.relevance, vec![true, false]);
        let r = rank_gallery(&q, &d, &[(&g3, &e1)]).unwrap();
        assert_eq!(average_precision(&r.relevance).unwrap(), 1.0);
        assert!(matches!(rank_gallery(&q, &d, &[]), Err(Error::Eval(_))));
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = sample(1000, 0, 0, Role::Query);
        let qd: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let gallery: Vec<(Sample, Vec<f64>)> = (0..50)
            .map(|i| {
                (
                    sample(i, 0, (i % 5) as u32, Role::Gallery),
                    (0..8).map(|_| rng.gen()).collect(),
                )
            })
            .collect();
        let refs: Vec<(&Sample, &[f64])> = gallery.iter().map(|(s, d)| (s, d.as_slice())).collect();
        let r = rank_gallery(&q, &qd, &refs).unwrap();
        let mut oracle: Vec<(f64, u64)> = gallery
            .iter()
            .map(|(s, d)| {
                (
                    qd.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    s.sample_id,
                )
            })
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(r.ordered_gallery, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    fn one_hot_world(actions: u32, ids: u32, gallery_views: u64) -> (Manifest, HashMap<u64, Vec<f64>>) {
        let mut records = Vec::new();
        let mut descs = HashMap::new();
        let mut id = 0;
        for a in 0..actions {
            for pid in 0..ids {
                for v in 0..=gallery_views {
                    let role = if v == 0 { Role::Query } else { Role::Gallery };
                    records.push(sample(id, a, pid, role));
                    let mut d = vec![0.0; ids as usize];
                    d[pid as usize] = 1.0;
                    descs.insert(id, d);
                    id += 1;
                }
            }
        }
        (manifest(records), descs)
    }

    #[test]
    fn one_hot_descriptors_are_perfect() {
        let (m, d) = one_hot_world(3, 4, 2);
        let report = evaluate_descriptors(&m, &d, "h").unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.rank(1), 1.0);
        assert_eq!(report.rank(5), 1.0);
        assert_eq!(report.num_queries, 12);
    }

    #[test]
    fn per_action_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut m, _) = one_hot_world(2, 5, 2);
        let d: HashMap<u64, Vec<f64>> = m
            .records
            .iter()
            .map(|s| (s.sample_id, (0..6).map(|_| rng.gen()).collect()))
            .collect();
        let before = evaluate_descriptors(&m, &d, "h").unwrap();
        for s in m.records.iter_mut().filter(|s| s.action_id == 0) {
            s.pid = (s.pid + 3) % 5;
        }
        let after = evaluate_descriptors(&m, &d, "h").unwrap();
        let action1 = |r: &EvalReport| {
            r.per_query
                .iter()
                .filter(|q| q.action_id == 1)
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(action1(&before), action1(&after));
    }

    #[test]
    fn random_descriptors_hit_chance_rank1() {
        // G gallery items per action, one match per query
        let (g, trials) = (8u32, 4000);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut records = Vec::new();
        let mut id = 0;
        for a in 0..trials / g {
            for pid in 0..g {
                for role in [Role::Query, Role::Gallery] {
                    records.push(sample(id, a, pid, role));
                    id += 1;
                }
            }
        }
        let m = manifest(records);
        let d: HashMap<u64, Vec<f64>> = m
            .records
            .iter()
            .map(|s| (s.sample_id, (0..4).map(|_| rng.gen()).collect()))
            .collect();
        let report = evaluate_descriptors(&m, &d, "h").unwrap();
        let p = 1.0 / g as f64;
        let se = (p * (1.0 - p) / report.num_queries as f64).sqrt();
        assert!(
            (report.rank(1) - p).abs() < 3.0 * se,
            "{} vs {p} ± {}",
            report.rank(1),
            3.0 * se
        );
        assert!(report.rank(1) <= report.rank(5));
    }

    #[test]
    fn orphan_query_is_eval_error() {
        let m = manifest(vec![sample(0, 0, 0, Role::Query), sample(1, 0, 1, Role::Gallery)]);
        let d = HashMap::from([(0, vec![1.0]), (1, vec![0.0])]);
        assert!(matches!(evaluate_descriptors(&m, &d, "h"), Err(Error::Eval(_))));
    }

    #[test]
    fn report_files() {
        let (m, d) = one_hot_world(1, 2, 1);
        let report = evaluate_descriptors(&m, &d, "abc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write_files(dir.path()).unwrap();
        let json = fs::read_to_string(dir.path().join("eval_report.json")).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(json.contains("\"mAP\""));
        let csv = fs::read_to_string(dir.path().join("eval_report.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "query_id,action_id,ap,first_match_rank");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn descriptor_table_rows_follow_records() {
        let (m, _) = one_hot_world(1, 2, 1);
        let table = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let d = descriptors_from_tensor(&m, &table).unwrap();
        assert_eq!(d[&2], vec![0.0, 1.0]);
        assert!(descriptors_from_tensor(&m, &Tensor::zeros(&[3, 2])).is_err());
    }
}
