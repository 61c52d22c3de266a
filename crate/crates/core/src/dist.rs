//! Empirical distribution over coarse templates, with previous-to-current
//! counts for multi-turn corpora.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use num_bigint::BigUint;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon::{parse_sql, to_coarse, CoarseTemplate};
use crate::error::{Error, Result};
use crate::schema::{CorpusExample, DatabaseEnv};

#[derive(Debug, Clone)]
struct Entry {
    template: CoarseTemplate,
    count: u64,
}

/// Template counts keyed by canonical template text.
#[derive(Debug, Clone, Default)]
pub struct TemplateDistribution {
    unigram: BTreeMap<String, Entry>,
    bigram: BTreeMap<(String, String), u64>,
    total: u64,
    skipped: u64,
}

fn template_of(sql: &str, env: &DatabaseEnv) -> Result<CoarseTemplate> {
    Ok(to_coarse(&parse_sql(sql, env)?, env))
}

impl TemplateDistribution {
    /// Record one occurrence of `tpl`. Arity is the smallest seen for the text.
    pub fn add(&mut self, tpl: CoarseTemplate, count: u64) {
        if count == 0 {
            return;
        }
        self.total += count;
        match self.unigram.get_mut(tpl.text()) {
            Some(e) => {
                e.count += count;
                if tpl.join_arity() < e.template.join_arity() {
                    e.template = tpl;
                }
            }
            None => {
                self.unigram.insert(
                    tpl.text().to_string(),
                    Entry {
                        template: tpl,
                        count,
                    },
                );
            }
        }
    }

    pub fn add_bigram(&mut self, prev: &CoarseTemplate, cur: &CoarseTemplate, count: u64) {
        if count > 0 {
            *self
                .bigram
                .entry((prev.text().to_string(), cur.text().to_string()))
                .or_insert(0) += count;
        }
    }

    /// Counts without the emptiness check; shards combine with [`merge`].
    ///
    /// [`merge`]: TemplateDistribution::merge
    pub fn fit_partial(corpus: &[CorpusExample], envs: &[DatabaseEnv]) -> Self {
        let index: HashMap<&str, &DatabaseEnv> =
            envs.iter().map(|e| (e.db_id.as_str(), e)).collect();
        let mut dist = TemplateDistribution::default();
        for ex in corpus {
            let Some(env) = index.get(ex.db_id.as_str()) else {
                dist.skipped += 1;
                continue;
            };
            let cur = match template_of(&ex.gold_sql, env) {
                Ok(t) => t,
                Err(e) => {
                    tracing::debug!(db_id = %ex.db_id, sql = %ex.gold_sql, error = %e, "skipping example");
                    dist.skipped += 1;
                    continue;
                }
            };
            if ex.turn_index > 1 {
                if let Some(prev) = ex.prev_sql.as_deref().and_then(|p| template_of(p, env).ok()) {
                    dist.add_bigram(&prev, &cur, 1);
                }
            }
            dist.add(cur, 1);
        }
        dist
    }

    pub fn merge(&mut self, other: TemplateDistribution) {
        for (_, e) in other.unigram {
            self.add(e.template, e.count);
        }
        for (k, c) in other.bigram {
            *self.bigram.entry(k).or_insert(0) += c;
        }
        self.skipped += other.skipped;
    }

    /// Drop bigrams whose previous template never occurs as a unigram.
    fn prune(&mut self) {
        let unigram = &self.unigram;
        let before = self.bigram.len();
        self.bigram
            .retain(|(p, c), _| unigram.contains_key(p) && unigram.contains_key(c));
        if self.bigram.len() < before {
            tracing::debug!(dropped = before - self.bigram.len(), "bigrams without unigram support");
        }
    }

    pub fn is_empty(&self) -> bool {
        self.unigram.is_empty()
    }

    pub fn len(&self) -> usize {
        self.unigram.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn templates(&self) -> impl Iterator<Item = (&CoarseTemplate, u64)> {
        self.unigram.values().map(|e| (&e.template, e.count))
    }

    pub fn bigrams(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.bigram
            .iter()
            .map(|((p, c), n)| (p.as_str(), c.as_str(), *n))
    }

    pub fn count(&self, tpl: &CoarseTemplate) -> u64 {
        self.unigram.get(tpl.text()).map_or(0, |e| e.count)
    }

    pub fn get(&self, text: &str) -> Option<&CoarseTemplate> {
        self.unigram.get(text).map(|e| &e.template)
    }

    pub fn contains(&self, tpl: &CoarseTemplate) -> bool {
        self.unigram.contains_key(tpl.text())
    }

    pub fn bigram_count(&self, prev: &CoarseTemplate, cur: &CoarseTemplate) -> u64 {
        self.bigram
            .get(&(prev.text().to_string(), cur.text().to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn has_bigrams(&self) -> bool {
        !self.bigram.is_empty()
    }

    pub fn to_file(&self) -> DistributionFile {
        DistributionFile {
            unigram: self
                .unigram
                .values()
                .map(|e| UnigramRecord {
                    template: e.template.text().to_string(),
                    count: e.count,
                    join_arity: e.template.join_arity(),
                })
                .collect(),
            bigram: self
                .bigram
                .iter()
                .map(|((p, c), n)| BigramRecord {
                    prev: p.clone(),
                    cur: c.clone(),
                    count: *n,
                })
                .collect(),
            meta: Meta {
                skipped: self.skipped,
                total: self.total,
            },
        }
    }

    pub fn from_file(file: DistributionFile) -> Result<Self> {
        let mut dist = TemplateDistribution::default();
        for r in file.unigram {
            if r.count == 0 {
                return Err(Error::format("distribution", format!("zero count for `{}`", r.template)));
            }
            let tpl = CoarseTemplate::parse(&r.template, r.join_arity)
                .map_err(|e| Error::format("distribution", format!("`{}`: {e}", r.template)))?;
            dist.add(tpl, r.count);
        }
        for r in file.bigram {
            let (Some(p), Some(c)) = (dist.get(&r.prev).cloned(), dist.get(&r.cur).cloned()) else {
                return Err(Error::format(
                    "distribution",
                    format!("bigram ({}, {}) has no unigram entry", r.prev, r.cur),
                ));
            };
            dist.add_bigram(&p, &c, r.count);
        }
        dist.skipped = file.meta.skipped;
        Ok(dist)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DistributionFile =
            serde_json::from_str(text).map_err(|e| Error::format("distribution", e.to_string()))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnigramRecord {
    pub template: String,
    pub count: u64,
    #[serde(default = "one")]
    pub join_arity: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BigramRecord {
    pub prev: String,
    pub cur: String,
    pub count: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Meta {
    pub skipped: u64,
    pub total: u64,
}

/// On-disk layout of a fitted distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionFile {
    pub unigram: Vec<UnigramRecord>,
    pub bigram: Vec<BigramRecord>,
    pub meta: Meta,
}

/// Count templates of a corpus. Examples that fail to parse, or whose
/// database is unknown, are skipped and counted in `skipped()`.
pub fn fit(corpus: &[CorpusExample], envs: &[DatabaseEnv]) -> Result<TemplateDistribution> {
    let mut dist = TemplateDistribution::fit_partial(corpus, envs);
    dist.prune();
    if dist.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    tracing::info!(
        templates = dist.len(),
        total = dist.total,
        skipped = dist.skipped,
        "fitted template distribution"
    );
    Ok(dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: usize,
    pub total: usize,
    /// Examples that failed to parse; they count as not covered.
    pub unparseable: usize,
    pub fraction: f64,
}

pub fn coverage_report(
    dist: &TemplateDistribution,
    eval_corpus: &[CorpusExample],
    envs: &[DatabaseEnv],
) -> Result<CoverageReport> {
    if eval_corpus.is_empty() {
        return Err(Error::UndefinedCoverage);
    }
    let index: HashMap<&str, &DatabaseEnv> = envs.iter().map(|e| (e.db_id.as_str(), e)).collect();
    let mut covered = 0;
    let mut unparseable = 0;
    for ex in eval_corpus {
        let tpl = index
            .get(ex.db_id.as_str())
            .ok_or_else(|| Error::Resolution(format!("database {}", ex.db_id)))
            .and_then(|env| template_of(&ex.gold_sql, env));
        match tpl {
            Ok(t) if dist.contains(&t) => covered += 1,
            Ok(_) => {}
            Err(_) => unparseable += 1,
        }
    }
    Ok(CoverageReport {
        covered,
        total: eval_corpus.len(),
        unparseable,
        fraction: covered as f64 / eval_corpus.len() as f64,
    })
}

/// Fraction of evaluation examples whose template occurs in `dist`.
pub fn coverage(
    dist: &TemplateDistribution,
    eval_corpus: &[CorpusExample],
    envs: &[DatabaseEnv],
) -> Result<f64> {
    Ok(coverage_report(dist, eval_corpus, envs)?.fraction)
}

fn draw<'a, R: Rng + ?Sized>(
    candidates: &[(&'a CoarseTemplate, u64)],
    rng: &mut R,
) -> Option<&'a CoarseTemplate> {
    if candidates.is_empty() {
        return None;
    }
    let w = WeightedIndex::new(candidates.iter().map(|(_, c)| *c)).ok()?;
    Some(candidates[w.sample(rng)].0)
}

fn unigram_candidates<'a>(
    dist: &'a TemplateDistribution,
    fillable: &mut impl FnMut(&CoarseTemplate) -> bool,
) -> Vec<(&'a CoarseTemplate, u64)> {
    dist.templates().filter(|(t, _)| fillable(t)).collect()
}

/// Draw a template proportionally to its count among those `fillable`
/// accepts.
pub fn sample_template<R: Rng + ?Sized>(
    dist: &TemplateDistribution,
    mut fillable: impl FnMut(&CoarseTemplate) -> bool,
    rng: &mut R,
) -> Result<CoarseTemplate> {
    let cands = unigram_candidates(dist, &mut fillable);
    draw(&cands, rng)
        .cloned()
        .ok_or_else(|| Error::Unfillable {
            db_id: String::new(),
        })
}

/// Draw a continuation of `prev` from the bigram counts, backing off to the
/// unigram when `prev` has no fillable continuation.
pub fn sample_template_conditional<R: Rng + ?Sized>(
    dist: &TemplateDistribution,
    prev: &CoarseTemplate,
    mut fillable: impl FnMut(&CoarseTemplate) -> bool,
    rng: &mut R,
) -> Result<CoarseTemplate> {
    let cands: Vec<(&CoarseTemplate, u64)> = dist
        .bigram
        .range((prev.text().to_string(), String::new())..)
        .take_while(|((p, _), _)| p == prev.text())
        .filter_map(|((_, c), n)| dist.get(c).map(|t| (t, *n)))
        .filter(|(t, _)| fillable(t))
        .collect();
    if let Some(t) = draw(&cands, rng) {
        return Ok(t.clone());
    }
    sample_template(dist, fillable, rng)
}

/// Binomial coefficient C(n, k), exact.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Number of distinct query sequences bound `(T * C(N, S))^K` for `T`
/// templates, `S` slots per template, `N` columns, `K` turns.
pub fn variety_bound(t: u64, s: u64, n: u64, k: u32) -> Result<BigUint> {
    if s > n {
        return Err(Error::Domain(format!(
            "cannot choose {s} slots from {n} columns"
        )));
    }
    Ok((BigUint::from(t) * binomial(n, s)).pow(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    fn tpl(text: &str) -> CoarseTemplate {
        CoarseTemplate::parse(text, 1).unwrap()
    }

    fn dist_of(counts: &[(&str, u64)], bigrams: &[(&str, &str, u64)]) -> TemplateDistribution {
        let mut d = TemplateDistribution::default();
        for (t, c) in counts {
            d.add(tpl(t), *c);
        }
        for (p, c, n) in bigrams {
            d.add_bigram(&tpl(p), &tpl(c), *n);
        }
        d
    }

    const A: &str = "select text1";
    const B: &str = "select count ( * )";
    const C: &str = "select number1 where text1 = val";

    #[test]
    fn counts_add_up() {
        let d = dist_of(&[(A, 2), (B, 1)], &[]);
        assert_eq!(d.total(), 3);
        assert_eq!(d.count(&tpl(A)), 2);
        assert_eq!(d.count(&tpl(B)), 1);
    }

    #[test]
    fn single_template_is_certain() {
        let d = dist_of(&[(A, 1)], &[]);
        let mut rng = stream(1, 0);
        for _ in 0..20 {
            assert_eq!(sample_template(&d, |_| true, &mut rng).unwrap(), tpl(A));
        }
    }

    #[test]
    fn nothing_fillable_is_an_error() {
        let d = dist_of(&[(A, 1)], &[]);
        let mut rng = stream(1, 0);
        assert!(matches!(
            sample_template(&d, |_| false, &mut rng),
            Err(Error::Unfillable { .. })
        ));
    }

    #[test]
    fn frequencies_follow_counts() {
        let d = dist_of(&[(A, 3), (B, 1)], &[]);
        let mut rng = stream(42, 0);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_template(&d, |_| true, &mut rng).unwrap() == tpl(A))
            .count();
        assert!((hits as f64 / n as f64 - 0.75).abs() <= 0.02, "{hits}");
    }

    #[test]
    fn conditional_follows_bigrams_and_backs_off() {
        let d = dist_of(&[(A, 1), (B, 1), (C, 1)], &[(A, B, 2), (A, C, 1)]);
        let mut rng = stream(9, 0);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                sample_template_conditional(&d, &tpl(A), |_| true, &mut rng).unwrap() == tpl(B)
            })
            .count();
        assert!((hits as f64 / n as f64 - 2.0 / 3.0).abs() <= 0.02, "{hits}");

        // prev without continuations draws from the unigram
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            seen.insert(
                sample_template_conditional(&d, &tpl(B), |_| true, &mut rng)
                    .unwrap()
                    .text()
                    .to_string(),
            );
        }
        assert_eq!(seen.len(), 3);

        // the only continuation is unfillable: unigram restricted to fillable
        let d2 = dist_of(&[(A, 1), (B, 1), (C, 1)], &[(A, B, 1)]);
        for _ in 0..200 {
            let t = sample_template_conditional(&d2, &tpl(A), |t| t.text() != B, &mut rng).unwrap();
            assert_ne!(t.text(), B);
        }
    }

    #[test]
    fn variety_bound_examples() {
        assert_eq!(variety_bound(1, 1, 1, 1).unwrap(), BigUint::from(1u32));
        assert_eq!(variety_bound(2, 2, 3, 2).unwrap(), BigUint::from(36u32));
        assert_eq!(variety_bound(5, 2, 9, 0).unwrap(), BigUint::from(1u32));
        assert!(matches!(variety_bound(1, 3, 2, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn binomial_matches_pascal() {
        let mut row = vec![1u64];
        for n in 1..=30u64 {
            let mut next = vec![1u64; n as usize + 1];
            for k in 1..n as usize {
                next[k] = row[k - 1] + row[k];
            }
            row = next;
            for (k, v) in row.iter().enumerate() {
                assert_eq!(binomial(n, k as u64), BigUint::from(*v));
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let d = dist_of(&[(A, 2), (C, 1)], &[(A, C, 1)]);
        let back = TemplateDistribution::from_json(&d.to_json()).unwrap();
        assert_eq!(back.to_json(), d.to_json());
        assert_eq!(back.bigram_count(&tpl(A), &tpl(C)), 1);
    }
}
