//! Ranking evaluation: TREC qrels/run files, per-query metrics, the MRR
//! drop rate between clean and typo queries, replica averaging, paired
//! t-tests and the tokenization-difference breakdown.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("query {qid}: {msg}")]
    InvalidRun { qid: String, msg: String },
    #[error("clean runs have zero total reciprocal rank")]
    AllZeroDenominator,
    #[error("query sets differ: {0}")]
    QueryMismatch(String),
    #[error("replicas cover different queries: {0}")]
    ReplicaMismatch(String),
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired values, got {0}")]
    TooFewSamples(usize),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, EvalError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|source| EvalError::File {
            path: path.display().to_string(),
            source,
        })
}

/// Graded judgments, `qid -> pid -> grade` with grades in `0..=3`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judged: BTreeMap<String, BTreeMap<String, u8>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, pid: &str, grade: u8) -> Result<(), EvalError> {
        if grade > 3 {
            return Err(EvalError::Parse {
                line: 0,
                msg: format!("grade {grade} outside 0..=3"),
            });
        }
        self.judged
            .entry(qid.to_string())
            .or_default()
            .insert(pid.to_string(), grade);
        Ok(())
    }

    /// Parse TREC qrels lines `qid iter pid grade`.
    pub fn from_reader<R: BufRead>(r: R) -> Result<Self, EvalError> {
        let mut q = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = |msg: String| EvalError::Parse { line: i + 1, msg };
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            let grade: i64 = fields[3]
                .parse()
                .map_err(|_| bad(format!("bad grade {:?}", fields[3])))?;
            if !(0..=3).contains(&grade) {
                return Err(bad(format!("grade {grade} outside 0..=3")));
            }
            q.insert(fields[0], fields[2], grade as u8)?;
        }
        Ok(q)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_reader(open(path.as_ref())?)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (qid, docs) in &self.judged {
            for (pid, g) in docs {
                writeln!(w, "{qid} 0 {pid} {g}")?;
            }
        }
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&BTreeMap<String, u8>> {
        self.judged.get(qid)
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.judged.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judged.is_empty()
    }

    /// Passages with grade at or above `threshold`.
    pub fn relevant(&self, qid: &str, threshold: u8) -> Vec<&str> {
        self.judged.get(qid).map_or_else(Vec::new, |docs| {
            docs.iter()
                .filter(|(_, &g)| g >= threshold)
                .map(|(p, _)| p.as_str())
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub pid: String,
    pub score: f64,
}

/// Ranked lists per query; rank is the position in the list plus one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    pub tag: String,
    pub queries: BTreeMap<String, Vec<Ranked>>,
}

impl RunFile {
    pub fn new(tag: &str) -> Self {
        Self {
            tag: tag.to_string(),
            queries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, qid: &str, results: Vec<(String, f64)>) {
        self.queries.insert(
            qid.to_string(),
            results.into_iter().map(|(pid, score)| Ranked { pid, score }).collect(),
        );
    }

    /// Parse TREC run lines `qid Q0 pid rank score tag`, checking that ranks
    /// are contiguous from 1 and scores never increase with rank.
    pub fn from_reader<R: BufRead>(r: R) -> Result<Self, EvalError> {
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        let mut tag = String::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = |msg: String| EvalError::Parse { line: i + 1, msg };
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let rank: usize = f[3].parse().map_err(|_| bad(format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4].parse().map_err(|_| bad(format!("bad score {:?}", f[4])))?;
            if !score.is_finite() {
                return Err(bad("non-finite score".into()));
            }
            tag = f[5].to_string();
            rows.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
        }
        let mut run = RunFile::new(&tag);
        for (qid, mut list) in rows {
            list.sort_by_key(|r| r.0);
            for (i, (rank, _, score)) in list.iter().enumerate() {
                if *rank != i + 1 {
                    return Err(EvalError::InvalidRun {
                        qid,
                        msg: format!("ranks are not contiguous from 1 (found {rank} at position {})", i + 1),
                    });
                }
                if i > 0 && *score > list[i - 1].2 {
                    return Err(EvalError::InvalidRun {
                        qid,
                        msg: format!("score increases at rank {rank}"),
                    });
                }
            }
            run.queries.insert(
                qid,
                list.into_iter().map(|(_, pid, score)| Ranked { pid, score }).collect(),
            );
        }
        Ok(run)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_reader(open(path.as_ref())?)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (qid, list) in &self.queries {
            write_trec_ranking(&mut w, qid, list.iter().map(|r| (r.pid.as_str(), r.score)), &self.tag)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)
    }
}

/// Write one query's ranking in TREC format.
pub fn write_trec_ranking<'a, W: Write>(
    mut w: W,
    qid: &str,
    ranking: impl IntoIterator<Item = (&'a str, f64)>,
    tag: &str,
) -> std::io::Result<()> {
    for (i, (pid, score)) in ranking.into_iter().enumerate() {
        writeln!(w, "{qid} Q0 {pid} {} {score:.6} {tag}", i + 1)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    /// Reciprocal rank of the first relevant passage within the cutoff.
    RR(usize),
    Recall(usize),
    Ndcg(usize),
    AP,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::RR(k) => write!(f, "RR@{k}"),
            Metric::Recall(k) => write!(f, "R@{k}"),
            Metric::Ndcg(k) => write!(f, "nDCG@{k}"),
            Metric::AP => f.write_str("AP"),
        }
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "map" || lower == "ap" {
            return Ok(Metric::AP);
        }
        let unknown = || EvalError::UnknownMetric(s.to_string());
        let (name, k) = lower.split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(unknown());
        }
        match name {
            "mrr" | "rr" => Ok(Metric::RR(k)),
            "r" | "recall" => Ok(Metric::Recall(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            _ => Err(unknown()),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, EvalError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub const DEFAULT_METRICS: [Metric; 5] = [Metric::RR(10), Metric::RR(1000), Metric::Recall(1000), Metric::Ndcg(10), Metric::AP];

/// Value of one metric for one ranked list.
pub fn metric_value(metric: Metric, ranking: &[Ranked], judged: &BTreeMap<String, u8>, threshold: u8) -> f64 {
    let is_rel = |pid: &str| judged.get(pid).is_some_and(|&g| g >= threshold);
    let n_rel = judged.values().filter(|&&g| g >= threshold).count();
    match metric {
        Metric::RR(k) => ranking
            .iter()
            .take(k)
            .position(|r| is_rel(&r.pid))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64),
        Metric::Recall(k) => {
            if n_rel == 0 {
                0.0
            } else {
                ranking.iter().take(k).filter(|r| is_rel(&r.pid)).count() as f64 / n_rel as f64
            }
        }
        Metric::AP => {
            if n_rel == 0 {
                return 0.0;
            }
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (i, r) in ranking.iter().enumerate() {
                if is_rel(&r.pid) {
                    hits += 1;
                    sum += hits as f64 / (i + 1) as f64;
                }
            }
            sum / n_rel as f64
        }
        Metric::Ndcg(k) => {
            let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
            let dcg: f64 = ranking
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, r)| judged.get(&r.pid).copied().unwrap_or(0) as f64 * discount(i))
                .sum();
            let mut grades: Vec<u8> = judged.values().copied().filter(|&g| g > 0).collect();
            grades.sort_unstable_by(|a, b| b.cmp(a));
            let ideal: f64 = grades
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, &g)| g as f64 * discount(i))
                .sum();
            if ideal == 0.0 {
                0.0
            } else {
                dcg / ideal
            }
        }
    }
}

/// Per-query values of several metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    /// One value per metric, in `metrics` order.
    pub per_query: BTreeMap<String, Vec<f64>>,
    /// Queries in the run that have no judgments.
    pub unjudged: Vec<String>,
}

impl MetricReport {
    fn column(&self, metric: Metric) -> Option<usize> {
        self.metrics.iter().position(|&m| m == metric)
    }

    /// `qid -> value` for one metric.
    pub fn values(&self, metric: Metric) -> BTreeMap<String, f64> {
        let c = self.column(metric).expect("metric not in report");
        self.per_query.iter().map(|(q, v)| (q.clone(), v[c])).collect()
    }

    pub fn mean(&self, metric: Metric) -> f64 {
        let c = self.column(metric).expect("metric not in report");
        if self.per_query.is_empty() {
            return 0.0;
        }
        self.per_query.values().map(|v| v[c]).sum::<f64>() / self.per_query.len() as f64
    }

    /// Per-query rows followed by an `all` row with the means.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("qid");
        for m in &self.metrics {
            out.push('\t');
            out.push_str(&m.to_string());
        }
        out.push('\n');
        for (q, v) in &self.per_query {
            out.push_str(q);
            for x in v {
                out.push_str(&format!("\t{x:.6}"));
            }
            out.push('\n');
        }
        out.push_str("all");
        for &m in &self.metrics {
            out.push_str(&format!("\t{:.6}", self.mean(m)));
        }
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for &m in &self.metrics {
            out.push_str(&format!("{:<10} {:.4}\n", m.to_string(), self.mean(m)));
        }
        out.push_str(&format!("{:<10} {}\n", "queries", self.per_query.len()));
        out
    }
}

/// Evaluate every judged query of `run`. `threshold` is the minimum grade
/// counted as relevant for RR, recall and AP; nDCG uses the raw grades.
pub fn per_query_metrics(run: &RunFile, qrels: &Qrels, metrics: &[Metric], threshold: u8) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut unjudged = Vec::new();
    for (qid, ranking) in &run.queries {
        match qrels.get(qid) {
            Some(judged) => {
                let v = metrics.iter().map(|&m| metric_value(m, ranking, judged, threshold)).collect();
                per_query.insert(qid.clone(), v);
            }
            None => unjudged.push(qid.clone()),
        }
    }
    if !unjudged.is_empty() {
        log::info!("{} run queries have no judgments and were excluded", unjudged.len());
    }
    MetricReport {
        metrics: metrics.to_vec(),
        per_query,
        unjudged,
    }
}

fn same_keys<V>(a: &BTreeMap<String, V>, b: &BTreeMap<String, V>) -> Option<String> {
    if a.len() == b.len() && a.keys().zip(b.keys()).all(|(x, y)| x == y) {
        return None;
    }
    let first = a
        .keys()
        .find(|k| !b.contains_key(*k))
        .or_else(|| b.keys().find(|k| !a.contains_key(*k)));
    Some(format!("query {:?} is not in both sets", first.cloned().unwrap_or_default()))
}

/// Relative loss of reciprocal rank when typo queries replace clean ones:
/// `Σ(RR_clean − RR_typo) / Σ RR_clean`, with queries whose clean RR is
/// zero left out of both sums.
pub fn mrr_drop_rate(clean: &BTreeMap<String, f64>, typo: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    if let Some(msg) = same_keys(clean, typo) {
        return Err(EvalError::QueryMismatch(msg));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (q, &c) in clean {
        if c > 0.0 {
            num += c - typo[q];
            den += c;
        }
    }
    if den == 0.0 {
        return Err(EvalError::AllZeroDenominator);
    }
    Ok(num / den)
}

/// Average per query across replicas.
pub fn replica_average_values(replicas: &[BTreeMap<String, f64>]) -> Result<BTreeMap<String, f64>, EvalError> {
    let first = replicas
        .first()
        .ok_or_else(|| EvalError::ReplicaMismatch("no replicas".into()))?;
    for r in &replicas[1..] {
        if let Some(msg) = same_keys(first, r) {
            return Err(EvalError::ReplicaMismatch(msg));
        }
    }
    let n = replicas.len() as f64;
    Ok(first
        .keys()
        .map(|q| (q.clone(), replicas.iter().map(|r| r[q]).sum::<f64>() / n))
        .collect())
}

/// Per-query replica means for every metric; the report mean is then the
/// mean of those per-query means.
pub fn replica_average(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::ReplicaMismatch("no replicas".into()))?;
    for r in &reports[1..] {
        if r.metrics != first.metrics {
            return Err(EvalError::ReplicaMismatch("metric lists differ".into()));
        }
        if let Some(msg) = same_keys(&first.per_query, &r.per_query) {
            return Err(EvalError::ReplicaMismatch(msg));
        }
    }
    let n = reports.len() as f64;
    let per_query = first
        .per_query
        .keys()
        .map(|q| {
            let v = (0..first.metrics.len())
                .map(|c| reports.iter().map(|r| r.per_query[q][c]).sum::<f64>() / n)
                .collect();
            (q.clone(), v)
        })
        .collect();
    Ok(MetricReport {
        metrics: first.metrics.clone(),
        per_query,
        unjudged: first.unjudged.clone(),
    })
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-tailed paired t-test on `a − b`. When every difference is zero the
/// result is `t = 0, p = 1`; when every difference is the same nonzero
/// value the limiting `t = ±∞, p = 0` is returned.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
        return Ok(TTest { t, p, df, mean_diff: mean });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_tailed(t, df as f64),
        df,
        mean_diff: mean,
    })
}

pub fn bonferroni(p: f64, comparisons: usize) -> f64 {
    (p * comparisons as f64).min(1.0)
}

/// One clean/typo pair's measurements for the difference breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMeasure {
    pub difference: usize,
    pub rr_clean: f64,
    pub rr_typo: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub bin: usize,
    pub count: usize,
    /// `None` when every clean RR in the bin is zero.
    pub delta_mrr: Option<f64>,
    pub cosine_mean: f64,
    pub cosine_sd: f64,
}

pub const MAX_BIN: usize = 5;

/// Group pairs by tokenization difference. Only bins `1..=MAX_BIN` that
/// receive at least one pair are reported.
pub fn bin_by_token_difference(pairs: &[PairMeasure]) -> Vec<BinRow> {
    let mut bins: BTreeMap<usize, Vec<&PairMeasure>> = BTreeMap::new();
    let mut dropped = 0usize;
    for p in pairs {
        if (1..=MAX_BIN).contains(&p.difference) {
            bins.entry(p.difference).or_default().push(p);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::info!("{dropped} pairs outside difference bins 1..={MAX_BIN} dropped");
    }
    bins.into_iter()
        .map(|(bin, ps)| {
            let (mut num, mut den) = (0.0, 0.0);
            for p in &ps {
                if p.rr_clean > 0.0 {
                    num += p.rr_clean - p.rr_typo;
                    den += p.rr_clean;
                }
            }
            let n = ps.len() as f64;
            let mean = ps.iter().map(|p| p.cosine).sum::<f64>() / n;
            let sd = if ps.len() > 1 {
                (ps.iter().map(|p| (p.cosine - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            BinRow {
                bin,
                count: ps.len(),
                delta_mrr: (den > 0.0).then(|| num / den),
                cosine_mean: mean,
                cosine_sd: sd,
            }
        })
        .collect()
}

pub fn bins_to_tsv(rows: &[BinRow]) -> String {
    let mut out = String::from("bin\tcount\tdelta_mrr\tcosine_mean\tcosine_sd\n");
    for r in rows {
        let d = r.delta_mrr.map_or_else(|| "nan".to_string(), |d| format!("{d:.6}"));
        out.push_str(&format!("{}\t{}\t{d}\t{:.6}\t{:.6}\n", r.bin, r.count, r.cosine_mean, r.cosine_sd));
    }
    out
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn run_of(qid: &str, pids: &[&str]) -> RunFile {
        let mut run = RunFile::new("t");
        let n = pids.len();
        run.insert(qid, pids.iter().enumerate().map(|(i, p)| (p.to_string(), (n - i) as f64)).collect());
        run
    }

    fn qrels_of(rows: &[(&str, &str, u8)]) -> Qrels {
        let mut q = Qrels::new();
        for &(qid, pid, g) in rows {
            q.insert(qid, pid, g).unwrap();
        }
        q
    }

    #[test]
    fn reciprocal_rank_of_third() {
        let run = run_of("q", &["a", "b", "c", "d"]);
        let q = qrels_of(&[("q", "c", 1)]);
        let r = per_query_metrics(&run, &q, &[Metric::RR(10), Metric::RR(2)], 1);
        assert_eq!(r.per_query["q"], vec![1.0 / 3.0, 0.0]);
    }

    #[test]
    fn ideal_ordering_has_unit_ndcg() {
        let run = run_of("q", &["a", "b", "c", "x"]);
        let q = qrels_of(&[("q", "a", 3), ("q", "b", 2), ("q", "c", 1)]);
        let r = per_query_metrics(&run, &q, &[Metric::Ndcg(10)], 2);
        assert_eq!(r.per_query["q"][0], 1.0);
    }

    #[test]
    fn graded_two_document_ndcg() {
        // doc1 has grade 1, doc2 grade 2; retrieved in that order
        let run = run_of("q", &["doc1", "doc2"]);
        let q = qrels_of(&[("q", "doc1", 1), ("q", "doc2", 2)]);
        let r = per_query_metrics(&run, &q, &[Metric::Ndcg(10), Metric::RR(10), Metric::AP], 2);
        let dcg = 1.0 + 2.0 / 3f64.log2();
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert_abs_diff_eq!(r.per_query["q"][0], dcg / idcg, epsilon = 1e-12);
        assert_eq!(r.per_query["q"][1], 0.5);
        assert_eq!(r.per_query["q"][2], 0.5);
    }

    #[test]
    fn recall_and_ap() {
        let run = run_of("q", &["r1", "n", "r2", "n2"]);
        let q = qrels_of(&[("q", "r1", 1), ("q", "r2", 1), ("q", "r3", 1), ("q", "n", 0)]);
        let r = per_query_metrics(&run, &q, &[Metric::Recall(1000), Metric::AP, Metric::Recall(1)], 1);
        assert_abs_diff_eq!(r.per_query["q"][0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_query["q"][1], (1.0 + 2.0 / 3.0) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_query["q"][2], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn unjudged_queries_are_excluded() {
        let mut run = run_of("q", &["a"]);
        run.insert("other", vec![("a".into(), 1.0)]);
        let r = per_query_metrics(&run, &qrels_of(&[("q", "a", 1)]), &[Metric::RR(10)], 1);
        assert_eq!(r.per_query.len(), 1);
        assert_eq!(r.unjudged, vec!["other".to_string()]);
        assert_eq!(r.mean(Metric::RR(10)), 1.0);
    }

    #[test]
    fn trec_roundtrip_and_validation() {
        let mut run = RunFile::new("dense");
        run.insert("1", vec![("7".into(), 2.5), ("3".into(), 1.0)]);
        run.insert("2", vec![("9".into(), -0.5)]);
        let mut buf = Vec::new();
        run.write(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "1 Q0 7 1 2.500000 dense\n1 Q0 3 2 1.000000 dense\n2 Q0 9 1 -0.500000 dense\n"
        );
        assert_eq!(RunFile::from_reader(&buf[..]).unwrap(), run);
        let gap = "1 Q0 a 1 2.0 t\n1 Q0 b 3 1.0 t\n";
        assert!(matches!(RunFile::from_reader(gap.as_bytes()), Err(EvalError::InvalidRun { .. })));
        let up = "1 Q0 a 1 1.0 t\n1 Q0 b 2 2.0 t\n";
        assert!(matches!(RunFile::from_reader(up.as_bytes()), Err(EvalError::InvalidRun { .. })));
        let q = Qrels::from_reader("1 0 a 2\n1 0 b 0\n".as_bytes()).unwrap();
        assert_eq!(q.relevant("1", 2), vec!["a"]);
        assert!(Qrels::from_reader("1 0 a 4\n".as_bytes()).is_err());
    }

    #[test]
    fn metric_names() {
        assert_eq!(
            parse_metrics("mrr@10,r@1000,ndcg@10,map").unwrap(),
            vec![Metric::RR(10), Metric::Recall(1000), Metric::Ndcg(10), Metric::AP]
        );
        assert!("p@5".parse::<Metric>().is_err());
        assert_eq!(Metric::Ndcg(10).to_string(), "nDCG@10");
    }

    fn map(v: &[f64]) -> BTreeMap<String, f64> {
        v.iter().enumerate().map(|(i, &x)| (format!("q{i}"), x)).collect()
    }

    #[test]
    fn drop_rate_examples() {
        assert_eq!(mrr_drop_rate(&map(&[1.0, 0.5]), &map(&[1.0, 0.5])).unwrap(), 0.0);
        assert_abs_diff_eq!(mrr_drop_rate(&map(&[1.0, 0.5]), &map(&[0.5, 0.5])).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(mrr_drop_rate(&map(&[1.0, 0.5, 0.0]), &map(&[0.0, 0.0, 1.0])).unwrap(), 1.0);
        assert!(matches!(mrr_drop_rate(&map(&[0.0]), &map(&[0.0])), Err(EvalError::AllZeroDenominator)));
        assert!(matches!(mrr_drop_rate(&map(&[1.0]), &map(&[1.0, 0.0])), Err(EvalError::QueryMismatch(_))));
    }

    #[test]
    fn replica_means() {
        let a = replica_average_values(&[map(&[0.2, 1.0]), map(&[0.4, 0.0])]).unwrap();
        assert_abs_diff_eq!(a["q0"], 0.3, epsilon = 1e-15);
        assert_eq!(a["q1"], 0.5);
        let one = replica_average_values(&[map(&[0.2, 1.0])]).unwrap();
        assert_eq!(one, map(&[0.2, 1.0]));
        assert!(matches!(
            replica_average_values(&[map(&[0.2, 1.0]), map(&[0.2])]),
            Err(EvalError::ReplicaMismatch(_))
        ));
    }

    #[test]
    fn t_test_examples() {
        let t = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap();
        assert_abs_diff_eq!(t.t, 3.872983346207417, epsilon = 1e-12);
        assert_abs_diff_eq!(t.p, 0.0305, epsilon = 5e-5);
        let same = paired_t_test(&[0.3, 0.5, 0.1], &[0.3, 0.5, 0.1]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let shift = paired_t_test(&[1.0, 2.0, 3.0], &[0.5, 1.5, 2.5]).unwrap();
        assert_eq!(shift.p, 0.0);
        assert!(matches!(paired_t_test(&[1.0], &[0.0]), Err(EvalError::TooFewSamples(1))));
        assert!(matches!(paired_t_test(&[1.0, 2.0], &[0.0]), Err(EvalError::LengthMismatch(2, 1))));
        assert_abs_diff_eq!(bonferroni(0.02, 5), 0.1, epsilon = 1e-15);
        assert_eq!(bonferroni(0.4, 5), 1.0);
    }

    #[test]
    fn gamma_and_beta_identities() {
        assert_abs_diff_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-13);
        // I_x(1, 1) = x and I_x(a, 1) = x^a
        assert_abs_diff_eq!(regularized_incomplete_beta(1.0, 1.0, 0.3), 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(regularized_incomplete_beta(3.0, 1.0, 0.6), 0.216, epsilon = 1e-14);
        // t with 1 df is Cauchy: P(|T| > 1) = 1/2
        assert_abs_diff_eq!(student_t_two_tailed(1.0, 1.0), 0.5, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn t_pvalue_matches_statrs(t in -8.0f64..8.0, df in 1usize..60) {
            let dist = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            let want = 2.0 * dist.cdf(-t.abs());
            prop_assert!((student_t_two_tailed(t, df as f64) - want).abs() < 1e-9);
        }

        #[test]
        fn drop_rate_order_invariant(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..20)) {
            let clean: Vec<f64> = v.iter().map(|p| p.0).collect();
            let typo: Vec<f64> = v.iter().map(|p| p.1).collect();
            let a = mrr_drop_rate(&map(&clean), &map(&typo)).unwrap();
            let rc: Vec<f64> = clean.iter().rev().copied().collect();
            let rt: Vec<f64> = typo.iter().rev().copied().collect();
            let b = mrr_drop_rate(&map(&rc), &map(&rt)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_bounded(
            order in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
            grades in prop::collection::vec(0u8..4, 12),
        ) {
            let pids: Vec<String> = order.iter().map(|i| format!("p{i}")).collect();
            let refs: Vec<&str> = pids.iter().map(String::as_str).collect();
            let run = run_of("q", &refs[..8]);
            let rows: Vec<(String, u8)> = grades.iter().enumerate().map(|(i, &g)| (format!("p{i}"), g)).collect();
            let mut q = Qrels::new();
            for (p, g) in &rows { q.insert("q", p, *g).unwrap(); }
            let r = per_query_metrics(&run, &q, &DEFAULT_METRICS, 2);
            let v = &r.per_query["q"];
            prop_assert!(v.iter().all(|x| (0.0..=1.0 + 1e-12).contains(x)));
            prop_assert!(v[0] <= v[1]);
        }
    }

    #[test]
    fn bins_single_and_identity() {
        let pairs: Vec<PairMeasure> = (0..4)
            .map(|i| PairMeasure {
                difference: 2,
                rr_clean: 1.0 / (i + 1) as f64,
                rr_typo: 1.0 / (i + 1) as f64,
                cosine: 1.0,
            })
            .collect();
        let rows = bin_by_token_difference(&pairs);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bin, 2);
        assert_eq!(rows[0].count, 4);
        assert_eq!(rows[0].delta_mrr, Some(0.0));
        assert_eq!((rows[0].cosine_mean, rows[0].cosine_sd), (1.0, 0.0));
        let far = PairMeasure {
            difference: 7,
            rr_clean: 1.0,
            rr_typo: 0.0,
            cosine: 0.1,
        };
        assert!(bin_by_token_difference(&[far]).is_empty());
        assert!(bins_to_tsv(&rows).starts_with("bin\tcount\tdelta_mrr\tcosine_mean\tcosine_sd\n2\t4\t"));
    }

    #[test]
    fn spearman_cases() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]), -1.0, epsilon = 1e-15);
        assert!(spearman(&[1.0, 2.0], &[5.0, 5.0]).is_nan());
        // ties share ranks: x ranks [1,2,3,4], y ranks [1.5,1.5,3,4]
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 2.0]);
        let want = 4.5 / (5.0f64 * 4.5).sqrt();
        assert_abs_diff_eq!(rho, want, epsilon = 1e-12);
        assert_abs_diff_eq!(ols_slope(&[1.0, 2.0, 3.0], &[1.0, 3.0, 5.0]), 2.0, epsilon = 1e-15);
    }
}
