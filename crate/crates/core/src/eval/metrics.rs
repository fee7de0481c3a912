use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no triplets to evaluate")]
    Empty,
    #[error("embedding widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("score vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} items, found {found}")]
    TooFew { needed: usize, found: usize },
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L2,
    /// `1 - cos(a, b)`.
    Cosine,
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::WidthMismatch(a.len(), b.len()));
    }
    Ok(match metric {
        Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    })
}

/// Embeddings of one triplet: `[target, sem_src, syn_src]`.
pub type TripletEmbedding = [Vec<f64>; 3];

/// Fraction of triplets whose target is closer to `sem_src` than to `syn_src`; ties count 0.5.
pub fn separation_from_embeddings(emb: &[TripletEmbedding], metric: Metric) -> Result<f64, EvalError> {
    if emb.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut score = 0.0;
    for [t, sem, syn] in emb {
        let d_sem = distance(t, sem, metric)?;
        let d_syn = distance(t, syn, metric)?;
        score += if d_sem < d_syn {
            1.0
        } else if d_sem == d_syn {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / emb.len() as f64)
}

/// Separation probability with embeddings produced on demand.
pub fn separation_probability<E>(
    triplets: &[crate::data::TripletRecord],
    mut embed: impl FnMut(&str) -> Result<Vec<f64>, E>,
    metric: Metric,
) -> Result<f64, EvalError>
where
    EvalError: From<E>,
{
    let emb = triplets
        .iter()
        .map(|t| Ok([embed(&t.target)?, embed(&t.sem_src)?, embed(&t.syn_src)?]))
        .collect::<Result<Vec<_>, E>>()?;
    separation_from_embeddings(&emb, metric)
}

/// Outcome of choosing which latent slot plays the semantic and syntactic role.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSelection {
    /// 0-based slot with the highest separation probability.
    pub sem_slot: usize,
    /// 0-based slot with the lowest separation probability.
    pub syn_slot: usize,
    pub probabilities: Vec<f64>,
    /// True when the extreme value was shared by several slots.
    pub tie: bool,
}

/// Picks the slots from per-slot separation probabilities; ties go to the lowest index.
pub fn select_from_probabilities(probabilities: Vec<f64>) -> Result<SlotSelection, EvalError> {
    if probabilities.len() < 2 {
        return Err(EvalError::TooFew {
            needed: 2,
            found: probabilities.len(),
        });
    }
    let max = probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = probabilities.iter().copied().fold(f64::INFINITY, f64::min);
    let sem_slot = probabilities.iter().position(|&p| p == max).expect("non-empty");
    let syn_slot = probabilities.iter().position(|&p| p == min).expect("non-empty");
    let tie = probabilities.iter().filter(|&&p| p == max).count() > 1
        || probabilities.iter().filter(|&&p| p == min).count() > 1;
    Ok(SlotSelection {
        sem_slot,
        syn_slot,
        probabilities,
        tie,
    })
}

/// Slot selection for a model whose latent is a bank of `L` slot vectors.
///
/// `embed` returns one vector per slot.
pub fn select_advae_variables<E>(
    dev: &[crate::data::TripletRecord],
    mut embed: impl FnMut(&str) -> Result<Vec<Vec<f64>>, E>,
    metric: Metric,
) -> Result<SlotSelection, EvalError>
where
    EvalError: From<E>,
{
    if dev.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_slot: Vec<Vec<TripletEmbedding>> = Vec::new();
    for t in dev {
        let (a, b, c) = (embed(&t.target)?, embed(&t.sem_src)?, embed(&t.syn_src)?);
        if per_slot.is_empty() {
            per_slot = vec![Vec::new(); a.len()];
        }
        for (l, slot) in per_slot.iter_mut().enumerate() {
            slot.push([a[l].clone(), b[l].clone(), c[l].clone()]);
        }
    }
    let probs = per_slot
        .iter()
        .map(|e| separation_from_embeddings(e, metric))
        .collect::<Result<Vec<_>, _>>()?;
    select_from_probabilities(probs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFew { needed: 2, found: n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, df, p_value: p });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    Ok(TTest {
        t,
        df,
        p_value: 2.0 * (1.0 - dist.cdf(t.abs())),
    })
}

/// Precomputed similarity score between two sentence ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub id_a: String,
    pub id_b: String,
    pub score: f64,
}

/// Reads `id_a \t id_b \t score` lines.
pub fn load_similarity_scores(path: impl AsRef<Path>) -> Result<Vec<Similarity>, EvalError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let fmt = |msg: String| EvalError::Format {
            path: p.clone(),
            line: i + 1,
            msg,
        };
        if cols.len() != 3 {
            return Err(fmt(format!("expected 3 columns, found {}", cols.len())));
        }
        let score = cols[2].trim().parse().map_err(|_| fmt(format!("bad score '{}'", cols[2])))?;
        out.push(Similarity {
            id_a: cols[0].to_string(),
            id_b: cols[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Rows of a results table written as TSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    /// Separation table: one row per model and variable.
    pub fn separation() -> Self {
        Report::with_header(&["model", "variable", "metric", "probability"])
    }

    /// Transfer table: syntactic metrics per model.
    pub fn transfer() -> Self {
        Report::with_header(&["model", "n", "sted", "tma2", "tma3"])
    }

    pub fn with_header(cols: &[&str]) -> Self {
        Report {
            header: cols.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "report row width");
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }
}
