//! Data-driven layer importance: rank layers by how replaceable they look,
//! either from activation cosine similarity (a layer whose output barely
//! moves its input contributes little) or from the error delta of a
//! one-layer replacement.

use crate::convert::{assemble_hybrid, TransferOptions};
use crate::distill::evaluate;
use crate::layout::{layout_from_ranking, LayerKind, LayerLayout};
use crate::matrix::dot_f64;
use crate::model::HybridModel;
use crate::tape::Tape;
use crate::tasks::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Mean cosine similarity between a block's input and output; high
    /// similarity means low contribution, replaced first.
    Cosine,
    /// Token-error-rate delta of the single-layer transfer-initialized
    /// replacement; small degradation means replaced first.
    ErrorDelta,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Cosine => "cosine",
            Criterion::ErrorDelta => "error-delta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub criterion: Criterion,
    /// score[i] of layer i: mean cosine similarity for the cosine criterion
    /// (high = replaceable), error delta for the error criterion (low =
    /// replaceable).
    pub scores: Vec<f64>,
    /// Layer indices sorted most-replaceable first, ties to the lower index.
    pub ranking: Vec<usize>,
}

impl ImportanceReport {
    pub fn from_scores(criterion: Criterion, scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "importance" });
        }
        // replaceability key: ascending 1 - cosine, or ascending error delta
        let key = |i: usize| match criterion {
            Criterion::Cosine => 1.0 - scores[i],
            Criterion::ErrorDelta => scores[i],
        };
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b)));
        Ok(ImportanceReport {
            criterion,
            scores,
            ranking,
        })
    }

    /// Rank position of each layer (0 = first to replace).
    pub fn rank_of(&self) -> Vec<usize> {
        let mut rank = vec![0usize; self.ranking.len()];
        for (pos, &layer) in self.ranking.iter().enumerate() {
            rank[layer] = pos;
        }
        rank
    }

    pub const CSV_HEADER: &'static str = "layer,score,rank";

    pub fn to_csv(&self) -> String {
        let rank = self.rank_of();
        let mut out = format!("# criterion = {}\n{}\n", self.criterion.name(), Self::CSV_HEADER);
        for (layer, &score) in self.scores.iter().enumerate() {
            out.push_str(&format!("{layer},{score:?},{}\n", rank[layer]));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut criterion = Criterion::Cosine;
        let mut rows: Vec<(usize, f64, usize)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line == Self::CSV_HEADER {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("criterion =") {
                    criterion = match v.trim() {
                        "cosine" => Criterion::Cosine,
                        "error-delta" => Criterion::ErrorDelta,
                        other => {
                            return Err(Error::Config(format!("unknown criterion '{other}'")))
                        }
                    };
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("bad importance row '{line}'")));
            }
            let layer = parts[0]
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer index '{}'", parts[0])))?;
            let score = parts[1]
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad score '{}'", parts[1])))?;
            let rank = parts[2]
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad rank '{}'", parts[2])))?;
            rows.push((layer, score, rank));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::Config("importance rows do not cover 0..depth".into()));
        }
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let report = ImportanceReport::from_scores(criterion, scores)?;
        Ok(report)
    }
}

/// Cosine-similarity scoring over probe sequences: score(i) is the mean
/// over positions of cos(block input, block output); the most pass-through
/// layer ranks first for replacement.
pub fn score_layers_cosine(
    teacher: &HybridModel,
    probe: &Dataset,
    max_probes: usize,
) -> Result<ImportanceReport> {
    if probe.samples.is_empty() {
        return Err(Error::Task("empty probe set".into()));
    }
    let n = if max_probes == 0 {
        probe.samples.len()
    } else {
        probe.samples.len().min(max_probes)
    };
    let values = teacher.export_params();
    let depth = teacher.depth();
    let mut sums = vec![0.0f64; depth];
    let mut counts = vec![0usize; depth];
    let mut t = Tape::new();
    let staged = teacher.stage(&mut t, &values, false);
    let mark = t.len();
    for sample in probe.samples.iter().take(n) {
        let (inputs, _, _) = sample.training_view();
        let (_, _, spans) = teacher.tape_logits_traced(&mut t, &staged, inputs)?;
        for (i, &(inp, out)) in spans.iter().enumerate() {
            let mi = t.value(inp);
            let mo = t.value(out);
            for r in 0..mi.rows() {
                let a = mi.row(r);
                let b = mo.row(r);
                let na = dot_f64(a, a).sqrt();
                let nb = dot_f64(b, b).sqrt();
                if na > 0.0 && nb > 0.0 {
                    sums[i] += dot_f64(a, b) / (na * nb);
                    counts[i] += 1;
                }
            }
        }
        t.truncate(mark);
    }
    let scores = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c.max(1) as f64)
        .collect();
    ImportanceReport::from_scores(Criterion::Cosine, scores)
}

/// Error-delta scoring: for each layer, build the one-layer hybrid (transfer
/// init, no training), evaluate the token error rate on the task, and score
/// by degradation relative to the teacher.
pub fn score_layers_error(
    teacher: &HybridModel,
    eval_ds: &Dataset,
    max_samples: usize,
    opts: &TransferOptions,
) -> Result<ImportanceReport> {
    let depth = teacher.depth();
    let base = evaluate(teacher, eval_ds, max_samples)?.ter;
    let mut scores = Vec::with_capacity(depth);
    for layer in 0..depth {
        let kinds: Vec<LayerKind> = (0..depth)
            .map(|i| if i == layer { LayerKind::M } else { LayerKind::T })
            .collect();
        let hybrid = assemble_hybrid(teacher, &LayerLayout::new(kinds), opts)?;
        let ter = evaluate(&hybrid, eval_ds, max_samples)?.ter;
        scores.push(ter - base);
    }
    ImportanceReport::from_scores(Criterion::ErrorDelta, scores)
}

/// The Importance strategy: replace the n_m most replaceable layers.
pub fn build_layout_importance(report: &ImportanceReport, n_m: usize) -> Result<LayerLayout> {
    layout_from_ranking(&report.ranking, n_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_sorts_scores_with_index_ties() {
        // cosine: highest similarity replaced first, ties to lower index
        let r = ImportanceReport::from_scores(
            Criterion::Cosine,
            vec![0.5, 0.9, 0.5, 1.0],
        )
        .unwrap();
        assert_eq!(r.ranking, vec![3, 1, 0, 2]);
        assert_eq!(r.rank_of(), vec![2, 1, 3, 0]);
        let layout = build_layout_importance(&r, 2).unwrap();
        assert_eq!(layout.to_string(), "TMTM");

        // error delta: smallest degradation replaced first
        let r = ImportanceReport::from_scores(
            Criterion::ErrorDelta,
            vec![0.3, 0.0, 0.1, 0.3],
        )
        .unwrap();
        assert_eq!(r.ranking, vec![1, 2, 0, 3]);
    }

    #[test]
    fn csv_roundtrip() {
        let r = ImportanceReport::from_scores(
            Criterion::ErrorDelta,
            vec![0.25, -0.035, 0.0, 1.5e-3],
        )
        .unwrap();
        let text = r.to_csv();
        let back = ImportanceReport::parse_csv(&text).unwrap();
        assert_eq!(r, back);
    }
}
