//! Likert item statistics and composite user-assessment metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::round2;

pub const BUNDLED_QUESTIONNAIRE: &str = include_str!("../data/questionnaire.tsv");

/// Printed means within this distance of the recomputed value agree.
pub const MEAN_TOLERANCE: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurveyError {
    #[error("item has no responses")]
    EmptyItem,
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("composite `{0}` has no members")]
    EmptyComposite(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Response counts ordered Strongly Disagree → Strongly Agree.
pub type Counts = [u64; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertItem {
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    pub counts: Counts,
    #[serde(default)]
    pub printed_mean: Option<f64>,
}

impl LikertItem {
    pub fn respondents(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn total(counts: &Counts) -> Result<u64, SurveyError> {
    match counts.iter().sum() {
        0 => Err(SurveyError::EmptyItem),
        n => Ok(n),
    }
}

/// Weighted mean on the 1–5 scale, unrounded.
pub fn item_mean(counts: &Counts) -> Result<f64, SurveyError> {
    let n = total(counts)?;
    let weighted: u64 = counts
        .iter()
        .enumerate()
        .map(|(i, c)| (i as u64 + 1) * c)
        .sum();
    Ok(weighted as f64 / n as f64)
}

/// 1-based level with the most responses; ties go to the higher level.
pub fn item_mode(counts: &Counts) -> Result<u8, SurveyError> {
    total(counts)?;
    let mut best = 0;
    for i in 1..5 {
        if counts[i] >= counts[best] {
            best = i;
        }
    }
    Ok(best as u8 + 1)
}

/// Share of Agree + Strongly Agree, in percent.
pub fn percent_agreement(counts: &Counts) -> Result<f64, SurveyError> {
    let n = total(counts)?;
    Ok((counts[3] + counts[4]) as f64 / n as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub name: String,
    pub members: Vec<String>,
}

impl CompositeSpec {
    pub fn new(name: &str, members: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            members: members.iter().map(|m| m.to_string()).collect(),
        }
    }
}

/// Ease of use over Q3, Q4, Q10; degree of relevance over Q5–Q9 and Q11.
pub fn default_composites() -> Vec<CompositeSpec> {
    vec![
        CompositeSpec::new("SEU", &["Q3", "Q4", "Q10"]),
        CompositeSpec::new("SDR", &["Q5", "Q6", "Q7", "Q8", "Q9", "Q11"]),
    ]
}

/// Parses `NAME = Q1, Q2, ...` lines.
pub fn parse_composites(text: &str) -> Result<Vec<CompositeSpec>, SurveyError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, members) = line.split_once('=').ok_or_else(|| SurveyError::Parse {
            line: i + 1,
            message: "expected `NAME = item, item, ...`".into(),
        })?;
        let members: Vec<String> = members
            .split(',')
            .map(|m| m.trim().to_string())
            .filter(|m| !m.is_empty())
            .collect();
        out.push(CompositeSpec {
            name: name.trim().to_string(),
            members,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanSource {
    Recomputed,
    /// Uses each item's printed mean, falling back to the recomputed one.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeResult {
    pub name: String,
    pub source: MeanSource,
    pub mean: f64,
    pub percent_agreement: f64,
    pub mean_exact: f64,
    pub percent_exact: f64,
}

/// Unweighted mean of member means and of member agreement percentages.
pub fn composite(
    spec: &CompositeSpec,
    items: &[LikertItem],
    source: MeanSource,
) -> Result<CompositeResult, SurveyError> {
    if spec.members.is_empty() {
        return Err(SurveyError::EmptyComposite(spec.name.clone()));
    }
    let mut mean_sum = 0.0;
    let mut pct_sum = 0.0;
    for id in &spec.members {
        let item = items
            .iter()
            .find(|it| &it.id == id)
            .ok_or_else(|| SurveyError::UnknownItem(id.clone()))?;
        let mean = match (source, item.printed_mean) {
            (MeanSource::AsPrinted, Some(p)) => p,
            _ => item_mean(&item.counts)?,
        };
        mean_sum += mean;
        pct_sum += percent_agreement(&item.counts)?;
    }
    let n = spec.members.len() as f64;
    Ok(CompositeResult {
        name: spec.name.clone(),
        source,
        mean: round2(mean_sum / n),
        percent_agreement: round2(pct_sum / n),
        mean_exact: mean_sum / n,
        percent_exact: pct_sum / n,
    })
}

/// Tab-separated: `id c1 c2 c3 c4 c5 [printed_mean] [prompt]`. `#` starts a comment;
/// an empty or `-` printed mean means none.
pub fn parse_dataset(text: &str) -> Result<Vec<LikertItem>, SurveyError> {
    let mut items: Vec<LikertItem> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| SurveyError::Parse { line: n, message };
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() < 6 {
            return Err(err(format!(
                "expected an id and 5 counts, got {} columns",
                cols.len()
            )));
        }
        let id = cols[0].trim().to_string();
        if id.is_empty() {
            return Err(err("empty item id".into()));
        }
        if items.iter().any(|it| it.id == id) {
            return Err(err(format!("duplicate item `{id}`")));
        }
        let mut counts = [0u64; 5];
        for (k, c) in cols[1..6].iter().enumerate() {
            counts[k] = c
                .trim()
                .parse()
                .map_err(|e| err(format!("count {} `{}`: {e}", k + 1, c.trim())))?;
        }
        let printed_mean = match cols.get(6).map(|s| s.trim()) {
            None | Some("") | Some("-") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|e| err(format!("printed mean `{s}`: {e}")))?,
            ),
        };
        let prompt = cols
            .get(7..)
            .map(|rest| rest.join("\t").trim().to_string())
            .unwrap_or_default();
        if counts.iter().sum::<u64>() == 0 {
            return Err(err(format!("item `{id}` has no responses")));
        }
        items.push(LikertItem {
            id,
            prompt,
            counts,
            printed_mean,
        });
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub counts: Counts,
    pub respondents: u64,
    pub mean: f64,
    pub mean_exact: f64,
    pub printed_mean: Option<f64>,
    pub mean_matches_printed: Option<bool>,
    pub mode: u8,
    pub percent_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeRow {
    pub name: String,
    pub members: Vec<String>,
    pub as_printed: CompositeResult,
    pub recomputed: CompositeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyReport {
    pub items: Vec<ItemRow>,
    pub composites: Vec<CompositeRow>,
    pub discrepancies: Vec<String>,
}

pub fn analyze(
    items: &[LikertItem],
    composites: &[CompositeSpec],
) -> Result<SurveyReport, SurveyError> {
    let mut rows = Vec::new();
    let mut discrepancies = Vec::new();
    for it in items {
        let exact = item_mean(&it.counts)?;
        let mean = round2(exact);
        let matches = it.printed_mean.map(|p| (mean - p).abs() <= MEAN_TOLERANCE);
        if matches == Some(false) {
            discrepancies.push(format!(
                "{}: recomputed mean {:.2} from counts {:?} differs from printed {:.2}",
                it.id,
                mean,
                it.counts,
                it.printed_mean.unwrap()
            ));
        }
        rows.push(ItemRow {
            id: it.id.clone(),
            counts: it.counts,
            respondents: it.respondents(),
            mean,
            mean_exact: exact,
            printed_mean: it.printed_mean,
            mean_matches_printed: matches,
            mode: item_mode(&it.counts)?,
            percent_agreement: round2(percent_agreement(&it.counts)?),
        });
    }
    let mut comps = Vec::new();
    for spec in composites {
        let as_printed = composite(spec, items, MeanSource::AsPrinted)?;
        let recomputed = composite(spec, items, MeanSource::Recomputed)?;
        if (as_printed.mean - recomputed.mean).abs() > MEAN_TOLERANCE {
            discrepancies.push(format!(
                "{}: composite mean {:.2} from printed item means vs {:.2} recomputed",
                spec.name, as_printed.mean, recomputed.mean
            ));
        }
        comps.push(CompositeRow {
            name: spec.name.clone(),
            members: spec.members.clone(),
            as_printed,
            recomputed,
        });
    }
    Ok(SurveyReport {
        items: rows,
        composites: comps,
        discrepancies,
    })
}

pub fn render_text(r: &SurveyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<5} {:>4} {:>4} {:>4} {:>4} {:>4} {:>4} {:>7} {:>8} {:>5} {:>8}",
        "item", "SD", "D", "N", "A", "SA", "n", "mean", "printed", "mode", "agree%"
    );
    for r in &r.items {
        let flag = if r.mean_matches_printed == Some(false) {
            " *"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "{:<5} {:>4} {:>4} {:>4} {:>4} {:>4} {:>4} {:>7.2} {:>8} {:>5} {:>8.2}{}",
            r.id,
            r.counts[0],
            r.counts[1],
            r.counts[2],
            r.counts[3],
            r.counts[4],
            r.respondents,
            r.mean,
            r.printed_mean
                .map(|p| format!("{p:.2}"))
                .unwrap_or_else(|| "-".into()),
            r.mode,
            r.percent_agreement,
            flag
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<6} {:>10} {:>14} {:>16}",
        "metric", "agree%", "mean(printed)", "mean(recomputed)"
    );
    for c in &r.composites {
        let _ = writeln!(
            s,
            "{:<6} {:>10.2} {:>14.2} {:>16.2}   [{}]",
            c.name,
            c.as_printed.percent_agreement,
            c.as_printed.mean,
            c.recomputed.mean,
            c.members.join(", ")
        );
    }
    if !r.discrepancies.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Discrepancies:");
        for d in &r.discrepancies {
            let _ = writeln!(s, "  * {d}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_examples() {
        assert_eq!(round2(item_mean(&[0, 2, 2, 20, 26]).unwrap()), 4.40);
        assert_eq!(item_mean(&[0, 0, 0, 0, 7]).unwrap(), 5.0);
        assert_eq!(item_mean(&[1, 1, 2, 30, 16]).unwrap(), 209.0 / 50.0);
        assert_eq!(round2(item_mean(&[1, 1, 2, 30, 16]).unwrap()), 4.18);
        assert_eq!(item_mean(&[0; 5]), Err(SurveyError::EmptyItem));
    }

    #[test]
    fn mode_examples() {
        assert_eq!(item_mode(&[0, 2, 2, 20, 26]).unwrap(), 5);
        assert_eq!(item_mode(&[0, 1, 3, 30, 16]).unwrap(), 4);
        assert_eq!(item_mode(&[1, 1, 1, 1, 1]).unwrap(), 5);
        assert_eq!(item_mode(&[0; 5]), Err(SurveyError::EmptyItem));
    }

    #[test]
    fn agreement_examples() {
        assert_eq!(percent_agreement(&[0, 2, 2, 20, 26]).unwrap(), 92.0);
        assert_eq!(percent_agreement(&[9, 3, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(percent_agreement(&[2, 2, 2, 30, 14]).unwrap(), 88.0);
    }

    #[test]
    fn composite_rejects_unknown_members() {
        let items = parse_dataset(BUNDLED_QUESTIONNAIRE).unwrap();
        let spec = CompositeSpec::new("X", &["Q3", "Q99"]);
        assert_eq!(
            composite(&spec, &items, MeanSource::Recomputed),
            Err(SurveyError::UnknownItem("Q99".into()))
        );
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_dataset("# c\nQ1\t1\t2\t3\t4\nQ2\t1\t1\t1\t1\t1\n").unwrap_err();
        assert!(matches!(err, SurveyError::Parse { line: 2, .. }));
        let items = parse_composites("SEU = Q3, Q4\n# x\nSDR=Q5").unwrap();
        assert_eq!(items[0].members, vec!["Q3", "Q4"]);
        assert_eq!(items[1].name, "SDR");
    }
}
