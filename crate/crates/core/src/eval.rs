//! Claim and citation scoring against gold claims.
//!
//! This is an offline approximation of the MiRAGE reference metrics; reports
//! carry the label "MiRAGE-approx" so they are not mistaken for official scores.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Client;
use crate::consolidate::ConsolidatedClaim;
use crate::error::{Error, Result};

pub const METRIC_LABEL: &str = "MiRAGE-approx";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldClaim {
    #[serde(rename = "claim")]
    pub text: String,
    pub citations: Vec<String>,
}

pub fn parse_gold(text: &str, source_name: &str) -> Result<Vec<GoldClaim>> {
    let gold: Vec<GoldClaim> = serde_json::from_str(text).map_err(|e| Error::Ingest {
        source_name: source_name.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut problems = Vec::new();
    for (i, g) in gold.iter().enumerate() {
        if g.text.trim().is_empty() {
            problems.push(format!("{source_name}: gold claim {i} has empty text"));
        }
        if g.citations.is_empty() {
            problems.push(format!("{source_name}: gold claim {i} has no citations"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(gold)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldClaim>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gold(&text, &path.display().to_string())
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Argument(format!("{name} must be in [0, 1], got {x}")))
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> Result<f64> {
    check_unit("precision", p)?;
    check_unit("recall", r)?;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub fn avg_f1(info_f1: f64, cite_f1: f64) -> f64 {
    (info_f1 + cite_f1) / 2.0
}

/// Half-up rounding to three decimals. Values are first snapped to 1e-9 so
/// that decimal ties stored as 0.70449999… still round up.
pub fn round3(x: f64) -> f64 {
    let snapped = (x * 1e9).round() / 1e6;
    (snapped + 0.5).floor() / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitePair {
    pub pred: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub info_p: f64,
    pub info_r: f64,
    pub info_f1: f64,
    pub cite_p: f64,
    pub cite_r: f64,
    pub cite_f1: f64,
    pub avg_f1: f64,
    /// `gold_entails_pred[i][j]`: gold claim j entails predicted claim i.
    pub gold_entails_pred: Vec<Vec<bool>>,
    /// `pred_entails_gold[j][i]`: predicted claim i entails gold claim j.
    pub pred_entails_gold: Vec<Vec<bool>>,
    pub cite_pairs: Vec<CitePair>,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl EvalReport {
    fn zero(n_gold: usize) -> Self {
        Self {
            label: METRIC_LABEL.to_string(),
            info_p: 0.0,
            info_r: 0.0,
            info_f1: 0.0,
            cite_p: 0.0,
            cite_r: 0.0,
            cite_f1: 0.0,
            avg_f1: 0.0,
            gold_entails_pred: Vec::new(),
            pred_entails_gold: vec![Vec::new(); n_gold],
            cite_pairs: Vec::new(),
            n_pred: 0,
            n_gold,
        }
    }

    /// Method | Avg F1 | Info P R F1 | Cite P R F1, values rounded half-up.
    pub fn render_table(&self, method: &str) -> String {
        let w = method.len().max(6);
        let mut out = format!("{METRIC_LABEL} scores\n");
        out.push_str(&format!(
            "{:<w$} | {:>6} | {:>5} {:>5} {:>5} | {:>5} {:>5} {:>5}\n",
            "Method", "Avg F1", "InfoP", "InfoR", "F1", "CiteP", "CiteR", "F1"
        ));
        out.push_str(&format!("{}\n", "-".repeat(w + 53)));
        out.push_str(&format!(
            "{:<w$} | {:>6.3} | {:>5.3} {:>5.3} {:>5.3} | {:>5.3} {:>5.3} {:>5.3}\n",
            method,
            round3(self.avg_f1),
            round3(self.info_p),
            round3(self.info_r),
            round3(self.info_f1),
            round3(self.cite_p),
            round3(self.cite_r),
            round3(self.cite_f1),
        ));
        out
    }
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores predictions against gold claims.
///
/// InfoP is the share of predictions entailed by some gold claim and InfoR the
/// share of gold claims entailed by some prediction. Each prediction entailed
/// by a gold claim is paired with the first such gold claim; CiteP and CiteR
/// are the citation-overlap ratios averaged over those pairs. Predictions with
/// no pair do not enter the citation averages.
pub fn score(pred: &[ConsolidatedClaim], gold: &[GoldClaim], judge: &Client) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Argument("gold claim set is empty".into()));
    }
    if pred.is_empty() {
        return Ok(EvalReport::zero(gold.len()));
    }
    let cells: Vec<(usize, usize)> = (0..pred.len())
        .flat_map(|i| (0..gold.len()).map(move |j| (i, j)))
        .collect();
    let judged: Vec<Result<(bool, bool)>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let a = judge.entail(std::slice::from_ref(&gold[j].text), &pred[i].text)?;
            let b = judge.entail(std::slice::from_ref(&pred[i].text), &gold[j].text)?;
            Ok((a.entailed, b.entailed))
        })
        .collect();
    let mut gold_entails_pred = vec![vec![false; gold.len()]; pred.len()];
    let mut pred_entails_gold = vec![vec![false; pred.len()]; gold.len()];
    for (&(i, j), r) in cells.iter().zip(judged) {
        let (a, b) = r?;
        gold_entails_pred[i][j] = a;
        pred_entails_gold[j][i] = b;
    }

    let supported = gold_entails_pred.iter().filter(|row| row.iter().any(|&x| x)).count();
    let covered = pred_entails_gold.iter().filter(|row| row.iter().any(|&x| x)).count();
    let info_p = fraction(supported, pred.len());
    let info_r = fraction(covered, gold.len());

    let mut cite_pairs = Vec::new();
    for (i, row) in gold_entails_pred.iter().enumerate() {
        let Some(j) = row.iter().position(|&x| x) else {
            continue;
        };
        let p: BTreeSet<&str> = pred[i].citations.iter().map(String::as_str).collect();
        let g: BTreeSet<&str> = gold[j].citations.iter().map(String::as_str).collect();
        let both = p.intersection(&g).count();
        cite_pairs.push(CitePair {
            pred: i,
            gold: j,
            precision: fraction(both, p.len()),
            recall: fraction(both, g.len()),
        });
    }
    let (cite_p, cite_r) = if cite_pairs.is_empty() {
        (0.0, 0.0)
    } else {
        let n = cite_pairs.len() as f64;
        (
            cite_pairs.iter().map(|c| c.precision).sum::<f64>() / n,
            cite_pairs.iter().map(|c| c.recall).sum::<f64>() / n,
        )
    };
    let info_f1 = f1(info_p, info_r)?;
    let cite_f1 = f1(cite_p, cite_r)?;
    Ok(EvalReport {
        label: METRIC_LABEL.to_string(),
        info_p,
        info_r,
        info_f1,
        cite_p,
        cite_r,
        cite_f1,
        avg_f1: avg_f1(info_f1, cite_f1),
        gold_entails_pred,
        pred_entails_gold,
        cite_pairs,
        n_pred: pred.len(),
        n_gold: gold.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockRuleSet, Role};
    use proptest::prelude::*;

    fn judge() -> Client {
        Client::mock(Role::Entail, MockRuleSet::default())
    }

    fn gold(text: &str, cites: &[&str]) -> GoldClaim {
        GoldClaim {
            text: text.into(),
            citations: cites.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn pred(text: &str, cites: &[&str]) -> ConsolidatedClaim {
        ConsolidatedClaim {
            text: text.into(),
            citations: cites.iter().map(|s| s.to_string()).collect(),
            member_ids: vec![],
        }
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.990, 0.440).unwrap() - 0.609).abs() <= 0.0005);
        assert!((f1(0.764, 0.410).unwrap() - 0.534).abs() <= 0.0005);
        assert_eq!(f1(0.0, 0.0).unwrap(), 0.0);
        assert!(f1(1.2, 0.5).is_err());
        assert!(f1(0.5, -0.1).is_err());
        assert!(f1(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn avg_examples() {
        assert_eq!(round3(avg_f1(0.869, 0.753)), 0.811);
        assert_eq!(round3(avg_f1(0.800, 0.609)), 0.705);
        assert_eq!(avg_f1(0.42, 0.42), 0.42);
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round3(0.7045), 0.705);
        assert_eq!(round3(0.0005), 0.001);
        assert_eq!(round3(0.1234), 0.123);
        assert_eq!(round3(1.0), 1.0);
        assert_eq!(round3(0.0), 0.0);
    }

    fn gold_set() -> Vec<GoldClaim> {
        vec![
            gold("Storm Daniel killed 12 people in Derna.", &["v1", "v2"]),
            gold("Officials opened three shelters in Benghazi.", &["v3"]),
        ]
    }

    #[test]
    fn identity_corpus_scores_one() {
        let g = gold_set();
        let p: Vec<_> = g.iter().map(|g| ConsolidatedClaim {
            text: g.text.clone(),
            citations: g.citations.clone(),
            member_ids: vec![],
        }).collect();
        let r = score(&p, &g, &judge()).unwrap();
        for v in [r.info_p, r.info_r, r.info_f1, r.cite_p, r.cite_r, r.cite_f1, r.avg_f1] {
            assert_eq!(v, 1.0);
        }
        assert_eq!(r.label, METRIC_LABEL);
    }

    #[test]
    fn empty_citations_decouple() {
        let g = gold_set();
        let p: Vec<_> = g.iter().map(|g| pred(&g.text, &[])).collect();
        let r = score(&p, &g, &judge()).unwrap();
        assert_eq!((r.info_p, r.info_r), (1.0, 1.0));
        assert_eq!((r.cite_p, r.cite_r, r.cite_f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_recall_fixture() {
        let g = gold_set();
        let p = [pred("Storm Daniel killed 12 people in Derna.", &["v1", "v2"])];
        let r = score(&p, &g, &judge()).unwrap();
        assert_eq!(r.info_r, 0.5);
        assert_eq!(r.info_p, 1.0);
        assert_eq!((r.cite_p, r.cite_r), (1.0, 1.0));
        assert_eq!(r.cite_pairs.len(), 1);
        assert_eq!((r.cite_pairs[0].pred, r.cite_pairs[0].gold), (0, 0));
    }

    #[test]
    fn empty_predictions_and_gold() {
        let r = score(&[], &gold_set(), &judge()).unwrap();
        assert_eq!(r.avg_f1, 0.0);
        assert_eq!(r.n_gold, 2);
        assert!(score(&[pred("x", &["v1"])], &[], &judge()).is_err());
    }

    #[test]
    fn gold_file_validation() {
        let ok = r#"[{"claim":"A.","citations":["v1"]}]"#;
        assert_eq!(parse_gold(ok, "g").unwrap().len(), 1);
        let bad = r#"[{"claim":"","citations":[]}]"#;
        match parse_gold(bad, "g") {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_gold("[", "g"), Err(Error::Ingest { .. })));
    }

    #[test]
    fn table_layout() {
        let g = gold_set();
        let p = [pred("Storm Daniel killed 12 people in Derna.", &["v1", "v2"])];
        let t = score(&p, &g, &judge()).unwrap().render_table("Ours");
        assert!(t.starts_with("MiRAGE-approx"));
        assert!(t.contains("Ours   |  0.833 | 1.000 0.500 0.667 | 1.000 1.000 1.000"), "{t}");
    }

    proptest! {
        #[test]
        fn f1_between_p_and_r(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = f1(p, r).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            if p > 0.0 && r > 0.0 {
                prop_assert!(f <= p.max(r) + 1e-12);
                prop_assert!(f >= p.min(r) - 1e-12);
            }
        }

        #[test]
        fn swap_swaps_info(picks in proptest::collection::vec(0usize..6, 1..5), gpicks in proptest::collection::vec(0usize..6, 1..5)) {
            let pool = [
                "Storm Daniel killed 12 people in Derna.",
                "12 people killed in Derna.",
                "Officials opened three shelters in Benghazi.",
                "Rescue teams arrived from Egypt.",
                "The dam collapsed overnight.",
                "Dam collapsed.",
            ];
            let a: Vec<_> = picks.iter().map(|&i| pred(pool[i], &["v1"])).collect();
            let b: Vec<_> = gpicks.iter().map(|&i| gold(pool[i], &["v1"])).collect();
            let a_as_gold: Vec<_> = a.iter().map(|c| gold(&c.text, &["v1"])).collect();
            let b_as_pred: Vec<_> = b.iter().map(|g| pred(&g.text, &["v1"])).collect();
            let fwd = score(&a, &b, &judge()).unwrap();
            let back = score(&b_as_pred, &a_as_gold, &judge()).unwrap();
            prop_assert_eq!(fwd.info_p, back.info_r);
            prop_assert_eq!(fwd.info_r, back.info_p);
            for v in [fwd.info_p, fwd.info_r, fwd.cite_p, fwd.cite_r, fwd.avg_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
