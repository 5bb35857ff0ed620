//! CSV readers for survey ratings and CSI responses.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{csi_score, paired_t_test, CsiFactor, CsiResponse, Metric, Rating, RatingsTable, StatsError, TestResult};
use crate::palette::PaletteFormat;

pub const RATINGS_HEADER: [&str; 6] = ["participant", "condition", "format", "combination", "metric", "rating"];
pub const CSI_HEADER: [&str; 5] = ["participant", "system", "factor", "rating", "pair_count"];

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), StatsError> {
    let header = reader.headers().map_err(|e| StatsError::Schema(e.to_string()))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(StatsError::Schema(format!(
            "expected header {:?}, got {:?}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
struct RatingRow {
    participant: String,
    condition: String,
    format: String,
    combination: String,
    metric: String,
    rating: i64,
}

pub fn read_ratings<R: Read>(input: R) -> Result<RatingsTable, StatsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    check_header(&mut reader, &RATINGS_HEADER)?;
    let mut table = RatingsTable::default();
    for (line, row) in reader.deserialize::<RatingRow>().enumerate() {
        let row = row.map_err(|e| StatsError::Schema(e.to_string()))?;
        let at = |msg: String| StatsError::Schema(format!("row {}: {msg}", line + 2));
        let format: PaletteFormat = row.format.parse().map_err(at)?;
        let metric = Metric::parse(&row.metric).ok_or_else(|| at(format!("unknown metric {:?}", row.metric)))?;
        if !(1..=9).contains(&row.rating) {
            return Err(at(format!("rating {} outside 1..9", row.rating)));
        }
        table.push(Rating {
            participant: row.participant,
            condition: row.condition,
            format,
            combination: row.combination,
            metric,
            rating: row.rating as u8,
        })?;
    }
    Ok(table)
}

#[derive(Deserialize)]
struct CsiRow {
    participant: String,
    system: String,
    factor: String,
    rating: f64,
    pair_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSystemScores {
    pub system: String,
    /// participant -> score
    pub scores: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiReport {
    pub systems: Vec<CsiSystemScores>,
    /// Paired t-test of the first system against the second, present when
    /// exactly two systems were rated by the same participants.
    pub comparison: Option<TestResult>,
}

/// Reads one row per (participant, system, factor) and scores every
/// participant on every system.
pub fn read_csi<R: Read>(input: R) -> Result<BTreeMap<String, BTreeMap<String, CsiResponse>>, StatsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    check_header(&mut reader, &CSI_HEADER)?;
    // system -> participant -> factor -> (rating, count)
    let mut raw: BTreeMap<String, BTreeMap<String, BTreeMap<CsiFactor, (f64, u32)>>> = BTreeMap::new();
    for (line, row) in reader.deserialize::<CsiRow>().enumerate() {
        let row = row.map_err(|e| StatsError::Schema(e.to_string()))?;
        let at = |msg: String| StatsError::Schema(format!("row {}: {msg}", line + 2));
        let factor = CsiFactor::parse(&row.factor).ok_or_else(|| at(format!("unknown factor {:?}", row.factor)))?;
        if !(0.0..=10.0).contains(&row.rating) {
            return Err(at(format!("rating {} outside 0..10", row.rating)));
        }
        let slot = raw.entry(row.system).or_default().entry(row.participant).or_default();
        if slot.insert(factor, (row.rating, row.pair_count)).is_some() {
            return Err(at(format!("duplicate factor {:?}", row.factor)));
        }
    }
    let mut out = BTreeMap::new();
    for (system, people) in raw {
        let mut responses = BTreeMap::new();
        for (participant, factors) in people {
            if factors.len() != CsiFactor::ALL.len() {
                return Err(StatsError::Schema(format!(
                    "participant {participant} on {system} rated {} of 6 factors",
                    factors.len()
                )));
            }
            let mut resp = CsiResponse {
                factor_ratings: [0.0; 6],
                pair_counts: [0; 6],
            };
            for (i, f) in CsiFactor::ALL.iter().enumerate() {
                let (r, c) = factors[f];
                resp.factor_ratings[i] = r;
                resp.pair_counts[i] = c;
            }
            responses.insert(participant, resp);
        }
        out.insert(system, responses);
    }
    Ok(out)
}

pub fn csi_report(responses: &BTreeMap<String, BTreeMap<String, CsiResponse>>) -> Result<CsiReport, StatsError> {
    let mut systems = Vec::new();
    for (system, people) in responses {
        let mut scores = BTreeMap::new();
        for (p, r) in people {
            scores.insert(p.clone(), csi_score(r)?);
        }
        let mean = scores.values().sum::<f64>() / scores.len().max(1) as f64;
        systems.push(CsiSystemScores {
            system: system.clone(),
            scores,
            mean,
        });
    }
    let comparison = match systems.as_slice() {
        [a, b] if a.scores.len() >= 2 && a.scores.keys().eq(b.scores.keys()) => {
            let xs: Vec<f64> = a.scores.values().copied().collect();
            let ys: Vec<f64> = b.scores.values().copied().collect();
            Some(paired_t_test(&xs, &ys)?)
        }
        _ => None,
    };
    Ok(CsiReport { systems, comparison })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratings_csv_parses_and_validates() {
        let csv = "participant,condition,format,combination,metric,rating\n\
                   p1,1d,1d,C1,harmony,5\n\
                   p1,1dplus-r0,1dplus,C1,Valence,7\n";
        let t = read_ratings(csv.as_bytes()).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[1].format, PaletteFormat::Proportional);
        assert_eq!(t.rows[1].metric, Metric::Valence);

        let bad = "participant,condition,format,combination,metric,rating\np1,c,2d,C1,arousal,10\n";
        assert!(matches!(read_ratings(bad.as_bytes()), Err(StatsError::Schema(_))));
        let bad_header = "participant,condition,metric,rating\np1,c,arousal,3\n";
        assert!(matches!(read_ratings(bad_header.as_bytes()), Err(StatsError::Schema(_))));
    }

    fn csi_csv(system: &str, participant: &str, rating: f64, counts: [u32; 6]) -> String {
        let names = ["enjoyment", "exploration", "expressiveness", "immersion", "collaboration", "results_worth_effort"];
        names
            .iter()
            .zip(counts)
            .map(|(f, c)| format!("{participant},{system},{f},{rating},{c}\n"))
            .collect()
    }

    #[test]
    fn csi_csv_all_ten_scores_hundred() {
        let mut text = String::from("participant,system,factor,rating,pair_count\n");
        text += &csi_csv("ours", "p1", 10.0, [5, 4, 3, 2, 1, 0]);
        text += &csi_csv("ours", "p2", 10.0, [0, 1, 2, 3, 4, 5]);
        let report = csi_report(&read_csi(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(report.systems.len(), 1);
        for s in report.systems[0].scores.values() {
            assert!((s - 100.0).abs() < 1e-12);
        }
        assert!(report.comparison.is_none());
    }

    #[test]
    fn csi_csv_rejects_bad_counts() {
        let mut text = String::from("participant,system,factor,rating,pair_count\n");
        text += &csi_csv("ours", "p1", 5.0, [5, 4, 3, 2, 1, 1]);
        let parsed = read_csi(text.as_bytes()).unwrap();
        assert_eq!(csi_report(&parsed).unwrap_err(), StatsError::InvalidWeights(16));
    }

    #[test]
    fn csi_two_systems_are_compared() {
        let mut text = String::from("participant,system,factor,rating,pair_count\n");
        let ours = [9.0, 8.0, 9.5];
        let base = [6.0, 6.5, 5.0];
        for (i, (a, b)) in ours.iter().zip(base).enumerate() {
            text += &csi_csv("a_ours", &format!("p{i}"), *a, [5, 4, 3, 2, 1, 0]);
            text += &csi_csv("b_base", &format!("p{i}"), b, [5, 4, 3, 2, 1, 0]);
        }
        let report = csi_report(&read_csi(text.as_bytes()).unwrap()).unwrap();
        let t = report.comparison.unwrap();
        // every score is 10 * rating here, so the test is on the rating gaps
        let xs: Vec<f64> = ours.iter().map(|r| 10.0 * r).collect();
        let ys: Vec<f64> = base.iter().map(|r| 10.0 * r).collect();
        let direct = paired_t_test(&xs, &ys).unwrap();
        assert!((t.statistic - direct.statistic).abs() < 1e-9);
        assert!(t.statistic > 0.0);
    }
}
