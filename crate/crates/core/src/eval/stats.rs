//! Rank-based comparison of methods across datasets.

use std::path::Path;

use ndarray::Array2;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Bundled F1 scores of the compared detectors on the four stress datasets.
pub const REFERENCE_F1_CSV: &str = include_str!("../../data/method_f1.csv");

/// Methods (rows) by datasets (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScoreTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub scores: Array2<f64>,
}

impl MethodScoreTable {
    /// CSV with the method name in the first column and one column per dataset.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::MalformedFile(e.to_string()))?.clone();
        if header.len() < 2 {
            return Err(Error::MalformedFile("need a method column and at least one dataset".into()));
        }
        let datasets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut methods = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::MalformedFile(e.to_string()))?;
            methods.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::MalformedFile(format!("row {}: bad score {field:?}", i + 2)))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::MalformedFile(format!("row {}: score {v} outside [0, 1]", i + 2)));
                }
                values.push(v);
            }
        }
        let scores = Array2::from_shape_vec((methods.len(), datasets.len()), values)
            .map_err(|e| Error::MalformedFile(e.to_string()))?;
        Ok(Self { methods, datasets, scores })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn reference() -> Self {
        Self::from_csv_str(REFERENCE_F1_CSV).expect("bundled table parses")
    }

    pub fn index_of(&self, method: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == method)
    }

    /// Rows for the named methods, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let rows = names
            .iter()
            .map(|n| self.index_of(n).ok_or_else(|| Error::InvalidConfig(format!("unknown method {n:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            methods: names.iter().map(|n| n.to_string()).collect(),
            datasets: self.datasets.clone(),
            scores: self.scores.select(ndarray::Axis(0), &rows),
        })
    }

    fn check(&self) -> Result<()> {
        let (k, n) = self.scores.dim();
        if k < 3 || n < 2 {
            return Err(Error::TooFewMethods(format!("{k} methods x {n} datasets; need >= 3 x 2")));
        }
        Ok(())
    }
}

/// Per-dataset ranks, 1 for the highest score, ties sharing their average rank.
pub fn rank_matrix(table: &MethodScoreTable) -> Array2<f64> {
    let (k, n) = table.scores.dim();
    let mut ranks = Array2::zeros((k, n));
    for j in 0..n {
        let col = table.scores.column(j);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]));
        let mut i = 0;
        while i < k {
            let mut end = i + 1;
            while end < k && col[order[end]] == col[order[i]] {
                end += 1;
            }
            let avg = (i + end + 1) as f64 / 2.0;
            for &m in &order[i..end] {
                ranks[[m, j]] = avg;
            }
            i = end;
        }
    }
    ranks
}

fn mean_ranks(ranks: &Array2<f64>) -> Vec<f64> {
    ranks.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
    pub mean_ranks: Vec<f64>,
}

/// Friedman chi-square on per-dataset ranks, corrected for ties.
pub fn friedman_test(table: &MethodScoreTable) -> Result<FriedmanResult> {
    table.check()?;
    let (k, n) = table.scores.dim();
    let ranks = rank_matrix(table);
    let (kf, nf) = (k as f64, n as f64);
    let sum_sq: f64 = ranks.rows().into_iter().map(|r| r.sum().powi(2)).sum();
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);

    let mut ties = 0.0;
    for j in 0..n {
        let mut col: Vec<f64> = ranks.column(j).to_vec();
        col.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < k {
            let mut end = i + 1;
            while end < k && col[end] == col[i] {
                end += 1;
            }
            let t = (end - i) as f64;
            ties += t * t * t - t;
            i = end;
        }
    }
    let correction = 1.0 - ties / (nf * (kf * kf * kf - kf));
    let statistic = if correction > 0.0 { (raw / correction).max(0.0) } else { 0.0 };
    let chi = ChiSquared::new(kf - 1.0).expect("df >= 2");
    let p_value = if statistic == 0.0 { 1.0 } else { chi.sf(statistic) };
    Ok(FriedmanResult {
        statistic,
        p_value,
        df: k - 1,
        mean_ranks: mean_ranks(&ranks),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Adjustment {
    #[default]
    None,
    Bonferroni,
    Holm,
}

impl std::str::FromStr for Adjustment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "bonferroni" => Ok(Self::Bonferroni),
            "holm" => Ok(Self::Holm),
            other => Err(Error::InvalidConfig(format!("unknown adjustment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DunnComparison {
    pub method: String,
    /// Positive when the control ranks better.
    pub z: f64,
    pub p_value: f64,
}

/// Dunn test of every method against `control` on the Friedman mean ranks:
/// `z = (R_i - R_c) / sqrt(k (k + 1) / (6 N))`, two-sided normal p-values.
pub fn dunn_posthoc(table: &MethodScoreTable, control: &str, adjust: Adjustment) -> Result<Vec<DunnComparison>> {
    table.check()?;
    let c = control_index(table, control)?;
    let (k, n) = table.scores.dim();
    let r = mean_ranks(&rank_matrix(table));
    let se = ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt();
    Ok(adjusted(comparisons(table, c, &r, |_| se), adjust))
}

/// Dunn test with every score ranked jointly across methods and datasets
/// (the Kruskal-Wallis form), tie-corrected.
pub fn dunn_pooled(table: &MethodScoreTable, control: &str, adjust: Adjustment) -> Result<Vec<DunnComparison>> {
    table.check()?;
    let c = control_index(table, control)?;
    let (k, n) = table.scores.dim();
    let m = k * n;
    let flat: Vec<f64> = table.scores.iter().copied().collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut ranks = vec![0.0; m];
    let mut ties = 0.0;
    let mut i = 0;
    while i < m {
        let mut end = i + 1;
        while end < m && flat[order[end]] == flat[order[i]] {
            end += 1;
        }
        let t = (end - i) as f64;
        ties += t * t * t - t;
        for &o in &order[i..end] {
            ranks[o] = (i + end + 1) as f64 / 2.0;
        }
        i = end;
    }
    let r: Vec<f64> = ranks.chunks(n).map(|row| row.iter().sum::<f64>() / n as f64).collect();
    let mf = m as f64;
    let var = mf * (mf + 1.0) / 12.0 - ties / (12.0 * (mf - 1.0));
    let se = (var * 2.0 / n as f64).sqrt();
    // pooled ranks ascend with the score, so flip the sign to keep z > 0 when the control is better
    let r: Vec<f64> = r.iter().map(|x| -x).collect();
    Ok(adjusted(comparisons(table, c, &r, |_| se), adjust))
}

fn control_index(table: &MethodScoreTable, control: &str) -> Result<usize> {
    table
        .index_of(control)
        .ok_or_else(|| Error::UnknownControl(control.to_string()))
}

fn comparisons(table: &MethodScoreTable, c: usize, r: &[f64], se: impl Fn(usize) -> f64) -> Vec<DunnComparison> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..table.methods.len())
        .filter(|&i| i != c)
        .map(|i| {
            let z = (r[i] - r[c]) / se(i);
            DunnComparison {
                method: table.methods[i].clone(),
                z,
                p_value: (2.0 * normal.sf(z.abs())).min(1.0),
            }
        })
        .collect()
}

fn adjusted(mut out: Vec<DunnComparison>, adjust: Adjustment) -> Vec<DunnComparison> {
    let m = out.len() as f64;
    match adjust {
        Adjustment::None => {}
        Adjustment::Bonferroni => out.iter_mut().for_each(|d| d.p_value = (d.p_value * m).min(1.0)),
        Adjustment::Holm => {
            let mut order: Vec<usize> = (0..out.len()).collect();
            order.sort_by(|&a, &b| out[a].p_value.total_cmp(&out[b].p_value));
            let mut running: f64 = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                running = running.max(((m - rank as f64) * out[i].p_value).min(1.0));
                out[i].p_value = running;
            }
        }
    }
    out
}
