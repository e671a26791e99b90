//! Aggregation over seeds with Student-t confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::metrics::EpisodeMetrics;
use super::SeedResult;

/// Mean and 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

/// Two-sided 95% Student-t half-width of the mean; zero below two samples.
pub fn ci95(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary { mean: 0.0, ci95: 0.0, n };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Summary { mean, ci95: 0.0, n };
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Summary {
        mean,
        ci95: t * (var / n as f64).sqrt(),
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub level: String,
    pub controller: String,
    pub episodes: usize,
    pub metrics: Vec<(String, Summary)>,
    pub failed_seeds: Vec<(u64, String)>,
}

impl ReportCell {
    pub fn from_results(level: &str, controller: &str, results: &[SeedResult]) -> ReportCell {
        let ok: Vec<&EpisodeMetrics> = results.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let failed_seeds = results
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| (r.seed, e.clone())))
            .collect();
        let mut metrics = Vec::new();
        if let Some(first) = ok.first() {
            for (k, (name, _)) in first.scalars().into_iter().enumerate() {
                let xs: Vec<f64> = ok.iter().map(|m| m.scalars()[k].1).collect();
                metrics.push((name.to_string(), ci95(&xs)));
            }
        }
        ReportCell {
            level: level.into(),
            controller: controller.into(),
            episodes: ok.len(),
            metrics,
            failed_seeds,
        }
    }

    pub fn get(&self, name: &str) -> Option<Summary> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

pub const CSV_HEADER: &str = "level,controller,metric,mean,ci95,n,failed";

pub fn to_csv(cells: &[ReportCell]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        for (name, s) in &c.metrics {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{}\n",
                c.level,
                c.controller,
                name,
                s.mean,
                s.ci95,
                s.n,
                c.failed_seeds.len()
            ));
        }
    }
    out
}

pub fn to_json(cells: &[ReportCell]) -> String {
    serde_json::to_string_pretty(cells).expect("report serialisation is infallible")
}
