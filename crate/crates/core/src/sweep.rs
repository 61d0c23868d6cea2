//! Ablation sweeps: the personalize-then-evaluate pipeline repeated over a
//! grid of one training or merging knob and a set of seeded replicates.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::encoder::{FrozenEncoder, Site, SiteAddress};
use crate::error::{PolarError, Result};
use crate::lora::MergeStrategy;
use crate::metrics::{evaluate, EvalOptions, EvalReport, QueryKind};
use crate::personalize::TrainConfig;
use crate::pipeline::personalize_all;
use crate::synth::{build_eval_suite, SyntheticWorld};

/// Environment variable capping the number of sweep worker threads.
pub const THREADS_ENV: &str = "POLAR_KIT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rank,
    /// `V` on a `+`-joined set of layers, e.g. `3+4`.
    Layers,
    /// `+`-joined sites; bare names (`Q`, `K`, `V`, `O`) mean the last layer.
    Sites,
    Lambda,
    Merge,
}

impl FromStr for Axis {
    type Err = PolarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rank" => Ok(Axis::Rank),
            "layers" => Ok(Axis::Layers),
            "sites" => Ok(Axis::Sites),
            "lambda" => Ok(Axis::Lambda),
            "merge" => Ok(Axis::Merge),
            other => Err(PolarError::Config(format!(
                "unknown axis '{other}' (expected rank, layers, sites, lambda or merge)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Rank => "rank",
            Axis::Layers => "layers",
            Axis::Sites => "sites",
            Axis::Lambda => "lambda",
            Axis::Merge => "merge",
        })
    }
}

/// One grid value, parsed against its axis.
#[derive(Clone, Debug, PartialEq)]
pub enum GridPoint {
    Rank(usize),
    Sites(Vec<SiteAddress>),
    Lambda(f64),
    Merge(MergeStrategy),
}

impl GridPoint {
    pub fn parse(axis: Axis, value: &str, n_layers: usize) -> Result<Self> {
        let value = value.trim();
        let bad = || PolarError::Config(format!("bad {axis} grid value '{value}'"));
        Ok(match axis {
            Axis::Rank => GridPoint::Rank(value.parse().map_err(|_| bad())?),
            Axis::Lambda => GridPoint::Lambda(value.parse().map_err(|_| bad())?),
            Axis::Merge => GridPoint::Merge(value.parse()?),
            Axis::Layers => GridPoint::Sites(
                value
                    .split('+')
                    .map(|l| l.trim().parse().map(|l| SiteAddress::new(l, Site::V)).map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            ),
            Axis::Sites => GridPoint::Sites(
                value
                    .split('+')
                    .map(|s| match s.trim().parse::<Site>() {
                        Ok(site) => Ok(SiteAddress::new(n_layers, site)),
                        Err(_) => s.parse(),
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Training and evaluation settings for this point, plus whether the
    /// concepts train in orthogonal slots.
    pub fn apply(&self, train: &TrainConfig, eval: &EvalOptions) -> (TrainConfig, EvalOptions, bool) {
        let (mut t, mut e) = (train.clone(), eval.clone());
        let mut ortho = false;
        match self {
            GridPoint::Rank(r) => t.rank = *r,
            GridPoint::Sites(s) => t.sites = s.clone(),
            GridPoint::Lambda(l) => t.lambda = *l,
            GridPoint::Merge(m) => {
                e.merge = *m;
                ortho = *m == MergeStrategy::Ortho;
            }
        }
        (t, e, ortho)
    }
}

/// Parses a comma-separated grid.
pub fn parse_grid(axis: Axis, grid: &str, n_layers: usize) -> Result<Vec<(String, GridPoint)>> {
    let points: Vec<_> = grid
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| GridPoint::parse(axis, v, n_layers).map(|p| (v.trim().to_string(), p)))
        .collect::<Result<_>>()?;
    if points.is_empty() {
        return Err(PolarError::Empty(format!("{axis} grid")));
    }
    Ok(points)
}

/// A seeded world with its pretrained encoder.
pub struct Replicate<'a> {
    pub seed: u64,
    pub world: &'a SyntheticWorld,
    pub encoder: &'a FrozenEncoder,
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: Axis,
    pub grid: Vec<(String, GridPoint)>,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

/// Aggregate of one grid point over its replicates.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub point: String,
    /// `ok`, or the first failure message; failed replicates are left out of
    /// the means.
    pub status: String,
    pub runs: usize,
    /// Column name → (mean, standard error), values ×100.
    pub columns: Vec<(String, Option<(f64, f64)>)>,
}

const METRICS: [&str; 5] = ["mRR", "mAP", "r@1", "r@5", "r@10"];

fn kind_column(kind: QueryKind) -> String {
    kind.name().replace('-', "_")
}

/// Metric columns of a report, in CSV order, each ×100.
pub fn report_values(report: &EvalReport) -> Vec<(String, Option<f64>)> {
    let mut out = Vec::new();
    for kind in QueryKind::ALL {
        let s = report.summary(kind);
        for m in METRICS {
            let v = s.and_then(|s| match m {
                "mRR" => Some(s.mrr),
                "mAP" => Some(s.map),
                _ => {
                    let k: usize = m[2..].parse().ok()?;
                    s.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
                }
            });
            out.push((format!("{}_{m}", kind_column(kind)), v.map(|v| v * 100.0)));
        }
    }
    out.push(("caption_r10".into(), report.caption_recall_at_10.map(|v| v * 100.0)));
    out.push(("caption_r10_base".into(), report.caption_recall_at_10_base.map(|v| v * 100.0)));
    out
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Personalizes every concept of the replicate at `point` and evaluates the
/// replicate's suite.
pub fn run_point(rep: &Replicate<'_>, point: &GridPoint, spec: &SweepSpec) -> Result<EvalReport> {
    let (train, eval, ortho) = point.apply(&spec.train, &spec.eval);
    let (store, _) = personalize_all(rep.encoder, rep.world, rep.seed, &train, ortho)?;
    let suite = build_eval_suite(rep.world);
    evaluate(rep.encoder, &rep.world.eval_index(), &suite.queries, &store, &eval)
}

/// Worker count: `POLAR_KIT_THREADS` if set, else the available parallelism,
/// never more than `jobs`.
pub fn thread_count(jobs: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

/// Runs every (point, replicate) job. Jobs are independent and seeded, so
/// rows do not depend on scheduling; a failing job is reported in its row's
/// status and the sweep carries on.
pub fn run_sweep(reps: &[Replicate<'_>], spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if reps.is_empty() {
        return Err(PolarError::Empty("sweep replicates".into()));
    }
    let jobs = spec.grid.len() * reps.len();
    let results: Vec<Mutex<Option<Result<EvalReport>>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..thread_count(jobs) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs {
                    break;
                }
                let (p, r) = (j / reps.len(), j % reps.len());
                let out = run_point(&reps[r], &spec.grid[p].1, spec);
                *results[j].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    let mut results = results
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()));

    let mut rows = Vec::with_capacity(spec.grid.len());
    for (label, _) in &spec.grid {
        let mut status = "ok".to_string();
        let mut values: Vec<Vec<(String, Option<f64>)>> = Vec::new();
        for rep in reps {
            match results.next().flatten() {
                Some(Ok(report)) => values.push(report_values(&report)),
                Some(Err(e)) => {
                    if status == "ok" {
                        status = format!("seed {}: {e}", rep.seed);
                    }
                }
                None => status = "job did not run".into(),
            }
        }
        let names: Vec<String> = report_values(&EvalReport {
            ap_variant: String::new(),
            ks: vec![],
            summaries: vec![],
            caption_recall_at_10: None,
            caption_recall_at_10_base: None,
            queries: vec![],
        })
        .into_iter()
        .map(|(n, _)| n)
        .collect();
        let columns = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let xs: Vec<f64> = values.iter().filter_map(|v| v[i].1).collect();
                (name.clone(), (!xs.is_empty()).then(|| mean_se(&xs)))
            })
            .collect();
        rows.push(SweepRow {
            point: label.clone(),
            status,
            runs: values.len(),
            columns,
        });
    }
    Ok(rows)
}

/// Writes one CSV row per grid point: the point, status, number of
/// successful runs, then a mean and a `_se` column per metric.
pub fn write_csv<W: Write>(axis: Axis, rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| PolarError::Config(format!("csv: {e}"));
    let mut header = vec![axis.to_string(), "status".into(), "runs".into()];
    if let Some(first) = rows.first() {
        for (name, _) in &first.columns {
            header.push(name.clone());
            header.push(format!("{name}_se"));
        }
    }
    w.write_record(&header).map_err(to_err)?;
    for row in rows {
        let mut rec = vec![row.point.clone(), row.status.clone(), row.runs.to_string()];
        for (_, v) in &row.columns {
            match v {
                Some((m, se)) => {
                    rec.push(format!("{m:.4}"));
                    rec.push(format!("{se:.4}"));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| PolarError::Config(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personalize::testkit;

    #[test]
    fn grid_values_parse_per_axis() {
        let g = parse_grid(Axis::Sites, "Q, K,V+2:Q,proj", 4).unwrap();
        assert_eq!(g[0].1, GridPoint::Sites(vec![SiteAddress::new(4, Site::Q)]));
        assert_eq!(
            g[2].1,
            GridPoint::Sites(vec![SiteAddress::new(4, Site::V), SiteAddress::new(2, Site::Q)])
        );
        assert_eq!(g[3].1, GridPoint::Sites(vec![SiteAddress::final_proj()]));
        let l = parse_grid(Axis::Layers, "4,3+4", 4).unwrap();
        assert_eq!(l[1].1, GridPoint::Sites(vec![SiteAddress::new(3, Site::V), SiteAddress::new(4, Site::V)]));
        assert_eq!(parse_grid(Axis::Merge, "ortho", 4).unwrap()[0].1, GridPoint::Merge(MergeStrategy::Ortho));
        assert!(parse_grid(Axis::Rank, "two", 4).is_err());
        assert!(parse_grid(Axis::Lambda, " , ", 4).is_err());
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn standard_error_matches_hand_value() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3 over n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn failing_point_is_recorded_and_sweep_continues() {
        let (world, enc) = testkit::small();
        let spec = SweepSpec {
            axis: Axis::Rank,
            grid: parse_grid(Axis::Rank, "0,1", 2).unwrap(),
            train: TrainConfig {
                iterations: 5,
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
        };
        let reps = [Replicate {
            seed: 1,
            world: &world,
            encoder: &enc,
        }];
        let rows = run_sweep(&reps, &spec).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].status.contains("rank"), "{}", rows[0].status);
        assert_eq!(rows[0].runs, 0);
        assert!(rows[0].columns.iter().all(|(_, v)| v.is_none()));
        assert_eq!(rows[1].status, "ok");

        let mut buf = Vec::new();
        write_csv(Axis::Rank, &rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("rank,status,runs,context_single_mRR,context_single_mRR_se"));
        assert!(lines[0].ends_with("caption_r10_base,caption_r10_base_se"));
        let n = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == n));
    }
}
