use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, AngleStats};
use super::{train, TrainConfig, TrainHistory};
use crate::data::ConversationSet;
use crate::losses::Constraint;

/// The named variants of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutAao,
    WithoutOpr,
    WithoutCen,
    WithoutAre,
    WithoutAac,
    WithoutCsr,
    OrtNorm,
    OrtCos,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::WithoutAao,
        Variant::WithoutOpr,
        Variant::WithoutCen,
        Variant::WithoutAre,
        Variant::WithoutAac,
        Variant::WithoutCsr,
        Variant::OrtNorm,
        Variant::OrtCos,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "AO-FL",
            Variant::WithoutAao => "AO-FL (w/o AAO)",
            Variant::WithoutOpr => "AO-FL (w/o OPR)",
            Variant::WithoutCen => "AO-FL (w/o CEN)",
            Variant::WithoutAre => "AO-FL (w/o ARE)",
            Variant::WithoutAac => "AO-FL (w/o AAC)",
            Variant::WithoutCsr => "AO-FL (w/o CSR)",
            Variant::OrtNorm => "AO-FL (-OrtNorm)",
            Variant::OrtCos => "AO-FL (-OrtCos)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutAao => "without_aao",
            Variant::WithoutOpr => "without_opr",
            Variant::WithoutCen => "without_cen",
            Variant::WithoutAre => "without_are",
            Variant::WithoutAac => "without_aac",
            Variant::WithoutCsr => "without_csr",
            Variant::OrtNorm => "ort_norm",
            Variant::OrtCos => "ort_cos",
        }
    }

    /// `base` with this variant's switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutAao => {
                c.cen_enabled = false;
                c.are_enabled = false;
                c.constraint = Constraint::None;
            }
            Variant::WithoutOpr => c.opr_enabled = false,
            Variant::WithoutCen => c.cen_enabled = false,
            Variant::WithoutAre => {
                c.are_enabled = false;
                c.constraint = Constraint::None;
            }
            Variant::WithoutAac => c.aac_enabled = false,
            Variant::WithoutCsr => c.csr_enabled = false,
            Variant::OrtNorm => {
                c.are_enabled = false;
                c.constraint = Constraint::OrtNorm;
            }
            Variant::OrtCos => {
                c.are_enabled = false;
                c.constraint = Constraint::OrtCos;
            }
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| {
                let keys: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
                format!("unknown variant `{s}` (expected one of {})", keys.join(", "))
            })
    }
}

/// Test-set outcome of one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub angles: AngleStats,
    pub best_epoch: Option<usize>,
    pub warmup_angle_grad_max: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Ok(RunSummary),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: RunOutcome,
}

/// Mean and standard deviation over the successful seeds of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs_ok: usize,
    pub runs_failed: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub weighted_f1_mean: f64,
    pub weighted_f1_std: f64,
    pub theta_std_deg: f64,
    pub abs_cos_theta: f64,
    pub cos_phi: f64,
    pub csr_satisfaction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunRecord>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn run_one(config: &TrainConfig, splits: &[ConversationSet; 3]) -> Result<RunSummary, String> {
    let start = Instant::now();
    let (params, history) = train(config, &splits[0], &splits[1]).map_err(|e| e.to_string())?;
    let report = evaluate(&params, &splits[2], config).map_err(|e| e.to_string())?;
    Ok(RunSummary {
        accuracy: report.accuracy,
        weighted_f1: report.weighted_f1,
        angles: report.angles,
        best_epoch: history.best_epoch,
        warmup_angle_grad_max: history.warmup_angle_grad_max,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains and tests every `(variant, seed)` cell on `splits` (train, valid,
/// test), using up to `threads` worker threads. A failing cell is recorded
/// and the grid continues.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    splits: &[ConversationSet; 3],
    threads: usize,
) -> AblationReport {
    let cells: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, seed)) = cells.get(i) else {
                    break;
                };
                let config = TrainConfig {
                    seed,
                    ..variant.apply(base)
                };
                let outcome = match run_one(&config, splits) {
                    Ok(s) => RunOutcome::Ok(s),
                    Err(e) => RunOutcome::Failed(e),
                };
                results.lock().expect("no poisoned workers")[i] = Some(RunRecord { variant, seed, outcome });
            });
        }
    });
    let runs: Vec<RunRecord> = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    let rows = variants
        .iter()
        .map(|&v| {
            let ok: Vec<&RunSummary> = runs
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| match &r.outcome {
                    RunOutcome::Ok(s) => Some(s),
                    RunOutcome::Failed(_) => None,
                })
                .collect();
            let failed = runs.iter().filter(|r| r.variant == v).count() - ok.len();
            let col = |f: fn(&RunSummary) -> f64| ok.iter().map(|s| f(s)).collect::<Vec<_>>();
            let (accuracy_mean, accuracy_std) = mean_std(&col(|s| s.accuracy));
            let (weighted_f1_mean, weighted_f1_std) = mean_std(&col(|s| s.weighted_f1));
            AblationRow {
                variant: v.label().to_string(),
                runs_ok: ok.len(),
                runs_failed: failed,
                accuracy_mean,
                accuracy_std,
                weighted_f1_mean,
                weighted_f1_std,
                theta_std_deg: mean_std(&col(|s| s.angles.theta_std)).0,
                abs_cos_theta: mean_std(&col(|s| s.angles.abs_cos_theta_mean)).0,
                cos_phi: mean_std(&col(|s| s.angles.cos_phi_mean)).0,
                csr_satisfaction: mean_std(&col(|s| s.angles.csr_satisfaction)).0,
            }
        })
        .collect();
    AblationReport { rows, runs }
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("rows serialize");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    /// Per-run results, one line per `(variant, seed)`.
    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "seed",
            "status",
            "accuracy",
            "weighted_f1",
            "theta_std_deg",
            "abs_cos_theta",
            "cos_phi",
            "csr_satisfaction",
            "seconds",
            "error",
        ])
        .expect("header");
        for r in &self.runs {
            let mut rec = vec![r.variant.key().to_string(), r.seed.to_string()];
            match &r.outcome {
                RunOutcome::Ok(s) => {
                    rec.push("ok".into());
                    for v in [
                        s.accuracy,
                        s.weighted_f1,
                        s.angles.theta_std,
                        s.angles.abs_cos_theta_mean,
                        s.angles.cos_phi_mean,
                        s.angles.csr_satisfaction,
                        s.seconds,
                    ] {
                        rec.push(format!("{v}"));
                    }
                    rec.push(String::new());
                }
                RunOutcome::Failed(e) => {
                    rec.push("failed".into());
                    rec.extend(std::iter::repeat_n(String::new(), 7));
                    rec.push(e.clone());
                }
            }
            w.write_record(&rec).expect("record");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    /// Aligned plain-text table of the aggregated rows.
    pub fn text_table(&self) -> String {
        let header = [
            "variant", "runs", "acc", "w-F1", "θ std°", "|cosθ|", "cosφ", "CSR ok",
        ];
        let pm = |m: f64, s: f64| format!("{:.4} ± {:.4}", m, s);
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    if r.runs_failed > 0 {
                        format!("{}/{}", r.runs_ok, r.runs_ok + r.runs_failed)
                    } else {
                        r.runs_ok.to_string()
                    },
                    pm(r.accuracy_mean, r.accuracy_std),
                    pm(r.weighted_f1_mean, r.weighted_f1_std),
                    format!("{:.2}", r.theta_std_deg),
                    format!("{:.3}", r.abs_cos_theta),
                    format!("{:.3}", r.cos_phi),
                    format!("{:.3}", r.csr_satisfaction),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for row in &body {
            line(&mut out, row);
        }
        out
    }
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &history.epochs {
        w.serialize(e).expect("rows serialize");
    }
    if history.epochs.is_empty() {
        w.write_record([
            "epoch",
            "warmup",
            "total",
            "cen",
            "aac",
            "csr",
            "are",
            "ortho",
            "ce",
            "cen_contribution",
            "angular_contribution",
            "valid_accuracy",
            "valid_weighted_f1",
        ])
        .expect("header");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}
