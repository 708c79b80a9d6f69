//! Scripted comparisons of model variants trained on the same synthetic data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::count_flops;
use crate::data::{generate, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};
use crate::train::{evaluate, train, TrainConfig};

fn default_target() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub data: SyntheticTaskSpec,
    /// Training set size.
    pub samples: usize,
    /// Size of a held-out set drawn with the next seed; 0 skips it.
    #[serde(default)]
    pub holdout: usize,
    pub train: TrainConfig,
    /// Accuracy threshold for the steps-to-target column.
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    /// Base path of the report; `.csv` and `.txt` are written next to it.
    #[serde(default)]
    pub report: Option<PathBuf>,
}

impl AblationPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Checks shared input shape and class count and that every variant builds.
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("variants", "plan has no variants"));
        }
        self.train.validate()?;
        self.data.validate()?;
        let dims = [self.data.frames, self.data.size, self.data.size, self.data.channels];
        for v in &self.variants {
            let field = |f: &str| format!("variants.{}.{f}", v.name);
            if v.model.input_dims() != dims {
                return Err(Error::config(
                    field("model.input"),
                    format!("{:?} differs from the dataset's {:?}", v.model.input_dims(), dims),
                ));
            }
            if v.model.head.classes != self.data.classes {
                return Err(Error::config(
                    field("model.head.classes"),
                    format!("{} differs from the dataset's {}", v.model.head.classes, self.data.classes),
                ));
            }
            build_model(&v.model, self.train.seed).map_err(|e| match e {
                Error::Config { field: f, msg } => Error::config(field(&format!("model.{f}")), msg),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub flops: f64,
    pub accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub steps_to_target: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub target_accuracy: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let steps_col = format!("steps_to_{:.0}%", self.target_accuracy * 100.0);
        let _ = writeln!(
            s,
            "{:<20} {:>10} {:>12} {:>9} {:>9} {:>14}",
            "variant", "params", "gflops", "acc", "holdout", steps_col
        );
        for r in &self.rows {
            let hold = r.holdout_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
            let steps = r.steps_to_target.map_or("-".into(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:<20} {:>10} {:>12.6} {:>9.4} {:>9} {:>14}",
                r.variant,
                r.params,
                r.flops / 1e9,
                r.accuracy,
                hold,
                steps
            );
        }
        s
    }

    pub fn write(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        fs::write(base.with_extension("csv"), self.to_csv()?)?;
        fs::write(base.with_extension("txt"), self.to_text())?;
        Ok(())
    }
}

/// Trains every variant on the same data and seed. Nothing is trained unless
/// every variant builds.
pub fn run_ablation(plan: &AblationPlan) -> Result<AblationReport> {
    plan.validate()?;
    let data = generate(&plan.data, plan.samples)?;
    let holdout = if plan.holdout > 0 {
        let mut spec = plan.data.clone();
        spec.seed = spec.seed.wrapping_add(1);
        Some(generate(&spec, plan.holdout)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(plan.variants.len());
    for v in &plan.variants {
        let mut model = build_model(&v.model, plan.train.seed)?;
        let mut tc = plan.train.clone();
        tc.checkpoint = None;
        let out = train(&mut model, &tc, &data)?;
        let holdout_accuracy = match &holdout {
            Some(h) => Some(evaluate(&model, h)?.accuracy),
            None => None,
        };
        rows.push(AblationRow {
            variant: v.name.clone(),
            params: model.num_params(),
            flops: count_flops(&v.model)?.total_flops(),
            accuracy: out.final_metrics.accuracy,
            holdout_accuracy,
            steps_to_target: out.steps_to(plan.target_accuracy),
        });
    }
    let report = AblationReport {
        rows,
        target_accuracy: plan.target_accuracy,
    };
    if let Some(path) = &plan.report {
        report.write(path)?;
    }
    Ok(report)
}
